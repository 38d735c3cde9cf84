"""Run configuration: one flat set of typed keys shared by every subcommand.

Config files are UTF-8 ``key = value`` lines; blank lines and lines starting
with ``#`` are ignored. Unknown or repeated keys are errors. Command-line
flags override file values. ``RunConfig.dumps`` writes a file that parses
back to the same config, which is what reports embed.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .calibration import THREADS_ENV
from .exceptions import InputError
from .model import ModelConfig
from .quant import FULL_PRECISION, SUPPORTED_BITS, BitSchedule

DEFAULT_ALPHAS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class ConfigError(InputError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _opt(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else conv(text)

    return parse


def _key(conv, default, doc):
    return field(default=default, metadata={"conv": conv, "doc": doc})


@dataclass(frozen=True)
class RunConfig:
    seed: int = _key(int, 0, "master seed")
    # model shape (init-model)
    num_layers: int = _key(int, 4, "decoder layers")
    hidden_dim: int = _key(int, 64, "residual width")
    ffn_dim: int = _key(int, 128, "expert hidden width")
    num_heads: int = _key(int, 4, "attention heads")
    num_experts: int = _key(int, 8, "experts per layer (N)")
    top_k: int = _key(int, 2, "experts per token (K)")
    vocab_size: int = _key(int, 256, "byte vocabulary")
    seq_len: int = _key(int, 256, "sequence length")
    plant_strength: float = _key(float, 1.0, "planted structure strength in [0, 1]")
    # quantization
    method: str = _key(str, "gptq", "rtn | gptq")
    bits: int = _key(int, 2, "expert bit width; also attention when mhsa_bits is unset")
    mhsa_bits: int | None = _key(_opt(int), None, "attention bit width")
    schedule: str | None = _key(_opt(str), None, "uniform:<b> | half:<hi>/<lo>; overrides bits for experts")
    group_size: int = _key(int, 128, "quantization group length")
    damp: float = _key(float, 0.01, "Hessian dampening fraction")
    # router calibration
    loss_k: int | None = _key(_opt(int), None, "top-k of the calibration loss (default min(N, 2K+4))")
    lr: float = _key(float, 0.2, "calibration step size")
    steps: int = _key(int, 200, "calibration steps per layer")
    batch: int = _key(int, 256, "calibration minibatch tokens")
    calibrate_after_experts: bool = _key(_bool, False, "calibrate each router after its experts are quantized")
    # data
    corpus: str | None = _key(_opt(str), None, "dataset file or directory; synthetic mixture when unset")
    calib_seqs: int = _key(int, 8, "synthetic calibration sequences")
    eval_seqs: int = _key(int, 8, "synthetic evaluation sequences")
    families: int = _key(int, 8, "corpus families (gen-corpus)")
    docs_per_family: int = _key(int, 2, "datasets per family (gen-corpus)")
    doc_len: int = _key(int, 1024, "bytes per dataset (gen-corpus)")
    # pruning
    alpha: float = _key(float, 0.3, "pruning threshold multiplier")
    alphas: tuple = _key(_floats, DEFAULT_ALPHAS, "comma-separated sweep values (pesf-sweep)")
    renormalize: bool = _key(_bool, True, "renormalize surviving routing weights")
    # inputs / outputs
    model: str | None = _key(_opt(str), None, "input checkpoint directory")
    reference: str | None = _key(_opt(str), None, "full-precision reference checkpoint")
    out: str = _key(str, "out", "output directory")

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------
    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for k in ("num_layers", "hidden_dim", "ffn_dim", "num_heads", "num_experts", "top_k", "seq_len",
                  "group_size", "batch", "calib_seqs", "eval_seqs", "families", "docs_per_family", "doc_len"):
            need(getattr(self, k) >= 1, f"{k} must be >= 1, got {getattr(self, k)}")
        need(self.seed >= 0, "seed must be non-negative")
        need(self.steps >= 0, "steps must be >= 0")
        need(0.0 <= self.plant_strength <= 1.0, "plant_strength must be in [0, 1]")
        need(self.method in ("rtn", "gptq"), f"method must be rtn or gptq, got {self.method!r}")
        for k in ("bits", "mhsa_bits"):
            b = getattr(self, k)
            need(b is None or b in SUPPORTED_BITS or b >= FULL_PRECISION,
                 f"{k} must be one of {SUPPORTED_BITS} or >= {FULL_PRECISION}, got {b}")
        need(self.damp >= 0, "damp must be >= 0")
        need(self.lr > 0, "lr must be positive")
        need(self.loss_k is None or self.top_k <= self.loss_k <= self.num_experts,
             f"loss_k must lie in [top_k, num_experts], got {self.loss_k}")
        need(0.0 <= self.alpha <= 1.0, "alpha must be in [0, 1]")
        need(len(self.alphas) > 0 and all(0.0 <= a <= 1.0 for a in self.alphas), "alphas must be non-empty values in [0, 1]")
        need(self.vocab_size <= 256, "byte corpora need vocab_size <= 256")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.schedule is not None:
            try:
                self.bit_schedule()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.num_layers, self.hidden_dim, self.ffn_dim, self.num_heads,
                           self.num_experts, self.top_k, self.vocab_size, self.seq_len)

    @property
    def resolved_mhsa_bits(self) -> int:
        return self.bits if self.mhsa_bits is None else self.mhsa_bits

    def bit_schedule(self, num_layers: int | None = None) -> BitSchedule:
        n = self.num_layers if num_layers is None else num_layers
        if self.schedule is not None:
            return BitSchedule.parse(self.schedule, n, self.resolved_mhsa_bits)
        return BitSchedule.uniform(n, self.bits, self.resolved_mhsa_bits)

    # ------------------------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_strings(cls, values: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        parsed = {}
        for k, text in values.items():
            try:
                parsed[k] = known[k].metadata["conv"](text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {text!r} ({exc})") from None
        return dataclasses.replace(base or cls(), **parsed)

    @classmethod
    def parse_text(cls, text: str, source: str = "<config>") -> dict[str, str]:
        out: dict[str, str] = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigError(f"{source}:{n}: expected key=value, got {raw!r}")
            if key in out:
                raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
            out[key] = value.strip()
        return out

    @classmethod
    def load(cls, path, overrides: dict[str, str] | None = None) -> "RunConfig":
        p = Path(path)
        try:
            text = p.read_bytes().decode("utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        except UnicodeDecodeError as exc:
            raise ConfigError(f"{p}: not UTF-8 ({exc})") from None
        values = cls.parse_text(text, str(p))
        values.update(overrides or {})
        return cls.from_strings(values)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["alphas"] = list(self.alphas)
        return d

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if v is None:
                v = "none"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, list):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def resolve_threads() -> int:
    """Validated ``MOE_EAC_THREADS`` (default 1)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n
