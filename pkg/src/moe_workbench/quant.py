"""Group-wise asymmetric weight quantization.

Weights are stored as (out_dim, in_dim) and grouped along the input
dimension. Two quantizers share one grid definition:

* ``rtn_quantize``: plain round-to-nearest on a min/max grid.
* ``gptq_quantize``: sequential column quantization with inverse-Hessian
  error compensation, ``H = 2 X X^T`` built from calibration activations.

Codes are stored bit-packed in little-endian 32-bit words (see
``pack_codes``), scales as float32 and zero points as uint8.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import NumericError, ShapeError
from .tensor import DTYPE, as_matrix

FULL_PRECISION = 16
SUPPORTED_BITS = (2, 3, 4, 8)


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    group_size: int = 128
    damp: float = 0.01
    method: str = "gptq"

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.damp < 0:
            raise ValueError("damp must be non-negative")
        if self.method not in ("rtn", "gptq"):
            raise ValueError(f"method must be 'rtn' or 'gptq', got {self.method!r}")


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# --------------------------------------------------------------------------
# bit packing


def pack_codes(codes, bits: int) -> np.ndarray:
    """Pack unsigned codes contiguously into little-endian uint32 words.

    Code ``i`` occupies stream bits ``[i*bits, (i+1)*bits)``; stream bit ``b``
    is bit ``b % 32`` of word ``b // 32``. Codes may straddle words.
    """
    codes = np.asarray(codes).ravel()
    if not 1 <= bits <= 32:
        raise ValueError(f"bits must be in [1, 32], got {bits}")
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << bits)):
        raise ValueError(f"codes out of range for {bits}-bit packing")
    codes = codes.astype(np.uint64)
    n_words = math.ceil(codes.size * bits / 32)
    stream = ((codes[:, None] >> np.arange(bits, dtype=np.uint64)) & 1).astype(np.uint8).ravel()
    stream = np.concatenate([stream, np.zeros(n_words * 32 - stream.size, dtype=np.uint8)])
    # packbits with little bit order yields the little-endian byte stream directly
    return np.packbits(stream, bitorder="little").view("<u4").astype(np.uint32)


def unpack_codes(packed, bits: int, count: int) -> np.ndarray:
    packed = np.ascontiguousarray(packed, dtype="<u4")
    if packed.size * 32 < count * bits:
        raise ValueError(f"{packed.size} words cannot hold {count} codes of {bits} bits")
    stream = np.unpackbits(packed.view(np.uint8), bitorder="little")[: count * bits]
    weights = (1 << np.arange(bits, dtype=np.int64))
    return (stream.reshape(count, bits).astype(np.int64) * weights).sum(axis=1)


# --------------------------------------------------------------------------
# grid


def _group_slices(in_dim: int, group_size: int):
    for start in range(0, in_dim, group_size):
        yield slice(start, min(start + group_size, in_dim))


def group_params(values: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (scale, zero point) for a (rows, group) block.

    The range is min/max extended to include 0 so the zero point always fits
    the code range. Constant rows use ``scale = |c|`` (1 for c == 0), which
    reconstructs the constant exactly.
    """
    values = np.asarray(values, dtype=np.float64)
    qmax = (1 << bits) - 1
    lo = values.min(axis=1)
    hi = values.max(axis=1)
    const = lo == hi
    lo_z = np.minimum(lo, 0.0)
    hi_z = np.maximum(hi, 0.0)
    scale = (hi_z - lo_z) / qmax
    scale = np.where(const, np.where(lo == 0, 1.0, np.abs(lo)), scale)
    scale = scale.astype(DTYPE)
    s64 = scale.astype(np.float64)
    zp = np.clip(round_half_away(-lo_z / s64), 0, qmax)
    zp = np.where(const, np.where(lo < 0, 1.0, 0.0), zp)
    return scale, zp.astype(np.uint8)


def quantize_values(values, scale, zp, bits: int) -> np.ndarray:
    """Codes for ``values`` (rows, n) given per-row ``scale`` and ``zp``."""
    qmax = (1 << bits) - 1
    s = np.asarray(scale, dtype=np.float64).reshape(-1, 1)
    z = np.asarray(zp, dtype=np.float64).reshape(-1, 1)
    q = round_half_away(np.asarray(values, dtype=np.float64) / s) + z
    return np.clip(q, 0, qmax).astype(np.int64)


def dequantize_values(codes, scale, zp) -> np.ndarray:
    s = np.asarray(scale, dtype=DTYPE).reshape(-1, 1)
    z = np.asarray(zp, dtype=DTYPE).reshape(-1, 1)
    return ((np.asarray(codes, dtype=DTYPE) - z) * s).astype(DTYPE)


# --------------------------------------------------------------------------
# quantized matrix


@dataclass(eq=False)
class QuantizedMatrix:
    """Packed low-bit weight with per-(row, group) scale and zero point."""

    out_dim: int
    in_dim: int
    bits: int
    group_size: int
    packed: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray
    _dense: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n_groups = self.n_groups
        self.packed = np.ascontiguousarray(self.packed, dtype=np.uint32)
        self.scales = np.ascontiguousarray(self.scales, dtype=DTYPE)
        self.zero_points = np.ascontiguousarray(self.zero_points, dtype=np.uint8)
        if self.scales.shape != (self.out_dim, n_groups):
            raise ShapeError(f"scales shape {self.scales.shape} != {(self.out_dim, n_groups)}")
        if self.zero_points.shape != (self.out_dim, n_groups):
            raise ShapeError("zero_points shape does not match scales")
        if self.packed.size != packed_word_count(self.out_dim * self.in_dim, self.bits):
            raise ShapeError("packed code buffer has the wrong length")
        if self.zero_points.size and int(self.zero_points.max()) > (1 << self.bits) - 1:
            raise ValueError("zero point out of code range")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.out_dim, self.in_dim)

    @property
    def n_groups(self) -> int:
        return math.ceil(self.in_dim / self.group_size)

    @classmethod
    def from_codes(cls, codes, scales, zero_points, bits, group_size):
        codes = np.asarray(codes)
        out_dim, in_dim = codes.shape
        return cls(out_dim, in_dim, bits, group_size, pack_codes(codes, bits), scales, zero_points)

    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, self.bits, self.out_dim * self.in_dim).reshape(self.shape)

    def dequantize(self) -> np.ndarray:
        if self._dense is None:
            codes = self.codes()
            out = np.empty(self.shape, dtype=DTYPE)
            for g, sl in enumerate(_group_slices(self.in_dim, self.group_size)):
                out[:, sl] = dequantize_values(codes[:, sl], self.scales[:, g], self.zero_points[:, g])
            out.setflags(write=False)
            self._dense = out
        return self._dense

    def storage_bytes(self) -> int:
        return self.packed.nbytes + self.scales.nbytes + self.zero_points.nbytes


def packed_word_count(n_codes: int, bits: int) -> int:
    return math.ceil(n_codes * bits / 32)


def dense(w) -> np.ndarray:
    """Float32 view of a weight slot that may hold a ``QuantizedMatrix``."""
    if isinstance(w, QuantizedMatrix):
        return w.dequantize()
    return w


def quantize_with_params(w, scales, zero_points, bits: int, group_size: int) -> QuantizedMatrix:
    """Quantize ``w`` on a fixed grid (no parameter search)."""
    w = as_matrix(w, "w")
    codes = np.empty(w.shape, dtype=np.int64)
    for g, sl in enumerate(_group_slices(w.shape[1], group_size)):
        codes[:, sl] = quantize_values(w[:, sl], scales[:, g], zero_points[:, g], bits)
    return QuantizedMatrix.from_codes(codes, scales, zero_points, bits, group_size)


def rtn_quantize(w, cfg: QuantConfig) -> QuantizedMatrix:
    w = as_matrix(w, "w")
    if not np.all(np.isfinite(w)):
        raise ValueError("rtn_quantize: weights must be finite")
    out_dim, in_dim = w.shape
    n_groups = math.ceil(in_dim / cfg.group_size)
    scales = np.empty((out_dim, n_groups), dtype=DTYPE)
    zps = np.empty((out_dim, n_groups), dtype=np.uint8)
    for g, sl in enumerate(_group_slices(in_dim, cfg.group_size)):
        scales[:, g], zps[:, g] = group_params(w[:, sl], cfg.bits)
    return quantize_with_params(w, scales, zps, cfg.bits, cfg.group_size)


def hessian(x_samples) -> np.ndarray:
    """``2 X X^T`` in float64 for X stored as (in_dim, n_samples)."""
    x = np.asarray(x_samples, dtype=np.float64)
    return 2.0 * (x @ x.T)


def gptq_quantize(w, x_samples, cfg: QuantConfig, h: np.ndarray | None = None) -> QuantizedMatrix:
    """GPTQ with damping ``cfg.damp * mean(diag H)`` and block size = group size.

    ``x_samples`` is (in_dim, n_tokens). A precomputed Hessian may be passed
    as ``h`` instead, in which case ``x_samples`` is ignored.
    """
    w = as_matrix(w, "w")
    out_dim, in_dim = w.shape
    if h is None:
        x = np.asarray(x_samples, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != in_dim:
            raise ShapeError(f"x_samples must be ({in_dim}, n_tokens), got {x.shape}")
        if x.shape[1] < in_dim / 4:
            warnings.warn(
                f"gptq_quantize: only {x.shape[1]} calibration tokens for in_dim={in_dim}",
                RuntimeWarning,
                stacklevel=2,
            )
        h = hessian(x)
    else:
        h = np.array(h, dtype=np.float64)
        if h.shape != (in_dim, in_dim):
            raise ShapeError(f"Hessian must be {(in_dim, in_dim)}, got {h.shape}")

    dead = np.diag(h) == 0
    h[dead, dead] = 1.0
    h[np.diag_indices(in_dim)] += cfg.damp * np.mean(np.diag(h))
    try:
        hinv = np.linalg.inv(np.linalg.cholesky(h))
        hinv = hinv.T @ hinv
        u = np.linalg.cholesky(hinv).T
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"Hessian factorization failed after damping (in_dim={in_dim}, "
            f"min diag={np.diag(h).min():.3g}, damp={cfg.damp})"
        ) from exc

    W = w.astype(np.float64)
    n_groups = math.ceil(in_dim / cfg.group_size)
    scales = np.empty((out_dim, n_groups), dtype=DTYPE)
    zps = np.empty((out_dim, n_groups), dtype=np.uint8)
    codes = np.empty((out_dim, in_dim), dtype=np.int64)

    for g, sl in enumerate(_group_slices(in_dim, cfg.group_size)):
        i1, i2 = sl.start, sl.stop
        # grid from the group's weights as compensated so far
        scales[:, g], zps[:, g] = group_params(W[:, i1:i2], cfg.bits)
        s, z = scales[:, g], zps[:, g]
        block = W[:, i1:i2].copy()
        err_block = np.zeros_like(block)
        for j in range(i2 - i1):
            col = block[:, j : j + 1]
            c = quantize_values(col, s, z, cfg.bits)
            codes[:, i1 + j] = c[:, 0]
            q = dequantize_values(c, s, z).astype(np.float64)
            err = (col - q)[:, 0] / u[i1 + j, i1 + j]
            block[:, j:] -= np.outer(err, u[i1 + j, i1 + j : i2])
            err_block[:, j] = err
        W[:, i1:i2] = block
        if i2 < in_dim:
            W[:, i2:] -= err_block @ u[i1:i2, i2:]

    return QuantizedMatrix.from_codes(codes, scales, zps, cfg.bits, cfg.group_size)


def quantize(w, cfg: QuantConfig, x_samples=None) -> QuantizedMatrix:
    """Dispatch on ``cfg.method``; GPTQ without samples falls back to RTN."""
    if cfg.method == "gptq" and x_samples is not None:
        return gptq_quantize(w, x_samples, cfg)
    return rtn_quantize(w, cfg)


def reconstruction_error(w, wq, x) -> float:
    """``||(W - dequant(W_q)) X||_F^2`` with X as (in_dim, n_tokens)."""
    w = np.asarray(w, dtype=np.float64)
    deq = np.asarray(dense(wq), dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.shape != deq.shape:
        raise ShapeError(f"weight shape {w.shape} != quantized shape {deq.shape}")
    if x.ndim != 2 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"x must have {w.shape[1]} rows, got shape {x.shape}")
    r = (w - deq) @ x
    return float(np.sum(r * r))


# --------------------------------------------------------------------------
# estimator facade


class WeightQuantizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` accumulates the Hessian, ``transform`` quantizes weights.

    ``fit(X)`` takes token-major activations (n_tokens, in_dim), the usual
    sklearn orientation. With ``method="rtn"`` fitting is optional.
    """

    def __init__(self, bits=4, group_size=128, damp=0.01, method="gptq"):
        self.bits = bits
        self.group_size = group_size
        self.damp = damp
        self.method = method

    def _config(self) -> QuantConfig:
        return QuantConfig(bits=self.bits, group_size=self.group_size, damp=self.damp, method=self.method)

    def fit(self, X, y=None):
        X = as_matrix(X, "X")
        self._config()
        self.hessian_ = hessian(X.T)
        self.n_samples_ = X.shape[0]
        self.n_features_in_ = X.shape[1]
        return self

    def partial_fit(self, X, y=None):
        X = as_matrix(X, "X")
        if not hasattr(self, "hessian_"):
            return self.fit(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError("partial_fit: feature dimension changed")
        self.hessian_ = self.hessian_ + hessian(X.T)
        self.n_samples_ += X.shape[0]
        return self

    def transform(self, W) -> QuantizedMatrix:
        cfg = self._config()
        if cfg.method == "rtn":
            return rtn_quantize(W, cfg)
        check_is_fitted(self, "hessian_")
        return gptq_quantize(W, None, cfg, h=self.hessian_)


# --------------------------------------------------------------------------
# bit-width accounting


@dataclass(frozen=True)
class BitSchedule:
    """Per-component bit assignment; the router is never quantized.

    A value of ``FULL_PRECISION`` (16) or more leaves the component dense.
    """

    mhsa_bits: int
    expert_bits: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "expert_bits", tuple(int(b) for b in self.expert_bits))
        for b in (self.mhsa_bits, *self.expert_bits):
            if b < FULL_PRECISION and b not in SUPPORTED_BITS:
                raise ValueError(f"unsupported bit width {b}; use one of {SUPPORTED_BITS} or >= 16")

    router_bits = "full precision"

    @classmethod
    def uniform(cls, num_layers: int, expert_bits: int, mhsa_bits: int = 4) -> "BitSchedule":
        return cls(mhsa_bits, (expert_bits,) * num_layers)

    @classmethod
    def half(cls, num_layers: int, hi: int, lo: int, mhsa_bits: int = 4) -> "BitSchedule":
        """First half of the layers at ``hi`` bits, the rest at ``lo``."""
        n_hi = (num_layers + 1) // 2
        return cls(mhsa_bits, (hi,) * n_hi + (lo,) * (num_layers - n_hi))

    @classmethod
    def parse(cls, text: str, num_layers: int, mhsa_bits: int = 4) -> "BitSchedule":
        """Parse ``uniform:<b>`` or ``half:<hi>/<lo>``."""
        kind, _, arg = text.partition(":")
        try:
            if kind == "uniform":
                return cls.uniform(num_layers, int(arg), mhsa_bits)
            if kind == "half":
                hi, lo = arg.split("/")
                return cls.half(num_layers, int(hi), int(lo), mhsa_bits)
        except ValueError as exc:
            raise ValueError(f"bad schedule {text!r}: {exc}") from None
        raise ValueError(f"bad schedule {text!r}; expected uniform:<b> or half:<hi>/<lo>")

    @property
    def mean_expert_bits(self) -> float:
        return float(np.mean([min(b, FULL_PRECISION) for b in self.expert_bits]))

    def to_dict(self) -> dict:
        return {"mhsa_bits": self.mhsa_bits, "expert_bits": list(self.expert_bits), "router_bits": self.router_bits}


def average_bit_width(proportions: Mapping[str, float], bits: Mapping[str, float]) -> float:
    """Parameter-weighted mean bit width: sum of fraction * bits per component."""
    if set(proportions) != set(bits):
        raise ValueError(f"components differ: {sorted(proportions)} vs {sorted(bits)}")
    fr = np.array([proportions[c] for c in proportions], dtype=np.float64)
    if np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-6:
        raise ValueError(f"proportions must be non-negative and sum to 1, got {fr.sum():.8f}")
    return float(sum(proportions[c] * float(bits[c]) for c in proportions))
