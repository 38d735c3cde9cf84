"""``moe-workbench`` command line.

Every subcommand resolves one ``RunConfig`` (defaults < ``--config`` file <
flags), computes everything in memory, then writes ``report.json``, its CSV
tables and a ``config.txt`` that reproduces the run into ``--out``. Output
checkpoints go to ``<out>/model``; inputs are never written to.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import change_rates, expert_shift_grid, frequency_profile, similarity_matrix
from .calibration import CalibConfig, run_qesc_pipeline
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, resolve_threads
from .corpus import corpus_datasets, load_corpus, mixture_sequences, split_sequences
from .exceptions import WorkbenchError
from .model import ATTN_PROJ, MoEModel, forward, init_planted, perplexity, sequence_nll
from .pruning import PruneConfig, forward_pruned
from .quant import FULL_PRECISION, QuantConfig, QuantizedMatrix, average_bit_width

log = logging.getLogger("moe_workbench")

CALIB_SEED_OFFSET = 1000
EVAL_SEED_OFFSET = 2000
COMMANDS = ("init-model", "gen-corpus", "quantize", "calibrate", "eval", "analyze-es", "pesf-sweep", "shift-grid")


@dataclass
class Result:
    report: dict
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    model: MoEModel | None = None
    files: dict = field(default_factory=dict)  # relative path -> bytes


# --------------------------------------------------------------------------
# inputs


def _model(cfg: RunConfig, path: str | None) -> tuple[MoEModel, str]:
    if path is None:
        return init_planted(cfg.model_config(), cfg.seed, plant_strength=cfg.plant_strength), f"planted(seed={cfg.seed})"
    return load_checkpoint(path), str(path)


def _corpus_seqs(cfg: RunConfig, n_seqs: int, offset: int, model: MoEModel) -> list[np.ndarray]:
    mc = model.config
    if cfg.corpus is not None:
        data = load_corpus(cfg.corpus, mc.max_seq_len)
        return [s for name in sorted(data) for s in data[name]]
    n = mc.num_experts
    return mixture_sequences(n_seqs, mc.max_seq_len, cfg.seed + offset, families=n, num_centroids=n, vocab_size=mc.vocab_size)


def _datasets(cfg: RunConfig, model: MoEModel) -> dict[str, list[np.ndarray]]:
    mc = model.config
    if cfg.corpus is not None:
        return load_corpus(cfg.corpus, mc.max_seq_len)
    n = mc.num_experts
    data = corpus_datasets(cfg.families, cfg.docs_per_family, cfg.doc_len, cfg.seed, n, mc.vocab_size)
    return {k: split_sequences(v, mc.max_seq_len) for k, v in data.items()}


# --------------------------------------------------------------------------
# accounting


def component_params(model: MoEModel) -> dict[str, int]:
    c = model.config
    return {
        "mhsa": c.num_layers * len(ATTN_PROJ) * c.hidden_dim * c.hidden_dim,
        "experts": c.num_layers * c.num_experts * 3 * c.hidden_dim * c.ffn_dim,
        "router": c.num_layers * c.num_experts * c.hidden_dim,
    }


def bit_accounting(model: MoEModel) -> dict:
    """Nominal weight bits (full precision counted as 16) and actual storage bits."""
    params = component_params(model)
    total = sum(params.values())
    nominal, storage = {k: 0.0 for k in params}, {k: 0 for k in params}
    for name, w in model.weights.items():
        comp = "mhsa" if ".attn." in name else "experts" if ".experts." in name else "router" if name.endswith("router") else None
        if comp is None:
            continue
        n = int(np.prod(w.shape))
        if isinstance(w, QuantizedMatrix):
            nominal[comp] += n * w.bits
            storage[comp] += 8 * w.storage_bytes()
        else:
            nominal[comp] += n * FULL_PRECISION
            storage[comp] += 32 * n
    bits = {k: nominal[k] / params[k] for k in params}
    props = {k: params[k] / total for k in params}
    return {
        "params": params,
        "proportions": props,
        "component_bits": bits,
        "average_bits": average_bit_width(props, bits),
        "storage_bits_per_weight": sum(storage.values()) / total,
    }


def _tensor_table(model: MoEModel):
    rows = []
    for name, w in model.weights.items():
        if isinstance(w, QuantizedMatrix):
            rows.append([name, "qpacked", "x".join(map(str, w.shape)), w.bits, w.group_size, w.storage_bytes()])
        else:
            rows.append([name, "dense", "x".join(map(str, w.shape)), 32, "", w.nbytes])
    return ["name", "kind", "shape", "bits", "group_size", "bytes"], rows


def _traces(model, seqs):
    return [forward(model, s)[1] for s in seqs]


# --------------------------------------------------------------------------
# subcommands


def cmd_init_model(cfg: RunConfig) -> Result:
    model = init_planted(cfg.model_config(), cfg.seed, plant_strength=cfg.plant_strength)
    ev = _corpus_seqs(cfg, cfg.eval_seqs, EVAL_SEED_OFFSET, model)
    prof = frequency_profile(_traces(model, ev))
    report = {"model_config": model.config.to_dict(), "eval_ppl": perplexity(model, ev), "params": component_params(model)}
    tables = {
        "tensors": _tensor_table(model),
        "expert_counts": (["layer", *[f"expert{i}" for i in range(model.config.num_experts)]],
                          [[l, *row] for l, row in enumerate(prof.counts.tolist())]),
    }
    return Result(report, tables, model=model)


def cmd_gen_corpus(cfg: RunConfig) -> Result:
    n = cfg.num_experts
    data = corpus_datasets(cfg.families, cfg.docs_per_family, cfg.doc_len, cfg.seed, n, cfg.vocab_size)
    files = {f"corpus/{k}.bin": v.astype(np.uint8).tobytes() for k, v in data.items()}
    rows = [[k, int(k[6:8]), int(k[-2:]), v.size, int(k[6:8]) % n] for k, v in data.items()]
    report = {"datasets": len(data), "directory": "corpus"}
    return Result(report, {"datasets": (["dataset", "family", "doc", "bytes", "home_centroid"], rows)}, files=files)


def _compress(cfg: RunConfig, calibrate: bool) -> Result:
    model, source = _model(cfg, cfg.model)
    mc = model.config
    schedule = cfg.bit_schedule(mc.num_layers)
    qcfg = QuantConfig(bits=4, group_size=cfg.group_size, damp=cfg.damp, method=cfg.method)
    ccfg = CalibConfig(cfg.loss_k, cfg.lr, cfg.steps, cfg.batch, cfg.seed)
    calib = _corpus_seqs(cfg, cfg.calib_seqs, CALIB_SEED_OFFSET, model)
    res = run_qesc_pipeline(model, calib, schedule, qcfg, ccfg, calibrate=calibrate,
                            calibrate_after_experts=cfg.calibrate_after_experts)
    q = res.model
    ev = _corpus_seqs(cfg, cfg.eval_seqs, EVAL_SEED_OFFSET, model)
    rates = change_rates(_traces(model, ev), _traces(q, ev))
    report = {
        "input_model": source,
        "schedule": schedule.to_dict(),
        "method": cfg.method,
        "calibrated": calibrate,
        "loss_k": ccfg.resolve_loss_k(mc.num_experts, mc.top_k) if calibrate else None,
        "bits": bit_accounting(q),
        "eval_ppl_input": perplexity(model, ev),
        "eval_ppl_output": perplexity(q, ev),
        "change_rates_vs_input": rates.to_dict(),
        "pipeline": res.report(),
    }
    tables = {"tensors": _tensor_table(q)}
    if calibrate:
        layer_fields = [f.name for f in fields(type(res.layers[0])) if f.name != "loss_history"] if res.layers else []
        tables["layers"] = (layer_fields, [[asdict(r)[k] for k in layer_fields] for r in res.layers])
    return Result(report, tables, model=q)


def cmd_quantize(cfg: RunConfig) -> Result:
    return _compress(cfg, calibrate=False)


def cmd_calibrate(cfg: RunConfig) -> Result:
    return _compress(cfg, calibrate=True)


def cmd_eval(cfg: RunConfig) -> Result:
    model, source = _model(cfg, cfg.model)
    ev = _corpus_seqs(cfg, cfg.eval_seqs, EVAL_SEED_OFFSET, model)
    report = {"model": source, "eval_ppl": perplexity(model, ev), "bits": bit_accounting(model)}
    tables = {}
    if cfg.reference is not None:
        ref = load_checkpoint(cfg.reference)
        if ref.config != model.config:
            raise ConfigError("reference and model configs differ")
        rates = change_rates(_traces(ref, ev), _traces(model, ev))
        report.update(reference=cfg.reference, reference_ppl=perplexity(ref, ev), change_rates=rates.to_dict())
        tables["change_rates"] = (["layer", "all_changed", "any_changed", "half_changed"],
                                  [[l, *row] for l, row in enumerate(rates.per_layer.tolist())])
    return Result(report, tables)


_FAMILY = re.compile(r"family(\d+)_")


def cmd_analyze_es(cfg: RunConfig) -> Result:
    model, source = _model(cfg, cfg.model)
    data = _datasets(cfg, model)
    names = sorted(data)
    profiles = [frequency_profile(_traces(model, data[k]), model.config.num_experts) for k in names]
    sim = similarity_matrix(profiles)
    report = {"model": source, "datasets": names, "similarity": sim.tolist()}
    fams = [_FAMILY.match(k) for k in names]
    if all(fams):
        f = np.array([int(m.group(1)) for m in fams])
        same = f[:, None] == f[None, :]
        off = ~np.eye(len(names), dtype=bool)
        if (same & off).any():
            report["mean_intra_family"] = float(sim[same & off].mean())
        if (~same).any():
            report["mean_inter_family"] = float(sim[~same].mean())
    prof_rows = [
        [k, l, e, int(p.counts[l, e]), float(p.per_layer[l, e])]
        for k, p in zip(names, profiles)
        for l in range(p.num_layers)
        for e in range(p.counts.shape[1])
    ]
    tables = {
        "profiles": (["dataset", "layer", "expert", "count", "frequency"], prof_rows),
        "similarity": (["dataset", *names], [[k, *row] for k, row in zip(names, sim.tolist())]),
    }
    return Result(report, tables)


def cmd_pesf_sweep(cfg: RunConfig) -> Result:
    model, source = _model(cfg, cfg.model)
    ev = _corpus_seqs(cfg, cfg.eval_seqs, EVAL_SEED_OFFSET, model)
    dense_pred = [forward(model, s)[0][:-1].argmax(axis=1) for s in ev]
    header = ["alpha", "pruning_rate", "expert_flops", "dense_expert_flops", "flop_ratio",
              "ppl", "top1_accuracy", "dense_agreement", "fallback_tokens"]
    rows = []
    for alpha in cfg.alphas:
        pcfg = PruneConfig(alpha, cfg.renormalize)
        nll = n = hits = agree = flops = dflops = fb = 0
        rates = []
        for s, dp in zip(ev, dense_pred):
            pf = forward_pruned(model, s, pcfg)
            a, c = sequence_nll(pf.logits, np.asarray(s))
            nll, n = nll + a, n + c
            pred = pf.logits[:-1].argmax(axis=1)
            hits += int((pred == np.asarray(s)[1:]).sum())
            agree += int((pred == dp).sum())
            flops, dflops, fb = flops + pf.flops, dflops + pf.dense_flops, fb + sum(pf.fallbacks)
            rates.append(pf.pruning_rate)
        rows.append([alpha, float(np.mean(rates)), flops, dflops, flops / dflops,
                     float(np.exp(nll / n)), hits / n, agree / n, fb])
    report = {"model": source, "renormalize": cfg.renormalize, "sweep": [dict(zip(header, r)) for r in rows]}
    return Result(report, {"sweep": (header, rows)})


def cmd_shift_grid(cfg: RunConfig) -> Result:
    fp, fp_source = _model(cfg, cfg.reference)
    ev = _corpus_seqs(cfg, cfg.eval_seqs, EVAL_SEED_OFFSET, fp)
    if cfg.model is not None:
        q, q_source = load_checkpoint(cfg.model), cfg.model
    else:
        schedule = cfg.bit_schedule(fp.config.num_layers)
        qcfg = QuantConfig(bits=4, group_size=cfg.group_size, damp=cfg.damp, method=cfg.method)
        calib = _corpus_seqs(cfg, cfg.calib_seqs, CALIB_SEED_OFFSET, fp)
        q = run_qesc_pipeline(fp, calib, schedule, qcfg, calibrate=False).model
        q_source = f"quantized({schedule.to_dict()})"
    grid = expert_shift_grid(fp, q, ev)
    rows = [[w, r, v] for (w, r), v in grid.items()]
    report = {"reference": fp_source, "model": q_source,
              "grid": [{"weights": w, "routing": r, "ppl": v} for w, r, v in rows]}
    return Result(report, {"grid": (["weights", "routing", "ppl"], rows)})


HANDLERS = {
    "init-model": cmd_init_model,
    "gen-corpus": cmd_gen_corpus,
    "quantize": cmd_quantize,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "analyze-es": cmd_analyze_es,
    "pesf-sweep": cmd_pesf_sweep,
    "shift-grid": cmd_shift_grid,
}


# --------------------------------------------------------------------------
# plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moe-workbench", description="Toy MoE compression workbench.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    docs = {f.name: f.metadata["doc"] for f in fields(RunConfig)}
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key=value UTF-8 config file")
        sp.add_argument("-v", "--verbose", action="store_true")
        for key in RunConfig.keys():
            sp.add_argument("--" + key.replace("_", "-"), dest=key, metavar="VALUE", help=docs[key])
    return p


def _check_outputs(cfg: RunConfig) -> None:
    out = Path(cfg.out).resolve()
    for inp in (cfg.model, cfg.reference, cfg.corpus):
        if inp is None:
            continue
        src = Path(inp).resolve()
        if src == out or out in src.parents or src == out / "model" or src == out / "corpus":
            raise ConfigError(f"--out {cfg.out} would overwrite input {inp}; pick a distinct directory")


def _write_table(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def write_result(cfg: RunConfig, command: str, result: Result) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if result.model is not None:
        save_checkpoint(result.model, out / "model", overwrite=True, meta={"command": command, "seed": cfg.seed})
    for rel, data in result.files.items():
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    for name, (header, rows) in result.tables.items():
        _write_table(out / f"{name}.csv", header, rows)
    report = {
        "command": command,
        "status": "ok",
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "threads": resolve_threads(),
        "tables": sorted(f"{n}.csv" for n in result.tables),
        **result.report,
    }
    (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    (out / "report.json").write_text(json.dumps(_jsonable(report), indent=1), encoding="utf-8")
    return out


def _error_record(command, exc, cfg: RunConfig | None) -> dict:
    return {
        "command": command,
        "status": "error",
        "error": {"type": type(exc).__name__, "message": str(exc)},
        "seed": None if cfg is None else cfg.seed,
        "config": None if cfg is None else cfg.to_dict(),
    }


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    command, cfg, out_dir = (argv[0] if argv else None), None, None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        if args.out is not None and not (Path(args.out) / "manifest.json").exists():
            out_dir = args.out
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        flags = {k: getattr(args, k) for k in RunConfig.keys() if getattr(args, k) is not None}
        cfg = RunConfig.load(args.config, flags) if args.config else RunConfig.from_strings(flags)
        out_dir = None
        _check_outputs(cfg)
        out_dir = cfg.out
        resolve_threads()
        result = HANDLERS[command](cfg)
        out = write_result(cfg, command, result)
        print(out / "report.json")
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured record
        if not isinstance(exc, (WorkbenchError, ValueError, OSError)):
            log.exception("unexpected failure")
        record = _error_record(command, exc, cfg)
        if out_dir is not None:
            try:
                out = Path(out_dir)
                out.mkdir(parents=True, exist_ok=True)
                (out / "report.json").write_text(json.dumps(record, indent=1), encoding="utf-8")
            except OSError:
                pass
        print(json.dumps(record), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
