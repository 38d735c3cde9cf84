"""On-disk model checkpoints: ``manifest.json`` plus one binary blob.

Every weight slot gets one tensor record. Dense slots are float32
little-endian; quantized slots store their packed uint32 code words (LE),
float32 scales and uint8 zero points as three separate segments, never
dequantized floats. Segments start on 4-byte boundaries. The manifest
carries a SHA-256 of the blob, so truncation or corruption is caught on load.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError
from .model import ModelConfig, MoEModel, weight_names, weight_shapes
from .quant import QuantizedMatrix, packed_word_count

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"
ALIGN = 4

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")
_U8 = np.dtype("u1")


def _pad(n: int) -> int:
    return -n % ALIGN


def qpacked_nbytes(out_dim: int, in_dim: int, bits: int, group_size: int) -> dict[str, int]:
    """Byte length of each segment of a packed matrix."""
    n_groups = math.ceil(in_dim / group_size)
    return {
        "codes": 4 * packed_word_count(out_dim * in_dim, bits),
        "scales": 4 * out_dim * n_groups,
        "zero_points": out_dim * n_groups,
    }


def _segments(w) -> tuple[dict, dict[str, bytes]]:
    if isinstance(w, QuantizedMatrix):
        rec = {"kind": "qpacked", "shape": list(w.shape), "bits": w.bits, "group_size": w.group_size}
        parts = {
            "codes": w.packed.astype(_U32).tobytes(),
            "scales": w.scales.astype(_F32).tobytes(),
            "zero_points": w.zero_points.astype(_U8).tobytes(),
        }
    else:
        w = np.asarray(w)
        rec = {"kind": "dense", "shape": list(w.shape)}
        parts = {"data": w.astype(_F32).tobytes()}
    return rec, parts


def save_checkpoint(model: MoEModel, directory, overwrite: bool = False, meta: dict | None = None) -> Path:
    """Write ``model`` to ``directory``; refuses to replace an existing checkpoint unless ``overwrite``."""
    d = Path(directory)
    if (d / MANIFEST_NAME).exists() and not overwrite:
        raise CheckpointError(f"{d} already holds a checkpoint")
    records, chunks, offset = [], [], 0
    for name in weight_names(model.config):
        rec, parts = _segments(model.weights[name])
        rec["name"] = name
        rec["offsets"] = {}
        for part, data in parts.items():
            rec["offsets"][part] = [offset, len(data)]
            chunks.append(data + b"\0" * _pad(len(data)))
            offset += len(data) + _pad(len(data))
        records.append(rec)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "blob": BLOB_NAME,
        "blob_size": len(blob),
        "checksum": {"algorithm": "sha256", "value": hashlib.sha256(blob).hexdigest()},
        "tensors": records,
        "meta": meta or {},
    }
    try:
        d.mkdir(parents=True, exist_ok=True)
        (d / BLOB_NAME).write_bytes(blob)
        (d / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint to {d}: {exc}") from exc
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"no manifest at {path}") from None
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable manifest {path}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise CheckpointError(f"{path}: manifest must be a JSON object")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {version!r} unsupported (expected {FORMAT_VERSION})")
    for key in ("config", "blob", "blob_size", "checksum", "tensors"):
        if key not in manifest:
            raise CheckpointError(f"{path}: missing key {key!r}")
    return manifest


def validate_manifest(manifest: dict) -> ModelConfig:
    """Structural checks that need no blob: coverage, shapes, segment sizes, overlap."""
    try:
        cfg = ModelConfig(**manifest["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model config in manifest: {exc}") from exc
    shapes = weight_shapes(cfg)
    size = manifest["blob_size"]
    seen, spans = set(), []
    for rec in manifest["tensors"]:
        name = rec.get("name")
        if name not in shapes:
            raise CheckpointError(f"unknown tensor {name!r}")
        if name in seen:
            raise CheckpointError(f"tensor {name} appears twice")
        seen.add(name)
        shape = tuple(rec.get("shape", ()))
        if shape != shapes[name]:
            raise CheckpointError(f"{name}: shape {shape} != expected {shapes[name]}")
        kind = rec.get("kind")
        if kind == "dense":
            want = {"data": 4 * math.prod(shape)}
        elif kind == "qpacked":
            if len(shape) != 2:
                raise CheckpointError(f"{name}: qpacked tensors must be 2-D")
            bits, gs = rec.get("bits"), rec.get("group_size")
            if not isinstance(bits, int) or not 2 <= bits <= 8 or not isinstance(gs, int) or gs < 1:
                raise CheckpointError(f"{name}: bad bits/group_size {bits!r}/{gs!r}")
            want = qpacked_nbytes(shape[0], shape[1], bits, gs)
        else:
            raise CheckpointError(f"{name}: unknown kind {kind!r}")
        offs = rec.get("offsets", {})
        if set(offs) != set(want):
            raise CheckpointError(f"{name}: offsets {sorted(offs)} != {sorted(want)}")
        for part, n in want.items():
            start, length = offs[part]
            if length != n:
                raise CheckpointError(f"{name}.{part}: length {length} != expected {n}")
            if start < 0 or start + length > size:
                raise CheckpointError(f"{name}.{part}: span [{start}, {start + length}) outside blob of {size} bytes")
            spans.append((start, start + length, f"{name}.{part}"))
    missing = set(shapes) - seen
    if missing:
        raise CheckpointError(f"manifest lacks tensors: {sorted(missing)[:5]}")
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"overlapping offsets: {n0} and {n1}")
    return cfg


def load_checkpoint(directory) -> MoEModel:
    d = Path(directory)
    manifest = read_manifest(d)
    cfg = validate_manifest(manifest)
    blob_path = d / manifest["blob"]
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read blob {blob_path}: {exc}") from exc
    if len(blob) != manifest["blob_size"]:
        raise CheckpointError(f"{blob_path}: {len(blob)} bytes, manifest says {manifest['blob_size']} (truncated?)")
    ck = manifest["checksum"]
    if ck.get("algorithm") != "sha256" or hashlib.sha256(blob).hexdigest() != ck.get("value"):
        raise CheckpointError(f"{blob_path}: checksum mismatch")

    def seg(rec, part, dtype):
        start, length = rec["offsets"][part]
        return np.frombuffer(blob, dtype=dtype, count=length // dtype.itemsize, offset=start).copy()

    weights = {}
    for rec in manifest["tensors"]:
        shape = tuple(rec["shape"])
        if rec["kind"] == "dense":
            weights[rec["name"]] = seg(rec, "data", _F32).astype(np.float32).reshape(shape)
        else:
            out_dim, in_dim = shape
            g = math.ceil(in_dim / rec["group_size"])
            weights[rec["name"]] = QuantizedMatrix(
                out_dim,
                in_dim,
                rec["bits"],
                rec["group_size"],
                seg(rec, "codes", _U32),
                seg(rec, "scales", _F32).reshape(out_dim, g),
                seg(rec, "zero_points", _U8).reshape(out_dim, g),
            )
    try:
        return MoEModel(cfg, weights)
    except ValueError as exc:
        raise CheckpointError(f"checkpoint does not form a valid model: {exc}") from exc


def blob_breakdown(manifest: dict) -> dict[str, int]:
    """Bytes per component class (expert / attention / other) as recorded."""
    out = {"experts": 0, "attention": 0, "other": 0}
    for rec in manifest["tensors"]:
        n = sum(length for _, length in rec["offsets"].values())
        key = "experts" if ".experts." in rec["name"] else "attention" if ".attn." in rec["name"] else "other"
        out[key] += n
    return out
