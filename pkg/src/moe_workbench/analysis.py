"""Expert-selection analytics: frequency profiles, similarity, change rates, shift grid."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .exceptions import InputError, WorkbenchError
from .model import MoEModel, RoutingTrace, forward, perplexity


class UndefinedSimilarityError(WorkbenchError, ValueError):
    pass


@dataclass
class FrequencyProfile:
    """Selection counts C[m, i] per layer ``m`` and expert ``i``."""

    counts: np.ndarray

    @property
    def num_layers(self) -> int:
        return self.counts.shape[0]

    @property
    def per_layer(self) -> np.ndarray:
        """P(m, d): each layer's counts normalized to the simplex (zeros stay zero)."""
        totals = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            p = np.where(totals > 0, self.counts / totals, 0.0)
        return p

    @property
    def flat(self) -> np.ndarray:
        """P(d): per-layer frequencies concatenated in layer order."""
        return self.per_layer.ravel()

    def __add__(self, other: "FrequencyProfile") -> "FrequencyProfile":
        return FrequencyProfile(self.counts + other.counts)


def _traces(trace) -> list[RoutingTrace]:
    return [trace] if isinstance(trace, RoutingTrace) else list(trace)


def frequency_profile(trace: RoutingTrace | Iterable[RoutingTrace], num_experts: int | None = None) -> FrequencyProfile:
    """Count, per layer, how many tokens have each expert in their top-K set."""
    traces = _traces(trace)
    if not traces or traces[0].num_layers == 0:
        raise InputError("frequency_profile: empty trace")
    n_layers = traces[0].num_layers
    if num_experts is None:
        num_experts = traces[0].scores[0].shape[1]
    counts = np.zeros((n_layers, num_experts), dtype=np.int64)
    for tr in traces:
        if tr.num_layers != n_layers:
            raise InputError("traces disagree on layer count")
        for m in range(n_layers):
            counts[m] += np.bincount(tr.indices[m].ravel(), minlength=num_experts)
    return FrequencyProfile(counts)


def profile_similarity(p1: FrequencyProfile, p2: FrequencyProfile) -> float:
    """Cosine similarity of the flattened normalized frequency vectors."""
    a, b = p1.flat, p2.flat
    if a.shape != b.shape:
        raise InputError(f"profile shapes differ: {p1.counts.shape} vs {p2.counts.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError("similarity undefined for an all-zero profile")
    return float(np.dot(a, b) / (na * nb))


def similarity_matrix(profiles: Sequence[FrequencyProfile]) -> np.ndarray:
    n = len(profiles)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = profile_similarity(profiles[i], profiles[j])
    return sim


@dataclass
class ChangeRates:
    """Fractions of tokens whose selection changed.

    ``all_changed``: no reference expert kept. ``any_changed``: sets differ.
    ``half_changed``: at least ceil(K/2) reference experts missing. For K = 2
    the last two coincide.
    """

    per_layer: np.ndarray  # (layers, 3): all, any, half
    tokens_per_layer: np.ndarray
    top_k: int

    @property
    def overall(self) -> tuple[float, float, float]:
        w = self.tokens_per_layer.astype(np.float64)
        vals = (self.per_layer * w[:, None]).sum(axis=0) / w.sum()
        return tuple(float(v) for v in vals)

    @property
    def all_changed(self) -> float:
        return self.overall[0]

    @property
    def any_changed(self) -> float:
        return self.overall[1]

    @property
    def half_changed(self) -> float:
        return self.overall[2]

    def to_dict(self) -> dict:
        return {
            "all_changed": self.all_changed,
            "any_changed": self.any_changed,
            "half_changed": self.half_changed,
            "half_threshold": math.ceil(self.top_k / 2),
            "per_layer": self.per_layer.tolist(),
        }


def _missing_counts(ref: np.ndarray, test: np.ndarray) -> np.ndarray:
    """Per token, how many reference experts are absent from the test set."""
    present = (ref[:, :, None] == test[:, None, :]).any(axis=2)
    return ref.shape[1] - present.sum(axis=1)


def change_rates(trace_ref, trace_test) -> ChangeRates:
    refs, tests = _traces(trace_ref), _traces(trace_test)
    if len(refs) != len(tests) or not refs:
        raise InputError(f"{len(refs)} reference traces vs {len(tests)} test traces")
    n_layers = refs[0].num_layers
    k = refs[0].indices[0].shape[1]
    rates = np.zeros((n_layers, 3))
    tokens = np.zeros(n_layers, dtype=np.int64)
    half = math.ceil(k / 2)
    for r, t in zip(refs, tests):
        if r.num_layers != n_layers or t.num_layers != n_layers:
            raise InputError("traces have different layer counts")
        for m in range(n_layers):
            a, b = r.indices[m], t.indices[m]
            if a.shape != b.shape:
                raise InputError(f"layer {m}: trace shapes {a.shape} vs {b.shape}")
            miss = _missing_counts(a, b)
            rates[m] += [(miss == k).sum(), (miss > 0).sum(), (miss >= half).sum()]
            tokens[m] += a.shape[0]
    return ChangeRates(rates / tokens[:, None], tokens, k)


GRID_CELLS = (
    ("full", "own"),
    ("full", "quantized_routing"),
    ("quantized", "full_routing"),
    ("quantized", "own"),
)


def expert_shift_grid(model_fp: MoEModel, model_q: MoEModel, corpus) -> dict:
    """Perplexity of each model under its own and the other model's routing."""
    if model_fp.config != model_q.config:
        raise InputError("expert_shift_grid: models have different configs")
    seqs = list(corpus)
    tr_fp = [forward(model_fp, s)[1] for s in seqs]
    tr_q = [forward(model_q, s)[1] for s in seqs]
    return {
        ("full", "own"): perplexity(model_fp, seqs),
        ("full", "quantized_routing"): perplexity(model_fp, seqs, forced=tr_q),
        ("quantized", "full_routing"): perplexity(model_q, seqs, forced=tr_fp),
        ("quantized", "own"): perplexity(model_q, seqs),
    }
