"""Sequence-level dynamic expert pruning by selection frequency.

During prefill each MoE layer first routes every token, counts how often
each expert was selected (``c``), and drops experts with
``c < (l * K / N) * alpha`` for the rest of that layer's computation on this
sequence. Tokens routed to a dropped expert lose that term; their surviving
weights are renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConsistencyError
from .model import MoEModel, RoutingTrace, check_tokens, dense_routing, masked_routing, run_layers


@dataclass(frozen=True)
class PruneConfig:
    alpha: float = 0.0
    renormalize: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass
class LayerMask:
    keep: np.ndarray
    counts: np.ndarray
    threshold: float
    raw_pruned: np.ndarray

    @property
    def pruned(self) -> np.ndarray:
        return ~self.keep

    @property
    def forced(self) -> np.ndarray:
        """Experts below the threshold that were kept to maintain K survivors."""
        return self.raw_pruned & self.keep

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "threshold": self.threshold,
            "pruned": np.flatnonzero(self.pruned).tolist(),
            "force_kept": np.flatnonzero(self.forced).tolist(),
        }


def compute_prune_mask(counts, l: int, K: int, N: int, alpha: float) -> LayerMask:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (N,):
        raise ConsistencyError(f"expected {N} counts, got shape {counts.shape}")
    if int(counts.sum()) != l * K:
        raise ConsistencyError(f"counts sum to {int(counts.sum())}, expected l*K = {l * K}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    threshold = (l * K / N) * alpha
    raw_pruned = counts < threshold
    keep = ~raw_pruned
    if keep.sum() < K:
        # stable sort: equal counts keep the lower expert id first
        top = np.argsort(-counts, kind="stable")[:K]
        keep[top] = True
    return LayerMask(keep=keep, counts=counts, threshold=float(threshold), raw_pruned=raw_pruned)


@dataclass
class PrunedForward:
    logits: np.ndarray
    trace: RoutingTrace
    masks: list
    flops: int
    dense_flops: int
    fallbacks: list
    pruned_selections: list

    @property
    def pruning_rate(self) -> float:
        return pruning_rate(self.masks)


def forward_pruned(model: MoEModel, tokens, pcfg: PruneConfig) -> PrunedForward:
    """Prefill forward with per-layer, per-sequence expert pruning.

    The returned trace holds the router's own (pre-pruning) selections.
    """
    cfg = model.config
    tokens = check_tokens(tokens, cfg)
    l = tokens.size
    masks, fallbacks, pruned_sel = [], [], []
    trace = RoutingTrace()

    def policy(layer, scores):
        routing = dense_routing(scores, cfg.top_k)
        trace.record(routing.selected, scores)
        counts = np.bincount(routing.selected.ravel(), minlength=cfg.num_experts)
        mask = compute_prune_mask(counts, l, cfg.top_k, cfg.num_experts, pcfg.alpha)
        masks.append(mask)
        pruned_sel.append(int(counts[mask.pruned].sum()))
        if mask.keep.all():
            fallbacks.append(0)
            return routing
        pruned, n_fb = masked_routing(scores, routing.selected, mask.keep, pcfg.renormalize)
        fallbacks.append(n_fb)
        return pruned

    logits, _, routings = run_layers(model, tokens, policy)
    executed = sum(r.executed for r in routings)
    dense_flops = l * cfg.top_k * cfg.num_layers * cfg.expert_macs
    return PrunedForward(
        logits=logits,
        trace=trace,
        masks=masks,
        flops=executed * cfg.expert_macs,
        dense_flops=dense_flops,
        fallbacks=fallbacks,
        pruned_selections=pruned_sel,
    )


def pruning_rate(masks) -> float:
    """Pruned experts / expert slots, averaged over layers."""
    masks = list(masks)
    if not masks:
        raise ValueError("pruning_rate: no masks")
    return float(np.mean([m.pruned.mean() for m in masks]))


class ExpertPruner(BaseEstimator):
    """Estimator facade: ``fit(model)`` then ``predict(tokens)`` returns pruned-forward logits."""

    def __init__(self, alpha=0.3, renormalize=True):
        self.alpha = alpha
        self.renormalize = renormalize

    def fit(self, model: MoEModel, y=None):
        PruneConfig(self.alpha, self.renormalize)
        self.model_ = model
        return self

    def forward(self, tokens) -> PrunedForward:
        check_is_fitted(self, "model_")
        return forward_pruned(self.model_, tokens, PruneConfig(self.alpha, self.renormalize))

    def predict(self, tokens) -> np.ndarray:
        return self.forward(tokens).logits
