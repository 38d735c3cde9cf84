"""Toy decoder-only mixture-of-experts transformer.

Pre-norm blocks: ``h += attn(rmsnorm(h))`` then ``h += moe(rmsnorm(h))``.
Each MoE layer routes every token to its top-K experts (gated-SiLU FFNs)
and mixes their outputs with the selected softmax scores renormalized to
sum to one.

All forward variants (dense, forced routing, pruned) go through
``run_layers`` with a different routing policy, so with equivalent
routing they produce bitwise-identical logits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import InputError, ShapeError
from .quant import QuantizedMatrix, dense
from .tensor import DTYPE, linear, matmul, rmsnorm, silu, softmax_rows, topk_rows

NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    ffn_dim: int = 128
    num_heads: int = 4
    num_experts: int = 8
    top_k: int = 2
    vocab_size: int = 256
    max_seq_len: int = 256

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "ffn_dim", "num_heads", "num_experts", "top_k", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"need 1 <= top_k <= num_experts, got K={self.top_k}, N={self.num_experts}")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def expert_macs(self) -> int:
        """Multiply-accumulates for one token through one expert."""
        return 3 * self.hidden_dim * self.ffn_dim

    def to_dict(self) -> dict:
        return asdict(self)


ATTN_PROJ = ("wq", "wk", "wv", "wo")
EXPERT_PROJ = ("gate", "up", "down")


def attn_name(layer: int, proj: str) -> str:
    return f"layers.{layer}.attn.{proj}"


def expert_name(layer: int, expert: int, proj: str) -> str:
    return f"layers.{layer}.experts.{expert}.{proj}"


def router_name(layer: int) -> str:
    return f"layers.{layer}.router"


def weight_names(cfg: ModelConfig) -> list[str]:
    names = ["embedding"]
    for l in range(cfg.num_layers):
        names.append(f"layers.{l}.attn_norm")
        names.extend(attn_name(l, p) for p in ATTN_PROJ)
        names.append(f"layers.{l}.moe_norm")
        names.append(router_name(l))
        for e in range(cfg.num_experts):
            names.extend(expert_name(l, e, p) for p in EXPERT_PROJ)
    names.extend(["final_norm", "head"])
    return names


def weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, f = cfg.hidden_dim, cfg.ffn_dim
    shapes = {"embedding": (cfg.vocab_size, h), "final_norm": (h,), "head": (cfg.vocab_size, h)}
    for l in range(cfg.num_layers):
        shapes[f"layers.{l}.attn_norm"] = (h,)
        shapes[f"layers.{l}.moe_norm"] = (h,)
        for p in ATTN_PROJ:
            shapes[attn_name(l, p)] = (h, h)
        shapes[router_name(l)] = (cfg.num_experts, h)
        for e in range(cfg.num_experts):
            shapes[expert_name(l, e, "gate")] = (f, h)
            shapes[expert_name(l, e, "up")] = (f, h)
            shapes[expert_name(l, e, "down")] = (h, f)
    return shapes


@dataclass(eq=False)
class MoEModel:
    """Config plus a flat name -> weight mapping.

    Any projection slot may hold a ``QuantizedMatrix``; it is dequantized on
    use. Norm gains, embedding, head and routers always stay dense.
    """

    config: ModelConfig
    weights: dict

    def __post_init__(self):
        shapes = weight_shapes(self.config)
        if set(self.weights) != set(shapes):
            missing = sorted(set(shapes) - set(self.weights))
            extra = sorted(set(self.weights) - set(shapes))
            raise ShapeError(f"weight slots mismatch: missing={missing[:5]} extra={extra[:5]}")
        for name, w in self.weights.items():
            if isinstance(w, QuantizedMatrix):
                if name.startswith(("embedding", "head")) or name.endswith(("norm", "router")):
                    raise ValueError(f"slot {name} must stay full precision")
                got = w.shape
            else:
                w = np.asarray(w, dtype=DTYPE)
                w.setflags(write=False)
                self.weights[name] = w
                got = w.shape
            if tuple(got) != shapes[name]:
                raise ShapeError(f"{name}: shape {got} != expected {shapes[name]}")

    def __getitem__(self, name: str) -> np.ndarray:
        return dense(self.weights[name])

    def replace(self, updates: dict) -> "MoEModel":
        """New model with some slots swapped; untouched arrays are shared."""
        weights = dict(self.weights)
        weights.update(updates)
        return MoEModel(self.config, weights)


# --------------------------------------------------------------------------
# routing records


@dataclass
class Routing:
    """Routing decision for one layer over a sequence.

    ``selected`` (T, K) expert ids in selection order, ``scores`` (T, N) softmax
    scores, ``weights`` (T, K) mixing weights and ``active`` (T, K) which
    selected terms are actually computed.
    """

    selected: np.ndarray
    scores: np.ndarray
    weights: np.ndarray
    active: np.ndarray

    @property
    def executed(self) -> int:
        return int(self.active.sum())


@dataclass
class RoutingTrace:
    """Per-layer selected expert ids (T, K) and score vectors (T, N)."""

    indices: list = field(default_factory=list)
    scores: list = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.indices)

    @property
    def num_tokens(self) -> int:
        return int(self.indices[0].shape[0]) if self.indices else 0

    def record(self, selected: np.ndarray, scores: np.ndarray) -> None:
        self.indices.append(np.asarray(selected, dtype=np.int64))
        self.scores.append(np.asarray(scores, dtype=DTYPE))

    def check(self, cfg: ModelConfig, num_tokens: int | None = None) -> None:
        if self.num_layers != cfg.num_layers:
            raise InputError(f"trace has {self.num_layers} layers, model has {cfg.num_layers}")
        for l, (idx, s) in enumerate(zip(self.indices, self.scores)):
            t = num_tokens if num_tokens is not None else idx.shape[0]
            if idx.shape != (t, cfg.top_k) or s.shape != (t, cfg.num_experts):
                raise InputError(
                    f"trace layer {l}: indices {idx.shape} / scores {s.shape} do not match "
                    f"({t} tokens, K={cfg.top_k}, N={cfg.num_experts})"
                )
            if idx.size and (idx.min() < 0 or idx.max() >= cfg.num_experts):
                raise InputError(f"trace layer {l}: expert id out of range")
            if not np.all(np.isfinite(s)) or np.any(s < 0):
                raise InputError(f"trace layer {l}: scores must be finite and non-negative")


def combine_weights(scores: np.ndarray, selected: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Selected scores renormalized over the active terms of each token."""
    picked = np.take_along_axis(scores, selected, axis=1)
    picked = np.where(active, picked, DTYPE(0)).astype(DTYPE)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (picked / picked.sum(axis=1, keepdims=True)).astype(DTYPE)


def dense_routing(scores: np.ndarray, top_k: int) -> Routing:
    selected = topk_rows(scores, top_k)
    active = np.ones(selected.shape, dtype=bool)
    return Routing(selected, scores, combine_weights(scores, selected, active), active)


def forced_routing(scores: np.ndarray, selected: np.ndarray) -> Routing:
    selected = np.asarray(selected, dtype=np.int64)
    active = np.ones(selected.shape, dtype=bool)
    return Routing(selected, scores, combine_weights(scores, selected, active), active)


def masked_routing(scores: np.ndarray, selected: np.ndarray, keep: np.ndarray, renormalize: bool = True) -> tuple[Routing, int]:
    """Drop terms whose expert is not in ``keep``.

    Survivors are renormalized (or keep their dense weights when
    ``renormalize`` is False). A token left with no survivor falls back to its
    highest-scoring kept expert with weight 1. Returns the routing and the
    number of fallback tokens.
    """
    keep = np.asarray(keep, dtype=bool)
    active = keep[selected]
    if renormalize:
        weights = combine_weights(scores, selected, active)
    else:
        full = combine_weights(scores, selected, np.ones_like(active))
        weights = np.where(active, full, DTYPE(0)).astype(DTYPE)
    orphan = ~active.any(axis=1)
    n_fallback = int(orphan.sum())
    if n_fallback:
        selected = selected.copy()
        masked = np.where(keep[None, :], scores[orphan], -np.inf)
        best = topk_rows(masked, 1)[:, 0]
        selected[orphan, 0] = best
        active = active.copy()
        active[orphan, 0] = True
        weights = weights.copy()
        weights[orphan] = 0
        weights[orphan, 0] = 1
    return Routing(selected, scores, weights, active), n_fallback


RoutePolicy = Callable[[int, np.ndarray], Routing]


# --------------------------------------------------------------------------
# blocks


def check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    t = np.asarray(tokens)
    if t.ndim != 1 or t.size == 0:
        raise InputError(f"tokens must be a non-empty 1-D sequence, got shape {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(np.mod(t, 1) == 0):
            raise InputError("token ids must be integers")
    t = t.astype(np.int64)
    if t.min() < 0 or t.max() >= cfg.vocab_size:
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    if t.size > cfg.max_seq_len:
        raise InputError(f"sequence length {t.size} exceeds max_seq_len={cfg.max_seq_len}")
    return t


def embed(model: MoEModel, tokens: np.ndarray) -> np.ndarray:
    return np.array(model["embedding"][tokens], dtype=DTYPE)


def attention_parts(model: MoEModel, layer: int, h: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (projection input, per-head context before wo, block output)."""
    cfg = model.config
    a = rmsnorm(h, model[f"layers.{layer}.attn_norm"], NORM_EPS)
    q = linear(a, model[attn_name(layer, "wq")])
    k = linear(a, model[attn_name(layer, "wk")])
    v = linear(a, model[attn_name(layer, "wv")])
    t, dh = h.shape[0], cfg.head_dim
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)
    scale = DTYPE(1.0 / math.sqrt(dh))
    ctx = np.empty((t, cfg.hidden_dim), dtype=DTYPE)
    for head in range(cfg.num_heads):
        sl = slice(head * dh, (head + 1) * dh)
        att = matmul(q[:, sl], np.ascontiguousarray(k[:, sl].T)) * scale
        att[causal] = -np.inf
        ctx[:, sl] = matmul(softmax_rows(att), np.ascontiguousarray(v[:, sl]))
    return a, ctx, linear(ctx, model[attn_name(layer, "wo")])


def moe_input(model: MoEModel, layer: int, h: np.ndarray) -> np.ndarray:
    return rmsnorm(h, model[f"layers.{layer}.moe_norm"], NORM_EPS)


def router_scores(model: MoEModel, layer: int, x: np.ndarray) -> np.ndarray:
    return softmax_rows(linear(x, model[router_name(layer)]))


def expert_hidden(model: MoEModel, layer: int, expert: int, x: np.ndarray) -> np.ndarray:
    """Gated activation ``silu(gate x) * (up x)``, the input to ``down``."""
    g = linear(x, model[expert_name(layer, expert, "gate")])
    u = linear(x, model[expert_name(layer, expert, "up")])
    return silu(g) * u


def expert_forward(model: MoEModel, layer: int, expert: int, x: np.ndarray) -> np.ndarray:
    return linear(expert_hidden(model, layer, expert, x), model[expert_name(layer, expert, "down")])


def moe_output(model: MoEModel, layer: int, x: np.ndarray, routing: Routing) -> np.ndarray:
    """Weighted sum of the active expert terms, accumulated in selection order."""
    sel, act, w = routing.selected, routing.active, routing.weights
    z = np.zeros_like(x)
    outputs = {}
    for e in range(model.config.num_experts):
        rows = np.flatnonzero(((sel == e) & act).any(axis=1))
        if rows.size:
            outputs[e] = (rows, expert_forward(model, layer, e, x[rows]))
    for j in range(sel.shape[1]):
        for e, (rows, out) in outputs.items():
            hit = (sel[rows, j] == e) & act[rows, j]
            if hit.any():
                r = rows[hit]
                z[r] += w[r, j, None] * out[hit]
    return z


def run_layers(
    model: MoEModel,
    tokens,
    policy: RoutePolicy | None = None,
    on_layer: Callable[[int, np.ndarray, Routing], None] | None = None,
    features_only: bool = False,
) -> tuple[np.ndarray, RoutingTrace, list[Routing]]:
    """Shared forward pass. ``policy(layer, scores)`` decides each layer's routing.

    Returns (logits, trace, routings); with ``features_only`` the first item
    is the normalized final residual instead of logits.
    """
    cfg = model.config
    tokens = check_tokens(tokens, cfg)
    if policy is None:
        policy = lambda _l, s: dense_routing(s, cfg.top_k)  # noqa: E731
    h = embed(model, tokens)
    trace = RoutingTrace()
    routings = []
    for l in range(cfg.num_layers):
        h = h + attention_parts(model, l, h)[2]
        x = moe_input(model, l, h)
        routing = policy(l, router_scores(model, l, x))
        trace.record(routing.selected, routing.scores)
        routings.append(routing)
        if on_layer is not None:
            on_layer(l, x, routing)
        h = h + moe_output(model, l, x, routing)
    feats = rmsnorm(h, model["final_norm"], NORM_EPS)
    if features_only:
        return feats, trace, routings
    return linear(feats, model["head"]), trace, routings


def forward(model: MoEModel, tokens) -> tuple[np.ndarray, RoutingTrace]:
    logits, trace, _ = run_layers(model, tokens)
    return logits, trace


def forward_with_forced_routing(model: MoEModel, tokens, forced: RoutingTrace) -> np.ndarray:
    """Forward pass that takes every layer's selections and scores from ``forced``."""
    tokens = check_tokens(tokens, model.config)
    forced.check(model.config, num_tokens=tokens.size)
    policy = lambda l, _s: forced_routing(forced.scores[l], forced.indices[l])  # noqa: E731
    return run_layers(model, tokens, policy)[0]


def _as_corpus(corpus) -> list[np.ndarray]:
    if isinstance(corpus, np.ndarray) and corpus.ndim == 1:
        return [corpus]
    seqs = list(corpus)
    if seqs and np.isscalar(seqs[0]):
        return [np.asarray(seqs)]
    return [np.asarray(s) for s in seqs]


def sequence_nll(logits: np.ndarray, tokens: np.ndarray) -> tuple[float, int]:
    """Summed next-token negative log-likelihood and the number of predictions."""
    if tokens.size < 2:
        return 0.0, 0
    lg = logits[:-1].astype(np.float64)
    lg = lg - lg.max(axis=1, keepdims=True)
    logz = np.log(np.exp(lg).sum(axis=1))
    tgt = tokens[1:]
    nll = logz - lg[np.arange(tgt.size), tgt]
    return float(nll.sum()), int(tgt.size)


def perplexity(model: MoEModel, corpus, forced: Sequence[RoutingTrace] | RoutingTrace | None = None) -> float:
    """exp(mean next-token cross-entropy) over all predicted positions."""
    seqs = _as_corpus(corpus)
    if not seqs:
        raise ValueError("perplexity: empty corpus")
    if isinstance(forced, RoutingTrace):
        forced = [forced]
    if forced is not None and len(forced) != len(seqs):
        raise InputError(f"{len(forced)} forced traces for {len(seqs)} sequences")
    total, count = 0.0, 0
    for i, seq in enumerate(seqs):
        seq = check_tokens(seq, model.config)
        if forced is None:
            logits = forward(model, seq)[0]
        else:
            logits = forward_with_forced_routing(model, seq, forced[i])
        nll, n = sequence_nll(logits, seq)
        total += nll
        count += n
    if count == 0:
        raise ValueError("perplexity: corpus has no predictable positions")
    return float(math.exp(total / count))


def count_expert_flops(model: MoEModel, tokens, prune_mask=None, renormalize: bool = True) -> int:
    """Expert multiply-accumulates actually executed for ``tokens``.

    ``prune_mask`` is a per-layer sequence of keep flags (bool arrays of
    length N, or objects with a ``keep`` attribute). Routing is taken from the
    dense forward pass; pruned experts contribute nothing, and tokens that
    lose every selection fall back to one kept expert.
    """
    cfg = model.config
    _, trace = forward(model, tokens)
    executed = 0
    for l in range(cfg.num_layers):
        if prune_mask is None:
            executed += trace.indices[l].size
            continue
        keep = getattr(prune_mask[l], "keep", prune_mask[l])
        routing, _ = masked_routing(trace.scores[l], trace.indices[l], keep, renormalize)
        executed += routing.executed
    return executed * cfg.expert_macs


# --------------------------------------------------------------------------
# planted initialization


def home_centroid(token: np.ndarray | int, num_centroids: int):
    """Centroid index a byte token is planted near."""
    return np.asarray(token) % num_centroids


def init_planted(
    config: ModelConfig,
    seed: int,
    plant_strength: float = 1.0,
    router_gain: float = 0.5,
    expert_gain: float = 4.0,
    expert_noise: float = 2.0,
    decoy: float = 0.6,
    misfire: float = 0.5,
    readout_l2: float = 1e-4,
    layer0_jitter: float = 0.4,
    gate_noise: float = 1.0,
    fit_readout: bool = True,
) -> MoEModel:
    """Deterministic random model with planted task specialization.

    Each task ``i`` (one per expert) owns an input direction ``c_i`` and an
    output direction ``o_i``, all mutually orthogonal. Token ``v`` is embedded
    near ``c_{v % N}``. Expert ``e`` has a primary task ``p``:

    * units keyed on ``c_p`` write ``o_p`` and units keyed on ``c_{p-1}``
      write ``o_{p-1}``, so the expert serves both tasks;
    * a ``misfire`` share of the units is keyed on ``c_{p-2}`` but also writes
      ``o_p``: fed a task ``p-2`` token the expert answers wrongly.

    Router rows point at ``c_p + 0.7 c_{p-1} + decoy * c_{p-2}``. A task ``i``
    token therefore ranks expert ``i`` first, the helpful expert ``i+1`` second
    and the misfiring expert ``i+2`` a close third, so perturbations of the
    router input cost accuracy when they flip the second choice.

    Random parts of the embedding and expert down projections are kept out of
    the task/output subspace (dense, like trained weights, but harmless at full
    precision). Layer 0 uses the identity expert-task map, deeper layers a
    seeded permutation. Gate and up projections are correlated, which keeps
    gated activations non-negative; attention value/output projections are
    near-identity so positions also carry an average of their context.

    ``plant_strength`` in [0, 1] interpolates from purely random weights (0)
    to fully planted (1). With ``fit_readout`` the output head is fit by
    multinomial regression on the output-direction coordinates of the model's
    own final features over a seeded mixture corpus.
    """
    if not 0.0 <= plant_strength <= 1.0:
        raise ValueError("plant_strength must be in [0, 1]")
    if not 0.0 <= misfire < 1.0:
        raise ValueError("misfire must be in [0, 1)")
    cfg = config
    rng = np.random.default_rng(seed)
    h, f, n, v = cfg.hidden_dim, cfg.ffn_dim, cfg.num_experts, cfg.vocab_size
    beta = float(plant_strength)
    noise = math.sqrt(max(0.0, 1.0 - beta * beta))

    if 2 * n <= h:
        q, _ = np.linalg.qr(rng.standard_normal((h, 2 * n)))
        centroids, outputs = q[:, :n].T, q[:, n:].T
    else:
        dirs = rng.standard_normal((2 * n, h))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        centroids, outputs = dirs[:n], dirs[n:]
    plane = np.concatenate([centroids, outputs])

    def unit_rows(m):
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    def randn(*shape, scale=1.0):
        return scale * rng.standard_normal(shape)

    def off_plane(m):
        # strip the planted subspace from the columns of m, in proportion to beta
        return m - beta * plane.T @ (plane @ m)

    eye = np.eye(h)
    home = home_centroid(np.arange(v), n)
    token_noise = randn(v, h, scale=0.6)
    token_noise -= token_noise.mean(axis=0)
    token_noise = off_plane(token_noise.T).T
    w = {
        "embedding": 0.7 * math.sqrt(h) * beta * centroids[home] + token_noise,
        "head": 0.5 * beta * outputs[home] + randn(v, h, scale=0.5 / math.sqrt(h)),
        "final_norm": np.ones(h),
    }
    for l in range(cfg.num_layers):
        perm = np.arange(n) if l == 0 else rng.permutation(n)
        w[f"layers.{l}.attn_norm"] = np.ones(h)
        w[f"layers.{l}.moe_norm"] = np.ones(h)
        w[attn_name(l, "wq")] = randn(h, h, scale=0.5 / math.sqrt(h))
        w[attn_name(l, "wk")] = randn(h, h, scale=0.5 / math.sqrt(h))
        w[attn_name(l, "wv")] = beta * eye + randn(h, h, scale=(0.3 + noise) / math.sqrt(h))
        w[attn_name(l, "wo")] = 0.8 * beta * eye + randn(h, h, scale=(0.3 + noise) / math.sqrt(h))
        primary, secondary, lure = perm, (perm - 1) % n, (perm - 2) % n
        router_dirs = unit_rows(centroids[primary] + 0.7 * centroids[secondary] + decoy * centroids[lure])
        router = beta * router_dirs + noise * unit_rows(randn(n, h))
        if l == 0:
            # token-dependent spread of the second choice, orthogonal to the tasks
            router += beta * layer0_jitter * unit_rows(off_plane(randn(n, h).T).T)
        w[router_name(l)] = router_gain * unit_rows(router)
        # layer 0 routes with jitter, so its experts carry no misfiring units
        n_task = f // 2 if l == 0 else int(round(f * (1 - misfire) / 2))
        sizes = (n_task, n_task, f - 2 * n_task)
        for e in range(n):
            p, s, d = primary[e], secondary[e], lure[e]
            key = np.repeat(centroids[[p, s, d]], sizes, axis=0)
            out = np.repeat(outputs[[p, s, p]], sizes, axis=0).T
            gate = randn(f, h, scale=(gate_noise * beta + noise) / math.sqrt(h)) + 0.3 * beta * key
            w[expert_name(l, e, "gate")] = gate
            w[expert_name(l, e, "up")] = beta * gate + randn(f, h, scale=(0.3 + noise) / math.sqrt(h))
            down = off_plane(randn(h, f, scale=expert_noise / math.sqrt(f)))
            w[expert_name(l, e, "down")] = down + expert_gain * beta * out / f
    model = MoEModel(cfg, {k: np.asarray(a, dtype=DTYPE) for k, a in w.items()})
    if fit_readout:
        from .corpus import mixture_sequences

        seqs = mixture_sequences(24, cfg.max_seq_len, seed=seed, families=n, num_centroids=n, vocab_size=v)
        model = model.replace({"head": fit_head(model, seqs, basis=outputs, l2=readout_l2, groups=home)})
    return model


def final_features(model: MoEModel, tokens) -> np.ndarray:
    """Normalized residual stream that the output head reads."""
    return run_layers(model, tokens, features_only=True)[0]


def fit_head(
    model: MoEModel,
    sequences,
    basis=None,
    l2: float = 1e-2,
    max_iter: int = 500,
    groups=None,
) -> np.ndarray:
    """Least-loss linear readout (no bias) from final features to next tokens.

    With ``basis`` (rows = orthonormal directions) the readout only sees the
    feature coordinates along those directions. With ``groups`` (one label
    per vocabulary entry) tokens sharing a label share a head row: the fit is
    then over group labels, which is exact when tokens within a group are
    interchangeable.
    """
    from sklearn.linear_model import LogisticRegression

    cfg = model.config
    feats, targets = [], []
    for seq in sequences:
        seq = check_tokens(seq, cfg)
        feats.append(final_features(model, seq)[:-1])
        targets.append(seq[1:])
    X = np.concatenate(feats).astype(np.float64)
    y = np.concatenate(targets)
    if groups is not None:
        groups = np.asarray(groups)
        y = groups[y]
    if basis is not None:
        basis = np.asarray(basis, dtype=np.float64)
        X = X @ basis.T
    clf = LogisticRegression(C=1.0 / (l2 * len(y)), fit_intercept=False, max_iter=max_iter, tol=1e-8)
    clf.fit(X, y)
    coef = clf.coef_ - clf.coef_.mean(axis=0, keepdims=True)
    if basis is not None:
        coef = coef @ basis
    # labels never seen in the fit keep a zero row
    rows = np.zeros((int(max(clf.classes_.max(), 0)) + 1 if groups is None else int(groups.max()) + 1, cfg.hidden_dim))
    rows[clf.classes_] = coef
    head = rows[groups] if groups is not None else np.vstack([rows, np.zeros((cfg.vocab_size - rows.shape[0], cfg.hidden_dim))])
    return head.astype(DTYPE)
