"""Quantization with expert-selection calibration.

Layer by layer: quantize the attention projections (GPTQ on activations
from the already-quantized prefix), calibrate the router so that its logits
on the quantized path match the full-precision logits over the top-K
full-precision experts (TopK-MSE), then quantize that layer's experts.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import InputError, ShapeError, WorkbenchError
from .model import (
    ATTN_PROJ,
    MoEModel,
    attention_parts,
    attn_name,
    check_tokens,
    dense_routing,
    embed,
    expert_hidden,
    expert_name,
    moe_input,
    moe_output,
    router_name,
    router_scores,
    run_layers,
)
from .quant import FULL_PRECISION, BitSchedule, QuantConfig, gptq_quantize, hessian, rtn_quantize
from .tensor import DTYPE, as_matrix, topk_rows

log = logging.getLogger(__name__)

THREADS_ENV = "MOE_EAC_THREADS"


def max_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def default_loss_k(num_experts: int, top_k: int) -> int:
    return min(num_experts, 2 * top_k + 4)


@dataclass(frozen=True)
class CalibConfig:
    loss_k: int | None = None
    learning_rate: float = 0.2
    steps: int = 200
    batch: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")

    def resolve_loss_k(self, num_experts: int, top_k: int) -> int:
        k = default_loss_k(num_experts, top_k) if self.loss_k is None else self.loss_k
        if not top_k <= k <= num_experts:
            raise ValueError(f"loss_k={k} must lie in [K={top_k}, N={num_experts}]")
        return k


# --------------------------------------------------------------------------
# TopK-MSE


def _topk_mask(ref_logits: np.ndarray, k: int) -> np.ndarray:
    idx = topk_rows(ref_logits, k)
    mask = np.zeros(ref_logits.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=1)
    return mask


def topk_mse_loss(w_orig, w_cal, x_fp, x_hat, loss_k: int) -> float:
    """Mean over tokens of the squared logit gap on the top-``loss_k`` reference experts.

    The expert set always comes from the full-precision logits ``w_orig @ x_fp``.
    Vectors are treated as a single token; (T, hidden) matrices are averaged.
    """
    w_orig = np.asarray(w_orig, dtype=np.float64)
    w_cal = np.asarray(w_cal, dtype=np.float64)
    x_fp = np.atleast_2d(np.asarray(x_fp, dtype=np.float64))
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    if w_orig.shape != w_cal.shape:
        raise ShapeError(f"router shapes differ: {w_orig.shape} vs {w_cal.shape}")
    if x_fp.shape != x_hat.shape or x_fp.shape[1] != w_orig.shape[1]:
        raise ShapeError(f"activation shapes {x_fp.shape} / {x_hat.shape} incompatible with router {w_orig.shape}")
    n = w_orig.shape[0]
    if not 1 <= loss_k <= n:
        raise ValueError(f"loss_k={loss_k} out of range [1, {n}]")
    ref = x_fp @ w_orig.T
    mask = _topk_mask(ref, loss_k)
    diff = np.where(mask, ref - x_hat @ w_cal.T, 0.0)
    return float(np.mean(np.sum(diff * diff, axis=1) / loss_k))


class TopKMSERegressor(RegressorMixin, BaseEstimator):
    """Linear map X -> logits fit by gradient descent on TopK-MSE.

    ``fit(X, Y, coef_init)`` takes inputs X (T, d), reference logits Y (T, N)
    and the starting weight (N, d). Each step uses a mini-batch gradient; a
    step is kept only if the full-data loss does not increase, otherwise the
    learning rate is halved (up to 5 times) and the step retried.
    """

    def __init__(self, loss_k=8, learning_rate=0.2, steps=200, batch=256, seed=0, max_halvings=5):
        self.loss_k = loss_k
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch = batch
        self.seed = seed
        self.max_halvings = max_halvings

    def _loss(self, W, X, Y, mask):
        diff = np.where(mask, X @ W.T.astype(np.float64) - Y, 0.0)
        return float(np.mean(np.sum(diff * diff, axis=1)) / self.loss_k)

    def fit(self, X, Y, coef_init=None):
        X = as_matrix(X, "X").astype(np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim != 2 or Y.shape[0] != X.shape[0]:
            raise ShapeError(f"Y must be ({X.shape[0]}, N), got {Y.shape}")
        n_out = Y.shape[1]
        if not 1 <= self.loss_k <= n_out:
            raise ValueError(f"loss_k={self.loss_k} out of range [1, {n_out}]")
        W0 = np.zeros((n_out, X.shape[1]), dtype=DTYPE) if coef_init is None else np.asarray(coef_init, dtype=DTYPE)
        if W0.shape != (n_out, X.shape[1]):
            raise ShapeError(f"coef_init must be {(n_out, X.shape[1])}, got {W0.shape}")
        mask = _topk_mask(Y, self.loss_k)

        W = W0.copy()
        loss = self._loss(W, X, Y, mask)
        self.initial_loss_ = loss
        history = [loss]
        accepted = 0
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(X.shape[0])
        pos = 0
        for _ in range(self.steps if loss > 0 else 0):
            if pos + self.batch > order.size:
                order = rng.permutation(X.shape[0])
                pos = 0
            b = order[pos : pos + self.batch]
            pos += self.batch
            Xb = X[b]
            resid = np.where(mask[b], Xb @ W.T.astype(np.float64) - Y[b], 0.0)
            grad = (2.0 / self.loss_k) * (resid.T @ Xb) / len(b)
            lr = self.learning_rate
            for _ in range(self.max_halvings + 1):
                cand = (W - lr * grad).astype(DTYPE)
                cand_loss = self._loss(cand, X, Y, mask)
                if not np.isfinite(cand_loss) or cand_loss > 10 * self.initial_loss_:
                    lr *= 0.5
                    continue
                if cand_loss <= loss:
                    W, loss = cand, cand_loss
                    accepted += 1
                    break
                lr *= 0.5
            history.append(loss)
        self.coef_ = W
        self.loss_history_ = np.array(history)
        self.final_loss_ = loss
        self.n_accepted_ = accepted
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return as_matrix(X, "X") @ self.coef_.T

    def score(self, X, Y, sample_weight=None):
        """Negative TopK-MSE of predictions against reference logits ``Y``."""
        check_is_fitted(self, "coef_")
        Y = np.asarray(Y, dtype=np.float64)
        return -self._loss(self.coef_, as_matrix(X).astype(np.float64), Y, _topk_mask(Y, self.loss_k))


@dataclass
class RouterCalibration:
    weight: np.ndarray
    initial_loss: float
    final_loss: float
    steps: int
    accepted_steps: int
    loss_history: list
    aborted: bool = False


def calibrate_router(w, x_fp, x_hat, cfg: CalibConfig, top_k: int | None = None) -> RouterCalibration:
    """Fit a router ``w'`` (started at ``w``) so ``w' x_hat`` matches ``w x_fp`` on TopK-MSE."""
    w = as_matrix(w, "w")
    x_fp = as_matrix(x_fp, "x_fp")
    x_hat = as_matrix(x_hat, "x_hat")
    if x_fp.shape != x_hat.shape:
        raise ShapeError(f"x_fp {x_fp.shape} and x_hat {x_hat.shape} are not aligned")
    n = w.shape[0]
    loss_k = cfg.resolve_loss_k(n, top_k if top_k is not None else 1)
    ref = x_fp.astype(np.float64) @ w.T.astype(np.float64)
    reg = TopKMSERegressor(loss_k, cfg.learning_rate, cfg.steps, cfg.batch, cfg.seed)
    reg.fit(x_hat, ref, coef_init=w)
    aborted = not np.isfinite(reg.final_loss_) or reg.final_loss_ > 10 * reg.initial_loss_
    if aborted:
        warnings.warn("router calibration diverged; keeping the original router", RuntimeWarning, stacklevel=2)
        weight, final = w, reg.initial_loss_
    else:
        weight, final = reg.coef_, reg.final_loss_
    return RouterCalibration(
        weight=np.asarray(weight, dtype=DTYPE),
        initial_loss=reg.initial_loss_,
        final_loss=final,
        steps=cfg.steps,
        accepted_steps=reg.n_accepted_,
        loss_history=[float(v) for v in reg.loss_history_],
        aborted=aborted,
    )


# --------------------------------------------------------------------------
# pipeline


def selection_change_rate(ref_scores: np.ndarray, test_scores: np.ndarray, k: int) -> float:
    """Fraction of tokens whose top-k set differs between two score matrices."""
    a = np.sort(topk_rows(ref_scores, k), axis=1)
    b = np.sort(topk_rows(test_scores, k), axis=1)
    return float(np.mean(np.any(a != b, axis=1)))


@dataclass
class LayerReport:
    layer: int
    tokens: int
    attention_bits: int
    expert_bits: int
    calibrated: bool
    initial_loss: float | None = None
    final_loss: float | None = None
    steps: int = 0
    accepted_steps: int = 0
    change_rate_before: float | None = None
    change_rate_after: float | None = None
    loss_history: list = field(default_factory=list, repr=False)


@dataclass
class PipelineResult:
    model: MoEModel
    layers: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def report(self) -> dict:
        return {"layers": [asdict(r) for r in self.layers], "events": [list(e) for e in self.events]}


def _quantize_slot(w, bits: int, qcfg: QuantConfig, h: np.ndarray | None):
    cfg = QuantConfig(bits=bits, group_size=qcfg.group_size, damp=qcfg.damp, method=qcfg.method)
    if cfg.method == "gptq" and h is not None:
        return gptq_quantize(w, None, cfg, h=h)
    return rtn_quantize(w, cfg)


def _stack(parts):
    return np.concatenate(parts, axis=0)


def _check_corpus(model: MoEModel, corpus, min_tokens: int) -> list[np.ndarray]:
    seqs = [check_tokens(s, model.config) for s in corpus]
    if not seqs:
        raise InputError("calibration corpus is empty")
    total = sum(s.size for s in seqs)
    if total < min_tokens:
        raise InputError(f"calibration corpus has {total} tokens, need at least {min_tokens}")
    return seqs


def run_qesc_pipeline(
    model: MoEModel,
    corpus,
    schedule: BitSchedule,
    qcfg: QuantConfig,
    ccfg: CalibConfig | None = None,
    calibrate: bool = True,
    calibrate_after_experts: bool = False,
) -> PipelineResult:
    """Quantize ``model`` layer by layer, calibrating each router on the quantized path.

    Activations for layer ``l`` always come from the already-quantized layers
    ``< l``. Routers stay full precision. With ``calibrate=False`` this is
    plain layer-wise GPTQ/RTN quantization under ``schedule``.
    """
    cfg = model.config
    ccfg = ccfg or CalibConfig()
    if len(schedule.expert_bits) != cfg.num_layers:
        raise ValueError(f"schedule covers {len(schedule.expert_bits)} layers, model has {cfg.num_layers}")
    seqs = _check_corpus(model, corpus, ccfg.batch if calibrate else 1)
    loss_k = ccfg.resolve_loss_k(cfg.num_experts, cfg.top_k) if calibrate else None
    need_data = qcfg.method == "gptq" or calibrate

    fp_inputs: list[list[np.ndarray]] = [[] for _ in range(cfg.num_layers)]
    if calibrate:
        for s in seqs:
            run_layers(model, s, on_layer=lambda l, x, _r: fp_inputs[l].append(x))

    result = PipelineResult(model)
    qmodel = model
    hs = [embed(model, s) for s in seqs] if need_data else None
    n_tokens = sum(s.size for s in seqs)

    for l in range(cfg.num_layers):
        try:
            rep = LayerReport(l, n_tokens, schedule.mhsa_bits, schedule.expert_bits[l], calibrate)
            # (1) attention projections
            if schedule.mhsa_bits < FULL_PRECISION:
                h_in = None
                if qcfg.method == "gptq":
                    parts = [attention_parts(qmodel, l, h) for h in hs]
                    h_in = hessian(_stack([p[0] for p in parts]).T)
                upd = {
                    attn_name(l, p): _quantize_slot(qmodel.weights[attn_name(l, p)], schedule.mhsa_bits, qcfg, h_in)
                    for p in ("wq", "wk", "wv")
                }
                qmodel = qmodel.replace(upd)
                h_ctx = None
                if qcfg.method == "gptq":
                    h_ctx = hessian(_stack([attention_parts(qmodel, l, h)[1] for h in hs]).T)
                name = attn_name(l, "wo")
                qmodel = qmodel.replace({name: _quantize_slot(qmodel.weights[name], schedule.mhsa_bits, qcfg, h_ctx)})
            result.events.append(("attention", l))

            if need_data:
                hs_mid = [h + attention_parts(qmodel, l, h)[2] for h in hs]
                xs = [moe_input(qmodel, l, hm) for hm in hs_mid]

            # (2) router calibration, (3) experts; order swappable
            stages = ["router", "experts"] if not calibrate_after_experts else ["experts", "router"]
            for stage in stages:
                if stage == "router":
                    if calibrate:
                        qmodel = _calibrate_layer(qmodel, l, xs, fp_inputs[l], ccfg, loss_k, rep)
                        result.events.append(("router", l))
                else:
                    if schedule.expert_bits[l] < FULL_PRECISION:
                        qmodel = _quantize_experts(qmodel, l, xs if need_data else None, schedule.expert_bits[l], qcfg)
                    result.events.append(("experts", l))

            if need_data:
                hs = [
                    hm + moe_output(qmodel, l, x, dense_routing(router_scores(qmodel, l, x), cfg.top_k))
                    for hm, x in zip(hs_mid, xs)
                ]
            result.layers.append(rep)
        except WorkbenchError as exc:
            raise type(exc)(f"layer {l}: {exc}") from exc
        except (ValueError, ArithmeticError) as exc:
            raise WorkbenchError(f"layer {l}: {exc}") from exc

    result.model = qmodel
    return result


def _calibrate_layer(qmodel, l, xs, fp_xs, ccfg, loss_k, rep: LayerReport) -> MoEModel:
    cfg = qmodel.config
    x_hat = _stack(xs)
    x_fp = _stack(fp_xs)
    w = qmodel[router_name(l)]
    cal = calibrate_router(w, x_fp, x_hat, CalibConfig(loss_k, ccfg.learning_rate, ccfg.steps, ccfg.batch, ccfg.seed + l), cfg.top_k)
    ref = x_fp @ w.T
    rep.initial_loss, rep.final_loss = cal.initial_loss, cal.final_loss
    rep.steps, rep.accepted_steps = cal.steps, cal.accepted_steps
    rep.loss_history = cal.loss_history
    rep.change_rate_before = selection_change_rate(ref, x_hat @ w.T, cfg.top_k)
    rep.change_rate_after = selection_change_rate(ref, x_hat @ cal.weight.T, cfg.top_k)
    log.info(
        "layer %d router: loss %.5g -> %.5g, change rate %.4f -> %.4f",
        l, cal.initial_loss, cal.final_loss, rep.change_rate_before, rep.change_rate_after,
    )
    return qmodel.replace({router_name(l): cal.weight})


def _quantize_experts(qmodel: MoEModel, l: int, xs, bits: int, qcfg: QuantConfig) -> MoEModel:
    cfg = qmodel.config
    if xs is not None:
        routings = [dense_routing(router_scores(qmodel, l, x), cfg.top_k) for x in xs]

    def one(e):
        names = [expert_name(l, e, p) for p in ("gate", "up", "down")]
        if qcfg.method != "gptq" or xs is None:
            return {n: _quantize_slot(qmodel.weights[n], bits, qcfg, None) for n in names}
        x_e = _stack([x[(r.selected == e).any(axis=1)] for x, r in zip(xs, routings)])
        if x_e.shape[0] < cfg.hidden_dim / 4:
            log.warning("layer %d expert %d: only %d calibration tokens", l, e, x_e.shape[0])
        h_in = hessian(x_e.T)
        upd = {n: _quantize_slot(qmodel.weights[n], bits, qcfg, h_in) for n in names[:2]}
        partial = qmodel.replace(upd)
        hid = expert_hidden(partial, l, e, x_e) if x_e.shape[0] else np.zeros((0, cfg.ffn_dim), DTYPE)
        upd[names[2]] = _quantize_slot(qmodel.weights[names[2]], bits, qcfg, hessian(hid.T))
        return upd

    experts = range(cfg.num_experts)
    threads = max_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            updates = list(pool.map(one, experts))
    else:
        updates = [one(e) for e in experts]
    merged = {}
    for u in updates:
        merged.update(u)
    return qmodel.replace(merged)


def quantize_model(model: MoEModel, schedule: BitSchedule, qcfg: QuantConfig, corpus=None) -> MoEModel:
    """Layer-wise quantization without router calibration."""
    if qcfg.method == "gptq" and corpus is None:
        raise InputError("GPTQ quantization needs a calibration corpus")
    return run_qesc_pipeline(model, corpus if corpus is not None else [np.zeros(1, dtype=np.int64)], schedule, qcfg, calibrate=False).model


class QESCQuantizer(BaseEstimator):
    """Estimator facade over ``run_qesc_pipeline``.

    ``fit(model, corpus)`` stores the compressed model in ``model_`` and the
    per-layer records in ``report_``.
    """

    def __init__(
        self,
        mhsa_bits=4,
        expert_bits=2,
        schedule=None,
        method="gptq",
        group_size=128,
        damp=0.01,
        calibrate=True,
        loss_k=None,
        learning_rate=0.2,
        steps=200,
        batch=256,
        seed=0,
        calibrate_after_experts=False,
    ):
        self.mhsa_bits = mhsa_bits
        self.expert_bits = expert_bits
        self.schedule = schedule
        self.method = method
        self.group_size = group_size
        self.damp = damp
        self.calibrate = calibrate
        self.loss_k = loss_k
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch = batch
        self.seed = seed
        self.calibrate_after_experts = calibrate_after_experts

    def _bit_schedule(self, num_layers: int) -> BitSchedule:
        if self.schedule is not None:
            return BitSchedule.parse(self.schedule, num_layers, self.mhsa_bits)
        return BitSchedule.uniform(num_layers, self.expert_bits, self.mhsa_bits)

    def fit(self, model: MoEModel, corpus):
        schedule = self._bit_schedule(model.config.num_layers)
        # QuantConfig rejects bit widths outside [2, 8]; the schedule carries the real widths
        qcfg = QuantConfig(bits=4, group_size=self.group_size, damp=self.damp, method=self.method)
        ccfg = CalibConfig(self.loss_k, self.learning_rate, self.steps, self.batch, self.seed)
        res = run_qesc_pipeline(model, corpus, schedule, qcfg, ccfg, self.calibrate, self.calibrate_after_experts)
        self.model_ = res.model
        self.report_ = res.report()
        self.events_ = res.events
        self.schedule_ = schedule
        return self

    def transform(self, model=None) -> MoEModel:
        check_is_fitted(self, "model_")
        return self.model_
