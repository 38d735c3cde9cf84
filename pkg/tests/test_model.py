import numpy as np
import pytest

from conftest import random_tokens
from moe_workbench.corpus import family_sequences, mixture_sequences, random_sequences
from moe_workbench.exceptions import InputError, ShapeError
from moe_workbench.model import (
    ModelConfig,
    MoEModel,
    RoutingTrace,
    combine_weights,
    count_expert_flops,
    dense_routing,
    expert_forward,
    forward,
    forward_with_forced_routing,
    init_planted,
    masked_routing,
    moe_output,
    perplexity,
    router_name,
    weight_names,
)
from moe_workbench.quant import QuantConfig, rtn_quantize
from moe_workbench.tensor import topk_rows


def test_config_validation():
    for bad in (dict(top_k=0), dict(top_k=9), dict(hidden_dim=30), dict(vocab_size=1), dict(num_layers=0)):
        with pytest.raises(ValueError):
            ModelConfig(**bad)


def test_model_rejects_bad_slots(small_model):
    w = dict(small_model.weights)
    w.pop("head")
    with pytest.raises(ShapeError):
        MoEModel(small_model.config, w)
    w = dict(small_model.weights)
    w["final_norm"] = np.ones(3)
    with pytest.raises(ShapeError):
        MoEModel(small_model.config, w)
    with pytest.raises(ValueError):
        small_model.replace({router_name(0): rtn_quantize(small_model[router_name(0)], QuantConfig(bits=4))})


def test_planted_init_deterministic(small_cfg):
    a, b = init_planted(small_cfg, 3), init_planted(small_cfg, 3)
    assert all(np.array_equal(a[n], b[n]) for n in weight_names(small_cfg))
    c = init_planted(small_cfg, 4)
    assert not np.array_equal(a["embedding"], c["embedding"])


# --- mixing rule ------------------------------------------------------------


def test_combine_weights_renormalizes():
    s = np.array([[0.6, 0.3, 0.1]], dtype=np.float32)
    r = dense_routing(s, 2)
    assert r.selected.tolist() == [[0, 1]]
    np.testing.assert_allclose(r.weights, [[2 / 3, 1 / 3]], rtol=1e-6)


def test_moe_output_full_selection(small_model):
    cfg = small_model.config
    x = np.random.default_rng(0).standard_normal((3, cfg.hidden_dim)).astype(np.float32)
    s = np.tile(np.array([0.6, 0.4, 0.0, 0.0], dtype=np.float32), (3, 1))
    routing = dense_routing(s, 2)
    z = moe_output(small_model, 0, x, routing)
    ref = 0.6 * expert_forward(small_model, 0, 0, x) + 0.4 * expert_forward(small_model, 0, 1, x)
    np.testing.assert_allclose(z, ref, rtol=1e-5, atol=1e-6)


def test_moe_output_k1_is_argmax_expert(small_model):
    cfg = small_model.config
    x = np.random.default_rng(1).standard_normal((4, cfg.hidden_dim)).astype(np.float32)
    s = np.random.default_rng(2).dirichlet(np.ones(cfg.num_experts), size=4).astype(np.float32)
    routing = dense_routing(s, 1)
    z = moe_output(small_model, 1, x, routing)
    for t in range(4):
        e = int(np.argmax(s[t]))
        assert np.array_equal(z[t], expert_forward(small_model, 1, e, x[t : t + 1])[0])


def test_masked_routing_fallback():
    s = np.array([[0.5, 0.3, 0.15, 0.05]], dtype=np.float32)
    sel = np.array([[0, 1]])
    keep = np.array([False, False, True, True])
    r, n = masked_routing(s, sel, keep)
    assert n == 1
    assert r.selected[0, 0] == 2 and r.weights[0].tolist() == [1.0, 0.0]
    r, n = masked_routing(s, sel, np.array([True, False, True, True]))
    assert n == 0 and r.weights[0].tolist() == [1.0, 0.0]
    r, _ = masked_routing(s, sel, np.array([True, False, True, True]), renormalize=False)
    np.testing.assert_allclose(r.weights[0], [0.625, 0.0])


# --- forward ----------------------------------------------------------------


def test_forward_shapes_and_trace(small_model):
    cfg = small_model.config
    logits, trace = forward(small_model, [5])
    assert logits.shape == (1, cfg.vocab_size)
    toks = random_tokens(cfg, 20)
    logits, trace = forward(small_model, toks)
    assert trace.num_layers == cfg.num_layers and trace.num_tokens == 20
    for idx, s in zip(trace.indices, trace.scores):
        assert np.array_equal(idx, topk_rows(s, cfg.top_k))
        w = combine_weights(s, idx, np.ones_like(idx, dtype=bool))
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_forward_is_causal_and_deterministic(small_model):
    cfg = small_model.config
    a = random_tokens(cfg, 16, seed=1)
    b = a.copy()
    b[10:] = random_tokens(cfg, 6, seed=2)
    la, ta = forward(small_model, a)
    lb, _ = forward(small_model, b)
    assert np.array_equal(la[:10], lb[:10])
    la2, ta2 = forward(small_model, a)
    assert np.array_equal(la, la2) and all(np.array_equal(x, y) for x, y in zip(ta.indices, ta2.indices))


def test_forward_input_errors(small_model):
    cfg = small_model.config
    with pytest.raises(InputError):
        forward(small_model, [cfg.vocab_size])
    with pytest.raises(InputError):
        forward(small_model, [-1])
    with pytest.raises(InputError):
        forward(small_model, np.zeros(cfg.max_seq_len + 1, dtype=int))
    with pytest.raises(InputError):
        forward(small_model, [])


def test_forced_self_replay_bitwise(small_model):
    toks = random_tokens(small_model.config, 30, seed=5)
    logits, trace = forward(small_model, toks)
    assert np.array_equal(forward_with_forced_routing(small_model, toks, trace), logits)


def test_forced_trace_shape_mismatch(small_model):
    toks = random_tokens(small_model.config, 10)
    _, trace = forward(small_model, toks)
    with pytest.raises(InputError):
        forward_with_forced_routing(small_model, toks[:5], trace)
    short = RoutingTrace(trace.indices[:1], trace.scores[:1])
    with pytest.raises(InputError):
        forward_with_forced_routing(small_model, toks, short)


def test_forced_with_k_equals_n_changes_only_weights():
    cfg = ModelConfig(num_layers=2, hidden_dim=16, ffn_dim=16, num_heads=2, num_experts=2, top_k=2, vocab_size=32, max_seq_len=32)
    a, b = init_planted(cfg, 0, fit_readout=False), init_planted(cfg, 1, fit_readout=False)
    toks = random_tokens(cfg, 12)
    _, tb = forward(b, toks)
    _, ta = forward(a, toks)
    for l in range(cfg.num_layers):
        assert set(map(tuple, np.sort(ta.indices[l], axis=1))) == {(0, 1)} == set(map(tuple, np.sort(tb.indices[l], axis=1)))
    # replaying a's scores with b's (reordered) selections reproduces a exactly: membership is total
    swapped = RoutingTrace(tb.indices, ta.scores)
    own = forward(a, toks)[0]
    np.testing.assert_allclose(forward_with_forced_routing(a, toks, swapped), own, rtol=1e-5, atol=1e-5)
    assert not np.array_equal(forward_with_forced_routing(a, toks, tb), own)


def _all_8bit(model):
    return model.replace(
        {
            n: rtn_quantize(model[n], QuantConfig(bits=8, group_size=128))
            for n in weight_names(model.config)
            if ".attn." in n or ".experts." in n
        }
    )


@pytest.mark.parametrize("seed", range(3))
def test_8bit_roundtrip_logits_close(seed):
    m = init_planted(ModelConfig(), seed)
    toks = mixture_sequences(1, 64, seed + 7)[0]
    dev = np.abs(forward(_all_8bit(m), toks)[0] - forward(m, toks)[0]).max()
    assert dev < 0.1


def test_8bit_deviation_small_when_routing_unchanged(default_model):
    # random bytes sit near routing ties; a flipped selection moves logits discontinuously
    q = _all_8bit(default_model)
    checked = 0
    for s in range(10):
        toks = random_tokens(default_model.config, 64, seed=100 + s)
        (a, ta), (b, tb) = forward(default_model, toks), forward(q, toks)
        if all(np.array_equal(np.sort(x, 1), np.sort(y, 1)) for x, y in zip(ta.indices, tb.indices)):
            checked += 1
            assert np.abs(a - b).max() < 0.1
    assert checked > 0


# --- perplexity -------------------------------------------------------------


def test_uniform_head_perplexity_is_vocab(default_model):
    m = default_model.replace({"head": np.zeros_like(default_model["head"])})
    ppl = perplexity(m, random_sequences(2, 64, seed=0))
    assert ppl == pytest.approx(256, abs=0.5)


def test_perplexity_bounds_and_errors(small_model):
    cfg = small_model.config
    assert perplexity(small_model, [random_tokens(cfg, 20)]) >= 1.0
    with pytest.raises(ValueError):
        perplexity(small_model, [])
    with pytest.raises(ValueError):
        perplexity(small_model, [[3]])
    toks = random_tokens(cfg, 8)
    with pytest.raises(InputError):
        perplexity(small_model, [toks, toks], forced=[forward(small_model, toks)[1]])


def test_forced_perplexity_with_own_traces_equals_plain(small_model):
    cfg = small_model.config
    seqs = [random_tokens(cfg, 24, seed=s) for s in range(3)]
    traces = [forward(small_model, s)[1] for s in seqs]
    assert perplexity(small_model, seqs, forced=traces) == perplexity(small_model, seqs)


def test_planted_family_text_beats_random_bytes():
    cfg = ModelConfig()
    wins = 0
    for seed in range(5):
        m = init_planted(cfg, seed)
        fam = [s for f in range(8) for s in family_sequences(f, 1, 128, seed + 50)]
        rnd = random_sequences(8, 128, seed + 50)
        wins += perplexity(m, fam) < perplexity(m, rnd)
    assert wins >= 3


# --- planted routing structure ----------------------------------------------


def test_family_corpus_prefers_matching_expert_layer0(default_model):
    from moe_workbench.analysis import frequency_profile

    for fam in range(default_model.config.num_experts):
        seqs = family_sequences(fam, 2, 256, seed=11)
        prof = frequency_profile([forward(default_model, s)[1] for s in seqs])
        assert int(np.argmax(prof.counts[0])) == fam


def test_strength_zero_routing_roughly_uniform():
    cfg = ModelConfig()
    m = init_planted(cfg, 0, plant_strength=0.0)
    counts = np.zeros((cfg.num_layers, cfg.num_experts))
    for s in random_sequences(40, 256, seed=3):  # 10240 tokens
        _, tr = forward(m, s)
        for l in range(cfg.num_layers):
            counts[l] += np.bincount(tr.indices[l].ravel(), minlength=cfg.num_experts)
    share = counts / counts.sum(axis=1, keepdims=True)
    expected = cfg.top_k / cfg.num_experts / cfg.top_k  # each expert's share of selections
    assert np.all(np.abs(share / expected - 1) <= 0.5)


# --- flops ------------------------------------------------------------------


def test_flops_closed_form(small_model):
    cfg = small_model.config
    toks = random_tokens(cfg, 17)
    assert count_expert_flops(small_model, toks) == cfg.num_layers * 17 * cfg.top_k * 3 * cfg.hidden_dim * cfg.ffn_dim


def test_flops_mask_keeping_all_selected_is_unchanged(small_model):
    cfg = small_model.config
    toks = random_tokens(cfg, 17)
    _, tr = forward(small_model, toks)
    masks = [np.isin(np.arange(cfg.num_experts), tr.indices[l]) for l in range(cfg.num_layers)]
    assert count_expert_flops(small_model, toks, masks) == count_expert_flops(small_model, toks)
