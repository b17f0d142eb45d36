import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dgt import tensor as tn
from dgt.graph import MASKED, GraphViews, PairEncodingIndices, synth_dynamic_sbm
from dgt.model import (EmptyContextError, ModelConfig, compute_bias, encode_batch, forward,
                       init_params, two_tower_layer)
from dgt.tensor import Tensor

import gradcheck
from oracles import numeric_grad, reference_two_tower, rel_err


def setup(seed=0, n=16, T=3, **kw):
    s = synth_dynamic_sbm(n, 2, T, 0.5, 0.1, 0.6, seed)
    base = dict(num_nodes=n, T=T, d=8, num_layers=2, num_heads=2, d_max=3,
                dropout_hidden=0.0, dropout_attn=0.0)
    base.update(kw)
    cfg = ModelConfig(**base)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for p in params.values():
        p.data += 0.2 * rng.normal(size=p.shape)
    return s, cfg, params, GraphViews(s, T, cfg.d_max)


def zero(params, *names):
    for k in names:
        params[k].data[...] = 0.0


def layer_weights(params, l):
    pre = f"layer{l}."
    return {k[len(pre):]: v.data for k, v in params.items() if k.startswith(pre)}


class SoftmaxSpy:
    def __init__(self, monkeypatch):
        self.calls = []
        real = tn.softmax

        def spy(x, mask=None):
            out = real(x, mask)
            self.calls.append((out.data.copy(), mask))
            return out
        monkeypatch.setattr(tn, "softmax", spy)


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("kw", [dict(d=10, num_heads=4), dict(num_layers=0), dict(d_max=0),
                                dict(tower_mode="three"), dict(attn_mask_hops=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(num_nodes=5, T=2, **kw)


def test_config_dict_roundtrip():
    cfg = ModelConfig(num_nodes=5, T=2, attn_mask_hops=1, tower_mode="single-tower")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_init_shapes_and_determinism():
    cfg = ModelConfig(num_nodes=7, T=4, d=8, num_heads=2, d_max=3)
    p = init_params(cfg, 3)
    assert p["node_embed"].shape == (7, 8)
    assert p["tc_table"].shape == (8, 8) and p["sd_table"].shape == (4, 8)
    assert p["layer1.ffn.w1"].shape == (8, 32)
    assert abs(p["node_embed"].data.std() - 0.02) < 0.01
    q = init_params(cfg, 3)
    assert all(p[k].data.tobytes() == q[k].data.tobytes() for k in p)


# ---------------------------------------------------------------- compute_bias


def bias_oracle(params, cfg, idx):
    R, C = idx.shape
    tc_out = np.zeros(R * C)
    sd_out = np.zeros(R * C)
    logits = params["tc_time_logits"].data
    for p in range(R * C):
        vis = [t for t in range(cfg.T) if idx.tc_index[p, t] != MASKED]
        if vis:
            w = np.exp(logits[vis] - logits[vis].max())
            w /= w.sum()
            avg = sum(wi * params["tc_table"].data[idx.tc_index[p, t] - 1] for wi, t in zip(w, vis))
            tc_out[p] = avg @ params["tc_proj.w"].data[:, 0] + params["tc_proj.b"].data[0]
        e = params["sd_table"].data[idx.sd_index[p]]
        sd_out[p] = e @ params["sd_proj.w"].data[:, 0] + params["sd_proj.b"].data[0]
    return tc_out.reshape(R, C), sd_out.reshape(R, C)


@pytest.mark.parametrize("view", ["full", "without", "prefix"])
def test_bias_matches_oracle(view):
    s, cfg, params, views = setup(2)
    v = {"full": views.full(), "without": views.without(2), "prefix": views.prefix(1)}[view]
    idx = v.pair_indices([0, 3, 5], [1, 2, 8, 9])
    btc, bsd = compute_bias(params, cfg, idx)
    otc, osd = bias_oracle(params, cfg, idx)
    np.testing.assert_allclose(btc.data, otc, atol=1e-12)
    np.testing.assert_allclose(bsd.data, osd, atol=1e-12)


def test_bias_single_step_is_that_embedding():
    cfg = ModelConfig(num_nodes=3, T=1, d=4, num_heads=1, d_max=2)
    params = init_params(cfg, 0)
    params["tc_time_logits"].data[:] = 3.7
    idx = PairEncodingIndices(np.array([[2], [1]]), np.array([1, 2]), 2, (1, 2))
    btc, _ = compute_bias(params, cfg, idx)
    w, b = params["tc_proj.w"].data[:, 0], params["tc_proj.b"].data[0]
    want = [params["tc_table"].data[1] @ w + b, params["tc_table"].data[0] @ w + b]
    np.testing.assert_allclose(btc.data[0], want, atol=1e-14)


def test_bias_constant_sd_map():
    s, cfg, params, views = setup(1)
    zero(params, "sd_proj.w")
    params["sd_proj.b"].data[:] = 0.37
    _, bsd = compute_bias(params, cfg, views.full().pair_indices(range(5), range(5, 12)))
    assert np.all(bsd.data == 0.37)


def test_bias_all_masked_is_zero():
    cfg = ModelConfig(num_nodes=4, T=2, d=4, num_heads=1, d_max=2)
    params = init_params(cfg, 0)
    idx = PairEncodingIndices(np.zeros((2, 2), np.int64), np.array([0, 1]), 2, (1, 2))
    btc, _ = compute_bias(params, cfg, idx)
    assert np.all(btc.data == 0.0)


def test_bias_index_range_errors():
    cfg = ModelConfig(num_nodes=4, T=2, d=4, num_heads=1, d_max=2)
    params = init_params(cfg, 0)
    with pytest.raises(IndexError):
        compute_bias(params, cfg, PairEncodingIndices(np.array([[1, 5]]), np.array([0]), 2, (1, 1)))
    with pytest.raises(IndexError):
        compute_bias(params, cfg, PairEncodingIndices(np.array([[1, 3]]), np.array([3]), 2, (1, 1)))


def test_bias_gradient_finite_differences():
    s, cfg, params, views = setup(4)
    idx = views.without(3).pair_indices([0, 1, 2], [7, 9, 11, 12])
    w = np.random.default_rng(0).normal(size=(2, 3, 4))

    def loss():
        a, b = compute_bias(params, cfg, idx)
        return tn.sum_(a * Tensor(w[0])) + tn.sum_(b * Tensor(w[1]))

    names = ["tc_table", "tc_time_logits", "tc_proj.w", "sd_table", "sd_proj.w"]
    with tn.Tape() as tape:
        out = loss()
    grads = tn.backward(tape, out, {k: params[k] for k in names})
    for k in names:
        assert rel_err(grads[k], numeric_grad(lambda: loss().item(), params[k].data)) <= 1e-4, k


# ---------------------------------------------------------------- one layer


def layer_inputs(seed, nt=3, nc=4, d=8):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(nt, d)), rng.normal(size=(nc, d)),
            rng.normal(size=(nt, nc)), rng.normal(size=(nt, nc)))


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("heads", [1, 2, 4])
def test_layer_matches_straight_line_reference(seed, heads):
    cfg = ModelConfig(num_nodes=7, T=2, d=8, num_layers=1, num_heads=heads, d_max=3,
                      dropout_hidden=0.0, dropout_attn=0.0)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 50)
    for p in params.values():
        p.data += 0.3 * rng.normal(size=p.shape)
    Ht, Hc, Btc, Bsd = layer_inputs(seed)
    B = Btc + Bsd
    out_t, out_c = two_tower_layer(params, 0, Tensor(Ht), Tensor(Hc), Tensor(B), Tensor(B.T), cfg)
    ref_t, ref_c = reference_two_tower(layer_weights(params, 0), Ht, Hc, Btc, Bsd, heads)
    np.testing.assert_allclose(out_t.data, ref_t, atol=1e-10, rtol=0)
    np.testing.assert_allclose(out_c.data, ref_c, atol=1e-10, rtol=0)


def test_layer_with_mask_matches_reference():
    cfg = ModelConfig(num_nodes=7, T=2, d=8, num_layers=1, num_heads=2, d_max=3,
                      dropout_hidden=0.0, dropout_attn=0.0)
    params = init_params(cfg, 9)
    Ht, Hc, Btc, Bsd = layer_inputs(9)
    keep = np.array([[1, 0, 1, 1], [0, 1, 0, 0], [1, 1, 1, 0]], dtype=bool)
    B = Btc + Bsd
    out_t, out_c = two_tower_layer(params, 0, Tensor(Ht), Tensor(Hc), Tensor(B), Tensor(B.T), cfg,
                                   keep, keep.T)
    ref_t, ref_c = reference_two_tower(layer_weights(params, 0), Ht, Hc, Btc, Bsd, 2, keep)
    np.testing.assert_allclose(out_t.data, ref_t, atol=1e-10, rtol=0)
    np.testing.assert_allclose(out_c.data, ref_c, atol=1e-10, rtol=0)


def test_zero_value_path_is_residual():
    cfg = ModelConfig(num_nodes=7, T=2, d=8, num_layers=1, num_heads=2, d_max=3)
    params = init_params(cfg, 0)
    zero(params, "layer0.wv", "layer0.ffn.w2", "layer0.ffn.b2")
    Ht, Hc, B, _ = layer_inputs(1)
    out_t, out_c = two_tower_layer(params, 0, Tensor(Ht), Tensor(Hc), Tensor(B), Tensor(B.T), cfg)
    np.testing.assert_array_equal(out_t.data, Ht)
    np.testing.assert_array_equal(out_c.data, Hc)


def test_uniform_attention_for_identical_keys(monkeypatch):
    cfg = ModelConfig(num_nodes=7, T=2, d=8, num_layers=1, num_heads=2, d_max=3)
    params = init_params(cfg, 0)
    rng = np.random.default_rng(2)
    Ht = np.tile(rng.normal(size=(1, 8)), (3, 1))
    Hc = rng.normal(size=(4, 8))
    B = np.full((3, 4), 0.8)
    spy = SoftmaxSpy(monkeypatch)
    two_tower_layer(params, 0, Tensor(Ht), Tensor(Hc), Tensor(B), Tensor(B.T), cfg)
    ctx_attn = [c for c in spy.calls if c[0].ndim == 3][0][0]  # contexts attend first
    assert ctx_attn.shape == (2, 4, 3)
    np.testing.assert_allclose(ctx_attn, 1 / 3, atol=1e-15)


def test_empty_context_layer_raises():
    cfg = ModelConfig(num_nodes=7, T=2, d=8, num_layers=1, num_heads=2, d_max=3)
    params = init_params(cfg, 0)
    with pytest.raises(EmptyContextError):
        two_tower_layer(params, 0, Tensor(np.ones((2, 8))), Tensor(np.ones((0, 8))),
                        Tensor(np.ones((2, 0))), Tensor(np.ones((0, 2))), cfg)


# ---------------------------------------------------------------- forward


def test_identity_stack():
    s, cfg, params, views = setup(3)
    for l in range(cfg.num_layers):
        zero(params, f"layer{l}.wv", f"layer{l}.ffn.w2", f"layer{l}.ffn.b2")
    enc = encode_batch(views.full(), [0, 1, 2], [5, 6], cfg)
    ht, hc = forward(params, cfg, enc)
    np.testing.assert_array_equal(ht.data, params["node_embed"].data[[0, 1, 2]])
    np.testing.assert_array_equal(hc.data, params["node_embed"].data[[5, 6]])


def test_empty_context_falls_back_to_residual(caplog):
    s, cfg, params, views = setup(3)
    enc = encode_batch(views.full(), [0, 1], [], cfg)
    ht, hc = forward(params, cfg, enc)
    assert ht.shape == (2, 8) and hc.shape == (0, 8)
    assert "empty context" in caplog.text


@pytest.mark.parametrize("mode", ["two-tower", "single-tower"])
def test_permutation_equivariance(mode):
    s, cfg, params, views = setup(5, tower_mode=mode)
    tg, ctx = [0, 2, 4, 7, 9], [1, 3, 12, 13]
    perm = [3, 0, 4, 2, 1]
    ht, hc = forward(params, cfg, encode_batch(views.full(), tg, ctx, cfg))
    ht2, hc2 = forward(params, cfg, encode_batch(views.full(), [tg[i] for i in perm], ctx, cfg))
    np.testing.assert_allclose(ht2.data, ht.data[perm], atol=1e-12)
    np.testing.assert_allclose(hc2.data, hc.data, atol=1e-12)


def test_zeroed_projections_ignore_graph():
    s, cfg, params, views = setup(6)
    zero(params, "tc_proj.w", "tc_proj.b", "sd_proj.w", "sd_proj.b")
    other = GraphViews(synth_dynamic_sbm(16, 4, 3, 0.9, 0.3, 0.1, 77), 3, 3)
    a = forward(params, cfg, encode_batch(views.full(), [0, 1, 2], [8, 9, 10], cfg))
    b = forward(params, cfg, encode_batch(other.without(1), [0, 1, 2], [8, 9, 10], cfg))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)


@pytest.mark.parametrize("mode", ["two-tower", "single-tower"])
def test_hop_mask_zero_weight(monkeypatch, mode):
    s, cfg, params, views = setup(7, tower_mode=mode, attn_mask_hops=1)
    enc = encode_batch(views.full(), [0, 1, 2, 3], [8, 9, 10, 11, 12], cfg)
    far = enc.indices.sd_index.reshape(enc.indices.shape) > 1
    assert far.any()
    spy = SoftmaxSpy(monkeypatch)
    forward(params, cfg, enc)
    attn_calls = [c for c in spy.calls if c[0].ndim == 3]
    assert attn_calls
    for attn, mask in attn_calls:
        assert mask is not None
        blocked = np.broadcast_to(~mask, attn.shape)
        assert np.all(attn[blocked] == 0.0)
        assert blocked.shape[-2:] in (far.shape, far.T.shape)


def test_single_tower_mask_never_binding():
    s, cfg, params, views = setup(8, tower_mode="single-tower")
    cfg_m = ModelConfig(**{**cfg.to_dict(), "attn_mask_hops": cfg.d_max})
    enc = encode_batch(views.full(), [0, 1, 2, 3], [8, 9, 10], cfg)
    a, b = forward(params, cfg, enc), forward(params, cfg_m, enc)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)


def test_parameter_sharing_reaches_both_towers():
    s, cfg, params, views = setup(9)
    enc = encode_batch(views.full(), [0, 1, 2], [9, 10], cfg)
    ht, hc = forward(params, cfg, enc)
    params["layer1.wv"].data[0, 0] += 0.5
    ht2, hc2 = forward(params, cfg, enc)
    assert not np.allclose(ht.data, ht2.data) and not np.allclose(hc.data, hc2.data)
    assert sum(1 for k in params if k.endswith(".wq")) == cfg.num_layers


@given(st.integers(0, 1000))
def test_forward_determinism(seed):
    s, cfg, params, views = setup(seed % 7, dropout_hidden=0.3, dropout_attn=0.2)
    enc = encode_batch(views.full(), [0, 1, 2], [9, 10, 11], cfg)
    e1, e2 = forward(params, cfg, enc), forward(params, cfg, enc)
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(e1, e2))
    t1 = forward(params, cfg, enc, train=True, rng=np.random.default_rng(seed))
    t2 = forward(params, cfg, enc, train=True, rng=np.random.default_rng(seed))
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(t1, t2))


def test_train_forward_needs_rng():
    s, cfg, params, views = setup(0, dropout_hidden=0.3)
    with pytest.raises(ValueError):
        forward(params, cfg, encode_batch(views.full(), [0], [1], cfg), train=True)


def test_disabled_encodings_give_zero_bias():
    s, cfg, params, views = setup(0, use_tc=False, use_sd=False)
    btc, bsd = compute_bias(params, cfg, views.full().pair_indices([0, 1], [2, 3]))
    assert np.all(btc.data == 0) and np.all(bsd.data == 0)


# ---------------------------------------------------------------- end-to-end gradients


@pytest.mark.parametrize("kw", [dict(), dict(tower_mode="single-tower"), dict(hops=1),
                                dict(train=True)],
                         ids=["two-tower", "single-tower", "one-hop", "dropout"])
def test_model_gradients_match_finite_differences(kw):
    errs = gradcheck.model_suite(0, **kw)
    worst = max(errs, key=errs.get)
    assert errs[worst] <= gradcheck.TOL, (worst, errs[worst])
    assert math.isfinite(errs[worst])
