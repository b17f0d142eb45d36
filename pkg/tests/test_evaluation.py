import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dgt import tensor as tn
from dgt.evaluation import (EvalSplit, LogisticProbe, auc, build_split, edge_features,
                            embed_all_chunked, evaluate, evaluate_new_links, noise_universe,
                            noisy_history)
from dgt.graph import GraphViews, SnapshotSequence, build_union, synth_dynamic_sbm
from dgt.model import ModelConfig, encode_batch, forward, init_params
from dgt.trainer import Checkpoint, TrainConfig
from oracles import pairwise_auc


def perturbed(cfg, seed):
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 3)
    for p in params.values():
        p.data += 0.2 * rng.normal(size=p.shape)
    return params


def checkpoint(n, T, seed=0, **kw):
    mc = ModelConfig(num_nodes=n, T=T, d=8, num_layers=2, num_heads=2, d_max=3, **kw)
    return Checkpoint(perturbed(mc, seed).copy_arrays(), TrainConfig(model=mc, seed=seed))


# ---------------------------------------------------------------- AUC


def test_auc_examples():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=100)
       .filter(lambda xs: len({y for _, y in xs}) == 2))
def test_auc_matches_pairwise_enumeration(xs):
    scores = [s / 3 for s, _ in xs]  # coarse grid: plenty of ties
    labels = [y for _, y in xs]
    assert auc(scores, labels) == pairwise_auc(scores, labels)


# ---------------------------------------------------------------- chunked inference


def monolithic(params, cfg, view, nodes):
    single = ModelConfig(**{**cfg.to_dict(), "tower_mode": "single-tower"})
    h, _ = forward(params, single, encode_batch(view, nodes, [], single))
    return h.data


@pytest.mark.parametrize("hops", [None, 1])
def test_chunked_equals_monolithic(hops):
    s = synth_dynamic_sbm(64, 4, 3, 0.2, 0.02, 0.7, 0)
    cfg = ModelConfig(num_nodes=64, T=3, d=8, num_layers=2, num_heads=2, d_max=3,
                      attn_mask_hops=hops)
    params = perturbed(cfg, 0)
    view = GraphViews(s, 3, 3).prefix(2)
    nodes = list(range(64))
    ref = monolithic(params, cfg, view, nodes)
    for size in (1, 2, 7, 64):
        np.testing.assert_allclose(embed_all_chunked(params, cfg, view, nodes, size), ref,
                                   atol=1e-10, rtol=0)


@given(st.integers(0, 1000), st.integers(1, 20))
def test_chunked_any_subset(seed, size):
    rng = np.random.default_rng(seed)
    s = synth_dynamic_sbm(30, 3, 2, 0.3, 0.05, 0.5, seed)
    cfg = ModelConfig(num_nodes=30, T=2, d=8, num_layers=1, num_heads=2, d_max=3)
    params = perturbed(cfg, seed)
    view = GraphViews(s, 2, 3).full()
    nodes = rng.choice(30, size=int(rng.integers(1, 31)), replace=False).tolist()
    np.testing.assert_allclose(embed_all_chunked(params, cfg, view, nodes, size),
                               monolithic(params, cfg, view, nodes), atol=1e-10, rtol=0)


def test_chunk_attention_entries(monkeypatch):
    s = SnapshotSequence(5, [[(0, 1), (1, 2), (3, 4)], [(0, 2), (2, 3)]])
    cfg = ModelConfig(num_nodes=5, T=2, d=8, num_layers=1, num_heads=2, d_max=3)
    params = perturbed(cfg, 1)
    view = GraphViews(s, 2, 3).full()
    _, split = embed_all_chunked(params, cfg, view, range(5), 3, return_attention=True)
    _, whole = embed_all_chunked(params, cfg, view, range(5), 5, return_attention=True)
    np.testing.assert_allclose(split[0], whole[0], atol=1e-15, rtol=0)
    seen = []
    real = tn.softmax

    def spy(x, mask=None):
        out = real(x, mask)
        seen.append(out.data)
        return out
    monkeypatch.setattr(tn, "softmax", spy)
    monolithic(params, cfg, view, list(range(5)))
    attn = [a for a in seen if a.ndim == 3][0]
    np.testing.assert_allclose(split[0], attn, atol=1e-12, rtol=0)


def test_chunk_size_validated():
    cfg = ModelConfig(num_nodes=3, T=1, d=4, num_heads=1)
    with pytest.raises(ValueError):
        embed_all_chunked(init_params(cfg, 0), cfg,
                          GraphViews(SnapshotSequence(3, [[(0, 1)]]), 1, 2).full(), [0, 1], 0)


# ---------------------------------------------------------------- probe


def test_probe_separable_features():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 4))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
    probe = LogisticProbe().fit(X[:100], y[:100])
    assert auc(probe.decision(X[100:]), y[100:]) > 0.99


def test_probe_separating_dot_products():
    emb = np.array([[2.0, 0], [2.0, 0], [0, 2.0], [0, 2.0], [2.0, 0], [0, 2.0]])
    row_of = {i: i for i in range(6)}
    pos, neg = [(0, 1), (2, 3), (0, 4), (3, 5)], [(0, 2), (1, 3), (4, 5), (1, 5)]
    X = edge_features(emb, row_of, pos + neg)
    y = np.r_[np.ones(4), np.zeros(4)]
    assert auc(LogisticProbe().fit(X, y).decision(X), y) == 1.0


def test_probe_random_embeddings_near_chance():
    rng = np.random.default_rng(1)
    emb = rng.normal(size=(500, 16))
    row_of = {i: i for i in range(500)}
    pairs = [tuple(rng.choice(500, size=2, replace=False)) for _ in range(8000)]
    y = rng.integers(0, 2, size=8000)
    X = edge_features(emb, row_of, pairs)
    probe = LogisticProbe().fit(X[:2000], y[:2000])
    assert abs(auc(probe.decision(X[2000:]), y[2000:]) - 0.5) <= 0.05


def test_probe_deterministic():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(50, 3)), rng.integers(0, 2, size=50)
    a, b = LogisticProbe().fit(X, y), LogisticProbe().fit(X, y)
    assert a.w.tobytes() == b.w.tobytes() and a.b == b.b


# ---------------------------------------------------------------- splits


def test_split_invariants(tmp_path):
    s = synth_dynamic_sbm(40, 2, 4, 0.3, 0.03, 0.6, 1)
    sp = build_split(s, 4, 0)
    edges = s.edge_set(4)
    pos = sp.train_pos + sp.val_pos + sp.test_pos
    neg = sp.train_neg + sp.val_neg + sp.test_neg
    assert sorted(pos) == sorted(edges) and len(neg) == len(pos) == len(set(neg))
    assert not set(neg) & edges
    n = len(pos)
    assert len(sp.train_pos) == round(0.2 * n) and len(sp.val_pos) == round(0.2 * n)
    parts = [set(sp.part(k)[0]) for k in EvalSplit.PARTS]
    assert sum(map(len, parts)) == len(set().union(*parts)) == 2 * n
    sp.save(tmp_path / "s.txt")
    assert EvalSplit.load(tmp_path / "s.txt") == sp
    assert build_split(s, 4, 0) == sp and build_split(s, 4, 1) != sp


def test_degenerate_split_raises():
    s = SnapshotSequence(6, [[(0, 1)], [(0, 1)]])
    with pytest.raises(ValueError, match="degenerate"):
        build_split(s, 2, 0)


# ---------------------------------------------------------------- protocol


def test_evaluate_replay_and_split_cache(tmp_path):
    s = synth_dynamic_sbm(40, 2, 5, 0.3, 0.03, 0.6, 2)
    ck = checkpoint(40, 4)
    a = evaluate(ck, s, 5, seed=1, chunk_size=7, split_dir=tmp_path)
    b = evaluate(ck, s, 5, seed=1, chunk_size=40, split_dir=tmp_path)
    assert a.to_json() == b.to_json()
    assert (tmp_path / "split_t5_seed1_all.txt").exists()
    with s.watch() as reads:
        evaluate(ck, s, 5, seed=1, split_dir=tmp_path)
    assert 5 not in [t for t, _ in reads]  # labels come from the cached split


def test_evaluate_window_macro():
    s = synth_dynamic_sbm(40, 2, 5, 0.3, 0.03, 0.6, 3)
    rep = evaluate(checkpoint(40, 4), s, 5, window=3, seed=0)
    assert sorted(rep.per_step) == [3, 4, 5]
    assert rep.macro_auc == pytest.approx(np.mean(list(rep.per_step.values())), abs=1e-15)
    assert 0.0 <= rep.micro_auc <= 1.0
    with pytest.raises(ValueError):
        evaluate(checkpoint(40, 4), s, 5, window=5)


def test_evaluate_reads_target_step_only_for_labels():
    s = synth_dynamic_sbm(40, 2, 5, 0.3, 0.03, 0.6, 4)
    with s.watch() as reads:
        evaluate(checkpoint(40, 4), s, 5, seed=0)
    assert {p for t, p in reads if t == 5} == {"split"}
    assert all(t <= 5 for t, _ in reads)


def test_new_links_positives_are_unseen():
    s = synth_dynamic_sbm(40, 2, 5, 0.3, 0.03, 0.5, 5)
    sp = build_split(s, 5, 0, new_only=True)
    before = set().union(*(s.edge_set(t) for t in range(1, 5)))
    pos = sp.train_pos + sp.val_pos + sp.test_pos
    assert pos and all(e in s.edge_set(5) and e not in before for e in pos)
    rep = evaluate_new_links(checkpoint(40, 4), s, 5, seed=0)
    assert 0.0 <= rep.micro_auc <= 1.0


def test_new_links_none_raises():
    snap = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]
    s = SnapshotSequence(8, [snap, snap[:3]])
    with pytest.raises(ValueError, match="no new links"):
        evaluate_new_links(checkpoint(8, 1), s, 2)


def test_new_links_all_new_equals_evaluate():
    rng = np.random.default_rng(0)
    iu, ju = np.triu_indices(30, k=1)
    pick = rng.permutation(len(iu))
    g1 = [(int(iu[k]), int(ju[k])) for k in pick[:40]]
    g2 = [(int(iu[k]), int(ju[k])) for k in pick[40:100]]
    s = SnapshotSequence(30, [g1, g2])
    ck = checkpoint(30, 1)
    assert evaluate_new_links(ck, s, 2, seed=4).to_json() == evaluate(ck, s, 2, seed=4).to_json()


# ---------------------------------------------------------------- noise harness


def test_noise_universe_and_history():
    s = synth_dynamic_sbm(40, 2, 5, 0.3, 0.03, 0.7, 6)
    past = s.prefix(4)
    uni = noise_universe(past, [3, 11])
    linked = set(build_union(past).edge_list())
    assert linked <= set(uni) and len(uni) == 2 * len(linked)
    noisy = noisy_history(s, 5, 0.5, 3)
    assert noisy.edge_set(5) == s.edge_set(5)
    k = int(np.ceil(0.5 * len(uni) - 1e-9))
    for t in range(1, 5):
        diff = noisy.edge_set(t) ^ s.edge_set(t)
        assert len(diff) == k and diff <= set(uni)
    assert noisy_history(s, 5, 0.0, 3) == s
    assert noisy_history(s, 5, 0.5, 3) == noisy
