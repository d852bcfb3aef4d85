import math

import numpy as np
import pytest

from xtal2dos import tensor as T
from xtal2dos.config import TrainConfig
from xtal2dos.encoder import (GraphEncoder, gated_residual, gcn_layer, unimp_aggregate, unimp_attention,
                              unimp_layer)
from xtal2dos.graph import CrystalGraph, collate
from xtal2dos.params import ParamInit, sub_params
from xtal2dos.tensor import parameter

import gradcheck


def P(x):
    return parameter(np.asarray(x, dtype=float))


def small_cfg(**kw):
    base = dict(d_atom=6, d_edge=5, d_hid=8, encoder_heads=2, encoder_layers=2, decoder="rnn", l_y=4)
    base.update(kw)
    return TrainConfig(**base)


def make_encoder(cfg, seed=0, randomize=True):
    rng = np.random.default_rng(seed)
    enc = GraphEncoder(cfg.validate(), ParamInit(rng))
    if randomize:
        # zero-initialized biases/gates would hide bugs in the gradient checks
        for p in enc.params.values():
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
        for st in enc.bn_states.values():
            st.mean = rng.standard_normal(st.mean.shape) * 0.1
            st.var = rng.uniform(0.5, 1.5, st.var.shape)
    return enc


def random_graph(rng, n, d_atom, max_nbr=3, gid="g"):
    nodes = rng.standard_normal((n, d_atom))
    nbrs = []
    for i in range(n):
        k = int(rng.integers(1, max_nbr + 1))
        others = [j for j in range(n) if j != i]
        pick = rng.choice(others, size=min(k, len(others)), replace=False)
        nbrs.append([(int(j), float(rng.uniform(1.0, 4.0))) for j in pick])
    return CrystalGraph(gid, nodes, nbrs)


def permute_graph(g, perm):
    """Node i of the result is node perm[i] of g."""
    inv = np.argsort(perm)
    nodes = g.nodes[perm]
    nbrs = [[(int(inv[j]), d) for j, d in g.neighbors[p]] for p in perm]
    return CrystalGraph(g.id, nodes, nbrs)


# ---------------------------------------------------------------- GCN


def test_gcn_two_nodes_swap():
    h = T.constant([[1.0, 2.0], [3.0, -1.0]])
    out = gcn_layer(h, T.constant(np.eye(2)), np.array([0, 1]), np.array([1, 0]), act=T.identity)
    np.testing.assert_array_equal(out.data, [[3.0, -1.0], [1.0, 2.0]])


def test_gcn_star_normalization():
    # node 0 lists 1..4; each leaf lists only 0 -> c_0j = sqrt(4 * 1) = 2
    dst = np.array([0, 0, 0, 0, 1, 2, 3, 4])
    src = np.array([1, 2, 3, 4, 0, 0, 0, 0])
    h = np.arange(10.0).reshape(5, 2)
    out = gcn_layer(T.constant(h), T.constant(np.eye(2)), dst, src, act=T.identity).data
    np.testing.assert_allclose(out[0], h[1:].sum(axis=0) / 2.0, rtol=1e-15)
    np.testing.assert_allclose(out[1], h[0] / 2.0, rtol=1e-15)


def test_gcn_isolated_node_gets_activation_of_zero(caplog):
    out = gcn_layer(T.constant(np.ones((3, 2))), T.constant(np.eye(2)), np.array([0]), np.array([1]),
                    act=T.sigmoid)
    np.testing.assert_array_equal(out.data[2], [0.5, 0.5])
    assert "no neighbors" in caplog.text


def test_gcn_gradcheck(rng):
    dst = np.array([0, 0, 1, 2, 2, 3])
    src = np.array([1, 2, 0, 3, 1, 0])
    h = P(rng.standard_normal((4, 3)))
    w = P(rng.standard_normal((3, 3)))
    proj = rng.standard_normal((4, 3))
    gradcheck.check(lambda: T.sum_(gcn_layer(h, w, dst, src, act=T.tanh) * T.constant(proj)), {"h": h, "w": w})


# ---------------------------------------------------------------- UniMP attention / aggregation


def test_attention_uniform_for_identical_keys(rng):
    q = rng.standard_normal((1, 4))
    key = rng.standard_normal((1, 4))
    alpha = unimp_attention(T.constant(np.repeat(q, 3, 0)), T.constant(np.repeat(key, 3, 0)),
                            np.zeros(3, dtype=int), 1, heads=2).data
    np.testing.assert_allclose(alpha, 1 / 3, rtol=1e-15)


def test_attention_single_neighbor_weight_one(rng):
    alpha = unimp_attention(T.constant(rng.standard_normal((1, 4))), T.constant(rng.standard_normal((1, 4))),
                            np.zeros(1, dtype=int), 1, heads=1).data
    assert alpha[0, 0] == 1.0


def test_attention_matches_softmax_oracle(rng):
    d = 4
    q = rng.standard_normal(d)
    keys = rng.standard_normal((3, d))
    alpha = unimp_attention(T.constant(np.tile(q, (3, 1))), T.constant(keys), np.zeros(3, dtype=int), 1, 1).data[:, 0]
    scores = [math.exp(float(q @ k) / math.sqrt(d)) for k in keys]
    oracle = [s / sum(scores) for s in scores]
    np.testing.assert_allclose(alpha, oracle, rtol=1e-12, atol=1e-12)


def test_aggregate_cases(rng):
    vg = rng.standard_normal((1, 4))
    out = unimp_aggregate(T.constant([[1.0, 1.0]]), T.constant(vg), np.zeros(1, dtype=int), 1).data
    np.testing.assert_array_equal(out, vg)
    same = np.repeat(vg, 3, 0)
    out = unimp_aggregate(T.constant(np.full((3, 2), 1 / 3)), T.constant(same), np.zeros(3, dtype=int), 1).data
    np.testing.assert_allclose(out[0], vg[0], rtol=1e-15)
    alpha = rng.dirichlet(np.ones(3))
    vals = rng.standard_normal((3, 4))
    out = unimp_aggregate(T.constant(alpha[:, None]), T.constant(vals), np.zeros(3, dtype=int), 1).data[0]
    oracle = sum(a * v for a, v in zip(alpha, vals))
    np.testing.assert_allclose(out, oracle, rtol=1e-12, atol=1e-12)


def _gate_params(rng, d, zero_gate=False):
    return {
        "r_w": P(rng.standard_normal((d, d))), "r_b": P(rng.standard_normal(d)),
        "gate": P(np.zeros((1, 3 * d)) if zero_gate else rng.standard_normal((1, 3 * d))),
        "ln_g": P(rng.uniform(0.5, 1.5, d)), "ln_b": P(rng.standard_normal(d)),
    }


def test_gated_residual_equal_inputs(rng):
    d = 4
    p = _gate_params(rng, d)
    h = T.constant(rng.standard_normal((3, d)))
    r = T.linear(h, p["r_w"], p["r_b"])
    out = gated_residual(T.constant(r.data), h, p, last=True).data
    np.testing.assert_allclose(out, r.data, rtol=1e-14, atol=1e-14)


def test_gated_residual_zero_gate_is_midpoint(rng):
    d = 4
    p = _gate_params(rng, d, zero_gate=True)
    h = T.constant(rng.standard_normal((3, d)))
    h_hat = rng.standard_normal((3, d))
    r = T.linear(h, p["r_w"], p["r_b"]).data
    out = gated_residual(T.constant(h_hat), h, p, last=True).data
    np.testing.assert_allclose(out, 0.5 * (h_hat + r), rtol=1e-14)


def test_gated_residual_gradcheck(rng):
    d = 4
    p = _gate_params(rng, d)
    h = P(rng.standard_normal((3, d)))
    h_hat = P(rng.standard_normal((3, d)))
    proj = rng.standard_normal((3, d))
    for last in (True, False):
        gradcheck.check(lambda: T.sum_(gated_residual(h_hat, h, p, last, T.tanh) * T.constant(proj)),
                        {"h": h, "h_hat": h_hat, **p})


def test_unimp_layer_gradcheck(rng):
    cfg = small_cfg(encoder_layers=1).validate()
    enc = make_encoder(cfg, 1)
    g = random_graph(rng, 5, cfg.d_atom)
    batch = collate([g], cfg.d_edge, cfg.r_cut)
    lp = sub_params(enc.params, "layer0")
    h = P(rng.standard_normal((5, cfg.d_hid)))
    gfeat = P(rng.standard_normal((len(batch.dst), cfg.d_hid)))
    proj = rng.standard_normal((5, cfg.d_hid))
    gradcheck.check(lambda: T.sum_(unimp_layer(h, gfeat, batch, lp, 2, False, T.tanh) * T.constant(proj)),
                    {"h": h, "g": gfeat, **lp})


# ---------------------------------------------------------------- full encoder


def test_symmetric_graph_gives_identical_embeddings():
    cfg = small_cfg().validate()
    enc = make_encoder(cfg, 2)
    feat = np.random.default_rng(0).standard_normal(cfg.d_atom)
    g = CrystalGraph("ring", np.tile(feat, (5, 1)), [[((i + 1) % 5, 2.0), ((i - 1) % 5, 2.0)] for i in range(5)])
    state = enc.encode(collate([g], cfg.d_edge, cfg.r_cut), training=False)
    nodes = state.nodes.data
    np.testing.assert_allclose(nodes, np.tile(nodes[0], (5, 1)), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(state.pooled.data[0], nodes[0], rtol=1e-12, atol=1e-12)


def test_pooled_is_mean_of_final_nodes(rng):
    cfg = small_cfg().validate()
    enc = make_encoder(cfg, 3)
    graphs = [random_graph(rng, n, cfg.d_atom, gid=f"g{n}") for n in (3, 6, 4)]
    batch = collate(graphs, cfg.d_edge, cfg.r_cut)
    state = enc.encode(batch, training=True)
    start = 0
    for b, n in enumerate(batch.counts):
        explicit = state.nodes.data[start:start + n].mean(axis=0)
        np.testing.assert_allclose(state.pooled.data[b], explicit, rtol=1e-12, atol=1e-12)
        start += n


@pytest.mark.parametrize("conv", ["unimp", "gcn"])
def test_permutation_equivariance(rng, conv):
    cfg = small_cfg(encoder_conv=conv, encoder_layers=3).validate()
    enc = make_encoder(cfg, 4)
    g = random_graph(rng, 7, cfg.d_atom)
    perm = rng.permutation(7)
    a = enc.encode(collate([g], cfg.d_edge, cfg.r_cut), training=False)
    b = enc.encode(collate([permute_graph(g, perm)], cfg.d_edge, cfg.r_cut), training=False)
    assert np.max(np.abs(b.nodes.data - a.nodes.data[perm])) < 1e-10
    assert np.max(np.abs(b.pooled.data - a.pooled.data)) < 1e-10


def _hops(g, i, k):
    reach = {i}
    for _ in range(k):
        reach |= {j for u in reach for j, _ in g.neighbors[u]}
    return reach


def test_locality(rng):
    cfg = small_cfg(encoder_layers=2).validate()
    enc = make_encoder(cfg, 5)
    # a chain: node i lists i+1 only (last lists i-1)
    n = 8
    nbrs = [[(i + 1, 2.0)] for i in range(n - 1)] + [[(n - 2, 2.0)]]
    g = CrystalGraph("chain", rng.standard_normal((n, cfg.d_atom)), nbrs)
    base = enc.encode(collate([g], cfg.d_edge, cfg.r_cut), training=False).nodes.data
    far = sorted(set(range(n)) - _hops(g, 0, cfg.encoder_layers))
    assert far
    nodes = g.nodes.copy()
    nodes[far[0]] = 0.0
    out = enc.encode(collate([CrystalGraph("chain", nodes, nbrs)], cfg.d_edge, cfg.r_cut), training=False).nodes.data
    assert out[0].tobytes() == base[0].tobytes()
    assert not np.array_equal(out[far[0]], base[far[0]])


def test_full_encoder_gradcheck_five_nodes(rng):
    cfg = small_cfg(encoder_layers=3, d_hid=6, encoder_heads=2, decoder_heads=2).validate()
    enc = make_encoder(cfg, 6)
    graphs = [random_graph(rng, 5, cfg.d_atom, gid="a"), random_graph(rng, 3, cfg.d_atom, gid="b")]
    batch = collate(graphs, cfg.d_edge, cfg.r_cut)
    proj_nodes = rng.standard_normal((8, cfg.d_hid))
    proj_pool = rng.standard_normal((2, cfg.d_hid))

    def build():
        st = enc.encode(batch, training=True)
        return T.sum_(st.nodes * T.constant(proj_nodes)) + T.sum_(T.tanh(st.pooled) * T.constant(proj_pool))

    gradcheck.check(build, enc.params)
