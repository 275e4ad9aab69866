import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from spectral_fewshot.encoder import (GraphTensors, LowPassExpert, encode, gate_forward,
                                      gate_softmax, high_pass_forward, init_params,
                                      load_checkpoint, low_pass_forward, params_hash,
                                      save_checkpoint)
from spectral_fewshot.graph import Graph, gating_features, normalized_adjacency

from conftest import complete_graph, random_graph


def np_(t):
    return t.detach().numpy().astype(np.float64)


def loop_low_pass(adj, x, model):
    """Two GCN layers with training-mode batch norm, written with explicit loops."""
    h = x
    for w, bn in ((np_(model.low_pass.w1), model.low_pass.bn1),
                  (np_(model.low_pass.w2), model.low_pass.bn2)):
        n, k = h.shape[0], w.shape[1]
        xw = np.zeros((n, k))
        for i in range(n):
            for j in range(k):
                xw[i, j] = sum(h[i, t] * w[t, j] for t in range(h.shape[1]))
        ax = np.zeros((n, k))
        for i in range(n):
            for j in range(n):
                ax[i] += adj[i, j] * xw[j]
        out = np.zeros_like(ax)
        g, b = np_(bn.weight), np_(bn.bias)
        for j in range(k):
            mu = ax[:, j].mean()
            var = ((ax[:, j] - mu) ** 2).mean()
            out[:, j] = g[j] * (ax[:, j] - mu) / math.sqrt(var + bn.eps) + b[j]
        h = np.maximum(out, 0.0)
    return h


def loop_high_pass(edges, n, x, h_low, model):
    hp = model.high_pass
    lam = float(hp.lam)
    f = lam * (x @ np_(hp.w_in) - h_low)
    for i in range(n):
        mu, var = f[i].mean(), f[i].var()
        f[i] = (f[i] - mu) / math.sqrt(var + 1e-5) * np_(hp.norm.weight) + np_(hp.norm.bias)
    q, k, v = f @ np_(hp.w_q), f @ np_(hp.w_k), f @ np_(hp.w_v)
    nbrs = {i: {i} for i in range(n)}
    for a, b in edges:
        nbrs[a].add(b)
        nbrs[b].add(a)
    out = np.zeros_like(v)
    dk = q.shape[1]
    for i in range(n):
        js = sorted(nbrs[i])
        s = np.array([q[i] @ k[j] / math.sqrt(dk) for j in js])
        w = np.exp(s - s.max())
        w /= w.sum()
        for wj, j in zip(w, js):
            out[i] += wj * v[j]
    return out


def make(g, hidden=5, seed=0, gate_hidden=7):
    m = init_params(g.feature_dim, hidden, seed=seed, gate_hidden=gate_hidden).double()
    return m, GraphTensors(g, torch.float64)


class TestInit:
    def test_deterministic(self):
        a, b = init_params(10, seed=3), init_params(10, seed=3)
        for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb and torch.equal(pa, pb)

    def test_shapes_and_beta(self):
        m = init_params(20)
        assert m.high_pass.w_q.shape == (32, 32)
        assert m.metric_head.shape == (32, 32)
        assert m.gate.fc1.weight.shape == (96, 80)
        assert m.beta_hat.item() == 0.5
        assert float(m.high_pass.lam) == 1.0
        assert torch.equal(m.low_pass.bn1.running_mean, torch.zeros(32))
        assert torch.equal(m.low_pass.bn1.running_var, torch.ones(32))

    def test_metric_head_init(self):
        assert torch.equal(init_params(5, 6, metric_head_init="identity").metric_head, torch.eye(6))
        u = init_params(5, 6).metric_head
        assert not torch.equal(u, torch.eye(6)) and u.abs().max() <= 1 / math.sqrt(6)
        with pytest.raises(ValueError):
            init_params(5, 6, metric_head_init="zeros")

    def test_fan_in_bounds(self):
        m = init_params(50, 8, seed=1)
        assert m.low_pass.w1.abs().max() <= 1 / math.sqrt(50)
        assert m.gate.fc1.weight.abs().max() <= 1 / math.sqrt(200)

    def test_shared_weights_identical_across_gate_variants(self):
        a = init_params(12, 6, seed=4)
        b = init_params(12, 6, seed=4, gating_blocks=("x", "n", "deg"))
        for prefix in ("low_pass", "high_pass", "metric_head", "beta", "gate.fc2"):
            assert params_hash(a, prefix) == params_hash(b, prefix)

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            init_params(0)


class TestLowPass:
    def test_identity_path_graph(self):
        g = Graph.from_edge_list(2, [(0, 1)], np.ones((2, 1)))
        lp = LowPassExpert(1, 1).double()
        with torch.no_grad():
            lp.w1.fill_(1.0)
            lp.w2.fill_(1.0)
        adj = GraphTensors(g, torch.float64).norm_adj
        out = lp(adj, torch.ones(2, 1, dtype=torch.float64), use_bn=False, activation=lambda t: t)
        assert_allclose(np_(out), [[1.0], [1.0]], atol=1e-15)

    def test_zero_features_zero_pre_bn(self):
        g = random_graph(6, d=3)
        m, gt = make(g)
        out = m.low_pass(gt.norm_adj, torch.zeros(6, 3, dtype=torch.float64), use_bn=False, activation=lambda t: t)
        assert torch.count_nonzero(out) == 0

    def test_loop_oracle(self):
        g = random_graph(8, p=0.4, d=3, seed=5)
        m, gt = make(g)
        out = low_pass_forward(gt.norm_adj, gt.features, m, training=True)
        ref = loop_low_pass(normalized_adjacency(g).toarray(), g.dense_features(), m)
        assert_allclose(np_(out), ref, atol=1e-6)
        assert (np_(out) >= 0).all()

    def test_sparse_features(self):
        g = random_graph(9, p=0.4, d=4, seed=6, sparse=True)
        m, gt = make(g)
        out = low_pass_forward(gt.norm_adj, gt.features, m, training=True)
        ref = loop_low_pass(normalized_adjacency(g).toarray(), g.dense_features(), m)
        assert_allclose(np_(out), ref, atol=1e-6)


class TestHighPass:
    def test_zero_differential(self):
        g = random_graph(5, d=3, seed=1)
        m, gt = make(g)
        h_low = gt.features @ m.high_pass.w_in
        out = high_pass_forward(gt, gt.features, h_low, m)
        assert_allclose(np_(out), 0.0, atol=1e-12)

    def test_single_node(self):
        g = Graph(1, np.zeros((0, 2)), np.array([[0.3, -1.2]]))
        m, gt = make(g)
        h_low = torch.tensor([[0.1, 0.4, 0.0, 2.0, -0.5]], dtype=torch.float64)
        out = high_pass_forward(gt, gt.features, h_low, m)
        f = m.high_pass.differential(gt.features, h_low)
        assert_allclose(np_(out), np_(f @ m.high_pass.w_v), atol=1e-12)

    def test_loop_oracle(self):
        g = random_graph(10, p=0.3, d=4, seed=9)
        m, gt = make(g)
        h_low = torch.from_numpy(np.random.default_rng(0).standard_normal((10, 5)))
        out = high_pass_forward(gt, gt.features, h_low, m)
        ref = loop_high_pass(g.edges, 10, g.dense_features(), h_low.numpy(), m)
        assert_allclose(np_(out), ref, atol=1e-6)

    def test_six_node_complete_sparse_equals_dense(self):
        g = complete_graph(6)
        m, gt = make(g)
        h_low = m.low_pass(gt.norm_adj, gt.features)
        a = high_pass_forward(gt, gt.features, h_low, m, attention="sparse")
        b = high_pass_forward(gt, gt.features, h_low, m, attention="dense")
        assert_allclose(np_(a), np_(b), atol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 20), seed=st.integers(0, 10**6))
    def test_complete_graph_equivalence_property(self, n, seed):
        g = complete_graph(n, d=3, seed=seed)
        m, gt = make(g, seed=seed)
        h_low = torch.from_numpy(np.random.default_rng(seed).standard_normal((n, 5)))
        a = high_pass_forward(gt, gt.features, h_low, m, attention="sparse")
        b = high_pass_forward(gt, gt.features, h_low, m, attention="dense")
        assert_allclose(np_(a), np_(b), atol=1e-6)

    def test_shape_mismatch(self):
        g = random_graph(5, d=3)
        m, gt = make(g)
        with pytest.raises(ValueError):
            high_pass_forward(gt, gt.features, torch.zeros(4, 5), m)


class TestGate:
    def test_hot_temperature(self):
        g = random_graph(7, d=3, seed=2)
        m, gt = make(g)
        a = gate_forward(gt, m, 1e6)
        assert_allclose(np_(a), 0.5, atol=1e-4)

    def test_scalar_softmax_oracle(self):
        logits = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        e = math.e
        assert_allclose(np_(gate_softmax(logits, 1.0)), [[e / (e + 1), 1 / (e + 1)]], atol=1e-12)
        p = math.exp(0.5) / (math.exp(0.5) + 1)
        assert_allclose(np_(gate_softmax(logits, 2.0)), [[p, 1 - p]], atol=1e-12)
        assert_allclose(np_(gate_softmax(logits, 2.0)), [[0.6225, 0.3775]], atol=1e-4)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_nonpositive_tau(self, tau):
        with pytest.raises(ValueError):
            gate_softmax(torch.zeros(1, 2), tau)

    def test_blockwise_equals_composite(self):
        g = random_graph(11, d=4, seed=3, sparse=True)
        m, gt = make(g)
        comp = torch.from_numpy(gating_features(g).composite)
        assert_allclose(np_(gate_forward(gt, m, 2.0)), np_(gate_forward(comp, m, 2.0)), atol=1e-12)

    def test_blockwise_equals_composite_without_block(self):
        g = random_graph(9, d=3, seed=4)
        blocks = ("x", "phi", "deg")
        m = init_params(3, 5, seed=0, gate_hidden=6, gating_blocks=blocks).double()
        gt = GraphTensors(g, torch.float64, blocks)
        comp = torch.from_numpy(gating_features(g, blocks).composite)
        assert comp.shape[1] == 9
        assert_allclose(np_(gate_forward(gt, m, 1.5)), np_(gate_forward(comp, m, 1.5)), atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 10**6), tau=st.floats(1e-3, 1e3), scale=st.floats(1e-3, 1e3))
    def test_simplex_and_argmax_invariance(self, seed, tau, scale):
        logits = torch.from_numpy(np.random.default_rng(seed).standard_normal((16, 2)) * scale)
        a = gate_softmax(logits, tau)
        assert (a >= 0).all()
        assert_allclose(np_(a.sum(1)), 1.0, atol=1e-6)
        b = gate_softmax(logits, tau * 3.7)
        keep = (logits[:, 0] != logits[:, 1]).numpy()
        assert (a.argmax(1).numpy()[keep] == b.argmax(1).numpy()[keep]).all()


class TestEncode:
    @pytest.fixture
    def setup(self):
        g = random_graph(9, d=4, seed=7)
        m, gt = make(g)
        return g, m, gt

    def test_alpha_endpoints(self, setup):
        g, m, gt = setup
        lo = encode(gt, m, alpha_override=(1.0, 0.0))
        assert torch.equal(lo.z, lo.h_low)
        hi = encode(gt, m, alpha_override=(0.0, 1.0))
        assert torch.equal(hi.z, hi.h_high)
        mid = encode(gt, m, alpha_override=(0.5, 0.5))
        assert_allclose(np_(mid.z), np_((mid.h_low + mid.h_high) / 2), atol=1e-6)

    def test_invariants(self, setup):
        g, m, gt = setup
        enc = encode(g, m, tau=2.0)
        a = enc.alpha
        assert (a >= 0).all()
        assert_allclose(np_(a.sum(1)), 1.0, atol=1e-6)
        z = a[:, :1] * enc.h_low + a[:, 1:] * enc.h_high
        assert_allclose(np_(enc.z), np_(z), atol=1e-6)

    def test_inference_deterministic(self, setup):
        g, m, gt = setup
        assert torch.equal(encode(gt, m).z, encode(gt, m).z)


def test_checkpoint_round_trip(tmp_path):
    m = init_params(6, 4, seed=2, gate_hidden=5, gating_blocks=("x", "deg"))
    with torch.no_grad():
        m.beta.fill_(0.3)
    path = save_checkpoint(m, tmp_path / "ck", {"seed": 2})
    n = load_checkpoint(path)
    assert n.gate.blocks == ("x", "deg")
    for (ka, va), (kb, vb) in zip(m.state_dict().items(), n.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    import json

    manifest = json.loads((tmp_path / "ck.json").read_text())
    assert manifest["tensors"]["metric_head"]["shape"] == [4, 4]
    assert len(manifest["config_hash"]) == 12
