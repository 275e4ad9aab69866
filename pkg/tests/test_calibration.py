import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from spectral_fewshot.calibration import (CALL_COUNTER, beta_hat, calibrate, kernel_weights,
                                          prototypes)


def oracle_calibrate(protos, queries, sigma, beta):
    """Scalar loops over classes, queries and coordinates; plain floats only."""
    bh = 0.5 * (math.tanh(beta) + 1.0)
    out, corr = [], []
    for p in protos:
        logits = []
        for z in queries:
            sq = sum((zj - pj) ** 2 for zj, pj in zip(z, p))
            logits.append(math.exp(-sq / (2 * sigma * sigma)))
        m = max(logits)
        ex = [math.exp(v - m) for v in logits]
        tot = sum(ex)
        w = [e / tot for e in ex]
        delta = [sum(w[i] * (queries[i][j] - p[j]) for i in range(len(queries)))
                 for j in range(len(p))]
        corr.append(delta)
        out.append([p[j] + bh * delta[j] for j in range(len(p))])
    return np.array(out), np.array(corr)


def t(a):
    return torch.tensor(a, dtype=torch.float64)


class TestPrototypes:
    def test_one_shot(self):
        s = t([[1.0, 2.0], [3.0, -1.0]])
        assert torch.equal(prototypes(s, [0, 1], 2, 1), s)

    def test_identical_embeddings(self):
        s = t([[0.5, 0.25]] * 6)
        assert torch.equal(prototypes(s, [0, 1, 2, 0, 1, 2], 3, 2), t([[0.5, 0.25]] * 3))

    def test_scalar_loop_mean(self, rng):
        s = rng.standard_normal((6, 4))
        labels = [1, 0, 1, 0, 0, 1]
        ref = np.zeros((2, 4))
        for k in range(2):
            rows = [s[i] for i in range(6) if labels[i] == k]
            for j in range(4):
                ref[k, j] = sum(r[j] for r in rows) / len(rows)
        assert_allclose(prototypes(t(s), labels, 2, 3).numpy(), ref, atol=1e-12)

    def test_missing_class(self):
        with pytest.raises(ValueError, match="class 1"):
            prototypes(t([[0.0], [1.0]]), [0, 0], 2)


class TestKernelWeights:
    def test_equidistant_uniform(self):
        q = t([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        assert_allclose(kernel_weights(q, t([0.0, 0.0]), 0.7).numpy(), 0.25, atol=1e-15)

    def test_huge_sigma_uniform(self):
        q = t(np.random.default_rng(0).standard_normal((5, 3)))
        assert_allclose(kernel_weights(q, t([0.0, 0.0, 0.0]), 1e8).numpy(), 0.2, atol=1e-12)

    def test_two_query_oracle(self):
        w = kernel_weights(t([[0.0], [10.0]]), t([0.0]), 1.0).numpy()
        ref = np.exp([1.0, math.exp(-50)])
        assert_allclose(w, ref / ref.sum(), atol=1e-15)
        assert_allclose(w, [0.7311, 0.2689], atol=1e-4)

    def test_normalized_mode(self):
        w = kernel_weights(t([[0.0], [1.0]]), t([0.0]), 1.0, mode="normalized").numpy()
        k = np.array([1.0, math.exp(-0.5)])
        assert_allclose(w, k / k.sum(), atol=1e-15)

    @pytest.mark.parametrize("sigma", [0.0, -2.0])
    def test_bad_sigma(self, sigma):
        with pytest.raises(ValueError):
            kernel_weights(t([[0.0]]), t([0.0]), sigma)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10**6), sigma=st.floats(1e-3, 1e3), scale=st.floats(1e-2, 1e2))
    def test_simplex(self, seed, sigma, scale):
        r = np.random.default_rng(seed)
        w = kernel_weights(t(r.standard_normal((12, 3)) * scale), t(r.standard_normal(3)), sigma)
        assert (w >= 0).all()
        assert abs(float(w.sum()) - 1.0) <= 1e-9


class TestCalibrate:
    def test_hand_set_2d(self):
        protos = [[0.0, 0.0], [2.0, 1.0]]
        queries = [[0.5, 0.0], [1.0, 1.0], [2.5, 1.5], [-0.5, 0.5]]
        cal = calibrate(t(protos), t(queries), 1.0, 0.3)
        ref, corr = oracle_calibrate(protos, queries, 1.0, 0.3)
        assert_allclose(cal.corrected.numpy(), ref, atol=1e-10)
        assert_allclose(cal.correction.numpy(), corr, atol=1e-10)

    def test_oracle_200_random_instances(self):
        r = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(200):
            n, nm, d = r.integers(2, 5), r.integers(1, 12), r.integers(1, 6)
            protos = r.standard_normal((n, d))
            queries = r.standard_normal((nm, d)) * r.uniform(0.2, 3)
            sigma, beta = r.uniform(0.1, 5), r.uniform(-3, 3)
            cal = calibrate(t(protos), t(queries), sigma, beta)
            ref, _ = oracle_calibrate(protos.tolist(), queries.tolist(), sigma, beta)
            worst = max(worst, float(np.abs(cal.corrected.numpy() - ref).max()))
        assert worst <= 1e-10

    def test_construction_identity(self, rng):
        cal = calibrate(t(rng.standard_normal((3, 4))), t(rng.standard_normal((9, 4))), 0.8,
                        torch.tensor(-0.4, dtype=torch.float64))
        assert_allclose(cal.corrected.numpy(), (cal.raw + cal.beta_hat * cal.correction).numpy(),
                        atol=1e-12)
        assert 0 < float(cal.beta_hat) < 1

    def test_beta_to_minus_infinity(self, rng):
        p = t(rng.standard_normal((2, 3)))
        cal = calibrate(p, t(rng.standard_normal((6, 3))), 1.0, -50.0)
        assert_allclose(cal.corrected.numpy(), p.numpy(), atol=1e-7)

    def test_single_query_on_prototype(self):
        p = t([[1.0, 2.0]])
        cal = calibrate(p, t([[1.0, 2.0]]), 1.0, 0.0)
        assert torch.equal(cal.corrected, p)

    def test_translation_equivariance(self, rng):
        p, q = rng.standard_normal((3, 4)), rng.standard_normal((8, 4))
        shift = rng.standard_normal(4) * 5
        a = calibrate(t(p), t(q), 1.3, 0.2).corrected.numpy()
        b = calibrate(t(p + shift), t(q + shift), 1.3, 0.2).corrected.numpy()
        assert_allclose(b, a + shift, atol=1e-10)

    def test_large_sigma_limit(self, rng):
        p, q = rng.standard_normal((2, 3)), rng.standard_normal((7, 3))
        cal = calibrate(t(p), t(q), 1e6, 0.0)
        assert_allclose(cal.correction.numpy(), q.mean(0) - p, atol=1e-4)

    def test_differentiable(self, rng):
        p = t(rng.standard_normal((2, 3))).requires_grad_()
        q = t(rng.standard_normal((5, 3))).requires_grad_()
        beta = torch.tensor(0.1, dtype=torch.float64, requires_grad=True)
        calibrate(p, q, 1.0, beta).corrected.sum().backward()
        assert p.grad is not None and q.grad is not None and beta.grad is not None

    def test_dimension_weighting_uniform_limit(self, rng):
        p, q = rng.standard_normal((2, 3)), rng.standard_normal((7, 3))
        cal = calibrate(t(p), t(q), 1e6, 0.0, weighting="dimension")
        assert_allclose(cal.correction.numpy(), q.mean(0) - p, atol=1e-4)

    def test_counter(self):
        before = CALL_COUNTER["calibrate"]
        calibrate(t([[0.0]]), t([[1.0]]), 1.0, 0.0)
        assert CALL_COUNTER["calibrate"] == before + 1


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e3, 1e3))
def test_beta_hat_open_interval(beta):
    b = float(beta_hat(torch.tensor(beta, dtype=torch.float64)))
    if abs(beta) < 15:
        assert 0.0 < b < 1.0
    else:
        assert 0.0 <= b <= 1.0
