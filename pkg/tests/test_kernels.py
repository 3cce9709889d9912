import numpy as np
import pytest

from cascaderec.kernels import backend_name, fallback

try:
    from cascaderec.kernels import _core
except ImportError:
    _core = None

needs_ext = pytest.mark.skipif(_core is None, reason="compiled extension unavailable")


class TestFallbackSemantics:
    def test_nearest_centroid_tie_breaks_low_index(self):
        # integer-exact distances: centroids 2 and 7 both at distance 1
        c = np.full((8, 2), 50.0)
        c[2] = [1.0, 0.0]
        c[7] = [-1.0, 0.0]
        idx, dist = fallback.nearest_centroid(np.zeros((1, 2)), c)
        assert idx[0] == 2
        assert dist[0] == pytest.approx(1.0, abs=1e-12)

    def test_attention_masking(self):
        g = np.random.default_rng(0)
        q, k, v = (g.standard_normal((2, 1, 5, 3)) for _ in range(3))
        fv = np.array([0, 3], dtype=np.int64)
        s, o = fallback.gated_attention(q, k, v, fv, 0.2)
        # strictly causal: upper triangle zero
        assert np.array_equal(np.triu(s[0, 0], k=1), np.zeros((5, 5)))
        # invalid rows and columns fully zero for the padded sequence
        assert np.all(s[1, 0, :3, :] == 0.0) and np.all(s[1, 0, :, :3] == 0.0)
        assert np.all(o[1, 0, :3, :] == 0.0)

    def test_backward_matches_finite_differences(self):
        g = np.random.default_rng(1)
        q, k, v = (g.standard_normal((1, 2, 4, 3)) for _ in range(3))
        do = g.standard_normal((1, 2, 4, 3))
        fv = np.array([1], dtype=np.int64)
        s, _ = fallback.gated_attention(q, k, v, fv, 0.25)
        dq, dk, dv = fallback.gated_attention_backward(do, s, q, k, v, fv, 0.25)
        eps = 1e-6
        for arr, grad in ((q, dq), (k, dk), (v, dv)):
            pos = (0, 1, 2, 1)
            orig = arr[pos]
            arr[pos] = orig + eps
            lp = float((fallback.gated_attention(q, k, v, fv, 0.25)[1] * do).sum())
            arr[pos] = orig - eps
            lm = float((fallback.gated_attention(q, k, v, fv, 0.25)[1] * do).sum())
            arr[pos] = orig
            fd = (lp - lm) / (2 * eps)
            assert abs(fd - grad[pos]) / max(abs(fd), 1e-9) < 1e-5


@needs_ext
class TestBackendParity:
    def test_nearest_centroid(self):
        g = np.random.default_rng(2)
        x = g.standard_normal((400, 9))
        c = g.standard_normal((31, 9))
        i1, d1 = fallback.nearest_centroid(x, c)
        i2, d2 = _core.nearest_centroid(x, c)
        assert np.array_equal(i1, i2)
        np.testing.assert_allclose(d1, d2, atol=1e-10)

    def test_nearest_centroid_tie_break(self):
        c = np.full((8, 2), 50.0)
        c[2] = [1.0, 0.0]
        c[7] = [-1.0, 0.0]
        idx, _ = _core.nearest_centroid(np.zeros((1, 2)), c)
        assert idx[0] == 2

    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
    def test_gated_attention_forward(self, dtype, tol):
        g = np.random.default_rng(3)
        q, k, v = (g.standard_normal((3, 2, 7, 4)).astype(dtype) for _ in range(3))
        fv = np.array([0, 2, 6], dtype=np.int64)
        s1, o1 = fallback.gated_attention(q, k, v, fv, 1 / 7)
        s2, o2 = _core.gated_attention(q, k, v, fv, 1 / 7)
        assert s2.dtype == np.dtype(dtype) and o2.dtype == np.dtype(dtype)
        np.testing.assert_allclose(s1, s2, atol=tol)
        np.testing.assert_allclose(o1, o2, atol=tol)

    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-4)])
    def test_gated_attention_backward(self, dtype, tol):
        g = np.random.default_rng(4)
        q, k, v, do = (g.standard_normal((2, 2, 6, 4)).astype(dtype) for _ in range(4))
        fv = np.array([0, 3], dtype=np.int64)
        s, _ = fallback.gated_attention(q, k, v, fv, 1 / 6)
        g1 = fallback.gated_attention_backward(do, s, q, k, v, fv, 1 / 6)
        g2 = _core.gated_attention_backward(do, s, q, k, v, fv, 1 / 6)
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(a, b, atol=tol)


def test_backend_name_is_valid():
    assert backend_name() in ("cython", "fallback")
