import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spatialvl import kernels

needs_numba = pytest.mark.skipif(not kernels.NUMBA_AVAILABLE, reason="numba not installed")

finite = st.floats(-20, 20, allow_nan=False, width=64)


def mat(rows=(1, 12), cols=(2, 40)):
    return st.tuples(st.integers(*rows), st.integers(*cols)).flatmap(
        lambda s: arrays(np.float64, s, elements=finite)
    )


def random_boxes(rng, n):
    xy = rng.uniform(0, 50, (n, 2))
    wh = rng.uniform(0.5, 30, (n, 2))
    return np.ascontiguousarray(np.hstack([xy, xy + wh]))


def test_dispatch_names():
    for name in kernels.KERNELS:
        assert getattr(kernels, name) is getattr(kernels, name + ("_nb" if kernels.USE_NUMBA else "_np"))


def test_layernorm_matches_direct_formula(rng):
    x = rng.normal(size=(7, 16))
    g, b = rng.normal(size=16), rng.normal(size=16)
    y, _, _ = kernels.layernorm_forward_np(x, g, b, 1e-5)
    ref = (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-5) * g + b
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_gelu_reference_values():
    x = np.array([[-3.0, -1.0, 0.0, 1.0, 3.0]])
    # 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    ref = [-0.0036373920817729943, -0.15880800939172324, 0.0, 0.8411919906082768, 2.996362607918227]
    np.testing.assert_allclose(kernels.gelu_forward_np(x)[0], ref, rtol=1e-12)


def test_softmax_rows_sum_to_one(rng):
    y = kernels.softmax_forward_np(rng.normal(size=(5, 9)) * 30)
    np.testing.assert_allclose(y.sum(1), 1.0, atol=1e-14)


def test_pairwise_self_iou_is_one(rng):
    b = random_boxes(rng, 6)
    np.testing.assert_allclose(np.diag(kernels.pairwise_iou_np(b, b)), 1.0)


def test_scatter_add_repeats_accumulate():
    t = np.zeros((3, 2))
    kernels.scatter_add_np(t, np.array([0, 2, 0]), np.array([[1.0, 2], [3, 4], [5, 6]]))
    np.testing.assert_array_equal(t, [[6, 8], [0, 0], [3, 4]])


def test_adamw_zero_gradient_only_decays():
    p = np.array([1.0, -2.0, 3.0])
    m, v = np.zeros(3), np.zeros(3)
    kernels.adamw_update_np(p, np.zeros(3), m, v, 0.1, 0.9, 0.999, 0.1, 0.001, 1e-8, 1 - 0.1 * 0.01)
    np.testing.assert_allclose(p, [0.999, -1.998, 2.997], rtol=1e-15)


@needs_numba
class TestBackendsAgree:
    @given(mat())
    @settings(max_examples=40, deadline=None)
    def test_layernorm(self, x):
        g = np.linspace(0.5, 1.5, x.shape[1])
        b = np.linspace(-0.2, 0.2, x.shape[1])
        for a, c in zip(kernels.layernorm_forward_np(x, g, b, 1e-5), kernels.layernorm_forward_nb(x, g, b, 1e-5)):
            np.testing.assert_allclose(a, c, rtol=1e-9, atol=1e-9)
        y, xhat, rstd = kernels.layernorm_forward_np(x, g, b, 1e-5)
        dy = np.cos(x)
        for a, c in zip(kernels.layernorm_backward_np(dy, xhat, rstd, g),
                        kernels.layernorm_backward_nb(dy, xhat, rstd, g)):
            np.testing.assert_allclose(a, c, rtol=1e-9, atol=1e-8)

    @given(mat())
    @settings(max_examples=40, deadline=None)
    def test_softmax(self, x):
        y = kernels.softmax_forward_np(x)
        np.testing.assert_allclose(kernels.softmax_forward_nb(x), y, rtol=1e-12, atol=1e-15)
        dy = np.sin(x)
        np.testing.assert_allclose(kernels.softmax_backward_nb(y, dy), kernels.softmax_backward_np(y, dy),
                                   rtol=1e-9, atol=1e-14)

    @given(mat())
    @settings(max_examples=40, deadline=None)
    def test_gelu(self, x):
        np.testing.assert_allclose(kernels.gelu_forward_nb(x), kernels.gelu_forward_np(x), rtol=1e-12, atol=1e-14)
        dy = np.cos(x)
        np.testing.assert_allclose(kernels.gelu_backward_nb(x, dy), kernels.gelu_backward_np(x, dy),
                                   rtol=1e-10, atol=1e-13)

    def test_pairwise(self, rng):
        a, b = random_boxes(rng, 9), random_boxes(rng, 7)
        np.testing.assert_allclose(kernels.pairwise_iou_nb(a, b), kernels.pairwise_iou_np(a, b), atol=1e-15)
        np.testing.assert_allclose(kernels.pairwise_giou_nb(a, b), kernels.pairwise_giou_np(a, b), atol=1e-15)

    def test_scatter_add(self, rng):
        idx = rng.integers(0, 5, 40)
        rows = rng.normal(size=(40, 3))
        t1, t2 = np.zeros((5, 3)), np.zeros((5, 3))
        kernels.scatter_add_np(t1, idx, rows)
        kernels.scatter_add_nb(t2, idx, rows)
        np.testing.assert_allclose(t1, t2, atol=1e-13)

    def test_adamw(self, rng):
        args = [rng.normal(size=50) for _ in range(2)] + [rng.normal(size=50), rng.uniform(0, 1, 50)]
        a = [x.copy() for x in args]
        b = [x.copy() for x in args]
        hyper = (1e-3, 0.9, 0.999, 1 - 0.9**3, 1 - 0.999**3, 1e-8, 1 - 1e-5)
        kernels.adamw_update_np(a[0], a[1], a[2], a[3], *hyper)
        kernels.adamw_update_nb(b[0], b[1], b[2], b[3], *hyper)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, rtol=1e-13, atol=1e-15)
