"""The compiled and numpy kernels must agree bit for bit."""
import numpy as np
import pytest

from finprint import _pykernels, kernels

backends = kernels.backends()
needs_cython = pytest.mark.skipif("cython" not in backends, reason="compiled extension not built")


def test_selected_backend_is_known():
    assert kernels.BACKEND in backends


def test_im2col_matches_direct_convolution(backend, rng):
    x = rng.standard_normal((2, 5, 6, 3))
    w = rng.standard_normal((3, 3, 3, 4))  # ki, kj, c, f
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    got = (backend.im2col(xp, 3) @ w.reshape(-1, 4)).reshape(2, 5, 6, 4)
    want = np.zeros_like(got)
    for i in range(5):
        for j in range(6):
            patch = xp[:, i:i + 3, j:j + 3, :]
            want[:, i, j, :] = np.einsum("nabc,abcf->nf", patch, w)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_col2im_is_adjoint_of_im2col(backend, rng):
    xp = rng.standard_normal((2, 6, 7, 3))
    cols_shape = backend.im2col(xp, 3).shape
    g = rng.standard_normal(cols_shape)
    lhs = np.sum(backend.im2col(xp, 3) * g)
    rhs = np.sum(xp * backend.col2im(g, 2, 4, 5, 3, 3))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_maxpool_first_max_wins(backend):
    x = np.zeros((1, 2, 2, 1))
    out, arg = backend.maxpool2_forward(x)
    assert out[0, 0, 0, 0] == 0.0 and arg[0, 0, 0, 0] == 0
    x[0, 1, 0, 0] = 3.0
    x[0, 1, 1, 0] = 3.0
    out, arg = backend.maxpool2_forward(x)
    assert out[0, 0, 0, 0] == 3.0 and arg[0, 0, 0, 0] == 2
    dx = backend.maxpool2_backward(np.ones((1, 1, 1, 1)), arg, 2, 2)
    assert dx[0, :, :, 0].tolist() == [[0.0, 0.0], [1.0, 0.0]]


def test_maxpool_odd_size_drops_edge(backend, rng):
    x = rng.standard_normal((1, 5, 3, 2))
    out, _ = backend.maxpool2_forward(np.ascontiguousarray(x))
    assert out.shape == (1, 2, 1, 2)
    assert out[0, 1, 0, 1] == x[0, 2:4, 0:2, 1].max()


def test_dbscan_labels_self_is_neighbour(backend):
    # diagonal holds a huge value (same-frame rule) but a point still counts itself
    d = np.full((3, 3), 1e9)
    assert backend.dbscan_labels(d, 0.5, 1).tolist() == [0, 1, 2]
    assert backend.dbscan_labels(d, 0.5, 2).tolist() == [-1, -1, -1]


@needs_cython
@pytest.mark.parametrize("shape", [(3, 9, 11, 1), (2, 8, 8, 5), (1, 4, 4, 16)])
def test_conv_kernels_bit_identical(shape, rng):
    c = backends["cython"]
    x = rng.standard_normal(shape)
    xp = np.ascontiguousarray(np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0))))
    assert np.array_equal(c.im2col(xp, 3), _pykernels.im2col(xp, 3))
    n, h, w, ch = shape
    g = rng.standard_normal((n * h * w, 9 * ch))
    assert np.array_equal(c.col2im(g, n, h, w, ch, 3), _pykernels.col2im(g, n, h, w, ch, 3))
    a1, i1 = c.maxpool2_forward(x)
    a2, i2 = _pykernels.maxpool2_forward(x)
    assert np.array_equal(a1, a2) and np.array_equal(i1, i2)
    up = rng.standard_normal(a1.shape)
    assert np.array_equal(c.maxpool2_backward(up, i1, h, w), _pykernels.maxpool2_backward(up, i2, h, w))


@needs_cython
@pytest.mark.parametrize("seed", range(20))
def test_box_kernels_bit_identical(seed):
    c = backends["cython"]
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 40))
    f = r.integers(0, 6, n)
    x, y = r.uniform(0, 30, n), r.uniform(0, 30, n)
    w, h = r.uniform(0.5, 12, n), r.uniform(0.5, 12, n)
    lam = float(r.uniform(0, 0.2))
    d1 = c.box_distance_matrix(f, x, y, w, h, lam, 1e9)
    d2 = _pykernels.box_distance_matrix(f, x, y, w, h, lam, 1e9)
    assert np.array_equal(d1, d2)
    eps, m = float(r.uniform(0.1, 0.7)), int(r.integers(1, 5))
    assert np.array_equal(c.dbscan_labels(d1, eps, m), _pykernels.dbscan_labels(d2, eps, m))
