import numpy as np
import pytest

from telinet import tensor as T
from telinet.tensor import (
    NumericalError,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    flatten,
    matmul,
    maxpool2d_backward,
    maxpool2d_forward,
    reshape,
    tensor,
)

from _oracles import (
    conv2d_direct,
    matmul_triple_loop,
    maxpool_direct,
    numerical_gradient,
    relative_error,
    tie_free,
)


# --- construction -----------------------------------------------------------

def test_tensor_is_float32_with_shape():
    t = tensor(range(6), shape=(2, 3))
    assert t.dtype == np.float32
    assert t.shape == (2, 3)
    assert t[1, 2] == 5


def test_tensor_rejects_wrong_element_count():
    with pytest.raises(ShapeError, match="6 elements"):
        tensor(range(6), shape=(4, 2))


def test_tensor_rejects_nonpositive_dims():
    with pytest.raises(ShapeError):
        tensor([], shape=(0, 3))


# --- conv2d -----------------------------------------------------------------

def test_conv_all_ones_counts_neighbours():
    out = conv2d_forward(np.ones((1, 1, 3, 3), np.float32), np.ones((1, 1, 3, 3), np.float32),
                         np.zeros(1, np.float32))
    np.testing.assert_array_equal(out[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 1, 5, 7)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv2d_forward(x, w, np.zeros(1, np.float32)), x)


def test_conv_is_cross_correlation_not_convolution():
    # A kernel with a single 1 in the top-left corner reads the up-left neighbour.
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 0, 0] = 1
    out = conv2d_forward(x, w, np.zeros(1, np.float32))
    assert out[0, 0, 1, 1] == x[0, 0, 0, 0]
    assert out[0, 0, 0, 0] == 0


def test_conv_bias_per_channel():
    x = np.zeros((1, 2, 4, 4), np.float32)
    out = conv2d_forward(x, np.zeros((3, 2, 3, 3), np.float32), np.array([1, -2, 0.5], np.float32))
    assert out.shape == (1, 3, 4, 4)
    np.testing.assert_array_equal(out[0, :, 2, 3], [1, -2, 0.5])


def test_conv_matches_direct_oracle_small_fixed():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    np.testing.assert_allclose(conv2d_forward(x, w, b), conv2d_direct(x, w, b), atol=1e-5, rtol=0)


@pytest.mark.parametrize("seed", range(10))
def test_conv_matches_direct_oracle_random(seed):
    rng = np.random.default_rng(seed)
    n, c, f = rng.integers(1, 5, size=3)
    h, w = rng.integers(1, 9, size=2)
    x = rng.uniform(-1, 1, (n, c, h, w)).astype(np.float32)
    k = rng.uniform(-1, 1, (f, c, 3, 3)).astype(np.float32)
    b = rng.uniform(-1, 1, f).astype(np.float32)
    np.testing.assert_allclose(conv2d_forward(x, k, b), conv2d_direct(x, k, b), atol=1e-5, rtol=0)


def test_conv_row_bands_do_not_change_results(monkeypatch):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 11, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    g = rng.standard_normal((2, 4, 11, 6))
    b = np.zeros(4)
    whole = conv2d_forward(x, w, b), conv2d_backward(x, w, g)
    # One row per band, and a band size that leaves a remainder.
    for budget in (1, 3 * 9 * 6 * 4):
        monkeypatch.setattr(T, "_BAND_BUDGET", budget)
        np.testing.assert_allclose(conv2d_forward(x, w, b), whole[0], rtol=1e-12, atol=1e-12)
        for got, ref in zip(conv2d_backward(x, w, g), whole[1]):
            np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        conv2d_forward(np.zeros((1, 2, 4, 4), np.float32), np.zeros((1, 3, 3, 3), np.float32),
                       np.zeros(1, np.float32))
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((2, 4, 4), np.float32), np.zeros((1, 2, 3, 3), np.float32),
                       np.zeros(1, np.float32))
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 1, 4, 4), np.float32), np.zeros((1, 1, 5, 5), np.float32),
                       np.zeros(1, np.float32))
    with pytest.raises(ShapeError, match="bias"):
        conv2d_forward(np.zeros((1, 1, 4, 4), np.float32), np.zeros((2, 1, 3, 3), np.float32),
                       np.zeros(3, np.float32))


def test_conv_rejects_nonfinite_results():
    x = np.full((1, 1, 2, 2), np.inf, np.float32)
    with pytest.raises(NumericalError, match="conv2d_forward"):
        conv2d_forward(x, np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32))


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    gx, gw, gb = conv2d_backward(x, w, np.zeros((2, 4, 5, 5), np.float32))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_single_pixel():
    x = np.array([[[[3.0]]]], np.float32)
    w = np.zeros((1, 1, 3, 3), np.float32)
    _, gw, gb = conv2d_backward(x, w, np.array([[[[-2.0]]]], np.float32))
    assert gw[0, 0, 1, 1] == -6.0
    # Every other tap only ever sees padding.
    assert np.count_nonzero(gw) == 1
    assert gb[0] == -2.0


def test_conv_backward_grad_bias_is_sum():
    rng = np.random.default_rng(2)
    g = rng.standard_normal((3, 2, 4, 5)).astype(np.float32)
    _, _, gb = conv2d_backward(np.ones((3, 1, 4, 5), np.float32), np.ones((2, 1, 3, 3), np.float32), g)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3), dtype=np.float64), rtol=1e-6)


def test_conv_backward_skips_input_grad_on_request():
    x = np.ones((1, 1, 3, 3), np.float32)
    gx, gw, _ = conv2d_backward(x, np.ones((1, 1, 3, 3), np.float32), np.ones((1, 1, 3, 3), np.float32),
                                need_input_grad=False)
    assert gx is None
    assert gw[0, 0, 1, 1] == 9


@pytest.mark.parametrize("seed", range(5))
def test_conv_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    n, c, f = rng.integers(1, 4, size=3)
    h, w = rng.integers(1, 6, size=2)
    x = rng.standard_normal((n, c, h, w))
    k = rng.standard_normal((f, c, 3, 3))
    b = rng.standard_normal(f)
    r = rng.standard_normal((n, f, h, w))
    gx, gw, gb = conv2d_backward(x, k, r)
    assert relative_error(gx, numerical_gradient(lambda v: np.sum(conv2d_forward(v, k, b) * r), x)) < 1e-3
    assert relative_error(gw, numerical_gradient(lambda v: np.sum(conv2d_forward(x, v, b) * r), k)) < 1e-3
    assert relative_error(gb, numerical_gradient(lambda v: np.sum(conv2d_forward(x, k, v) * r), b)) < 1e-3


def test_conv_backward_shape_mismatch():
    with pytest.raises(ShapeError, match="grad_out"):
        conv2d_backward(np.zeros((1, 1, 4, 4), np.float32), np.zeros((2, 1, 3, 3), np.float32),
                        np.zeros((1, 3, 4, 4), np.float32))


def test_conv_preserves_float64():
    x = np.ones((1, 1, 2, 2))
    assert conv2d_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1)).dtype == np.float64
    assert conv2d_forward(x.astype(np.float32), np.ones((1, 1, 3, 3), np.float32),
                          np.zeros(1, np.float32)).dtype == np.float32


# --- max pooling ------------------------------------------------------------

def test_maxpool_basic():
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    out, arg = maxpool2d_forward(x)
    np.testing.assert_array_equal(out, [[[[4]]]])
    assert arg[0, 0, 0, 0] == 3


def test_maxpool_telinet_geometry():
    out, arg = maxpool2d_forward(np.zeros((1, 2, 256, 256), np.float32))
    assert out.shape == (1, 2, 128, 128)
    assert arg.shape == out.shape


def test_maxpool_constant_input_ties_to_first_index():
    out, arg = maxpool2d_forward(np.full((2, 3, 4, 6), 1.5, np.float32))
    assert np.all(out == 1.5)
    assert np.all(arg == 0)


@pytest.mark.parametrize("h,w", [(2, 2), (3, 5), (7, 4), (5, 5)])
def test_maxpool_floor_semantics(h, w):
    out, _ = maxpool2d_forward(np.zeros((1, 1, h, w), np.float32))
    assert out.shape[2:] == (h // 2, w // 2)


def test_maxpool_rejects_small_inputs():
    with pytest.raises(ShapeError, match="H and W >= 2"):
        maxpool2d_forward(np.zeros((1, 1, 1, 4), np.float32))
    with pytest.raises(ShapeError):
        maxpool2d_forward(np.zeros((1, 4, 4), np.float32))


@pytest.mark.parametrize("seed", range(10))
def test_maxpool_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n, c = rng.integers(1, 4, size=2)
    h, w = rng.integers(2, 9, size=2)
    # Coarse integer values so ties actually occur and the tie rule is exercised.
    x = rng.integers(0, 4, (n, c, h, w)).astype(np.float32)
    out, arg = maxpool2d_forward(x)
    ref_out, ref_arg = maxpool_direct(x)
    np.testing.assert_array_equal(out, ref_out)
    np.testing.assert_array_equal(arg, ref_arg)


def test_maxpool_backward_routes_to_winner():
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    _, arg = maxpool2d_forward(x)
    g = maxpool2d_backward(arg, np.array([[[[1.0]]]], np.float32), x.shape)
    np.testing.assert_array_equal(g, [[[[0, 0], [0, 1]]]])


def test_maxpool_backward_conserves_mass_and_zeroes_odd_edges():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 5, 7)).astype(np.float32)
    _, arg = maxpool2d_forward(x)
    go = rng.standard_normal((2, 3, 2, 3)).astype(np.float32)
    g = maxpool2d_backward(arg, go, x.shape)
    assert g.shape == x.shape
    np.testing.assert_allclose(g.sum(), go.sum(), rtol=1e-5)
    assert not g[:, :, 4, :].any() and not g[:, :, :, 6].any()
    assert np.count_nonzero(g) == go.size


@pytest.mark.parametrize("seed", range(5))
def test_maxpool_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(2, 7)), int(rng.integers(2, 7)))
    x = tie_free(rng, shape)
    out, arg = maxpool2d_forward(x)
    r = rng.standard_normal(out.shape)
    analytic = maxpool2d_backward(arg, r, x.shape)
    numeric = numerical_gradient(lambda v: np.sum(maxpool2d_forward(v)[0] * r), x)
    assert relative_error(analytic, numeric) < 1e-3


def test_maxpool_backward_shape_mismatch():
    with pytest.raises(ShapeError):
        maxpool2d_backward(np.zeros((1, 1, 2, 2), np.uint8), np.zeros((1, 1, 3, 3), np.float32), (1, 1, 4, 4))


# --- matmul / reshape -------------------------------------------------------

def test_matmul_identity():
    a = np.random.default_rng(0).standard_normal((4, 4)).astype(np.float32)
    np.testing.assert_array_equal(matmul(np.eye(4, dtype=np.float32), a), a)


def test_matmul_small():
    np.testing.assert_array_equal(matmul(tensor([[1, 2], [3, 4]]), tensor([[1], [1]])), [[3], [7]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((7, 5)).astype(np.float32)
    b = rng.standard_normal((5, 3)).astype(np.float32)
    np.testing.assert_allclose(matmul(a, b), matmul_triple_loop(a, b), atol=1e-5, rtol=0)


def test_matmul_dim_mismatch():
    with pytest.raises(ShapeError, match="inner"):
        matmul(np.zeros((2, 3), np.float32), np.zeros((2, 3), np.float32))
    with pytest.raises(ShapeError):
        matmul(np.zeros(3, np.float32), np.zeros((3, 1), np.float32))


def test_flatten_telinet_head():
    assert flatten(np.zeros((1, 32, 32, 32), np.float32)).shape == (1, 32768)


def test_flatten_row_major():
    x = tensor(range(1, 9), shape=(2, 1, 2, 2))
    np.testing.assert_array_equal(flatten(x), [[1, 2, 3, 4], [5, 6, 7, 8]])


def test_flatten_reshape_roundtrip():
    x = np.random.default_rng(0).standard_normal((3, 2, 4, 5)).astype(np.float32)
    np.testing.assert_array_equal(reshape(flatten(x), x.shape), x)


def test_reshape_preserves_count():
    with pytest.raises(ShapeError):
        reshape(np.zeros((2, 3), np.float32), (4, 2))


# --- purity and determinism ---------------------------------------------------

def test_kernels_are_pure_and_repeatable():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((3, 4, 9, 9)).astype(np.float32)
    w = rng.standard_normal((5, 4, 3, 3)).astype(np.float32)
    b = rng.standard_normal(5).astype(np.float32)
    g = rng.standard_normal((3, 5, 9, 9)).astype(np.float32)
    before = x.copy(), w.copy(), g.copy()
    a1, a2 = conv2d_forward(x, w, b), conv2d_forward(x, w, b)
    assert a1.tobytes() == a2.tobytes()
    for u, v in zip(conv2d_backward(x, w, g), conv2d_backward(x, w, g)):
        assert u.tobytes() == v.tobytes()
    p1, p2 = maxpool2d_forward(x), maxpool2d_forward(x)
    assert p1[0].tobytes() == p2[0].tobytes() and p1[1].tobytes() == p2[1].tobytes()
    for orig, now in zip(before, (x, w, g)):
        np.testing.assert_array_equal(orig, now)


def test_strict_mode_flag_scoped():
    assert not T.is_strict()
    with T.strict_deterministic():
        assert T.is_strict()
    assert not T.is_strict()
