"""Tensor op contracts: spec'd examples against independent oracles."""

import mpmath
import numpy as np
import pytest

from evssm import tensor as T
from evssm.errors import (ConfigurationError, DeterminismError, DimensionError)

rng = np.random.default_rng(2024)


def t(arr):
    return T.Tensor(np.asarray(arr, dtype=np.float64))


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------


def test_linear_identity():
    y = T.linear(None, t([[1.0, 2.0]]), t(np.eye(2)), t([0.0, 0.0]))
    assert np.array_equal(y.data, [[1.0, 2.0]])


def test_linear_bias():
    y = T.linear(None, t([[1.0, 2.0]]), t([[1.0, 0.0], [0.0, 1.0]]), t([3.0, 4.0]))
    assert np.array_equal(y.data, [[4.0, 6.0]])


def test_linear_matches_triple_loop_oracle():
    x = rng.standard_normal((4, 3))
    w = rng.standard_normal((3, 5))
    b = rng.standard_normal(5)
    want = np.zeros((4, 5))
    for l in range(4):
        for j in range(5):
            acc = b[j]
            for i in range(3):
                acc += x[l, i] * w[i, j]
            want[l, j] = acc
    got = T.linear(None, t(x), t(w), t(b)).data
    assert np.abs(got - want).max() < 1e-12


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(4, 3\).*\(2, 5\)"):
        T.linear(None, t(np.zeros((4, 3))), t(np.zeros((2, 5))), t(np.zeros(5)))


# ---------------------------------------------------------------------------
# depthwise convolutions
# ---------------------------------------------------------------------------


def test_dwconv2d_delta_kernel_is_identity():
    x = rng.standard_normal((3, 5, 4))
    k = np.zeros((3, 3, 3))
    k[:, 1, 1] = 1.0
    y = T.dwconv2d(None, t(x), t(k))
    assert np.array_equal(y.data, x)


def test_dwconv2d_all_ones_direct_summation():
    x = np.ones((1, 3, 3))
    k = np.ones((1, 3, 3))
    y = T.dwconv2d(None, t(x), t(k)).data
    # oracle: direct summation with explicit zero padding
    want = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for u in range(3):
                for v in range(3):
                    ii, jj = i + u - 1, j + v - 1
                    if 0 <= ii < 3 and 0 <= jj < 3:
                        acc += x[0, ii, jj]
            want[i, j] = acc
    assert want[1, 1] == 9 and want[0, 0] == 4
    assert np.array_equal(y[0], want)


def test_dwconv2d_linearity():
    x = rng.standard_normal((2, 6, 5))
    k = rng.standard_normal((2, 3, 3))
    y1 = T.dwconv2d(None, t(3.5 * x), t(k)).data
    y2 = 3.5 * T.dwconv2d(None, t(x), t(k)).data
    assert np.abs(y1 - y2).max() < 1e-12


def test_dwconv2d_even_kernel_rejected():
    with pytest.raises(ConfigurationError):
        T.dwconv2d(None, t(np.zeros((1, 4, 4))), t(np.zeros((1, 2, 2))))


def test_dwconv1d_delta_kernel_is_identity():
    x = rng.standard_normal((9, 2))
    k = np.zeros((2, 7))
    k[:, 3] = 1.0
    assert np.array_equal(T.dwconv1d(None, t(x), t(k)).data, x)


def test_dwconv1d_impulse_oracle():
    x = np.array([[1.0], [0.0], [0.0], [0.0]])
    k = np.array([[1.0, 1.0, 1.0]])
    y = T.dwconv1d(None, t(x), t(k)).data
    assert np.array_equal(y.ravel(), [1.0, 1.0, 0.0, 0.0])


def test_dwconv1d_partition_of_unity_interior():
    x = np.full((10, 3), 0.7)
    k = rng.uniform(0.1, 1.0, (3, 5))
    k /= k.sum(axis=1, keepdims=True)
    y = T.dwconv1d(None, t(x), t(k)).data
    assert np.abs(y[2:-2] - 0.7).max() < 1e-12


def test_dwconv1d_even_kernel_rejected():
    with pytest.raises(ConfigurationError):
        T.dwconv1d(None, t(np.zeros((4, 1))), t(np.zeros((1, 4))))


# ---------------------------------------------------------------------------
# gelu
# ---------------------------------------------------------------------------


def test_gelu_zero():
    assert T.gelu(None, t([0.0])).data[0] == 0.0


def test_gelu_asymptote():
    assert abs(T.gelu(None, t([10.0])).data[0] - 10.0) < 1e-6


def test_gelu_at_one_vs_high_precision_erf():
    mpmath.mp.dps = 50
    want = float(mpmath.mpf(1) * mpmath.mpf("0.5")
                 * (1 + mpmath.erf(mpmath.mpf(1) / mpmath.sqrt(2))))
    got = T.gelu(None, t([1.0])).data[0]
    assert abs(got - want) < 1e-14


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------


def test_layer_norm_constant_row_collapses():
    x = np.full((3, 6), 2.5)
    y = T.layer_norm(None, t(x), t(np.ones(6)), t(np.zeros(6)))
    assert np.abs(y.data).max() < 1e-3   # eps keeps it from exact zero division


def test_layer_norm_normalization_contract():
    x = rng.standard_normal((7, 32))
    y = T.layer_norm(None, t(x), t(np.ones(32)), t(np.zeros(32)), eps=1e-12).data
    assert np.abs(y.mean(axis=1)).max() < 1e-10
    assert np.abs(y.var(axis=1) - 1.0).max() < 1e-6


def test_layer_norm_closed_form_two_values():
    y = T.layer_norm(None, t([[1.0, 3.0]]), t(np.ones(2)), t(np.zeros(2)), eps=0.0)
    assert np.abs(y.data - [[-1.0, 1.0]]).max() < 1e-12


# ---------------------------------------------------------------------------
# bilinear resize
# ---------------------------------------------------------------------------


def test_resize_constant_preserved():
    x = np.full((2, 4, 6), 0.37)
    up = T.bilinear_resize(None, t(x), 2)
    down = T.bilinear_resize(None, t(x), 0.5)
    assert up.shape == (2, 8, 12) and down.shape == (2, 2, 3)
    assert np.abs(up.data - 0.37).max() < 1e-12
    assert np.abs(down.data - 0.37).max() < 1e-12


def test_resize_up_then_down_constant_identity():
    x = np.full((1, 4, 4), 0.61)
    y = T.bilinear_resize(None, T.bilinear_resize(None, t(x), 2), 0.5)
    assert np.abs(y.data - x).max() < 1e-12


def test_resize_2x2_against_sampling_formula_oracle():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    got = T.bilinear_resize(None, t(x), 2).data[0]

    def sample(src, i, j):
        # align-corners-false source coordinate with edge clamping
        sy = (i + 0.5) / 2 - 0.5
        sx = (j + 0.5) / 2 - 0.5
        y0, x0 = int(np.floor(sy)), int(np.floor(sx))
        fy, fx = sy - y0, sx - x0
        val = 0.0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy = min(max(y0 + dy, 0), 1)
                xx = min(max(x0 + dx, 0), 1)
                val += wy * wx * src[yy, xx]
        return val

    want = np.array([[sample(x[0], i, j) for j in range(4)] for i in range(4)])
    assert np.abs(got - want).max() < 1e-12


def test_resize_odd_extent_down_rejected():
    with pytest.raises(DimensionError):
        T.bilinear_resize(None, t(np.zeros((1, 5, 4))), 0.5)


def test_resize_bad_factor_rejected():
    with pytest.raises(ConfigurationError):
        T.bilinear_resize(None, t(np.zeros((1, 4, 4))), 3)


# ---------------------------------------------------------------------------
# real FFT pair
# ---------------------------------------------------------------------------


def naive_rdft2(x):
    """O(N^2) half-spectrum DFT, the oracle for rfft2."""
    c, h, w = x.shape
    wh = w // 2 + 1
    out = np.zeros((c, h, wh), dtype=complex)
    for ch in range(c):
        for kh in range(h):
            for kw in range(wh):
                acc = 0.0 + 0.0j
                for nh in range(h):
                    for nw in range(w):
                        ang = -2.0j * np.pi * (kh * nh / h + kw * nw / w)
                        acc += x[ch, nh, nw] * np.exp(ang)
                out[ch, kh, kw] = acc
    return out


def test_rfft2_delta_image_flat_spectrum():
    x = np.zeros((1, 4, 6))
    x[0, 0, 0] = 1.0
    g = T.rfft2(None, t(x))
    assert np.abs(g.data - 1.0).max() < 1e-12


def test_rfft2_constant_image_dc_only():
    x = np.full((2, 4, 4), 0.3)
    g = T.rfft2(None, t(x)).data
    assert abs(g[0, 0, 0] - 0.3 * 16) < 1e-12
    masked = g.copy()
    masked[:, 0, 0] = 0.0
    assert np.abs(masked).max() < 1e-12


def test_rfft2_matches_naive_dft_and_parseval():
    x = rng.uniform(-1.0, 1.0, (1, 4, 4))
    got = T.rfft2(None, t(x)).data
    want = naive_rdft2(x)
    assert np.abs(got - want).max() < 1e-10

    # Parseval with interior columns double-counted
    h, w = 4, 4
    wh = w // 2 + 1
    weights = np.ones(wh)
    weights[1:wh - 1] = 2.0   # col 0 and Nyquist col appear once
    lhs = (x ** 2).sum()
    rhs = (np.abs(got) ** 2 * weights).sum() / (h * w)
    assert abs(lhs - rhs) / abs(lhs) < 1e-8


def test_irfft2_round_trip_tight():
    x = rng.uniform(-1.0, 1.0, (3, 6, 5))
    g = T.rfft2(None, t(x))
    back = T.irfft2(None, g, 6, 5)
    assert np.abs(back.data - x).max() < 1e-10


def test_irfft2_shape_mismatch_rejected():
    g = T.rfft2(None, t(rng.standard_normal((1, 4, 4))))
    with pytest.raises(DimensionError):
        T.irfft2(None, g, 4, 8)


def test_fft_vjps_match_full_jacobian():
    """Columns of the analytic adjoints vs numeric Jacobian on a tiny grid."""
    h, w = 3, 4
    wh = w // 2 + 1
    x0 = rng.standard_normal((1, h, w))
    step = 1e-6

    # rfft2: check gx for a random downstream cotangent
    cot = rng.standard_normal((1, h, wh)) + 1j * rng.standard_normal((1, h, wh))

    def loss_of(x):
        g = T.rfft2(None, T.Tensor(x)).data
        return (g.real * cot.real + g.imag * cot.imag).sum()

    tape = T.Tape()
    xt = tape.param("x", x0.copy())
    g = T.rfft2(tape, xt)
    tape._accum(g, cot)   # inject cotangent directly
    for out, fn in reversed(tape._steps):
        gg = tape._grads.pop(id(out), None)
        if gg is not None:
            fn(gg)
    analytic = tape.grad("x")
    for idx in np.ndindex(x0.shape):
        xp = x0.copy(); xp[idx] += step
        xm = x0.copy(); xm[idx] -= step
        numeric = (loss_of(xp) - loss_of(xm)) / (2 * step)
        assert abs(analytic[idx] - numeric) < 1e-5

    # irfft2: real cotangent, complex input gradient
    y0 = rng.standard_normal((1, h, wh)) + 1j * rng.standard_normal((1, h, wh))
    cot_r = rng.standard_normal((1, h, w))

    def loss_irfft(y):
        out = T.irfft2(None, T.ComplexGrid(y), h, w).data
        return (out * cot_r).sum()

    tape = T.Tape()
    grid = T.ComplexGrid(y0.copy())
    out = T.irfft2(tape, grid, h, w)
    tape._accum(out, cot_r)
    for o, fn in reversed(tape._steps):
        gg = tape._grads.pop(id(o), None)
        if gg is not None:
            fn(gg)
    ganalytic = tape._grads[id(grid)]
    for idx in np.ndindex(y0.shape):
        for part, inc in (("real", step), ("imag", 1j * step)):
            yp = y0.copy(); yp[idx] += inc
            ym = y0.copy(); ym[idx] -= inc
            numeric = (loss_irfft(yp) - loss_irfft(ym)) / (2 * step)
            got = ganalytic[idx].real if part == "real" else ganalytic[idx].imag
            assert abs(got - numeric) < 1e-5


# ---------------------------------------------------------------------------
# grad_check oracle itself
# ---------------------------------------------------------------------------


def test_grad_check_quadratic():
    x = rng.standard_normal((4, 3))

    def f(tape, p):
        return T.tensor_sum(tape, T.mul(tape, p["x"], p["x"]))

    assert T.grad_check(f, {"x": x}, step=1e-6) < 1e-8


def test_grad_check_constant_function_zero_gradient():
    def f(tape, p):
        return T.tensor_sum(tape, T.mul(tape, T.Tensor([1.0]), T.Tensor([1.0])))

    tape = T.Tape()
    xt = tape.param("x", rng.standard_normal(5))
    out = f(tape, {"x": xt})
    tape.backward(out)
    assert np.array_equal(tape.grad("x"), np.zeros(5))


def test_grad_check_rejects_nondeterminism():
    calls = []

    def f(tape, p):
        calls.append(1)
        return T.tensor_sum(tape, T.scale(tape, p["x"], float(len(calls))))

    with pytest.raises(DeterminismError):
        T.grad_check(f, {"x": np.ones(2)})


# ---------------------------------------------------------------------------
# module invariants
# ---------------------------------------------------------------------------


def test_ops_are_pure_bitwise():
    x = rng.standard_normal((5, 4))
    a = T.gelu(None, t(x)).data
    b = T.gelu(None, t(x)).data
    assert np.array_equal(a, b)
    w = rng.standard_normal((4, 4))
    bias = rng.standard_normal(4)
    y1 = T.linear(None, t(x), t(w), t(bias)).data
    y2 = T.linear(None, t(x), t(w), t(bias)).data
    assert np.array_equal(y1, y2)


def test_unused_parameter_gradient_is_exact_zero():
    tape = T.Tape()
    used = tape.param("used", np.ones(3))
    tape.param("unused", np.ones(4))
    out = T.tensor_sum(tape, T.mul(tape, used, used))
    tape.backward(out)
    assert np.array_equal(tape.grad("unused"), np.zeros(4))
    assert np.array_equal(tape.grad("used"), 2 * np.ones(3))


def test_split_covers_and_rejects():
    x = t(rng.standard_normal((4, 6)))
    a, b, c = T.split(None, x, [2, 3, 1], axis=1)
    assert a.shape == (4, 2) and b.shape == (4, 3) and c.shape == (4, 1)
    assert np.array_equal(np.concatenate([a.data, b.data, c.data], axis=1), x.data)
    with pytest.raises(DimensionError):
        T.split(None, x, [2, 2], axis=1)
