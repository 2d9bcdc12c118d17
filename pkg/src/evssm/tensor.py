"""Dense float64 tensors and a reverse-mode gradient tape.

Everything downstream (scan, blocks, network, training) is built from the
operations in this module. Each op is a pure function that takes an optional
Tape as its first argument, returns freshly allocated Tensors, and appends a
gradient rule to the tape when one is supplied. Replaying the recorded rules
in reverse order propagates gradients to every registered parameter.

There is no broadcasting framework and no view machinery: shapes are checked
up front, data is contiguous row-major float64, and ops with identical inputs
produce bitwise-identical outputs. A Tape is single-threaded; use one tape
per training step.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, DeterminismError, DimensionError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_f64(data):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Dense N-d array of float64 values with shape metadata."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = _as_f64(data)

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class ComplexGrid:
    """Half-spectrum of a real 2D transform: complex128, shape [C, H, W//2+1].

    numpy's complex128 stores interleaved real/imaginary float64 pairs, which
    is the storage layout this type guarantees.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.complex128)

    @property
    def shape(self):
        return tuple(self.data.shape)

    def __repr__(self):
        return f"ComplexGrid(shape={self.shape})"


class Tape:
    """Ordered record of operations plus a parameter registry.

    backward() walks the record in reverse, calling each op's gradient rule
    with the accumulated output gradient. Parameters registered via param()
    keep their gradients accessible by name afterwards; parameters that never
    influenced the loss report exactly-zero gradients.
    """

    def __init__(self):
        self._steps = []            # (output value, backward fn)
        self._grads = {}            # id(value) -> ndarray accumulator
        self._params = {}           # name -> Tensor
        self._ran_backward = False

    # -- recording ---------------------------------------------------------

    def _push(self, out, backward_fn):
        self._steps.append((out, backward_fn))

    def _accum(self, value, grad):
        key = id(value)
        acc = self._grads.get(key)
        if acc is None:
            self._grads[key] = grad.copy() if isinstance(grad, np.ndarray) else np.asarray(grad)
        else:
            acc += grad

    # -- parameters ---------------------------------------------------------

    def param(self, name, value):
        """Register a named parameter; returns the Tensor to compute with."""
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        self._params[name] = t
        return t

    def grad(self, name):
        """Gradient of the loss w.r.t. a registered parameter (zeros if unused)."""
        t = self._params[name]
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def grads(self):
        return {name: self.grad(name) for name in self._params}

    # -- reverse pass --------------------------------------------------------

    def backward(self, loss):
        if self._ran_backward:
            raise RuntimeError("tape already replayed; use one tape per step")
        if loss.data.ndim != 0:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._ran_backward = True
        self._grads[id(loss)] = np.ones_like(loss.data)
        for out, fn in reversed(self._steps):
            g = self._grads.pop(id(out), None)
            if g is not None:
                fn(g)


def _record(tape, out, backward_fn):
    if tape is not None:
        tape._push(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(tape, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g):
        tape._accum(a, g)
        tape._accum(b, g)

    return _record(tape, out, bwd)


def mul(tape, a, b):
    """Hadamard product (used for the gating path)."""
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def bwd(g):
        tape._accum(a, g * b.data)
        tape._accum(b, g * a.data)

    return _record(tape, out, bwd)


def scale(tape, x, c):
    c = float(c)
    out = Tensor(x.data * c)

    def bwd(g):
        tape._accum(x, g * c)

    return _record(tape, out, bwd)


def tensor_sum(tape, x):
    out = Tensor(x.data.sum())

    def bwd(g):
        tape._accum(x, np.full_like(x.data, float(g)))

    return _record(tape, out, bwd)


def l1_mean(tape, a, b):
    """Mean absolute difference; the pixel-space half of the training loss."""
    if a.shape != b.shape:
        raise DimensionError(f"l1_mean: shapes {a.shape} vs {b.shape}")
    d = a.data - b.data
    out = Tensor(np.abs(d).mean())
    n = d.size

    def bwd(g):
        s = np.sign(d) * (float(g) / n)
        tape._accum(a, s)
        tape._accum(b, -s)

    return _record(tape, out, bwd)


def split(tape, x, sizes, axis=1):
    """Split along an axis into consecutive blocks of the given widths."""
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split: widths {sizes} do not cover extent {x.shape[axis]}")
    parts = []
    start = 0
    for width in sizes:
        sl = [slice(None)] * x.data.ndim
        sl[axis] = slice(start, start + width)
        sl = tuple(sl)
        part = Tensor(x.data[sl])

        def bwd(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            tape._accum(x, full)

        _record(tape, part, bwd)
        parts.append(part)
        start += width
    return tuple(parts)


def gelu(tape, x):
    """Exact-erf GeLU: x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        tape._accum(x, g * (cdf + x.data * pdf))

    return _record(tape, out, bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def linear(tape, x, weight, bias):
    """y[l, j] = sum_i x[l, i] * weight[i, j] + bias[j]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"linear: need 2D x and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: x {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    out = Tensor(x.data @ weight.data + bias.data)

    def bwd(g):
        tape._accum(x, g @ weight.data.T)
        tape._accum(weight, x.data.T @ g)
        tape._accum(bias, g.sum(axis=0))

    return _record(tape, out, bwd)


def layer_norm(tape, x, gain, shift, eps=1e-6):
    """Normalize each position over the channel axis, then apply an affine map."""
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm: need [L, C], got {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"layer_norm: gain/shift {gain.shape}/{shift.shape} vs C={c}")
    mean = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor(xhat * gain.data + shift.data)

    def bwd(g):
        gh = g * gain.data
        m1 = gh.mean(axis=1, keepdims=True)
        m2 = (gh * xhat).mean(axis=1, keepdims=True)
        tape._accum(x, inv_std * (gh - m1 - xhat * m2))
        tape._accum(gain, (g * xhat).sum(axis=0))
        tape._accum(shift, g.sum(axis=0))

    return _record(tape, out, bwd)


# ---------------------------------------------------------------------------
# convolutions (zero padding, shape preserving)
# ---------------------------------------------------------------------------


def _pad2d(a, p):
    out = np.zeros(a.shape[:-2] + (a.shape[-2] + 2 * p, a.shape[-1] + 2 * p))
    out[..., p:p + a.shape[-2], p:p + a.shape[-1]] = a
    return out


def dwconv2d(tape, x, kernel):
    """Per-channel 2D cross-correlation, kernel [C, k, k], zero padding (k-1)/2."""
    if x.data.ndim != 3 or kernel.data.ndim != 3:
        raise DimensionError(f"dwconv2d: need [C,H,W] and [C,k,k], got {x.shape}, {kernel.shape}")
    c, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ConfigurationError(f"dwconv2d: kernel must be square with odd size, got {kernel.shape}")
    if x.shape[0] != c:
        raise DimensionError(f"dwconv2d: channels {x.shape[0]} vs kernel {c}")
    p = k // 2
    h, w = x.shape[1:]
    xp = _pad2d(x.data, p)
    y = np.zeros_like(x.data)
    for u in range(k):
        for v in range(k):
            y += kernel.data[:, u, v][:, None, None] * xp[:, u:u + h, v:v + w]
    out = Tensor(y)

    def bwd(g):
        # adjoint of tap (u, v) reads the padded gradient shifted the other way
        gp = _pad2d(g, p)
        gx = np.zeros_like(x.data)
        gk = np.empty_like(kernel.data)
        for u in range(k):
            for v in range(k):
                gx += kernel.data[:, u, v][:, None, None] * \
                    gp[:, 2 * p - u:2 * p - u + h, 2 * p - v:2 * p - v + w]
                gk[:, u, v] = (g * xp[:, u:u + h, v:v + w]).sum(axis=(1, 2))
        tape._accum(x, gx)
        tape._accum(kernel, gk)

    return _record(tape, out, bwd)


def dwconv1d(tape, x, kernel):
    """Per-channel 1D cross-correlation along the sequence axis of [L, C]."""
    if x.data.ndim != 2 or kernel.data.ndim != 2:
        raise DimensionError(f"dwconv1d: need [L,C] and [C,k], got {x.shape}, {kernel.shape}")
    c, k = kernel.shape
    if k % 2 == 0:
        raise ConfigurationError(f"dwconv1d: kernel size must be odd, got {k}")
    if x.shape[1] != c:
        raise DimensionError(f"dwconv1d: channels {x.shape[1]} vs kernel {c}")
    p = k // 2
    length = x.shape[0]
    xp = np.zeros((length + 2 * p, c))
    xp[p:p + length] = x.data
    y = np.zeros_like(x.data)
    for u in range(k):
        y += kernel.data[:, u] * xp[u:u + length]
    out = Tensor(y)

    def bwd(g):
        gp = np.zeros((length + 2 * p, c))
        gp[p:p + length] = g
        gx = np.zeros_like(x.data)
        gk = np.empty_like(kernel.data)
        for u in range(k):
            gx += kernel.data[:, u] * gp[2 * p - u:2 * p - u + length]
            gk[:, u] = (g * xp[u:u + length]).sum(axis=0)
        tape._accum(x, gx)
        tape._accum(kernel, gk)

    return _record(tape, out, bwd)


def conv2d(tape, x, weight, bias):
    """Full 2D convolution [Cin,H,W] -> [Cout,H,W], weight [Cout,Cin,k,k]."""
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d: need [Cin,H,W] and [Cout,Cin,k,k], got {x.shape}, {weight.shape}")
    cout, cin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel must be square with odd size, got {weight.shape}")
    if x.shape[0] != cin:
        raise DimensionError(f"conv2d: input channels {x.shape[0]} vs weight {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias {bias.shape} vs Cout={cout}")
    p = k // 2
    h, w = x.shape[1:]
    xp = _pad2d(x.data, p)
    y = np.zeros((cout, h, w))
    for u in range(k):
        for v in range(k):
            y += np.einsum("oc,chw->ohw", weight.data[:, :, u, v], xp[:, u:u + h, v:v + w])
    y += bias.data[:, None, None]
    out = Tensor(y)

    def bwd(g):
        gp = _pad2d(g, p)
        gx = np.zeros_like(x.data)
        gw = np.empty_like(weight.data)
        for u in range(k):
            for v in range(k):
                gx += np.einsum("oc,ohw->chw", weight.data[:, :, u, v],
                                gp[:, 2 * p - u:2 * p - u + h, 2 * p - v:2 * p - v + w])
                gw[:, :, u, v] = np.einsum("ohw,chw->oc", g, xp[:, u:u + h, v:v + w])
        tape._accum(x, gx)
        tape._accum(weight, gw)
        tape._accum(bias, g.sum(axis=(1, 2)))

    return _record(tape, out, bwd)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _resample_plan(in_len, out_len):
    """Align-corners-false sampling indices and weights for one axis."""
    s = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    f = np.floor(s)
    w1 = s - f
    i0 = np.clip(f.astype(np.intp), 0, in_len - 1)
    i1 = np.clip(f.astype(np.intp) + 1, 0, in_len - 1)
    return i0, i1, 1.0 - w1, w1


def resample_axis_raw(data, axis, out_len):
    """Linear resample of a plain array along one axis (no tape)."""
    i0, i1, w0, w1 = _resample_plan(data.shape[axis], out_len)
    moved = np.moveaxis(data, axis, 0)
    res = w0.reshape((-1,) + (1,) * (moved.ndim - 1)) * moved[i0] \
        + w1.reshape((-1,) + (1,) * (moved.ndim - 1)) * moved[i1]
    return np.moveaxis(res, 0, axis)


def _resample_axis(tape, x, axis, out_len):
    in_len = x.shape[axis]
    i0, i1, w0, w1 = _resample_plan(in_len, out_len)
    w0c = w0.reshape((-1,) + (1,) * (x.data.ndim - 1))
    w1c = w1.reshape((-1,) + (1,) * (x.data.ndim - 1))
    moved = np.moveaxis(x.data, axis, 0)
    out = Tensor(np.moveaxis(w0c * moved[i0] + w1c * moved[i1], 0, axis))

    def bwd(g):
        gm = np.moveaxis(g, axis, 0)
        acc = np.zeros((in_len,) + gm.shape[1:])
        np.add.at(acc, i0, w0c * gm)
        np.add.at(acc, i1, w1c * gm)
        tape._accum(x, np.moveaxis(acc, 0, axis))

    return _record(tape, out, bwd)


def bilinear_resize(tape, x, factor):
    """Bilinear up/downsampling of [C, H, W] by a factor of 2 or 0.5."""
    if x.data.ndim != 3:
        raise DimensionError(f"bilinear_resize: need [C,H,W], got {x.shape}")
    if factor not in (0.5, 2):
        raise ConfigurationError(f"bilinear_resize: factor must be 0.5 or 2, got {factor}")
    _, h, w = x.shape
    if factor == 0.5 and (h % 2 or w % 2):
        raise DimensionError(f"bilinear_resize: extents ({h}, {w}) must be even for factor 0.5")
    out_h, out_w = int(round(h * factor)), int(round(w * factor))
    y = _resample_axis(tape, x, 1, out_h)
    return _resample_axis(tape, y, 2, out_w)


# ---------------------------------------------------------------------------
# real 2D FFT pair
# ---------------------------------------------------------------------------


def rfft2(tape, x):
    """Unnormalized forward real-to-complex 2D DFT per channel."""
    if x.data.ndim != 3:
        raise DimensionError(f"rfft2: need [C,H,W], got {x.shape}")
    _, h, w = x.shape
    out = ComplexGrid(np.fft.rfft2(x.data))

    def bwd(g):
        full = np.zeros(x.shape, dtype=np.complex128)
        full[:, :, :g.shape[2]] = g
        tape._accum(x, (h * w) * np.fft.ifft2(full).real)

    return _record(tape, out, bwd)


def irfft2(tape, grid, h, w):
    """Inverse of rfft2, scaled by 1/(H*W); round trip is the identity.

    The kept half-spectrum is taken as ground truth and mirrored with
    conjugation onto the dropped bins, so the op stays linear and
    well-defined even when per-bin scaling has broken Hermitian symmetry.
    """
    wh = w // 2 + 1
    if grid.data.ndim != 3 or grid.shape[1] != h or grid.shape[2] != wh:
        raise DimensionError(f"irfft2: grid {grid.shape} does not match H={h}, W={w}")
    out = Tensor(np.fft.irfft2(grid.data, s=(h, w)))

    idx_h = (-np.arange(h)) % h
    src_w = w - np.arange(wh, w)

    def bwd(g):
        gfull = np.fft.fft2(g) / (h * w)
        gy = gfull[:, :, :wh].copy()
        if w > wh:
            mirror = np.zeros_like(gy)
            mirror[:, idx_h[:, None], src_w[None, :]] = np.conj(gfull[:, :, wh:])
            gy += mirror
        tape._accum(grid, gy)

    return _record(tape, out, bwd)


def complex_scale(tape, grid, weights):
    """Scale every complex bin by a real factor (per channel, per frequency)."""
    if weights.shape != grid.shape:
        raise ConfigurationError(
            f"complex_scale: weights {weights.shape} do not match grid {grid.shape}")
    out = ComplexGrid(grid.data * weights.data)

    def bwd(g):
        tape._accum(weights, (g * np.conj(grid.data)).real)
        tape._accum(grid, g * weights.data)

    return _record(tape, out, bwd)


def spectral_l1(tape, a, b):
    """Mean L1 distance over half-spectrum bins, real and imaginary separately."""
    if a.shape != b.shape:
        raise DimensionError(f"spectral_l1: shapes {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = 2 * d.size
    out = Tensor((np.abs(d.real).sum() + np.abs(d.imag).sum()) / n)

    def bwd(g):
        s = (float(g) / n) * (np.sign(d.real) + 1j * np.sign(d.imag))
        tape._accum(a, s)
        tape._accum(b, -s)

    return _record(tape, out, bwd)


def bind(tape, name, value):
    """Wrap an array as a Tensor, registering it on the tape when one is given."""
    if tape is not None:
        return tape.param(name, value)
    return value if isinstance(value, Tensor) else Tensor(value)


def trunc_normal(rng, shape, std=0.02):
    """Normal draws truncated to two standard deviations (resampled)."""
    out = rng.standard_normal(shape)
    mask = np.abs(out) > 2.0
    while mask.any():
        out[mask] = rng.standard_normal(int(mask.sum()))
        mask = np.abs(out) > 2.0
    return out * std


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(f, params, step=1e-4, max_coords_per_param=None, rng_seed=0):
    """Compare tape gradients of a scalar function against central differences.

    f(tape, bound) -> scalar Tensor, where bound maps the names in `params`
    to Tensors. Returns the max over checked coordinates of
    |analytic - numeric| / max(1, |numeric|). When max_coords_per_param is
    set, that many coordinates per parameter are probed (seeded choice);
    otherwise every coordinate is.
    """
    arrays = {k: _as_f64(v.data if isinstance(v, Tensor) else v) for k, v in params.items()}

    def run(arrs, tape=None):
        if tape is None:
            bound = {k: Tensor(v) for k, v in arrs.items()}
        else:
            bound = {k: tape.param(k, v.copy()) for k, v in arrs.items()}
        return f(tape, bound)

    out1 = run(arrays).data.copy()
    out2 = run(arrays).data.copy()
    if not np.array_equal(out1, out2):
        raise DeterminismError("function returned differing values on identical inputs")

    tape = Tape()
    loss = run(arrays, tape)
    tape.backward(loss)
    analytic = {k: tape.grad(k) for k in arrays}

    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    for name, base in arrays.items():
        flat = base.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        ga = analytic[name].reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            hi = float(run(arrays).data)
            flat[idx] = orig - step
            lo = float(run(arrays).data)
            flat[idx] = orig
            numeric = (hi - lo) / (2.0 * step)
            err = abs(ga[idx] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
