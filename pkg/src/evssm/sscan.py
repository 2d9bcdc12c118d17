"""Selective scan core: ZOH discretization and the input-dependent recurrence.

The recurrence per sequence position t, channel c, and state n is

    h[t] = Abar[t] * h[t-1] + Bbar[t] * x[t]
    y[t] = sum_n C[t, n] * h[t, c, n] + D[c] * x[t, c]

with Abar = exp(delta * A) and Bbar = (exp(delta*A) - 1) / (delta*A) * delta * B.
A is diagonal and strictly negative (stored as log(-A)), so 0 < Abar < 1 for
any positive step and the state stays bounded.

Two equivalent evaluation strategies are provided. The sequential form walks
the recurrence one step at a time and serves as the reference. The chunked
form exploits that affine maps compose associatively: each chunk is scanned
locally from a zero state, chunk carries are combined, and local results are
corrected by the incoming carry. Both share one hand-derived gradient rule,
whose core is the same affine scan run in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DimensionError, DomainError
from .tensor import Tensor, _record

_SERIES_EPS = 1e-8      # |delta*A| below this: Bbar by first-order series
_DSERIES_EPS = 1e-3     # |delta*A| below this: phi' by series (cancellation guard)


@dataclass
class SSMParams:
    """Learnable scan parameters: A_log stores log(-A) for diagonal negative A."""

    A_log: Tensor   # [Cinner, N]
    D: Tensor       # [Cinner]

    @property
    def state_dim(self):
        return self.A_log.shape[1]


@dataclass
class ScanInputs:
    """Input-dependent scan quantities; delta must already be positive."""

    x: Tensor       # [L, Cinner]
    delta: Tensor   # [L, Cinner]
    B: Tensor       # [L, N]
    C: Tensor       # [L, N]


def softplus_delta(tape, raw):
    """log(1 + exp(raw)), the positivity map for the step size."""
    out = Tensor(np.logaddexp(0.0, raw.data))

    def bwd(g):
        tape._accum(raw, g * expit(raw.data))

    return _record(tape, out, bwd)


def zoh_discretize(a_diag, b, delta):
    """Zero-order-hold step: Abar = exp(delta*A), Bbar = phi(delta*A)*delta*B.

    Elementwise with numpy broadcasting; phi(z) = (exp(z)-1)/z with the
    removable singularity evaluated by series below |z| = 1e-8.
    """
    a = np.asarray(a_diag, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta < 0):
        raise DomainError("zoh_discretize: delta must be nonnegative")
    da = delta * a
    abar = np.exp(da)
    bbar = _phi(da) * delta * b
    return abar, bbar


def _phi(z):
    small = np.abs(z) < _SERIES_EPS
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def _phi_from_exp(z, ez):
    """phi(z) reusing an existing exp(z); series guard against cancellation."""
    small = np.abs(z) < _DSERIES_EPS
    out = (ez - 1.0) / np.where(small, 1.0, z)
    if small.any():
        zs = z[small]
        out[small] = 1.0 + zs * (0.5 + zs / 6.0)
    return out


def _phi_prime_from_exp(z, ez):
    """phi'(z) reusing an existing exp(z)."""
    small = np.abs(z) < _DSERIES_EPS
    safe = np.where(small, 1.0, z)
    out = ((safe - 1.0) * ez + 1.0) / (safe * safe)
    if small.any():
        zs = z[small]
        out[small] = 0.5 + zs * (1.0 / 3.0 + zs / 8.0)
    return out


# ---------------------------------------------------------------------------
# affine scan kernels: h[t] = a[t] * h[t-1] + b[t], h[-1] = 0
# ---------------------------------------------------------------------------


def _affine_scan_seq(a, b):
    h = np.empty_like(b)
    prev = np.zeros_like(b[0])
    for t in range(b.shape[0]):
        prev = a[t] * prev + b[t]
        h[t] = prev
    return h


def _affine_scan_chunked(a, b, chunk):
    length = b.shape[0]
    chunk = max(1, min(int(chunk), length))
    nchunks = -(-length // chunk)
    pad = nchunks * chunk - length
    if pad:
        # identity affine elements past the end leave every real prefix intact
        a = np.concatenate([a, np.ones((pad,) + a.shape[1:])], axis=0)
        b = np.concatenate([b, np.zeros((pad,) + b.shape[1:])], axis=0)
    ar = a.reshape((nchunks, chunk) + a.shape[1:])
    br = b.reshape((nchunks, chunk) + b.shape[1:])

    local = np.empty_like(br)    # within-chunk scan from a zero state
    prod = np.empty_like(ar)     # running products of a within each chunk
    h_run = np.zeros_like(br[:, 0])
    a_run = None
    for s in range(chunk):
        h_run = ar[:, s] * h_run + br[:, s]
        a_run = ar[:, s].copy() if s == 0 else a_run * ar[:, s]
        local[:, s] = h_run
        prod[:, s] = a_run

    # sequential combine of per-chunk carries: state entering each chunk
    starts = np.empty_like(br[:, 0])
    carry = np.zeros_like(br[0, 0])
    for k in range(nchunks):
        starts[k] = carry
        carry = prod[k, -1] * carry + local[k, -1]

    h = local + prod * starts[:, None]
    return h.reshape((nchunks * chunk,) + b.shape[1:])[:length]


def default_chunk(length):
    """Chunk width minimizing python-level loop steps (~ 2*sqrt(L))."""
    return max(1, int(round(np.sqrt(length))))


# ---------------------------------------------------------------------------
# selective scan
# ---------------------------------------------------------------------------


def _check_scan_shapes(params, inputs):
    x, delta, b_in, c_in = inputs.x, inputs.delta, inputs.B, inputs.C
    length, cin = x.shape
    n = params.state_dim
    if delta.shape != (length, cin):
        raise DimensionError(f"scan: delta {delta.shape} vs x {x.shape}")
    if b_in.shape != (length, n) or c_in.shape != (length, n):
        raise DimensionError(
            f"scan: B {b_in.shape} / C {c_in.shape} must be [{length}, {n}]")
    if params.A_log.shape != (cin, n):
        raise DimensionError(f"scan: A_log {params.A_log.shape} vs ({cin}, {n})")
    if params.D.shape != (cin,):
        raise DimensionError(f"scan: D {params.D.shape} vs ({cin},)")


def _selective_scan(tape, params, inputs, scan_fn):
    _check_scan_shapes(params, inputs)
    x, delta, b_in, c_in = inputs.x, inputs.delta, inputs.B, inputs.C
    if np.any(delta.data < 0):
        raise DomainError("scan: delta must be nonnegative")

    a = -np.exp(params.A_log.data)                       # [C, N]
    da = delta.data[:, :, None] * a[None, :, :]          # [L, C, N]
    abar = np.exp(da)
    phi = _phi_from_exp(da, abar)
    bbar = phi * delta.data[:, :, None] * b_in.data[:, None, :]
    h = scan_fn(abar, bbar * x.data[:, :, None])         # [L, C, N]
    y = np.einsum("lcn,ln->lc", h, c_in.data) + params.D.data * x.data
    out = Tensor(y)

    def bwd(gy):
        gx = gy * params.D.data
        gd_skip = (gy * x.data).sum(axis=0)
        gc = np.einsum("lcn,lc->ln", h, gy)
        gh = gy[:, :, None] * c_in.data[:, None, :]

        # reverse-time affine scan: lam[t] = gh[t] + abar[t+1] * lam[t+1]
        a_next = np.concatenate([abar[1:], np.ones_like(abar[:1])], axis=0)
        lam = scan_fn(a_next[::-1], gh[::-1])[::-1]

        h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]], axis=0)
        gabar = lam * h_prev
        gbbar = lam * x.data[:, :, None]
        gx += np.einsum("lcn,lcn->lc", lam, bbar)

        gphi = gbbar * delta.data[:, :, None] * b_in.data[:, None, :]
        gb = np.einsum("lcn,lcn->ln", gbbar, phi * delta.data[:, :, None])
        gda = gabar * abar + gphi * _phi_prime_from_exp(da, abar)
        gdelta = np.einsum("lcn,lcn->lc", gbbar, phi * b_in.data[:, None, :]) \
            + np.einsum("lcn,cn->lc", gda, a)
        ga = np.einsum("lcn,lc->cn", gda, delta.data)

        tape._accum(x, gx)
        tape._accum(delta, gdelta)
        tape._accum(b_in, gb)
        tape._accum(c_in, gc)
        tape._accum(params.A_log, ga * a)   # dA/dA_log = -exp(A_log) = A
        tape._accum(params.D, gd_skip)

    return _record(tape, out, bwd)


def selective_scan_seq(tape, params, inputs):
    """Reference scan: one step of the recurrence per sequence position."""
    return _selective_scan(tape, params, inputs, _affine_scan_seq)


def selective_scan_chunked(tape, params, inputs, chunk=None):
    """Chunk-parallel scan; mathematically identical to the sequential form."""
    if chunk is not None and chunk < 1:
        raise DomainError(f"scan: chunk must be >= 1, got {chunk}")
    length = inputs.x.shape[0]
    width = default_chunk(length) if chunk is None else chunk
    return _selective_scan(
        tape, params, inputs, lambda a, b: _affine_scan_chunked(a, b, width))
