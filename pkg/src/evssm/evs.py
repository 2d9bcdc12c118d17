"""Efficient visual scan block and the two-block module built around it.

The block transforms its input per the module's schedule slot, flattens the
grid to a raster sequence, and runs a gated selective scan. The step size,
input and output mixing vectors of the scan are derived from the activated
branch by a linear projection followed by kernel-7 depthwise 1D convolutions,
so they carry neighborhood context rather than per-pixel values only.

The module wrapper adds pre-norm residual wiring and restores the block
output to the input's orientation before the residual addition, so features
enter and leave every module in canonical orientation regardless of the
schedule slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .edffn import EDFFNParams, bind_edffn, edffn_forward, init_edffn
from .errors import DimensionError
from .geometry import flatten, inverse_transform, transform, unflatten
from .sscan import (ScanInputs, SSMParams, selective_scan_chunked,
                    softplus_delta)
from .tensor import (Tensor, add, bind, dwconv1d, dwconv2d, gelu, layer_norm,
                     linear, mul, split, trunc_normal)

CONV1D_KERNEL = 7


@dataclass
class EVSBlockParams:
    in_proj_w: Tensor     # [C, 2*Cinner]
    in_proj_b: Tensor
    dw3: Tensor           # [Cinner, 3, 3]
    param_proj_w: Tensor  # [Cinner, Cinner + 2N] -> raw (delta, B, C)
    param_proj_b: Tensor
    conv_delta: Tensor    # [Cinner, 7]
    conv_B: Tensor        # [N, 7]
    conv_C: Tensor        # [N, 7]
    ssm: SSMParams
    norm_gain: Tensor     # [Cinner]
    norm_shift: Tensor
    out_proj_w: Tensor    # [Cinner, C]
    out_proj_b: Tensor


@dataclass
class EVSSModuleParams:
    """One network unit: scan block plus FFN block with their pre-norms."""

    norm1_gain: Tensor
    norm1_shift: Tensor
    evs: EVSBlockParams
    norm2_gain: Tensor
    norm2_shift: Tensor
    ffn: EDFFNParams


def _delta_kernel(channels, k):
    arr = np.zeros((channels, k))
    arr[:, k // 2] = 1.0
    return arr


def init_evs_block(rng, channels, expansion, state_dim):
    """Parameter arrays for one scan block.

    Depthwise kernels start as identity taps, the step-size bias is drawn so
    the initial step lands in [1e-3, 1e-1], and the decay rates span 1..N
    per channel.
    """
    ci = expansion * channels
    n = state_dim
    dw3 = np.zeros((ci, 3, 3))
    dw3[:, 1, 1] = 1.0
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), ci))
    proj_b = np.zeros(ci + 2 * n)
    proj_b[:ci] = np.log(np.expm1(dt))     # softplus(bias) == dt
    return {
        "in_proj.w": trunc_normal(rng, (channels, 2 * ci)),
        "in_proj.b": np.zeros(2 * ci),
        "dw3": dw3,
        "param_proj.w": trunc_normal(rng, (ci, ci + 2 * n)),
        "param_proj.b": proj_b,
        "conv_delta": _delta_kernel(ci, CONV1D_KERNEL),
        "conv_B": _delta_kernel(n, CONV1D_KERNEL),
        "conv_C": _delta_kernel(n, CONV1D_KERNEL),
        "ssm.A_log": np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (ci, 1)),
        "ssm.D": np.ones(ci),
        "norm.gain": np.ones(ci),
        "norm.shift": np.zeros(ci),
        "out_proj.w": trunc_normal(rng, (ci, channels)),
        "out_proj.b": np.zeros(channels),
    }


def bind_evs_block(tape, flat, prefix):
    def take(key):
        return bind(tape, f"{prefix}.{key}", flat[f"{prefix}.{key}"])

    return EVSBlockParams(
        in_proj_w=take("in_proj.w"), in_proj_b=take("in_proj.b"),
        dw3=take("dw3"),
        param_proj_w=take("param_proj.w"), param_proj_b=take("param_proj.b"),
        conv_delta=take("conv_delta"), conv_B=take("conv_B"), conv_C=take("conv_C"),
        ssm=SSMParams(A_log=take("ssm.A_log"), D=take("ssm.D")),
        norm_gain=take("norm.gain"), norm_shift=take("norm.shift"),
        out_proj_w=take("out_proj.w"), out_proj_b=take("out_proj.b"),
    )


def init_evss_module(rng, channels, expansion, state_dim, ratio, height, width):
    """Parameter arrays for one full module at a given feature resolution."""
    flat = {}
    flat["norm1.gain"] = np.ones(channels)
    flat["norm1.shift"] = np.zeros(channels)
    for key, val in init_evs_block(rng, channels, expansion, state_dim).items():
        flat[f"evs.{key}"] = val
    flat["norm2.gain"] = np.ones(channels)
    flat["norm2.shift"] = np.zeros(channels)
    for key, val in init_edffn(rng, channels, ratio, height, width).items():
        flat[f"ffn.{key}"] = val
    return flat


def bind_evss_module(tape, flat, prefix, ratio):
    return EVSSModuleParams(
        norm1_gain=bind(tape, f"{prefix}.norm1.gain", flat[f"{prefix}.norm1.gain"]),
        norm1_shift=bind(tape, f"{prefix}.norm1.shift", flat[f"{prefix}.norm1.shift"]),
        evs=bind_evs_block(tape, flat, f"{prefix}.evs"),
        norm2_gain=bind(tape, f"{prefix}.norm2.gain", flat[f"{prefix}.norm2.gain"]),
        norm2_shift=bind(tape, f"{prefix}.norm2.shift", flat[f"{prefix}.norm2.shift"]),
        ffn=bind_edffn(tape, flat, f"{prefix}.ffn", ratio),
    )


def layer_norm_2d(tape, x, gain, shift):
    """Channel layer norm of a [C, H, W] feature, per spatial position."""
    _, h, w = x.shape
    return unflatten(tape, layer_norm(tape, flatten(tape, x), gain, shift), h, w)


def evs_forward(tape, f_in, params, i, mode, chunk=None):
    """Run one scan block; output keeps the transformed orientation."""
    c = f_in.shape[0]
    if params.in_proj_w.shape[0] != c:
        raise DimensionError(
            f"evs in_proj: weight {params.in_proj_w.shape} vs input channels {c}")
    ci = params.in_proj_w.shape[1] // 2
    n = params.ssm.state_dim

    g = transform(tape, f_in, i, mode)
    _, gh, gw = g.shape
    z = linear(tape, flatten(tape, g), params.in_proj_w, params.in_proj_b)
    x1_raw, x2 = split(tape, z, [ci, ci], axis=1)

    # local 2D mixing happens on the transformed grid, before re-flattening
    x1_img = dwconv2d(tape, unflatten(tape, x1_raw, gh, gw), params.dw3)
    x1 = gelu(tape, flatten(tape, x1_img))

    raw = linear(tape, x1, params.param_proj_w, params.param_proj_b)
    d_raw, b_raw, c_raw = split(tape, raw, [ci, n, n], axis=1)
    delta = softplus_delta(tape, dwconv1d(tape, d_raw, params.conv_delta))
    b_seq = dwconv1d(tape, b_raw, params.conv_B)
    c_seq = dwconv1d(tape, c_raw, params.conv_C)

    scanned = selective_scan_chunked(
        tape, params.ssm, ScanInputs(x1, delta, b_seq, c_seq), chunk)
    gated = mul(tape,
                layer_norm(tape, scanned, params.norm_gain, params.norm_shift),
                gelu(tape, x2))
    out = linear(tape, gated, params.out_proj_w, params.out_proj_b)
    return unflatten(tape, out, gh, gw)


def evss_module_forward(tape, f_in, module, i, mode, chunk=None):
    """Pre-norm residual module: scan block then FFN block."""
    normed = layer_norm_2d(tape, f_in, module.norm1_gain, module.norm1_shift)
    scan_out = evs_forward(tape, normed, module.evs, i, mode, chunk)
    x1 = add(tape, f_in, inverse_transform(tape, scan_out, i, mode))
    normed2 = layer_norm_2d(tape, x1, module.norm2_gain, module.norm2_shift)
    return add(tape, x1, edffn_forward(tape, normed2, module.ffn))
