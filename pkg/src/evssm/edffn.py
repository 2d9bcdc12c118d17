"""Frequency-screened feed-forward block.

Expand, depthwise-convolve, gate, project, then screen the projected feature
in the frequency domain with a learnable real multiplier per channel and
frequency bin. Screening at the tail (channel width C) instead of mid-FFN
(width r*C) divides the transform cost by the expansion ratio; fft_cost
quantifies that saving.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError
from .geometry import flatten, unflatten
from .tensor import (Tensor, bind, complex_scale, dwconv2d, gelu, irfft2,
                     linear, mul, resample_axis_raw, rfft2, split,
                     trunc_normal)


@dataclass
class EDFFNParams:
    expand_w: Tensor    # [C, r*C]
    expand_b: Tensor
    dw3: Tensor         # [r*C, 3, 3]
    project_w: Tensor   # [(r//2)*C, C]
    project_b: Tensor
    quant: Tensor       # [C, Hf, Wf//2+1] real per-bin multipliers
    ratio: int


def init_edffn(rng, channels, ratio, height, width):
    """Parameter arrays for one block at a given feature resolution."""
    if (ratio * channels) % 2:
        raise ConfigurationError(
            f"edffn: expanded width r*C must be even to gate, got {ratio}*{channels}")
    mid = ratio * channels
    dw3 = np.zeros((mid, 3, 3))
    dw3[:, 1, 1] = 1.0
    return {
        "expand.w": trunc_normal(rng, (channels, mid)),
        "expand.b": np.zeros(mid),
        "dw3": dw3,
        "project.w": trunc_normal(rng, (mid // 2, channels)),
        "project.b": np.zeros(channels),
        "quant": np.ones((channels, height, width // 2 + 1)),
    }


def bind_edffn(tape, flat, prefix, ratio):
    return EDFFNParams(
        expand_w=bind(tape, f"{prefix}.expand.w", flat[f"{prefix}.expand.w"]),
        expand_b=bind(tape, f"{prefix}.expand.b", flat[f"{prefix}.expand.b"]),
        dw3=bind(tape, f"{prefix}.dw3", flat[f"{prefix}.dw3"]),
        project_w=bind(tape, f"{prefix}.project.w", flat[f"{prefix}.project.w"]),
        project_b=bind(tape, f"{prefix}.project.b", flat[f"{prefix}.project.b"]),
        quant=bind(tape, f"{prefix}.quant", flat[f"{prefix}.quant"]),
        ratio=ratio,
    )


def resize_quant(quant, height, width):
    """Bilinearly map a stored multiplier grid onto another resolution's bins."""
    out = resample_axis_raw(quant, 1, height)
    return resample_axis_raw(out, 2, width // 2 + 1)


def edffn_forward(tape, x, params):
    """[C, H, W] -> [C, H, W]; quant must match this resolution's rfft grid."""
    c, h, w = x.shape
    if params.expand_w.shape != (c, params.ratio * c):
        raise ConfigurationError(
            f"edffn: expand {params.expand_w.shape} vs C={c}, r={params.ratio}")
    if params.quant.shape != (c, h, w // 2 + 1):
        raise ConfigurationError(
            f"edffn: quant {params.quant.shape} sized for another resolution; "
            f"need {(c, h, w // 2 + 1)}")
    u = linear(tape, flatten(tape, x), params.expand_w, params.expand_b)
    u = dwconv2d(tape, unflatten(tape, u, h, w), params.dw3)
    u = flatten(tape, u)
    half = u.shape[1] // 2
    a, b = split(tape, u, [half, half], axis=1)
    y0 = linear(tape, mul(tape, a, gelu(tape, b)), params.project_w, params.project_b)
    spectrum = rfft2(tape, unflatten(tape, y0, h, w))
    return irfft2(tape, complex_scale(tape, spectrum, params.quant), h, w)


def fft_cost(channels, height, width, placement, ratio):
    """Multiply-add count of a forward+inverse transform pair for one block.

    placement "mid" prices the transform over the expanded width r*C;
    "tail" prices it over the block's input width C.
    """
    if ratio < 1:
        raise DomainError(f"fft_cost: ratio must be >= 1, got {ratio}")
    if placement not in ("mid", "tail"):
        raise ConfigurationError(f"fft_cost: placement must be 'mid' or 'tail', got {placement!r}")
    ch = channels * ratio if placement == "mid" else channels
    pixels = height * width
    return 2.0 * ch * 5.0 * pixels * np.log2(pixels)
