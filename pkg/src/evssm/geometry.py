"""Geometric scanning schedule: per-module transpose/flip and raster flattening.

Module index i counts EVSS modules globally across the network in forward
execution order. Even indices transpose the spatial grid, odd indices flip
it along both axes (a 180 degree rotation), so after every 4 modules the
composition is the identity. Both transforms are involutions, which makes
the inverse transform the transform itself and the gradient rule the inverse
applied to the output gradient.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, _record


class TransformKind(enum.Enum):
    TRANSPOSE = "transpose"
    FLIP_BOTH = "flip_both"
    IDENTITY = "identity"


class ScanMode(enum.Enum):
    """Scanning schedule variants; the non-EVS modes are ablation axes."""

    EVS = "evs"                       # transpose on even i, flip on odd i
    ONE_DIRECTION = "one"             # never transform
    FLIP_ONLY = "no-transpose"        # keep flips, drop transposes
    TRANSPOSE_ONLY = "no-flip"        # keep transposes, drop flips


def kind_for(i, mode):
    """TransformKind applied by module i under the given schedule."""
    if mode == ScanMode.ONE_DIRECTION:
        return TransformKind.IDENTITY
    if i % 2 == 0:
        return TransformKind.TRANSPOSE if mode in (ScanMode.EVS, ScanMode.TRANSPOSE_ONLY) \
            else TransformKind.IDENTITY
    return TransformKind.FLIP_BOTH if mode in (ScanMode.EVS, ScanMode.FLIP_ONLY) \
        else TransformKind.IDENTITY


def _apply_kind(data, kind):
    if kind == TransformKind.TRANSPOSE:
        return np.ascontiguousarray(np.swapaxes(data, 1, 2))
    if kind == TransformKind.FLIP_BOTH:
        return np.ascontiguousarray(data[:, ::-1, ::-1])
    return data.copy()


def transform(tape, x, i, mode):
    """Schedule transform of a [C, H, W] feature for module index i."""
    kind = kind_for(i, mode)
    out = Tensor(_apply_kind(x.data, kind))

    def bwd(g):
        tape._accum(x, _apply_kind(g, kind))  # involution: inverse == forward

    return _record(tape, out, bwd)


def inverse_transform(tape, x, i, mode):
    """Undo transform(x, i, mode); bitwise round trip."""
    return transform(tape, x, i, mode)


def flatten(tape, x):
    """[C, H, W] -> [H*W, C] in row-major raster order."""
    if x.data.ndim != 3:
        raise DimensionError(f"flatten: need [C,H,W], got {x.shape}")
    c, h, w = x.shape
    out = Tensor(x.data.reshape(c, h * w).T)

    def bwd(g):
        tape._accum(x, g.T.reshape(c, h, w))

    return _record(tape, out, bwd)


def unflatten(tape, s, h, w):
    """[H*W, C] -> [C, H, W]; inverse of flatten."""
    if s.data.ndim != 2:
        raise DimensionError(f"unflatten: need [L,C], got {s.shape}")
    l, c = s.shape
    if l != h * w:
        raise DimensionError(f"unflatten: length {l} does not equal {h}*{w}")
    out = Tensor(s.data.T.reshape(c, h, w))

    def bwd(g):
        tape._accum(s, g.reshape(c, h * w).T)

    return _record(tape, out, bwd)
