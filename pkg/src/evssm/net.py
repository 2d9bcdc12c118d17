"""Three-level symmetric encoder-decoder for residual image restoration.

A 3x3 convolution lifts the RGB input to base_channels features, each
encoder level runs its stack of EVSS modules and then halves the resolution
(bilinear 0.5x plus a channel-doubling 1x1 convolution), the decoder mirrors
the stacks with 2x upsampling, channel-halving 1x1 convolutions and additive
same-level skip connections, and a final 3x3 convolution produces a residual
image that is added onto the input. Module schedule indices count globally
in execution order across encoder and decoder.

Also here: the training loss (pixel L1 plus weighted half-spectrum L1),
parameter/FLOP accounting, and a versioned binary checkpoint container.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .evs import bind_evss_module, evss_module_forward, init_evss_module
from .geometry import ScanMode, flatten, unflatten
from .tensor import (Tensor, add, bilinear_resize, bind, conv2d, l1_mean,
                     linear, rfft2, scale, spectral_l1, trunc_normal)
from .edffn import resize_quant

CHECKPOINT_MAGIC = b"EVSSCKPT"
CHECKPOINT_VERSION = 1

# Fixed log2 factor for transform cost so the whole counter stays exactly
# linear in pixel count; 14 = log2(128*128), the ablation training resolution.
FFT_LOG2_REF = 14.0


@dataclass
class NetworkConfig:
    base_channels: int = 48
    levels: int = 3
    modules_per_level: tuple = (6, 6, 12)
    ssm_state_dim: int = 16
    evs_expansion: int = 2
    ffn_ratio: int = 3
    scan_mode: ScanMode = ScanMode.EVS
    loss_lambda: float = 0.1

    def __post_init__(self):
        self.modules_per_level = tuple(int(m) for m in self.modules_per_level)
        if isinstance(self.scan_mode, str):
            self.scan_mode = ScanMode(self.scan_mode)
        if self.levels < 1:
            raise ConfigurationError(f"levels must be >= 1, got {self.levels}")
        if len(self.modules_per_level) != self.levels:
            raise ConfigurationError(
                f"modules_per_level {self.modules_per_level} does not match levels={self.levels}")
        if min((self.base_channels, self.ssm_state_dim, self.evs_expansion,
                self.ffn_ratio, *self.modules_per_level)) < 1:
            raise ConfigurationError("all size parameters must be positive")

    def channels_at(self, level):
        return self.base_channels * (2 ** level)

    def canonical_text(self):
        return (
            f"base_channels={self.base_channels}\n"
            f"levels={self.levels}\n"
            f"modules_per_level={','.join(str(m) for m in self.modules_per_level)}\n"
            f"ssm_state_dim={self.ssm_state_dim}\n"
            f"evs_expansion={self.evs_expansion}\n"
            f"ffn_ratio={self.ffn_ratio}\n"
            f"scan_mode={self.scan_mode.value}\n"
            f"loss_lambda={self.loss_lambda!r}\n"
        )

    @classmethod
    def from_items(cls, items):
        kwargs = {}
        for key, value in items.items():
            if key in ("base_channels", "levels", "ssm_state_dim",
                       "evs_expansion", "ffn_ratio"):
                kwargs[key] = int(value)
            elif key == "modules_per_level":
                kwargs[key] = tuple(int(v) for v in value.split(","))
            elif key == "scan_mode":
                kwargs[key] = ScanMode(value)
            elif key == "loss_lambda":
                kwargs[key] = float(value)
        return cls(**kwargs)


def _module_plan(config):
    """(prefix, level, schedule index) for every module in execution order."""
    plan = []
    idx = 0
    for level in range(config.levels):
        for j in range(config.modules_per_level[level]):
            plan.append((f"enc{level + 1}.m{j}", level, idx))
            idx += 1
    for level in range(config.levels - 1, -1, -1):
        for j in range(config.modules_per_level[level]):
            plan.append((f"dec{level + 1}.m{j}", level, idx))
            idx += 1
    return plan


def init_params(config, height, width, seed=0):
    """Flat name -> array store for the whole network at a patch resolution."""
    _check_extents(config, height, width)
    rng = np.random.default_rng(seed)
    c0 = config.base_channels
    flat = {
        "shallow.w": trunc_normal(rng, (c0, 3, 3, 3)),
        "shallow.b": np.zeros(c0),
    }
    for prefix, level, _ in _module_plan(config):
        ch = config.channels_at(level)
        hl, wl = height >> level, width >> level
        for key, val in init_evss_module(
                rng, ch, config.evs_expansion, config.ssm_state_dim,
                config.ffn_ratio, hl, wl).items():
            flat[f"{prefix}.{key}"] = val
    for level in range(config.levels - 1):
        ch = config.channels_at(level)
        flat[f"down{level + 1}.w"] = trunc_normal(rng, (ch, 2 * ch))
        flat[f"down{level + 1}.b"] = np.zeros(2 * ch)
        flat[f"up{level + 1}.w"] = trunc_normal(rng, (2 * ch, ch))
        flat[f"up{level + 1}.b"] = np.zeros(ch)
    flat["final.w"] = trunc_normal(rng, (3, c0, 3, 3))
    flat["final.b"] = np.zeros(3)
    return flat


@dataclass
class NetParams:
    shallow_w: Tensor
    shallow_b: Tensor
    enc: list            # per level: list of EVSSModuleParams
    dec: list
    down: list           # per level boundary: (w, b)
    up: list
    final_w: Tensor
    final_b: Tensor
    indices: dict = field(default_factory=dict)   # prefix -> schedule index


def bind_params(tape, flat, config, spatial=None):
    """Wrap a flat store into tape-registered structures.

    spatial, when given, is the (H, W) the forward pass will see. Stored
    frequency multipliers sized for another resolution are bilinearly
    remapped, which is an inference-only path: with a tape attached the
    shapes must already match.
    """
    if spatial is not None:
        flat = _match_quant_resolution(tape, flat, config, spatial)
    enc, dec = [[] for _ in range(config.levels)], [[] for _ in range(config.levels)]
    indices = {}
    for prefix, level, idx in _module_plan(config):
        module = bind_evss_module(tape, flat, prefix, config.ffn_ratio)
        (enc if prefix.startswith("enc") else dec)[level].append(module)
        indices[prefix] = idx
    down, up = [], []
    for level in range(config.levels - 1):
        down.append((bind(tape, f"down{level + 1}.w", flat[f"down{level + 1}.w"]),
                     bind(tape, f"down{level + 1}.b", flat[f"down{level + 1}.b"])))
        up.append((bind(tape, f"up{level + 1}.w", flat[f"up{level + 1}.w"]),
                   bind(tape, f"up{level + 1}.b", flat[f"up{level + 1}.b"])))
    return NetParams(
        shallow_w=bind(tape, "shallow.w", flat["shallow.w"]),
        shallow_b=bind(tape, "shallow.b", flat["shallow.b"]),
        enc=enc, dec=dec, down=down, up=up,
        final_w=bind(tape, "final.w", flat["final.w"]),
        final_b=bind(tape, "final.b", flat["final.b"]),
        indices=indices,
    )


def _match_quant_resolution(tape, flat, config, spatial):
    height, width = spatial
    _check_extents(config, height, width)
    out = dict(flat)
    for prefix, level, _ in _module_plan(config):
        key = f"{prefix}.ffn.quant"
        ch = config.channels_at(level)
        want = (ch, height >> level, (width >> level) // 2 + 1)
        have = flat[key].shape
        if have != want:
            if tape is not None:
                raise ConfigurationError(
                    f"{key}: stored for {have}, need {want}; frequency weights "
                    "can only be remapped outside of training")
            out[key] = resize_quant(flat[key], want[1], (width >> level))
    return out


def _check_extents(config, height, width):
    div = 2 ** (config.levels - 1)
    if height % div or width % div:
        raise DimensionError(
            f"input extents ({height}, {width}) must be divisible by {div}; "
            "pad the image (reflect) and crop the output")


def _channel_map(tape, x, w, b):
    """1x1 convolution: per-position linear map over channels."""
    _, h, wdt = x.shape
    return unflatten(tape, linear(tape, flatten(tape, x), w, b), h, wdt)


def forward(tape, i_blur, net, config, chunk=None, trace=None):
    """Restore one image: returns (i_deblur, residual).

    trace, when a list, collects (stage, shape) pairs for inspection.
    """
    if i_blur.data.ndim != 3 or i_blur.shape[0] != 3:
        raise DimensionError(f"forward: need [3, H, W], got {i_blur.shape}")
    _, height, width = i_blur.shape
    _check_extents(config, height, width)
    mode = config.scan_mode

    feat = conv2d(tape, i_blur, net.shallow_w, net.shallow_b)
    skips = []
    step = 0
    for level in range(config.levels):
        for module in net.enc[level]:
            feat = evss_module_forward(tape, feat, module, step, mode, chunk)
            step += 1
        if trace is not None:
            trace.append((f"enc{level + 1}", feat.shape))
        if level < config.levels - 1:
            skips.append(feat)
            feat = bilinear_resize(tape, feat, 0.5)
            feat = _channel_map(tape, feat, *net.down[level])
    for level in range(config.levels - 1, -1, -1):
        if level < config.levels - 1:
            feat = bilinear_resize(tape, feat, 2)
            feat = _channel_map(tape, feat, *net.up[level])
            feat = add(tape, feat, skips[level])
        for module in net.dec[level]:
            feat = evss_module_forward(tape, feat, module, step, mode, chunk)
            step += 1
        if trace is not None:
            trace.append((f"dec{level + 1}", feat.shape))
    residual = conv2d(tape, feat, net.final_w, net.final_b)
    return add(tape, residual, i_blur), residual


def loss(tape, i_deblur, i_gt, lam):
    """Pixel L1 plus lam times half-spectrum L1 (real/imag as separate terms)."""
    if i_deblur.shape != i_gt.shape:
        raise DimensionError(f"loss: shapes {i_deblur.shape} vs {i_gt.shape}")
    pixel = l1_mean(tape, i_deblur, i_gt)
    if lam == 0:
        return pixel
    spec = spectral_l1(tape, rfft2(tape, i_deblur), rfft2(tape, i_gt))
    return add(tape, pixel, scale(tape, spec, lam))


# ---------------------------------------------------------------------------
# analytic accounting
# ---------------------------------------------------------------------------


def count_params(config, height=256, width=256):
    """Parameter counts: 'core' covers everything resolution-independent,
    'quant' the per-resolution frequency multipliers, reported separately."""
    c0 = config.base_channels
    n = config.ssm_state_dim
    e = config.evs_expansion
    r = config.ffn_ratio
    breakdown = {}
    core = c0 * 3 * 9 + c0 + 3 * c0 * 9 + 3       # shallow + final convs
    breakdown["stem"] = core
    for level in range(config.levels):
        ch = config.channels_at(level)
        ci = e * ch
        per_evs = (ch * 2 * ci + 2 * ci          # in_proj
                   + ci * 9                      # dw3
                   + ci * (ci + 2 * n) + ci + 2 * n   # param_proj
                   + 7 * (ci + 2 * n)            # 1d depthwise kernels
                   + ci * n + ci                 # A_log, D
                   + 2 * ci                      # scan norm
                   + ci * ch + ch)               # out_proj
        per_ffn = (ch * r * ch + r * ch          # expand
                   + r * ch * 9                  # dw3
                   + (r * ch // 2) * ch + ch)    # project
        per_module = 4 * ch + per_evs + per_ffn  # two pre-norms + blocks
        count = 2 * config.modules_per_level[level] * per_module
        breakdown[f"level{level + 1}.modules"] = count
        core += count
        quant_l = 2 * config.modules_per_level[level] * (
            ch * (height >> level) * ((width >> level) // 2 + 1))
        breakdown[f"level{level + 1}.quant"] = quant_l
    for level in range(config.levels - 1):
        ch = config.channels_at(level)
        updown = ch * 2 * ch + 2 * ch + 2 * ch * ch + ch
        breakdown[f"level{level + 1}.resample"] = updown
        core += updown
    quant = sum(v for k, v in breakdown.items() if k.endswith(".quant"))
    breakdown["total.core"] = core
    breakdown["total.quant"] = quant
    return breakdown


def count_flops(config, height, width):
    """Analytic multiply-add count of one forward pass; exactly linear in
    pixel count (transforms are priced at a fixed reference log factor)."""
    n = config.ssm_state_dim
    e = config.evs_expansion
    r = config.ffn_ratio
    breakdown = {}
    total = 0.0
    pixels0 = height * width
    stem = pixels0 * (config.base_channels * 3 * 9) * 2   # shallow + final
    breakdown["stem"] = float(stem)
    total += stem
    for level in range(config.levels):
        ch = config.channels_at(level)
        ci = e * ch
        pixels = (height >> level) * (width >> level)
        per_evs = (ch * 2 * ci + 9 * ci + ci * (ci + 2 * n)
                   + 7 * (ci + 2 * n)
                   + 6 * ci * n + ci            # scan: discretize+recurrence+output
                   + ci * ch)
        per_ffn = (ch * r * ch + 9 * r * ch + (r * ch // 2) * ch
                   + ch                          # per-bin screening multiply
                   + 2 * ch * 5 * FFT_LOG2_REF)  # transform pair, fixed log factor
        count = 2 * config.modules_per_level[level] * pixels * (per_evs + per_ffn)
        breakdown[f"level{level + 1}.modules"] = float(count)
        total += count
    for level in range(config.levels - 1):
        ch = config.channels_at(level)
        pixels = (height >> level) * (width >> level)
        resample = (pixels // 4) * (ch * 2 * ch) + (pixels // 4) * (2 * ch * ch) \
            + pixels * ch * 4 * 2   # bilinear weights both directions
        breakdown[f"level{level + 1}.resample"] = float(resample)
        total += resample
    breakdown["total"] = float(total)
    return breakdown


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: dict                      # name -> float64 array
    moments: dict | None = None       # adam state: "m.<name>", "v.<name>"
    iteration: int = 0
    seed: int = 0


def _write_tensor(buf, name, arr):
    enc = name.encode("utf-8")
    buf.write(struct.pack("<H", len(enc)))
    buf.write(enc)
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    buf.write(struct.pack("<BB", 0, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.astype("<f8", copy=False).tobytes())


def _read_tensor(buf):
    (name_len,) = struct.unpack("<H", buf.read(2))
    name = buf.read(name_len).decode("utf-8")
    dtype_tag, rank = struct.unpack("<BB", buf.read(2))
    if dtype_tag != 0:
        raise ConfigurationError(f"checkpoint: unknown dtype tag {dtype_tag}")
    shape = struct.unpack(f"<{rank}Q", buf.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def save_checkpoint(ckpt, path):
    header = ckpt.config.canonical_text() \
        + f"iteration={ckpt.iteration}\nseed={ckpt.seed}\n"
    records = list(ckpt.params.items())
    if ckpt.moments:
        records += [(f"adam.{k}", v) for k, v in ckpt.moments.items()]
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    enc = header.encode("utf-8")
    buf.write(struct.pack("<I", len(enc)))
    buf.write(enc)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_tensor(buf, name, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    if buf.read(8) != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", buf.read(4))
    items = {}
    for line in buf.read(hlen).decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            items[key] = value
    iteration = int(items.pop("iteration", "0"))
    seed = int(items.pop("seed", "0"))
    config = NetworkConfig.from_items(items)
    (count,) = struct.unpack("<I", buf.read(4))
    params, moments = {}, {}
    for _ in range(count):
        name, arr = _read_tensor(buf)
        if name.startswith("adam."):
            moments[name[len("adam."):]] = arr
        else:
            params[name] = arr
    return Checkpoint(config=config, params=params,
                      moments=moments or None, iteration=iteration, seed=seed)
