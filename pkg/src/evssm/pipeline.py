"""Desk-scale training and evaluation.

Training pairs are synthesized: procedural sharp patches (rectangles,
strokes, smooth gradients) blurred by Gaussian or linear-motion kernels with
a little sensor noise. The loop is plain AdamW with cosine-annealed steps and
is bitwise deterministic in (seed, config): data generation, initialization
and updates all draw from generators derived from the run seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import net as netmod
from .errors import ConfigurationError, DimensionError, DomainError
from .geometry import ScanMode
from .tensor import Tape, Tensor, add, scale


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    patch_size: int = 32
    lr_start: float = 1e-3
    lr_end: float = 1e-7
    seed: int = 0
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    log_every: int = 10
    eval_patches: int = 8
    blur: str = "mixed"               # "mixed" | "gaussian" | "motion"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not (self.lr_start >= self.lr_end > 0):
            raise ConfigurationError(
                f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.patch_size % 4:
            raise ConfigurationError(f"patch_size must be divisible by 4, got {self.patch_size}")
        if self.blur not in ("mixed", "gaussian", "motion"):
            raise ConfigurationError(f"unknown blur family {self.blur!r}")

    @classmethod
    def from_items(cls, items):
        kwargs = {}
        for key, value in items.items():
            if key in ("iterations", "batch_size", "patch_size", "seed",
                       "log_every", "eval_patches"):
                kwargs[key] = int(value)
            elif key in ("lr_start", "lr_end", "weight_decay"):
                kwargs[key] = float(value)
            elif key == "betas":
                kwargs[key] = tuple(float(v) for v in value.split(","))
            elif key == "blur":
                kwargs[key] = value
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# synthetic blur data
# ---------------------------------------------------------------------------


@dataclass
class BlurSpec:
    kind: str = "gaussian"            # "gaussian" | "motion" | "identity"
    size: int = 9
    sigma: float = 1.2                # gaussian width
    length: float = 5.0               # motion extent in pixels
    angle: float = 0.0                # motion direction, radians
    noise_sigma: float = 0.005

    def __post_init__(self):
        if self.size % 2 == 0:
            raise ConfigurationError(f"blur kernel size must be odd, got {self.size}")


def blur_kernel(spec):
    """Normalized point-spread function for a BlurSpec."""
    k = spec.size
    if spec.kind == "identity":
        ker = np.zeros((k, k))
        ker[k // 2, k // 2] = 1.0
        return ker
    if spec.kind == "gaussian":
        ax = np.arange(k) - k // 2
        g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * spec.sigma ** 2))
        return g / g.sum()
    if spec.kind == "motion":
        # splat points along a centered segment with bilinear weights
        ker = np.zeros((k, k))
        c = k // 2
        steps = max(2, int(np.ceil(spec.length * 8)))
        ts = np.linspace(-0.5, 0.5, steps) * max(spec.length - 1.0, 0.0)
        for t in ts:
            y = c + t * np.sin(spec.angle)
            x = c + t * np.cos(spec.angle)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            fy, fx = y - y0, x - x0
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    if 0 <= y0 + dy < k and 0 <= x0 + dx < k:
                        ker[y0 + dy, x0 + dx] += wy * wx
        return ker / ker.sum()
    raise ConfigurationError(f"unknown blur kind {spec.kind!r}")


def _sharp_patch(rng, size):
    """Procedural sharp image: gradient background, rectangles, strokes."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((3, size, size))
    for c in range(3):
        a, b, off = rng.uniform(-0.5, 0.5, 3)
        img[c] = 0.5 + a * (xx - 0.5) + b * (yy - 0.5) + off * 0.3
    for _ in range(rng.integers(3, 7)):
        c0 = rng.uniform(0, 1, 3)
        y0, x0 = rng.integers(0, size, 2)
        hgt, wid = rng.integers(size // 8, size // 2, 2)
        img[:, y0:y0 + hgt, x0:x0 + wid] = c0[:, None, None]
    for _ in range(rng.integers(2, 5)):
        c0 = rng.uniform(0, 1, 3)
        y, x = rng.uniform(0, size, 2)
        vy, vx = rng.uniform(-1, 1, 2)
        norm = max(np.hypot(vy, vx), 1e-6)
        vy, vx = vy / norm, vx / norm
        thick = rng.integers(1, max(2, size // 16))
        for t in range(2 * size):
            iy, ix = int(round(y + vy * t / 2)), int(round(x + vx * t / 2))
            if not (0 <= iy < size and 0 <= ix < size):
                break
            img[:, max(0, iy - thick):iy + thick, max(0, ix - thick):ix + thick] = c0[:, None, None]
    return np.clip(img, 0.0, 1.0)


def _convolve_reflect(img, ker):
    """Per-channel 2D correlation with reflective padding (plain arrays)."""
    k = ker.shape[0]
    p = k // 2
    padded = np.pad(img, ((0, 0), (p, p), (p, p)), mode="reflect")
    h, w = img.shape[1:]
    out = np.zeros_like(img)
    for u in range(k):
        for v in range(k):
            if ker[u, v] != 0.0:
                out += ker[u, v] * padded[:, u:u + h, v:v + w]
    return out


def synth_pair(spec, seed, size=32):
    """Deterministic (blurred, sharp) patch pair in [0, 1]."""
    rng = np.random.default_rng(seed)
    sharp = _sharp_patch(rng, size)
    blurred = _convolve_reflect(sharp, blur_kernel(spec))
    if spec.noise_sigma > 0:
        blurred = blurred + rng.normal(0.0, spec.noise_sigma, blurred.shape)
    return np.clip(blurred, 0.0, 1.0), sharp


def sample_blur_spec(rng, family="mixed"):
    """Training distribution: Gaussian or linear motion, mild noise."""
    if family == "mixed":
        family = "gaussian" if rng.uniform() < 0.5 else "motion"
    if family == "gaussian":
        return BlurSpec(kind="gaussian", size=9, sigma=rng.uniform(0.8, 2.0),
                        noise_sigma=rng.uniform(0.0, 0.01))
    return BlurSpec(kind="motion", size=11, length=rng.uniform(3.0, 9.0),
                    angle=rng.uniform(0.0, np.pi),
                    noise_sigma=rng.uniform(0.0, 0.01))


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


def adamw_step(params, grads, state, lr, wd=1e-4, betas=(0.9, 0.999), eps=1e-8):
    """Decoupled-weight-decay Adam update, in place on the param dict."""
    beta1, beta2 = betas
    state.setdefault("t", 0)
    state["t"] += 1
    t = state["t"]
    m = state.setdefault("m", {k: np.zeros_like(v) for k, v in params.items()})
    v = state.setdefault("v", {k: np.zeros_like(val) for k, val in params.items()})
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise DimensionError(f"adamw: grad {g.shape} vs param {p.shape} for {key}")
        m[key] = beta1 * m[key] + (1.0 - beta1) * g
        v[key] = beta2 * v[key] + (1.0 - beta2) * g * g
        if wd:
            p *= 1.0 - lr * wd
        p -= lr * (m[key] / bc1) / (np.sqrt(v[key] / bc2) + eps)
    return params, state


def cosine_lr(t, total, lr_start, lr_end):
    """Cosine annealing from lr_start at t=0 to lr_end at t=total."""
    if not 0 <= t <= total:
        raise DomainError(f"cosine_lr: t={t} outside [0, {total}]")
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + np.cos(np.pi * t / total))


# ---------------------------------------------------------------------------
# quality metrics
# ---------------------------------------------------------------------------


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for [0,1]-range images, capped at 100."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return 100.0
    return float(10.0 * np.log10(1.0 / mse))


def _ssim_window(size=11, sigma=1.5):
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _windowed_mean(img, win):
    """Valid-positions window averages of one [H, W] plane."""
    k = win.shape[0]
    h, w = img.shape
    out = np.zeros((h - k + 1, w - k + 1))
    for u in range(k):
        for v in range(k):
            out += win[u, v] * img[u:u + h - k + 1, v:v + w - k + 1]
    return out


def ssim(a, b, k1=0.01, k2=0.03):
    """Structural similarity with the 11x11 Gaussian window, channel-averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    win = _ssim_window()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mx = _windowed_mean(x, win)
        my = _windowed_mean(y, win)
        sxx = _windowed_mean(x * x, win) - mx * mx
        syy = _windowed_mean(y * y, win) - my * my
        sxy = _windowed_mean(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, lr, max_grad):
        super().__init__(
            f"loss became non-finite at iteration {iteration} "
            f"(lr={lr:.3g}, max |grad|={max_grad:.3g})")
        self.iteration = iteration
        self.lr = lr
        self.max_grad = max_grad


@dataclass
class TrainResult:
    checkpoint: netmod.Checkpoint
    log: list = field(default_factory=list)     # dicts: iteration, lr, loss [, psnr]
    eval_psnr: float = 0.0
    baseline_psnr: float = 0.0


def _eval_pairs(config, count, base_seed):
    pairs = []
    rng = np.random.default_rng(base_seed)
    for i in range(count):
        spec = sample_blur_spec(rng, config.blur)
        pairs.append(synth_pair(spec, base_seed + 1000 + i, config.patch_size))
    return pairs


def evaluate(flat, net_config, pairs, chunk=None):
    """Mean PSNR of restored outputs over (blurred, sharp) pairs."""
    bound = netmod.bind_params(None, flat, net_config)
    scores = []
    for blurred, sharp in pairs:
        restored, _ = netmod.forward(None, Tensor(blurred), bound, net_config, chunk)
        scores.append(psnr(np.clip(restored.data, 0.0, 1.0), sharp))
    return float(np.mean(scores))


def train(config, net_config, progress=None):
    """Run the full loop; returns TrainResult with a bitwise-reproducible checkpoint."""
    flat = netmod.init_params(net_config, config.patch_size, config.patch_size,
                              seed=config.seed)
    data_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 77]))
    state = {}
    log = []
    eval_set = _eval_pairs(config, config.eval_patches, config.seed + 910_000)
    baseline = float(np.mean([psnr(bl, sh) for bl, sh in eval_set]))

    for it in range(config.iterations):
        lr = cosine_lr(it, config.iterations, config.lr_start, config.lr_end)
        tape = Tape()
        bound = netmod.bind_params(tape, flat, net_config)
        total = None
        for _ in range(config.batch_size):
            spec = sample_blur_spec(data_rng, config.blur)
            pair_seed = int(data_rng.integers(0, 2 ** 31))
            blurred, sharp = synth_pair(spec, pair_seed, config.patch_size)
            restored, _ = netmod.forward(tape, Tensor(blurred), bound, net_config)
            sample_loss = netmod.loss(tape, restored, Tensor(sharp),
                                      net_config.loss_lambda)
            total = sample_loss if total is None else add(tape, total, sample_loss)
        batch_loss = scale(tape, total, 1.0 / config.batch_size)
        loss_val = float(batch_loss.data)
        tape.backward(batch_loss)
        grads = tape.grads()
        max_grad = max(np.abs(g).max() for g in grads.values())
        if not np.isfinite(loss_val):
            raise TrainingDiverged(it, lr, max_grad)
        adamw_step(flat, grads, state, lr, wd=config.weight_decay, betas=config.betas)
        if it % config.log_every == 0 or it == config.iterations - 1:
            log.append({"iteration": it, "lr": float(lr), "loss": loss_val})
            if progress:
                progress(log[-1])

    eval_psnr = evaluate(flat, net_config, eval_set)
    moments = {}
    for kind in ("m", "v"):
        for key, arr in state[kind].items():
            moments[f"{kind}.{key}"] = arr
    ckpt = netmod.Checkpoint(config=net_config, params=flat, moments=moments,
                             iteration=config.iterations, seed=config.seed)
    return TrainResult(checkpoint=ckpt, log=log,
                       eval_psnr=eval_psnr, baseline_psnr=baseline)


def ablate(config, net_config, modes=None, progress=None):
    """Train one run per scan mode; returns mode name -> TrainResult."""
    from dataclasses import replace
    modes = modes or [ScanMode.EVS, ScanMode.ONE_DIRECTION,
                      ScanMode.FLIP_ONLY, ScanMode.TRANSPOSE_ONLY]
    results = {}
    for mode in modes:
        results[mode.value] = train(config, replace(net_config, scan_mode=mode),
                                    progress=progress)
    return results
