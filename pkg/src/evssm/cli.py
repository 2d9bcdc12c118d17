"""Command line front end: train, deblur, gradcheck, bench, ablate, flops."""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import net as netmod
from . import pipeline
from .edffn import fft_cost
from .errors import ConfigurationError
from .geometry import ScanMode
from .tensor import Tensor

SCAN_MODE_NAMES = {m.value: m for m in ScanMode}


def read_config_file(path):
    """Flat key=value text; '#' starts a comment."""
    items = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            items[key.strip()] = value.strip()
    return items


def _split_config(items):
    net_keys = {"base_channels", "levels", "modules_per_level", "ssm_state_dim",
                "evs_expansion", "ffn_ratio", "scan_mode", "loss_lambda"}
    net_items = {k: v for k, v in items.items() if k in net_keys}
    train_items = {k: v for k, v in items.items() if k not in net_keys}
    return netmod.NetworkConfig.from_items(net_items), \
        pipeline.TrainConfig.from_items(train_items)


def _load_image(path):
    from PIL import Image
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)          # [3, H, W]


def _save_image(path, arr):
    from PIL import Image
    arr = np.clip(arr, 0.0, 1.0).transpose(1, 2, 0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def _pad_to_multiple(arr, mult):
    _, h, w = arr.shape
    ph = (-h) % mult
    pw = (-w) % mult
    if ph or pw:
        arr = np.pad(arr, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    return arr, h, w


def cmd_train(args):
    items = read_config_file(args.config) if args.config else {}
    net_config, train_config = _split_config(items)
    if args.seed is not None:
        train_config.seed = args.seed
    if args.scan_mode:
        from dataclasses import replace
        net_config = replace(net_config, scan_mode=SCAN_MODE_NAMES[args.scan_mode])

    def progress(row):
        print(f"iter {row['iteration']:>6}  lr {row['lr']:.3e}  loss {row['loss']:.5f}",
              flush=True)

    t0 = time.time()
    result = pipeline.train(train_config, net_config, progress=progress)
    netmod.save_checkpoint(result.checkpoint, args.out)
    print(f"trained {train_config.iterations} iterations in {(time.time() - t0) / 60:.1f} min")
    print(f"eval PSNR {result.eval_psnr:.2f} dB (blurred baseline {result.baseline_psnr:.2f} dB)")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_deblur(args):
    ckpt = netmod.load_checkpoint(args.ckpt)
    img = _load_image(args.infile)
    mult = 2 ** (ckpt.config.levels - 1)
    padded, h, w = _pad_to_multiple(img, mult)
    bound = netmod.bind_params(None, ckpt.params, ckpt.config,
                               spatial=padded.shape[1:])
    restored, _ = netmod.forward(None, Tensor(padded), bound, ckpt.config)
    _save_image(args.outfile, restored.data[:, :h, :w])
    print(f"wrote {args.outfile}")
    return 0


def cmd_gradcheck(args):
    from .gradsuite import run_gradcheck
    worst = run_gradcheck(args.module, verbose=True)
    print(f"max relative error: {worst:.3e}")
    return 0 if worst < 1e-3 else 1


def cmd_bench(args):
    from .sscan import ScanInputs, SSMParams, selective_scan_chunked
    from .tensor import rfft2, irfft2
    from .evs import bind_evss_module, evss_module_forward, init_evss_module

    sizes = [int(s) for s in args.sizes.split(",")]
    rng = np.random.default_rng(0)
    print("op,size,flops,wall_ns")
    for size in sizes:
        if args.op == "scan":
            cinner, n = 16, 16
            params = SSMParams(Tensor(rng.uniform(-1, 1, (cinner, n))),
                               Tensor(np.ones(cinner)))
            inputs = ScanInputs(Tensor(rng.standard_normal((size, cinner))),
                                Tensor(rng.uniform(0.001, 0.1, (size, cinner))),
                                Tensor(rng.standard_normal((size, n))),
                                Tensor(rng.standard_normal((size, n))))
            flops = 6 * size * cinner * n
            fn = lambda: selective_scan_chunked(None, params, inputs)
        elif args.op == "fft":
            x = Tensor(rng.standard_normal((3, size, size)))
            flops = 2 * 3 * 5 * size * size * max(np.log2(size * size), 1.0)
            fn = lambda: irfft2(None, rfft2(None, x), size, size)
        elif args.op == "block":
            ch = 16
            flat = {f"b.{k}": v for k, v in init_evss_module(
                rng, ch, 2, 8, 2, size, size).items()}
            module = bind_evss_module(None, flat, "b", 2)
            x = Tensor(rng.standard_normal((ch, size, size)))
            flops = netmod.count_flops(
                netmod.NetworkConfig(base_channels=ch, levels=1,
                                     modules_per_level=(1,), ssm_state_dim=8,
                                     ffn_ratio=2),
                size, size)["total"] / 2
            fn = lambda: evss_module_forward(None, x, module, 0, ScanMode.EVS)
        else:
            raise ConfigurationError(f"unknown bench op {args.op!r}")
        fn()
        t0 = time.perf_counter_ns()
        fn()
        wall = time.perf_counter_ns() - t0
        print(f"{args.op},{size},{flops:.0f},{wall}")
    return 0


def cmd_ablate(args):
    items = read_config_file(args.config) if args.config else {}
    net_config, train_config = _split_config(items)
    results = pipeline.ablate(train_config, net_config)
    print("mode,iteration,lr,loss,final_psnr,baseline_psnr")
    for mode, res in results.items():
        for row in res.log:
            print(f"{mode},{row['iteration']},{row['lr']:.6e},{row['loss']:.6f},"
                  f"{res.eval_psnr:.3f},{res.baseline_psnr:.3f}")
    return 0


def cmd_flops(args):
    config = netmod.NetworkConfig()
    flops = netmod.count_flops(config, args.height, args.width)
    params = netmod.count_params(config, args.height, args.width)
    print(f"analytic accounting at {args.height}x{args.width}, default configuration")
    print("\nmultiply-adds:")
    for key, val in flops.items():
        print(f"  {key:<22} {val / 1e9:10.2f} G")
    print("\nparameters:")
    for key, val in params.items():
        print(f"  {key:<22} {val / 1e6:10.3f} M")
    mid = fft_cost(config.base_channels, args.height, args.width, "mid", config.ffn_ratio)
    tail = fft_cost(config.base_channels, args.height, args.width, "tail", config.ffn_ratio)
    print(f"\nFFN transform cost, mid vs tail placement: {mid / 1e9:.3f} G vs "
          f"{tail / 1e9:.3f} G (ratio {mid / tail:.1f})")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="evssm",
                                     description="visual state space deblurring")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on synthetic blur")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--seed", type=int)
    p.add_argument("--scan-mode", choices=sorted(SCAN_MODE_NAMES))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("deblur", help="restore one PNG image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.set_defaults(fn=cmd_deblur)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--module", default="all",
                   choices=["tensor", "sscan", "evs", "edffn", "net", "all"])
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="wall-clock micro benchmarks (CSV)")
    p.add_argument("--op", required=True, choices=["scan", "fft", "block"])
    p.add_argument("--sizes", required=True, help="comma separated sizes")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", help="train all scan modes, emit CSV curves")
    p.add_argument("--config", help="flat key=value config file")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("flops", help="analytic cost table")
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.set_defaults(fn=cmd_flops)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
