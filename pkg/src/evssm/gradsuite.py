"""Finite-difference gradient suites behind the `gradcheck` CLI command.

Each suite closes a scalar loss over a parameter dict and compares the tape
gradients against central differences. Sizes are kept small so every
coordinate can be probed except for the full reduced network, where a seeded
sample of coordinates per tensor is used.
"""

from __future__ import annotations

import numpy as np

from . import net as netmod
from . import tensor as T
from .evs import bind_evss_module, evss_module_forward, init_evss_module
from .geometry import ScanMode, flatten
from .sscan import ScanInputs, SSMParams, selective_scan_chunked, \
    selective_scan_seq, softplus_delta


def _sq_sum(tape, t):
    return T.tensor_sum(tape, T.mul(tape, t, t))


def tensor_suite():
    rng = np.random.default_rng(11)
    checks = {}

    params = {"x": rng.standard_normal((4, 3)), "w": rng.standard_normal((3, 5)),
              "b": rng.standard_normal(5)}
    checks["linear"] = (lambda tape, p: _sq_sum(
        tape, T.linear(tape, p["x"], p["w"], p["b"])), params)

    params = {"x": rng.standard_normal((2, 5, 4)), "k": rng.standard_normal((2, 3, 3))}
    checks["dwconv2d"] = (lambda tape, p: _sq_sum(
        tape, T.dwconv2d(tape, p["x"], p["k"])), params)

    params = {"x": rng.standard_normal((9, 3)), "k": rng.standard_normal((3, 7))}
    checks["dwconv1d"] = (lambda tape, p: _sq_sum(
        tape, T.dwconv1d(tape, p["x"], p["k"])), params)

    params = {"x": rng.standard_normal((3, 4, 4)),
              "w": rng.standard_normal((2, 3, 3, 3)), "b": rng.standard_normal(2)}
    checks["conv2d"] = (lambda tape, p: _sq_sum(
        tape, T.conv2d(tape, p["x"], p["w"], p["b"])), params)

    params = {"x": rng.standard_normal((4, 6)) * 2}
    checks["gelu"] = (lambda tape, p: _sq_sum(tape, T.gelu(tape, p["x"])), params)

    params = {"x": rng.standard_normal((5, 4)), "g": rng.uniform(0.5, 1.5, 4),
              "s": rng.standard_normal(4)}
    checks["layer_norm"] = (lambda tape, p: _sq_sum(
        tape, T.layer_norm(tape, p["x"], p["g"], p["s"])), params)

    params = {"x": rng.standard_normal((2, 4, 6))}
    checks["bilinear_up"] = (lambda tape, p: _sq_sum(
        tape, T.bilinear_resize(tape, p["x"], 2)), params)
    checks["bilinear_down"] = (lambda tape, p: _sq_sum(
        tape, T.bilinear_resize(tape, p["x"], 0.5)), params)

    tgt = rng.standard_normal((2, 4, 6))
    params = {"x": rng.standard_normal((2, 4, 6)), "wq": rng.uniform(0.3, 1.7, (2, 4, 4))}
    checks["freq_screen"] = (lambda tape, p: T.l1_mean(
        tape,
        T.irfft2(tape, T.complex_scale(tape, T.rfft2(tape, p["x"]), p["wq"]), 4, 6),
        T.Tensor(tgt)), params)

    params = {"a": rng.standard_normal((1, 4, 5)), "b": rng.standard_normal((1, 4, 5))}
    checks["spectral_l1"] = (lambda tape, p: T.spectral_l1(
        tape, T.rfft2(tape, p["a"]), T.rfft2(tape, p["b"])), params)

    params = {"x": rng.standard_normal((1, 3, 4)), "i1": rng.standard_normal((1, 4, 3)),
              "i2": rng.standard_normal((1, 3, 4))}

    def geometry_loss(tape, p):
        from .geometry import transform, inverse_transform
        a = transform(tape, p["x"], 0, ScanMode.EVS)
        a = T.add(tape, a, p["i1"])
        b = inverse_transform(tape, a, 0, ScanMode.EVS)
        b = T.mul(tape, b, p["i2"])
        return T.tensor_sum(tape, b)

    checks["geometry"] = (geometry_loss, params)
    return checks


def sscan_suite():
    rng = np.random.default_rng(12)
    length, cin, n = 6, 3, 2
    params = {"x": rng.standard_normal((length, cin)),
              "delta_raw": rng.standard_normal((length, cin)),
              "B": rng.standard_normal((length, n)),
              "C": rng.standard_normal((length, n)),
              "A_log": rng.uniform(-1.0, 1.0, (cin, n)),
              "D": rng.standard_normal(cin)}

    def run(scan):
        def f(tape, p):
            delta = softplus_delta(tape, p["delta_raw"])
            y = scan(tape, SSMParams(p["A_log"], p["D"]),
                     ScanInputs(p["x"], delta, p["B"], p["C"]))
            return _sq_sum(tape, y)
        return f

    return {
        "scan_seq": (run(selective_scan_seq), params),
        "scan_chunked": (run(lambda tape, sp, si: selective_scan_chunked(
            tape, sp, si, 2)), params),
    }


def _module_fixture(rng, channels=4, height=4, width=6, expansion=2,
                    state_dim=4, ratio=2):
    flat = {f"mod.{k}": v for k, v in init_evss_module(
        rng, channels, expansion, state_dim, ratio, height, width).items()}
    # break the identity-leaning init so every path carries signal
    for key, val in flat.items():
        if key.endswith((".w", "dw3", "conv_delta", "conv_B", "conv_C")):
            flat[key] = val + rng.standard_normal(val.shape) * 0.15
    x = rng.standard_normal((channels, height, width)) * 0.5
    tgt = rng.standard_normal((channels, height, width)) * 0.5
    return flat, x, tgt, ratio


def evs_suite():
    rng = np.random.default_rng(13)
    flat, x, tgt, ratio = _module_fixture(rng)

    def f(tape, p):
        # p holds Tensors grad_check already registered; assemble pass-through
        module = bind_evss_module(None, p, "mod", ratio)
        out = evss_module_forward(tape, T.Tensor(x), module, 0, ScanMode.EVS)
        return T.l1_mean(tape, out, T.Tensor(tgt))

    return {"evss_module": (f, flat)}


def edffn_suite():
    rng = np.random.default_rng(14)
    from .edffn import bind_edffn, edffn_forward, init_edffn
    channels, height, width = 3, 4, 6
    flat = {f"ffn.{k}": v for k, v in init_edffn(rng, channels, 2, height, width).items()}
    for key, val in flat.items():
        if key.endswith((".w", "dw3")):
            flat[key] = val + rng.standard_normal(val.shape) * 0.15
    flat["ffn.quant"] = rng.uniform(0.5, 1.5, flat["ffn.quant"].shape)
    x = rng.standard_normal((channels, height, width)) * 0.5
    tgt = rng.standard_normal((channels, height, width)) * 0.5

    def f(tape, p):
        params = bind_edffn(None, p, "ffn", 2)
        out = edffn_forward(tape, T.Tensor(x), params)
        return T.l1_mean(tape, out, T.Tensor(tgt))

    return {"edffn": (f, flat)}


def net_fixture():
    config = netmod.NetworkConfig(base_channels=8, modules_per_level=(1, 1, 2),
                                  ssm_state_dim=4)
    rng = np.random.default_rng(15)
    flat = netmod.init_params(config, 8, 8, seed=15)
    for key, val in flat.items():
        if key.endswith((".w", "dw3", "conv_delta", "conv_B", "conv_C")):
            flat[key] = val + rng.standard_normal(val.shape) * 0.1
    x = rng.uniform(0.0, 1.0, (3, 8, 8))
    tgt = rng.uniform(0.0, 1.0, (3, 8, 8))
    return config, flat, x, tgt


def net_suite():
    config, flat, x, tgt = net_fixture()

    def f(tape, p):
        bound = netmod.bind_params(None, p, config)
        out, _ = netmod.forward(tape, T.Tensor(x), bound, config)
        return netmod.loss(tape, out, T.Tensor(tgt), config.loss_lambda)

    return {"reduced_net": (f, flat)}


SUITES = {
    "tensor": tensor_suite,
    "sscan": sscan_suite,
    "evs": evs_suite,
    "edffn": edffn_suite,
    "net": net_suite,
}


def run_gradcheck(which="all", verbose=False, step=1e-5):
    """Run one suite (or all); returns the worst relative error seen."""
    names = list(SUITES) if which == "all" else [which]
    worst = 0.0
    for name in names:
        for check_name, (f, params) in SUITES[name]().items():
            coords = 4 if name == "net" else None
            err = T.grad_check(f, params, step=step, max_coords_per_param=coords)
            worst = max(worst, err)
            if verbose:
                print(f"  {name}:{check_name:<16} rel err {err:.3e}")
    return worst
