"""Scan core: discretization goldens, recurrence oracles, chunked equivalence."""

import numpy as np
import pytest

from evssm.errors import DomainError
from evssm.gradsuite import run_gradcheck
from evssm.sscan import (ScanInputs, SSMParams, selective_scan_chunked,
                         selective_scan_seq, softplus_delta, zoh_discretize)
from evssm.tensor import Tensor

rng = np.random.default_rng(99)


def random_case(length, cin, n, seed):
    r = np.random.default_rng(seed)
    params = SSMParams(Tensor(r.uniform(-2.0, 1.0, (cin, n))),
                       Tensor(r.standard_normal(cin)))
    inputs = ScanInputs(Tensor(r.standard_normal((length, cin))),
                        Tensor(r.uniform(0.0, 0.5, (length, cin))),
                        Tensor(r.standard_normal((length, n))),
                        Tensor(r.standard_normal((length, n))))
    return params, inputs


# ---------------------------------------------------------------------------
# softplus
# ---------------------------------------------------------------------------


def test_softplus_closed_form_at_zero():
    y = softplus_delta(None, Tensor([[0.0]]))
    assert abs(y.data[0, 0] - np.log(2.0)) < 1e-15


def test_softplus_asymptote():
    y = softplus_delta(None, Tensor([[20.0]]))
    assert abs(y.data[0, 0] - 20.0) < 1e-8


def test_softplus_positive_at_minus_twenty():
    y = softplus_delta(None, Tensor([[-20.0]]))
    assert 0.0 < y.data[0, 0] < 1e-8


# ---------------------------------------------------------------------------
# ZOH discretization
# ---------------------------------------------------------------------------


def test_zoh_golden_half():
    abar, bbar = zoh_discretize(-1.0, 1.0, np.log(2.0))
    assert abs(abar - 0.5) < 1e-12
    assert abs(bbar - 0.5) < 1e-12


def test_zoh_zero_step_limit():
    abar, bbar = zoh_discretize(-3.7, 2.2, 0.0)
    assert abar == 1.0 and bbar == 0.0


def test_zoh_vanishing_state_matrix_limit():
    abar, bbar = zoh_discretize(0.0, 1.5, 0.25)
    assert abar == 1.0
    assert abs(bbar - 0.25 * 1.5) < 1e-15


def test_zoh_negative_step_rejected():
    with pytest.raises(DomainError):
        zoh_discretize(-1.0, 1.0, -0.1)


def test_zoh_elementwise_broadcast():
    a = rng.uniform(-2.0, -0.1, (3, 4))
    delta = rng.uniform(0.0, 1.0, (5, 3))[:, :, None]
    b = rng.standard_normal((5, 4))[:, None, :]
    abar, bbar = zoh_discretize(a[None], b, delta)
    assert abar.shape == (5, 3, 4) and bbar.shape == (5, 3, 4)
    i = (2, 1, 3)
    ea, eb = zoh_discretize(a[1, 3], b[2, 0, 3], delta[2, 1, 0])
    assert abs(abar[i] - ea) < 1e-15 and abs(bbar[i] - eb) < 1e-15


# ---------------------------------------------------------------------------
# selective scan
# ---------------------------------------------------------------------------


def test_scan_zero_input_zero_output():
    params, inputs = random_case(16, 3, 2, seed=0)
    inputs = ScanInputs(Tensor(np.zeros((16, 3))), inputs.delta, inputs.B, inputs.C)
    y = selective_scan_seq(None, params, inputs)
    assert np.array_equal(y.data, np.zeros((16, 3)))


def test_scan_hand_unrolled_scalar_case():
    # Abar = 0.5 needs delta*A = -ln 2; Bbar = phi(-ln2)*delta*B = 0.5/ln2*ln2*B
    params = SSMParams(Tensor(np.zeros((1, 1))), Tensor(np.zeros(1)))  # A = -1, D = 0
    ln2 = np.log(2.0)
    inputs = ScanInputs(
        x=Tensor([[1.0], [0.0], [0.0]]),
        delta=Tensor(np.full((3, 1), ln2)),
        B=Tensor(np.full((3, 1), 2.0)),     # Bbar = 0.5 * 2 = 1
        C=Tensor(np.ones((3, 1))),
    )
    y = selective_scan_seq(None, params, inputs)
    assert np.abs(y.data.ravel() - [1.0, 0.5, 0.25]).max() < 1e-12


def test_scan_skip_path_isolation():
    params, inputs = random_case(12, 4, 3, seed=1)
    inputs = ScanInputs(inputs.x, inputs.delta, inputs.B,
                        Tensor(np.zeros((12, 3))))
    y = selective_scan_seq(None, params, inputs)
    want = params.D.data * inputs.x.data
    assert np.abs(y.data - want).max() < 1e-14


def test_chunk_equal_to_length_matches_sequential_bitwise():
    params, inputs = random_case(33, 2, 4, seed=2)
    ys = selective_scan_seq(None, params, inputs)
    yc = selective_scan_chunked(None, params, inputs, 33)
    assert np.abs(ys.data - yc.data).max() < 1e-12


def test_chunk_one_matches_sequential():
    params, inputs = random_case(19, 3, 2, seed=3)
    ys = selective_scan_seq(None, params, inputs)
    yc = selective_scan_chunked(None, params, inputs, 1)
    assert np.abs(ys.data - yc.data).max() < 1e-12


def test_chunked_large_random_case():
    params, inputs = random_case(1024, 8, 4, seed=4)
    ys = selective_scan_seq(None, params, inputs)
    yc = selective_scan_chunked(None, params, inputs, 64)
    assert np.abs(ys.data - yc.data).max() < 1e-10


@pytest.mark.parametrize("length", [1, 2, 7, 64])
@pytest.mark.parametrize("chunk", [1, 2, 7, 64, None])
def test_chunked_equivalence_grid(length, chunk):
    params, inputs = random_case(length, 3, 4, seed=100 + length)
    ys = selective_scan_seq(None, params, inputs)
    yc = selective_scan_chunked(None, params, inputs,
                                length if chunk is None else chunk)
    assert np.abs(ys.data - yc.data).max() < 1e-10


def test_chunk_below_one_rejected():
    params, inputs = random_case(4, 1, 1, seed=5)
    with pytest.raises(DomainError):
        selective_scan_chunked(None, params, inputs, 0)


def test_negative_delta_rejected():
    params, inputs = random_case(4, 2, 2, seed=6)
    bad = ScanInputs(inputs.x, Tensor(-np.ones((4, 2))), inputs.B, inputs.C)
    with pytest.raises(DomainError):
        selective_scan_seq(None, params, bad)


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------


def test_stability_bounded_state_output():
    params, inputs = random_case(512, 4, 4, seed=7)
    delta = Tensor(rng.uniform(0.01, 1.0, (512, 4)))
    inputs = ScanInputs(inputs.x, delta, inputs.B, inputs.C)
    a = -np.exp(params.A_log.data)
    abar_max = np.exp(delta.data[:, :, None] * a).max()
    assert 0.0 < abar_max < 1.0
    y = selective_scan_seq(None, params, inputs)
    assert np.all(np.isfinite(y.data))
    # crude but rigorous bound: |h| <= sup|Bbar x| / (1 - max Abar)
    _, bbar = zoh_discretize(a[None], inputs.B.data[:, None, :], delta.data[:, :, None])
    bound = np.abs(bbar * inputs.x.data[:, :, None]).max() / (1.0 - abar_max)
    yskip = params.D.data * inputs.x.data
    assert np.abs(y.data - yskip).max() <= 4 * bound * np.abs(inputs.C.data).max() + 1e-12


def test_causality_under_future_perturbation():
    params, inputs = random_case(32, 3, 2, seed=8)
    y0 = selective_scan_seq(None, params, inputs).data
    cut = 17
    for field in ("x", "delta", "B", "C"):
        arrs = {k: getattr(inputs, k).data.copy() for k in ("x", "delta", "B", "C")}
        arrs[field][cut:] = rng.uniform(0.1, 2.0, arrs[field][cut:].shape)
        perturbed = ScanInputs(**{k: Tensor(v) for k, v in arrs.items()})
        y1 = selective_scan_seq(None, params, perturbed).data
        assert np.array_equal(y0[:cut], y1[:cut]), field


def test_linearity_in_output_mix():
    params, inputs = random_case(24, 3, 4, seed=9)
    y1 = selective_scan_seq(None, params, inputs).data
    scaled = ScanInputs(inputs.x, inputs.delta, inputs.B,
                        Tensor(3.0 * inputs.C.data))
    y3 = selective_scan_seq(None, params, scaled).data
    skip = params.D.data * inputs.x.data
    assert np.abs((y3 - skip) - 3.0 * (y1 - skip)).max() < 1e-10


def test_scan_gradients_pass_finite_differences():
    assert run_gradcheck("sscan") < 1e-4
