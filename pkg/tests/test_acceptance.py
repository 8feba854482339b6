"""End-to-end acceptance checks, one group per criterion.

Test names start with ``test_cNN_``; the conftest hook folds every test of a
group into a single PASS/FAIL line in the terminal summary.
"""
import math
import os
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from sparsebound.arch import LayerSpec, binary_tree, conv_arch, max_path_pred_product, parameter_count, random_dag
from sparsebound.arch import reference_conv_model
from sparsebound.bounds import path_factor_ratio, rho, rho_tilde
from sparsebound.checks import check_concentration, check_dominance, check_lambda, check_peeling
from sparsebound.data import IdxMagicError, IdxTruncatedError, parse_idx, write_idx
from sparsebound.sweep import SweepConfig, run_sweep
from sparsebound.tensor import forward, random_weights

from test_arch import brute_force_paths
from test_tensor import finite_difference_check, random_net, toeplitz_forward


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


# 1 ---------------------------------------------------------------------------------


def test_c01_peeling_inequality():
    rep, secs = timed(check_peeling, seed=0, trials=200)
    assert rep["trials"] == 200
    assert all(r["m"] <= 8 and r["q"] <= 3 for r in rep["instances"])
    assert rep["violations"] == 0
    assert secs < 120


# 2 ---------------------------------------------------------------------------------


def test_c02_rademacher_bound_dominates_empirical():
    rep, secs = timed(check_dominance, seed=0, trials=50)
    assert rep["trials"] == 50
    assert all(r["L"] <= 3 and r["widths"][0] <= 8 and r["m"] <= 8 and r["rho"] in (0.5, 1.0, 2.0)
               for r in rep["instances"])
    assert rep["violations"] == 0
    assert secs < 600


# 3 ---------------------------------------------------------------------------------


@pytest.mark.parametrize("L", [2, 3, 4, 5])
def test_c03_path_factor_ratio_law(L):
    g = binary_tree(L)
    X = np.full((3, 1, 2**L), 0.7)
    ratio = path_factor_ratio(g, X)
    # second route: sqrt(prod d_l * d_0) / sqrt(prod k_l) from the widths directly
    direct = math.sqrt(math.prod(g.widths[1:]) * g.widths[0]) / math.sqrt(2**L)
    target = 2 ** (0.25 * L * (L - 1))
    assert ratio == pytest.approx(target, rel=1e-9)
    assert direct == pytest.approx(target, rel=1e-9)


# 4 ---------------------------------------------------------------------------------


def shared_net(seed, out_channels):
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, 5))
    g = random_dag(rng, L, shared=True, channels=[int(rng.integers(1, 4)) for _ in range(L)] + [out_channels(rng)])
    return g, random_weights(g, rng)


def test_c04_norm_identity_single_row_output():
    for seed in range(100):
        g, w = shared_net(seed, lambda rng: 1)
        assert rho_tilde(g, w) == pytest.approx(rho(g, w) * math.sqrt(math.prod(g.widths[1:])), rel=1e-12)


def test_c04_norm_inequality_multi_row_output():
    for seed in range(100):
        g, w = shared_net(1000 + seed, lambda rng: int(rng.integers(2, 5)))
        assert rho_tilde(g, w) >= rho(g, w) * math.sqrt(math.prod(g.widths[1:])) * (1 - 1e-12)


# 5 ---------------------------------------------------------------------------------


def test_c05_gradients_match_finite_differences():
    worst = 0.0
    for seed in range(20):
        g, w, rng = random_net(500 + seed)
        assert g.L <= 4
        x = rng.standard_normal((3, g.channels[0], g.widths[0]))
        t = rng.standard_normal((3, g.channels[-1]))
        worst = max(worst, finite_difference_check(g, w, x, t))
    assert worst <= 1e-5


# 6 ---------------------------------------------------------------------------------


def test_c06_shared_conv_equals_toeplitz():
    for seed in range(20):
        rng = np.random.default_rng(700 + seed)
        c0, c1, c2 = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
        k, stride = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        n = int(rng.integers(k, 12))
        g = conv_arch((c0, 1, n), [LayerSpec("conv", (1, k), (1, stride), 0, c1), LayerSpec("fc", out_channels=c2)],
                      allow_dead=True)
        w = random_weights(g, rng)
        x = rng.standard_normal((c0, n))
        ref = toeplitz_forward(x, w.layers[0], w.layers[1], k, stride, c0, c1)
        np.testing.assert_allclose(forward(g, w, x)[0], ref, rtol=0, atol=1e-12)


# 7 ---------------------------------------------------------------------------------


def test_c07_path_product_matches_enumeration():
    for seed in range(100):
        rng = np.random.default_rng(900 + seed)
        g = random_dag(rng, int(rng.integers(1, 6)), max_width=32, max_deg=3)
        assert g.L <= 5 and max(g.widths) <= 32
        assert max_path_pred_product(g)[0] == pytest.approx(brute_force_paths(g), rel=1e-12)
        pix = rng.uniform(0, 5, size=g.widths[0])
        assert max_path_pred_product(g, pix)[0] == pytest.approx(brute_force_paths(g, pix), rel=1e-12)


# 8 ---------------------------------------------------------------------------------


@pytest.mark.parametrize("hidden_fc, wn_layers, expected", [(False, 4, 246886), (True, 5, 650343)])
def test_c08_reference_parameter_counts(hidden_fc, wn_layers, expected):
    count = parameter_count(reference_conv_model(hidden_fc=hidden_fc), weight_norm_layers=wn_layers)
    assert abs(count - expected) <= 0.002 * expected
    assert count == expected


# 9 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_c09_sweep_trend():
    cfg = SweepConfig(workers=min(4, os.cpu_count() or 1))
    assert cfg.m_values == [500, 1000, 2000, 4000] and cfg.seeds == 3 and cfg.train.epochs == 200
    res = run_sweep(cfg)
    assert all(r["status"] == "ok" for r in res["records"])
    means = [row["mean"] for row in res["rows"]]
    ratio = [r["rho_over_sqrt_m"] for r in means]
    assert all(b < a for a, b in zip(ratio, ratio[1:]))
    assert spearmanr(cfg.m_values, ratio).statistic == pytest.approx(-1.0)
    rhos = [r["rho"] for r in means]
    assert max(rhos) < 2 * min(rhos)
    assert all(r["rho_over_sqrt_m"] >= r["gen_gap"] for r in means)


# 10 --------------------------------------------------------------------------------


def test_c10_idx_round_trip_and_errors():
    raw = np.random.default_rng(10).integers(0, 256, size=(100, 28, 28), dtype=np.uint8)
    blob = write_idx(raw)
    np.testing.assert_array_equal(parse_idx(blob, scale=False), raw)
    assert write_idx(parse_idx(blob)) == blob
    with pytest.raises(IdxMagicError):
        parse_idx(b"\x00\x00\x0b\x03" + blob[4:])
    with pytest.raises(IdxTruncatedError):
        parse_idx(blob[:-7])
    assert IdxMagicError is not IdxTruncatedError
    assert not issubclass(IdxMagicError, IdxTruncatedError) and not issubclass(IdxTruncatedError, IdxMagicError)


# 11 --------------------------------------------------------------------------------


def test_c11_lambda_closed_form_is_grid_optimal():
    rep, secs = timed(check_lambda, seed=0, trials=20)
    assert rep["trials"] == 20 and rep["violations"] == 0
    assert secs < 10


# 12 --------------------------------------------------------------------------------


def test_c12_concentration_inequality():
    rep, secs = timed(check_concentration, seed=0, trials=100)
    assert rep["trials"] == 100 and all(r["m"] <= 10 for r in rep["instances"])
    assert rep["violations"] == 0 and rep["min_slack"] > 0
    assert secs < 60
