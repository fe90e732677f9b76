import io
import math

import numpy as np
import pytest
from scipy import stats

import oracles
from lvhg import seeding
from lvhg.errors import EnsembleFailure, HorizonTooShort, NumericOverflow
from lvhg.homogenize import HomogenizedLaw
from lvhg.periodic_model import constant_coefficients
from lvhg.sde_sim import (
    SimConfig,
    ensemble_csv,
    read_ensemble_binary,
    rescale,
    rescale_ensemble,
    run_ensemble,
    simulate,
    simulate_euler,
    simulate_jump_adapted,
    small_jump_variance,
    write_ensemble_binary,
)
from lvhg.stable_core import SpectralMeasure, StableNoise, large_jump_rate, levy_symbol
from lvhg.verify import default_xi_grid, ks_vs_limit
from conftest import cf_within

# two-sample KS critical value at level 0.01 for equal sizes n
def ks2_crit(n):
    return 1.63 * math.sqrt(2.0 / n)


def test_simconfig_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.2)
    with pytest.raises(ValueError):
        SimConfig(eps=1.5)
    with pytest.raises(ValueError):
        SimConfig(scheme="rk4")
    assert SimConfig(dt=0.01).jump_eps(1.5) == pytest.approx(0.01 ** (1 / 1.5))


def test_euler_free_noise_cf(axis_noise, free2):
    cfg = SimConfig("increment-euler", 0.01, 1.0, (0.3, -0.2), seed=1)
    ens = run_ensemble(free2, axis_noise, cfg, 10_000, record_times=[1.0])
    x = ens.states[:, 0] - np.array(cfg.x0)
    xi = default_xi_grid(axis_noise.mu)
    _, ok = cf_within(x, xi, np.exp(levy_symbol(xi, axis_noise.mu, 1.5)))
    assert ok


def test_constant_drift_decouples(axis_noise, free2):
    beta = np.array([0.3, -0.7])
    cfg = SimConfig("increment-euler", 0.01, 1.0, (0.0, 0.0), seed=2)
    a = run_ensemble(free2, axis_noise, cfg, 200)
    b = run_ensemble(constant_coefficients(2, beta), axis_noise, cfg, 200)
    shift = b.states - a.states
    assert np.allclose(shift, a.times[None, :, None] * beta, atol=1e-9)


def test_zero_noise_reproduces_flow(f1):
    tiny = StableNoise(1.5, SpectralMeasure([[1, 0], [-1, 0], [0, 1], [0, -1]], [1e-12] * 4))
    x0 = (0.1, 0.2)
    ref = oracles.rk4_flow(lambda x: f1.eval_b(x[None])[0], x0, 1.0, 10_000)
    errs = []
    for dt in (0.02, 0.01, 0.005):
        p = simulate_euler(f1, tiny, SimConfig("increment-euler", dt, 1.0, x0, seed=3), 7)
        errs.append(np.max(np.abs(p.states[-1] - ref)))
    assert errs[0] < 0.05
    assert errs[1] / errs[0] == pytest.approx(0.5, abs=0.1)
    assert errs[2] / errs[1] == pytest.approx(0.5, abs=0.1)


def test_path_invariants(f1, axis_noise):
    for scheme in ("increment-euler", "jump-adapted"):
        p = simulate(f1, axis_noise, SimConfig(scheme, 0.01, 1.0, (0.4, 0.1), seed=4), 123)
        assert len(p.times) == len(p.states)
        assert np.all(np.diff(p.times) > 0) and p.times[0] == 0.0
        assert np.array_equal(p.states[0], [0.4, 0.1])
        assert p.path_seed == 123


def test_jump_adapted_matches_exact_law(axis_noise, free2):
    law = HomogenizedLaw(1.5, axis_noise.mu)
    cfg = SimConfig("jump-adapted", 0.01, 1.0, (0.0, 0.0), seed=5, small_jumps="gaussian")
    ens = run_ensemble(free2, axis_noise, cfg, 10_000, record_times=[1.0], threads=4)
    for k in range(2):
        assert ks_vs_limit(ens.states[:, 0, k], law, np.eye(2)[k], 1.0) < 0.02


def test_jump_count_is_poisson(axis_noise, free2):
    eps, T = 0.5, 1.0
    cfg = SimConfig("jump-adapted", 0.01, T, (0.0, 0.0), seed=6, eps=eps)
    n_grid = cfg.n_steps + 1
    counts = np.array([len(simulate_jump_adapted(free2, axis_noise, cfg, s).times) - n_grid for s in range(2000)])
    rate = T * large_jump_rate(axis_noise.mu, 1.5, eps)
    assert abs(counts.mean() - rate) < 3 * math.sqrt(rate / counts.size)


def test_no_jump_is_pure_drift(f1, axis_noise):
    cfg = SimConfig("jump-adapted", 0.01, 0.01, (0.2, 0.3), seed=7, eps=1.0)
    for s in range(100):
        p = simulate_jump_adapted(f1, axis_noise, cfg, s)
        if len(p.times) == 2:
            expect = np.array(cfg.x0) + 0.01 * f1.eval_b(np.array([cfg.x0]))[0]
            assert np.allclose(p.states[-1], expect, atol=1e-15)
            return
    pytest.fail("no jump-free seed found")


def test_small_jump_metadata(axis_noise, free2):
    cfg = SimConfig("jump-adapted", 0.01, 0.1, (0.0, 0.0), seed=1)
    ens = run_ensemble(free2, axis_noise, cfg, 5)
    eps = 0.01 ** (1 / 1.5)
    assert ens.meta["small_jump_variance"] == pytest.approx(2.0 * eps ** 0.5 / 0.5)
    assert small_jump_variance(axis_noise, eps) == ens.meta["small_jump_variance"]


def test_scheme_agreement_f1(f1, axis_noise):
    cfg = SimConfig("increment-euler", 0.01, 1.0, (0.0, 0.0), seed=8)
    a = run_ensemble(f1, axis_noise, cfg, 10_000, record_times=[1.0], threads=4)
    b = run_ensemble(f1, axis_noise, cfg.with_(scheme="jump-adapted", small_jumps="gaussian"), 10_000,
                     record_times=[1.0], threads=4, seed_offset=10_000)
    for k in range(2):
        assert stats.ks_2samp(a.states[:, 0, k], b.states[:, 0, k]).statistic < 0.03


def test_dt_refinement_within_noise(f1, axis_noise):
    n = 10_000
    cfg = SimConfig("increment-euler", 0.01, 1.0, (0.0, 0.0), seed=9)
    a = run_ensemble(f1, axis_noise, cfg, n, record_times=[1.0], threads=4)
    b = run_ensemble(f1, axis_noise, cfg.with_(dt=0.005), n, record_times=[1.0], threads=4, seed_offset=n)
    for k in range(2):
        assert stats.ks_2samp(a.states[:, 0, k], b.states[:, 0, k]).statistic < ks2_crit(n)


def test_overflow_reported(axis_noise):
    wild = constant_coefficients(2, (1e14, 0.0))
    cfg = SimConfig("increment-euler", 0.01, 0.1, (0.0, 0.0), seed=1)
    with pytest.raises(NumericOverflow):
        simulate_euler(wild, axis_noise, cfg, 0)
    with pytest.raises(EnsembleFailure):
        run_ensemble(wild, axis_noise, cfg, 10)


def test_rescale(f1, axis_noise):
    cfg = SimConfig("increment-euler", 0.01, 4.0, (0.0, 0.0), seed=10)
    p = simulate_euler(f1, axis_noise, cfg, 1)
    r1 = rescale(p, 1, np.zeros(2), 1.5)
    assert np.array_equal(r1.states, p.states) and np.array_equal(r1.times, p.times)
    r = rescale(p, 4, np.array([0.3, 0.0]), 1.5, t_max=1.0)
    assert np.array_equal(r.states[0], [0.0, 0.0])
    assert r.times[-1] == pytest.approx(1.0)
    with pytest.raises(HorizonTooShort):
        rescale(p, 8, np.zeros(2), 1.5, t_max=1.0)
    shifted = simulate_euler(constant_coefficients(2), axis_noise, cfg.with_(x0=(5.0, -2.0)), 1)
    base = simulate_euler(constant_coefficients(2), axis_noise, cfg, 1)
    assert np.allclose(rescale(shifted, 2, np.zeros(2), 1.5).states, rescale(base, 2, np.zeros(2), 1.5).states,
                       atol=1e-12)


def test_rescaled_free_noise_self_similar(axis_noise, free2):
    n = 16
    cfg = SimConfig("increment-euler", 0.01, float(n), (0.0, 0.0), seed=11)
    ens = run_ensemble(free2, axis_noise, cfg, 10_000, record_times=[0.0, float(n)], threads=4)
    _, st = rescale_ensemble(ens, n, np.zeros(2), 1.5)
    xi = default_xi_grid(axis_noise.mu)
    _, ok = cf_within(st[:, -1], xi, np.exp(levy_symbol(xi, axis_noise.mu, 1.5)))
    assert ok


def test_ensemble_thread_invariance(f1, axis_noise):
    for scheme in ("increment-euler", "jump-adapted"):
        cfg = SimConfig(scheme, 0.01, 0.5, (0.0, 0.0), seed=12)
        a = run_ensemble(f1, axis_noise, cfg, 2500, threads=1)
        b = run_ensemble(f1, axis_noise, cfg, 2500, threads=4)
        assert np.array_equal(a.states, b.states)


def test_single_path_matches_simulate(f1, axis_noise):
    for scheme in ("increment-euler", "jump-adapted"):
        cfg = SimConfig(scheme, 0.01, 0.5, (0.0, 0.0), seed=13)
        ens = run_ensemble(f1, axis_noise, cfg, 1)
        p = simulate(f1, axis_noise, cfg, seeding.derive_seed(13, 0))
        grid = np.isin(np.round(p.times / cfg.dt, 9), np.arange(cfg.n_steps + 1))
        assert np.array_equal(ens.states[0], p.states[grid])


def test_disjoint_seeds_independent(f1, axis_noise):
    n = 5000
    cfg = SimConfig("increment-euler", 0.01, 1.0, (0.0, 0.0), seed=14)
    a = run_ensemble(f1, axis_noise, cfg, n, record_times=[1.0])
    b = run_ensemble(f1, axis_noise, cfg, n, record_times=[1.0], seed_offset=n)
    for k in range(2):
        # rank correlation: Pearson moments are not robust for alpha-stable tails
        assert abs(stats.spearmanr(a.states[:, 0, k], b.states[:, 0, k])[0]) < 4 / math.sqrt(n)


def test_lvhg1_roundtrip(f1, axis_noise):
    cfg = SimConfig("increment-euler", 0.01, 0.2, (0.0, 0.0), seed=15)
    ens = run_ensemble(f1, axis_noise, cfg, 7, record_times=[0.0, 0.1, 0.2])
    buf = io.BytesIO()
    write_ensemble_binary(ens, buf, "ab" * 32, 15)
    raw = buf.getvalue()
    assert raw[:5] == b"LVHG1"
    buf.seek(0)
    times, states, meta = read_ensemble_binary(buf)
    assert np.array_equal(times, ens.times) and np.array_equal(states, ens.states)
    assert meta == {"d": 2, "n_paths": 7, "n_times": 3, "seed": 15, "config_hash": "ab" * 32}
    with pytest.raises(ValueError):
        read_ensemble_binary(io.BytesIO(b"XXXXX" + raw[5:]))
    text = ensemble_csv(ens, ["config_hash=x,seed=15"])
    lines = text.splitlines()
    assert lines[0] == "# config_hash=x,seed=15" and lines[1] == "path,time,x1,x2"
    assert len(lines) == 2 + 7 * 3
