import math

import numpy as np
import pytest

from lvhg import seeding
from lvhg.errors import WindowEmpty
from lvhg.homogenize import HomogenizedLaw, sample_limit
from lvhg.periodic_model import constant_coefficients
from lvhg.sde_sim import SimConfig
from lvhg.stable_core import StableNoise, axis_measure, sample_stable_1d
from lvhg.verify import (
    StandardStableCDF,
    convergence_sweep,
    default_xi_grid,
    empirical_cf,
    is_nonincreasing,
    ks_statistic,
    ks_vs_limit,
    limit_marginal_cdf,
    stability_index_estimate,
    standard_cdf,
)

Z = [-3.0, -1.0, 0.5, 2.0, 10.0]
# scipy.stats.levy_stable (beta = 0, scale 1), see tests/oracles.py; frozen
SCIPY_CDF = {
    1.5: [0.051597803559184974, 0.24365797560072955, 0.6394042264812716, 0.8949601703451708, 0.9933601908022316],
    1.2: [0.07949754417996135, 0.24663218873659032, 0.6428420576949292, 0.871772639868079, 0.9820320813270788],
}


def stable_draws(n, alpha=1.5, seed=0):
    from lvhg.stable_core import cms_standard

    rng = seeding.make_rng(seed)
    return cms_standard(alpha, (rng.random(n) - 0.5) * np.pi, rng.standard_exponential(n))


def test_empirical_cf_basics():
    x = stable_draws(1000).reshape(-1, 1)
    xi = np.array([[0.0], [0.7], [2.0]])
    cf = empirical_cf(x, xi)
    assert cf.values[0] == 1.0
    neg = empirical_cf(-x, xi)
    assert np.allclose(neg.values, np.conj(cf.values), atol=1e-15)
    assert np.all(np.abs(cf.values) <= 1 + 3 * cf.stderr)
    zero = empirical_cf(np.zeros((200, 2)), np.random.default_rng(0).normal(size=(5, 2)))
    assert np.all(zero.values == 1.0)
    with pytest.raises(ValueError):
        empirical_cf(np.zeros((50, 1)), xi)


def test_default_xi_grid(axis_noise):
    xi = default_xi_grid(axis_noise.mu)
    assert xi.shape == (25, 2)
    assert np.array_equal(xi[0], [0.0, 0.0])
    r = np.linalg.norm(xi[1:], axis=1)
    assert r.min() == pytest.approx(0.25) and r.max() == pytest.approx(4.0)


@pytest.mark.parametrize("alpha", [1.5, 1.2])
def test_standard_cdf_against_scipy(alpha):
    for z, ref in zip(Z, SCIPY_CDF[alpha]):
        assert abs(standard_cdf(z, alpha) - ref) < 1e-6
    assert standard_cdf(0.0, alpha) == 0.5


def test_interpolant_accuracy():
    F = StandardStableCDF(1.5)
    z = np.concatenate([np.linspace(-30, 30, 61) + 0.013, [-2e3, 5e3]])
    exact = np.array([standard_cdf(v, 1.5) for v in z])
    assert np.max(np.abs(F(z) - exact)) < 1e-6
    g = F(np.linspace(-1e4, 1e4, 20001))
    assert np.all(np.diff(g) >= 0) and g[0] < 1e-3 and g[-1] > 1 - 1e-3


def test_limit_cdf_monte_carlo(axis_noise):
    law = HomogenizedLaw(1.5, axis_noise.mu)
    v = np.array([0.6, 0.8])
    assert limit_marginal_cdf(law, v, 1.0, np.array([0.0]))[0] == pytest.approx(0.5, abs=1e-12)
    x = sample_limit(law, 1.0, seeding.make_rng(3), 100_000) @ v
    assert ks_vs_limit(x, law, v, 1.0) < 0.01
    with pytest.raises(ValueError):
        limit_marginal_cdf(law, np.array([1.0, 1.0]), 1.0, np.zeros(1))


def test_exact_and_interpolated_agree(axis_noise):
    law = HomogenizedLaw(1.5, axis_noise.mu.scaled(1.7))
    x = np.linspace(-8, 8, 17)
    a = limit_marginal_cdf(law, np.array([1.0, 0.0]), 2.0, x)
    b = limit_marginal_cdf(law, np.array([1.0, 0.0]), 2.0, x, exact=True)
    assert np.max(np.abs(a - b)) < 1e-6


def test_ks_statistic_uniform():
    u = (np.arange(1000) + 0.5) / 1000
    assert ks_statistic(u, lambda s: s) == pytest.approx(0.0005)


def test_alpha_hat_stable_and_gaussian():
    a, (lo, hi), used = stability_index_estimate(stable_draws(100_000, seed=4), n_boot=50)
    assert 1.45 <= a <= 1.55 and lo <= a <= hi and used >= 3
    g, _, _ = stability_index_estimate(np.random.default_rng(5).normal(size=100_000), n_boot=20)
    assert 1.9 <= g <= 2.1


def test_alpha_hat_scale_invariant():
    x = stable_draws(50_000, seed=6)
    a, ci_a, _ = stability_index_estimate(x, n_boot=50, min_samples=10_000)
    b, ci_b, _ = stability_index_estimate(7.3 * x, n_boot=50, min_samples=10_000)
    assert max(ci_a[0], ci_b[0]) <= min(ci_a[1], ci_b[1])


def test_alpha_hat_preconditions():
    with pytest.raises(ValueError):
        stability_index_estimate(np.ones(100))
    with pytest.raises(WindowEmpty):
        stability_index_estimate(np.zeros(20_000))


def test_is_nonincreasing():
    assert is_nonincreasing([0.10, 0.05, 0.051], [0.01, 0.01, 0.01])
    assert not is_nonincreasing([0.05, 0.10], [0.01, 0.01])
    assert is_nonincreasing([0.05], [0.01])


@pytest.mark.parametrize("beta", [(0.0, 0.0), (0.4, -0.3)])
def test_sweep_constant_coefficients(axis_noise, beta):
    coeffs = constant_coefficients(2, beta)
    law = HomogenizedLaw(1.5, axis_noise.mu)
    N = 10_000
    cfg = SimConfig("increment-euler", 0.01, 1.0, (0.0, 0.0), seed=7)
    rep = convergence_sweep(coeffs, axis_noise, law, [1, 4, 16], N, cfg, np.array(beta), threads=4, alpha_boot=20)
    assert all(D < 4 / math.sqrt(N) for D in rep.D)
    assert rep.verdict == "PASS" and rep.monotone
    assert all(max(k) < 0.02 for k in rep.ks)
    d = rep.to_dict()
    assert d["n"] == [1, 4, 16] and len(d["D"]) == 3
    lines = rep.plot_csv(["config_hash=h,seed=7"]).splitlines()
    assert lines[1] == "n,D,stderr,alpha_hat,ks" and len(lines) == 5
    assert rep.to_csv().splitlines()[0].startswith("n,D,D_stderr,ks1,ks2")
