"""Distributional comparison of rescaled paths against the homogenized limit.

The limit ``X*_t`` is symmetric alpha-stable with symbol ``t psi_bar``.  Its
one-dimensional projections ``<v, X*_t>`` equal ``c^(1/alpha) S`` with
``c = -t psi_bar(v)`` and ``S`` standard (characteristic function
``exp(-|u|^alpha)``), whose CDF is obtained by Gil-Pelaez inversion

    G(z) = 1/2 + (1/pi) int_0^inf sin(u z) exp(-u^alpha) / u du.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special
from scipy.interpolate import PchipInterpolator

from . import seeding
from .errors import QuadratureFailure, WindowEmpty
from .homogenize import homogenized_symbol
from .sde_sim import run_ensemble

D_THRESHOLD = 0.05
KS_THRESHOLD = 0.03
CDF_TOL = 1e-6
TAG_SWEEP = 31
TAG_BOOT = 32


@dataclass
class CFGrid:
    xi: np.ndarray
    values: np.ndarray
    stderr: np.ndarray

    def to_dict(self):
        return {"xi": self.xi.tolist(), "re": self.values.real.tolist(), "im": self.values.imag.tolist(),
                "stderr": self.stderr.tolist()}


def empirical_cf(samples, xi):
    """Mean of ``exp(i <xi, X>)`` with jackknife standard errors.

    For a sample mean the jackknife variance reduces to
    ``sum |z_i - z_bar|^2 / (N (N - 1))``.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    N = X.shape[0]
    if N < 100:
        raise ValueError("empirical_cf needs at least 100 samples")
    vals = np.empty(xi.shape[0], dtype=complex)
    se = np.empty(xi.shape[0])
    for k, q in enumerate(xi):
        ph = X @ q
        c, s = np.cos(ph), np.sin(ph)
        mc, ms = c.mean(), s.mean()
        vals[k] = complex(mc, ms)
        se[k] = math.sqrt((np.sum((c - mc) ** 2) + np.sum((s - ms) ** 2)) / (N * (N - 1)))
    return CFGrid(xi, vals, se)


def default_xi_grid(mu, n_points=25, r_min=0.25, r_max=4.0):
    """``xi = 0`` plus test directions times log-spaced radii.

    Directions are the spectral atoms up to sign, then normalized sums and
    differences of pairs of them ("diagonals"), deduplicated up to sign.
    """
    base = [np.asarray(p, dtype=float) for p in mu.pair_directions]
    cand = list(base)
    for i in range(len(base)):
        for j in range(i + 1, len(base)):
            for v in (base[i] + base[j], base[i] - base[j]):
                nv = np.linalg.norm(v)
                if nv > 1e-9:
                    cand.append(v / nv)
    dirs = []
    for v in cand:
        if all(min(np.linalg.norm(v - w), np.linalg.norm(v + w)) > 1e-9 for w in dirs):
            dirs.append(v)
    dirs = dirs[: n_points - 1]
    n_r = max(1, (n_points - 1) // len(dirs))
    radii = np.geomspace(r_min, r_max, n_r)
    pts = [np.zeros(mu.dim)] + [r * v for v in dirs for r in radii]
    return np.array(pts)


# ---------------------------------------------------------------------------
# limit marginals


def _u_max(alpha):
    return 40.0 ** (1.0 / alpha)


def standard_cdf(z, alpha):
    """CDF of the standard symmetric stable law at scalar ``z`` (Gil-Pelaez)."""
    z = float(z)
    if z == 0.0:
        return 0.5
    U = _u_max(alpha)
    si = special.sici(U * abs(z))[0]

    def g(u):
        return np.expm1(-u ** alpha) / u if u > 0 else 0.0

    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            rem, err = integrate.quad(g, 0.0, U, weight="sin", wvar=abs(z), epsabs=1e-11, epsrel=1e-11, limit=400)
        except integrate.IntegrationWarning as exc:
            raise QuadratureFailure(f"Gil-Pelaez quadrature failed at z={z}: {exc}") from exc
    if err > CDF_TOL * 0.1:
        raise QuadratureFailure(f"Gil-Pelaez error estimate {err:.2e} at z={z}")
    val = 0.5 + (si + rem) / np.pi
    return val if z > 0 else 1.0 - val


def _tail_constant(alpha):
    return special.gamma(alpha) * math.sin(math.pi * alpha / 2) / math.pi


class StandardStableCDF:
    """Interpolated standard symmetric stable CDF.

    Exact Gil-Pelaez values on a sinh-spaced grid over ``[-z_max, z_max]``
    are interpolated monotonically; beyond the grid the Pareto tail
    ``Gamma(alpha) sin(pi alpha / 2) / pi |z|^(-alpha)`` is used.
    """

    def __init__(self, alpha, z_max=1e3, n_grid=801):
        self.alpha = float(alpha)
        self.z_max = z_max
        w = np.linspace(0.0, np.arcsinh(z_max), n_grid)
        zp = np.sinh(w)
        gp = np.array([standard_cdf(z, alpha) for z in zp])
        z = np.concatenate([-zp[:0:-1], zp])
        g = np.concatenate([1.0 - gp[:0:-1], gp])
        self._interp = PchipInterpolator(z, g)
        self._tail = _tail_constant(alpha)

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        out = np.empty_like(z)
        inside = np.abs(z) <= self.z_max
        out[inside] = self._interp(z[inside])
        far = ~inside
        t = self._tail * np.abs(z[far]) ** (-self.alpha)
        out[far] = np.where(z[far] > 0, 1.0 - t, t)
        return np.clip(out, 0.0, 1.0)


_CDF_CACHE = {}


def _std_cdf(alpha):
    key = round(float(alpha), 12)
    if key not in _CDF_CACHE:
        _CDF_CACHE[key] = StandardStableCDF(alpha)
    return _CDF_CACHE[key]


def projection_scale(law, v, t):
    """Scale ``c^(1/alpha)`` of ``<v, X*_t>`` relative to the standard law."""
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-12:
        raise ValueError("direction must be a unit vector")
    c = -t * float(homogenized_symbol(v, law))
    return c ** (1.0 / law.alpha)


def limit_marginal_cdf(law, v, t, x, exact=False):
    """CDF of ``<v, X*_t>`` at the points ``x``.

    ``exact=True`` evaluates the inversion integral at every point; otherwise
    a cached interpolant of the standard CDF is scaled.
    """
    scale = projection_scale(law, v, t)
    x = np.asarray(x, dtype=float)
    if exact:
        return np.vectorize(lambda z: standard_cdf(z / scale, law.alpha))(x)
    return _std_cdf(law.alpha)(x / scale)


def ks_statistic(samples, cdf):
    """Kolmogorov-Smirnov distance between ``samples`` and a vectorized ``cdf``."""
    s = np.sort(np.asarray(samples, dtype=float))
    n = s.size
    F = cdf(s)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def ks_vs_limit(samples, law, v, t):
    return ks_statistic(samples, lambda x: limit_marginal_cdf(law, v, t, x))


# ---------------------------------------------------------------------------
# stability index


def _abs_cf(x, xi):
    ph = np.outer(x, xi)
    return np.hypot(np.cos(ph).mean(axis=0), np.sin(ph).mean(axis=0))


def _window_slope(x, xi, lo, hi):
    a = _abs_cf(x, xi)
    use = (a >= lo) & (a <= hi)
    if use.sum() < 3:
        raise WindowEmpty(f"only {int(use.sum())} frequencies with |CF| in [{lo}, {hi}]")
    return float(np.polyfit(np.log(xi[use]), np.log(-np.log(a[use])), 1)[0]), int(use.sum())


def stability_index_estimate(samples, n_boot=100, seed=0, window=(0.2, 0.8), n_xi=40, min_samples=10_000):
    """Slope of ``log(-log|CF(xi)|)`` against ``log xi`` with a bootstrap interval.

    The frequency grid is log-spaced around the reciprocal of the sample
    median absolute value; the regression uses frequencies with ``|CF|`` in
    ``window``.  Returns ``(alpha_hat, (lo, hi), n_used)``.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < min_samples:
        raise ValueError(f"need at least {min_samples} samples")
    x = x - np.median(x)
    s = float(np.median(np.abs(x)))
    if not s > 0:
        raise WindowEmpty("degenerate sample")
    xi = np.geomspace(0.05, 5.0, n_xi) / s
    est, used = _window_slope(x, xi, *window)
    rng = seeding.make_rng(seeding.derive_seed(seed, TAG_BOOT))
    boots = []
    for _ in range(n_boot):
        xb = x[rng.integers(0, x.size, x.size)]
        try:
            boots.append(_window_slope(xb, xi, *window)[0])
        except WindowEmpty:
            continue
    lo, hi = (np.percentile(boots, [2.5, 97.5]) if boots else (est, est))
    return est, (float(lo), float(hi)), used


# ---------------------------------------------------------------------------
# sweep


@dataclass
class ConvergenceReport:
    n_values: list
    D: list
    D_stderr: list
    ks: list
    alpha_hat: list
    alpha_ci: list
    monotone: bool
    verdict: str
    settings: dict = field(default_factory=dict)
    cf: list = field(default_factory=list)

    def to_dict(self):
        return {"n": self.n_values, "D": self.D, "D_stderr": self.D_stderr, "ks": self.ks,
                "alpha_hat": self.alpha_hat, "alpha_ci": self.alpha_ci, "monotone": self.monotone,
                "verdict": self.verdict, "settings": self.settings, "cf": self.cf}

    def _rows(self):
        for i, n in enumerate(self.n_values):
            yield [n, repr(self.D[i]), repr(self.D_stderr[i])] + [repr(k) for k in self.ks[i]] + [
                repr(a) for a in self.alpha_hat[i]]

    def to_csv(self, header_lines=()):
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        d = len(self.ks[0]) if self.ks else 0
        w.writerow(["n", "D", "D_stderr"] + [f"ks{j + 1}" for j in range(d)] + [f"alpha_hat{j + 1}" for j in range(d)])
        for row in self._rows():
            w.writerow(row)
        return buf.getvalue()

    def plot_csv(self, header_lines=()):
        """Plot data: ``n, D_n, stderr, alpha_hat (max deviation), KS (max)``."""
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "D", "stderr", "alpha_hat", "ks"])
        alpha = self.settings.get("alpha", 0.0)
        for i, n in enumerate(self.n_values):
            a = max(self.alpha_hat[i], key=lambda v: abs(v - alpha))
            w.writerow([n, repr(self.D[i]), repr(self.D_stderr[i]), repr(a), repr(max(self.ks[i]))])
        return buf.getvalue()


def cf_distance(samples, law, t, xi):
    """``max_xi |CF_emp(xi) - exp(t psi_bar(xi))|`` and the standard error at the maximizer."""
    cf = empirical_cf(samples, xi)
    target = np.exp(t * homogenized_symbol(xi, law))
    diff = np.abs(cf.values - target)
    k = int(np.argmax(diff))
    return float(diff[k]), float(cf.stderr[k]), cf, target


def is_nonincreasing(D, se, n_se=2.0):
    """``D[i+1] <= D[i] + n_se sqrt(se[i]^2 + se[i+1]^2)`` for all consecutive pairs."""
    return all(D[i + 1] <= D[i] + n_se * math.hypot(se[i], se[i + 1]) for i in range(len(D) - 1))


def rescaled_marginals(coeffs, noise, cfg, n, n_paths, mean_drift, t=1.0, threads=1, seed_offset=0,
                       return_ensemble=False):
    """Samples of ``X^(n)_t`` from an ensemble simulated to ``n t``."""
    run_cfg = cfg.with_(horizon=float(n * t))
    ens = run_ensemble(coeffs, noise, run_cfg, n_paths, record_times=[n * t], threads=threads,
                       seed_offset=seed_offset)
    ok = ens.ok_mask()
    x = ens.states[ok, 0, :]
    x0 = np.asarray(cfg.x0, dtype=float)
    drift = np.asarray(mean_drift, dtype=float)
    out = n ** (-1.0 / noise.alpha) * (x - n * t * drift - x0)
    return (out, ens) if return_ensemble else out


def convergence_sweep(coeffs, noise, law, n_list, n_paths, cfg, mean_drift, t=1.0, xi=None, threads=1,
                      D_threshold=D_THRESHOLD, alpha_boot=100, ensemble_sink=None):
    """Compare ``X^(n)_t`` with ``X*_t`` for each ``n``.

    Each ``n`` uses its own derived seed.  Verdict ``PASS`` requires
    ``D_{n_max} < D_threshold`` and a sequence ``D_n`` that is nonincreasing
    within two combined standard errors.  ``ensemble_sink(n, ensemble)`` is
    called with each raw ensemble when given.
    """
    if xi is None:
        xi = default_xi_grid(noise.mu)
    d = noise.dim
    D, se, ks, ah, ci, cfs = [], [], [], [], [], []
    for j, n in enumerate(n_list):
        sub = cfg.with_(seed=seeding.derive_seed(cfg.seed, TAG_SWEEP, j))
        X, ens = rescaled_marginals(coeffs, noise, sub, int(n), n_paths, mean_drift, t, threads,
                                    return_ensemble=True)
        if ensemble_sink is not None:
            ensemble_sink(int(n), ens)
        del ens
        dist, err, cf, target = cf_distance(X, law, t, xi)
        D.append(dist)
        se.append(err)
        ks.append([ks_vs_limit(X[:, k], law, np.eye(d)[k], t) for k in range(d)])
        a_row, c_row = [], []
        for k in range(d):
            a, (lo, hi), _ = stability_index_estimate(X[:, k], n_boot=alpha_boot, seed=sub.seed,
                                                      min_samples=min(10_000, X.shape[0]))
            a_row.append(a)
            c_row.append([lo, hi])
        ah.append(a_row)
        ci.append(c_row)
        cfs.append({"n": int(n), "re": cf.values.real.tolist(), "im": cf.values.imag.tolist(),
                    "stderr": cf.stderr.tolist(), "target": target.tolist()})
    mono = is_nonincreasing(D, se)
    verdict = "PASS" if (D[-1] < D_threshold and mono) else "FAIL"
    settings = {"alpha": noise.alpha, "t": t, "n_paths": int(n_paths), "D_threshold": D_threshold,
                "mean_drift": np.asarray(mean_drift, dtype=float).tolist(), "xi": np.asarray(xi).tolist(),
                "sim": cfg.to_dict()}
    return ConvergenceReport([int(n) for n in n_list], D, se, ks, ah, ci, mono, verdict, settings, cfs)
