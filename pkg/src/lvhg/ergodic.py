"""Invariant measure, spectral gap and ergodic-average variance on the torus.

Two independent estimators of the invariant probability ``pi`` are provided:
the time-weighted occupation histogram of long chains, and the stationary
vector of an empirical cell-to-cell transition matrix.  Grid functions are
integrated against ``pi`` with the midpoint rule at cell centres.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from . import seeding
from .errors import InsufficientDecaySignal, NonStationary, ReducibleChainEstimate
from .periodic_model import GridFunction, TorusGrid
from .sde_sim import SimConfig, run_groups, run_observed

TV_STATIONARY_TOL = 0.05
POWER_TOL = 1e-10

# stream tags keep the estimators' random streams disjoint
TAG_OCCUPATION = 11
TAG_GRID_CHAIN = 12
TAG_GAP = 13
TAG_VARIANCE = 14


@dataclass
class TorusHistogram:
    """Probability vector over the cells of a :class:`TorusGrid`.

    ``offset_frac`` shifts the binning origin by a fraction of a cell.
    """

    grid: TorusGrid
    probs: np.ndarray
    counts: np.ndarray | None = None
    offset_frac: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float).reshape(-1)
        if p.size != self.grid.size:
            raise ValueError("probability vector does not match the grid")
        if np.any(p < 0):
            raise ValueError("probabilities must be nonnegative")
        s = p.sum()
        if not s > 0:
            raise ValueError("empty histogram")
        self.probs = p / s

    @classmethod
    def from_counts(cls, grid, counts, offset_frac=0.0):
        counts = np.asarray(counts, dtype=float).reshape(-1)
        return cls(grid, counts, counts, offset_frac)

    @property
    def m(self):
        return self.grid.m

    def centers(self):
        z = self.grid.centers_frac() + self.offset_frac / self.m
        return self.grid.lattice.from_frac(z)

    def coarsen(self, factor):
        """Merge ``factor^d`` blocks of cells."""
        if self.m % factor:
            raise ValueError("factor must divide m")
        if self.offset_frac:
            raise ValueError("cannot coarsen a shifted histogram")
        d, mc = self.grid.dim, self.m // factor
        p = self.probs.reshape((mc, factor) * d).sum(axis=tuple(range(1, 2 * d, 2)))
        return TorusHistogram(TorusGrid(self.grid.lattice, mc), p.reshape(-1))

    def tv(self, other):
        """Total-variation distance, coarsening the finer histogram if needed."""
        a, b = self, other
        if a.m != b.m:
            if a.m > b.m:
                a = a.coarsen(a.m // b.m)
            else:
                b = b.coarsen(b.m // a.m)
        return tv_distance(a.probs, b.probs)

    def to_dict(self):
        return {"m": self.m, "dim": self.grid.dim, "offset_frac": self.offset_frac,
                "lattice": self.grid.lattice.basis.tolist(), "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, obj):
        from .periodic_model import Lattice

        grid = TorusGrid(Lattice(np.array(obj["lattice"], dtype=float)), int(obj["m"]))
        return cls(grid, np.array(obj["probs"], dtype=float), None, float(obj.get("offset_frac", 0.0)))

    def to_csv(self, header_lines=()):
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        d = self.grid.dim
        w.writerow(["cell"] + [f"c{j + 1}" for j in range(d)] + ["probability"])
        for i, (c, p) in enumerate(zip(self.centers(), self.probs)):
            w.writerow([i] + [repr(float(v)) for v in c] + [repr(float(p))])
        return buf.getvalue()


@dataclass
class InvariantEstimate:
    histogram: TorusHistogram
    method: str
    burn_in: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def grid(self):
        return self.histogram.grid

    @property
    def probs(self):
        return self.histogram.probs

    def to_dict(self):
        return {"method": self.method, "burn_in": self.burn_in,
                "diagnostics": self.diagnostics, "histogram": self.histogram.to_dict()}

    @classmethod
    def from_dict(cls, obj):
        return cls(TorusHistogram.from_dict(obj["histogram"]), obj["method"],
                   float(obj.get("burn_in", 0.0)), dict(obj.get("diagnostics", {})))


@dataclass
class MixingEstimate:
    gamma: float
    K: float
    residual: float
    per_function: list = field(default_factory=list)

    def to_dict(self):
        return {"gamma": self.gamma, "K": self.K, "residual": self.residual, "per_function": self.per_function}


def tv_distance(p, q):
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


# ---------------------------------------------------------------------------
# occupation estimator


def _fourier_stats(grid, X):
    z = grid.lattice.to_frac(X)
    return np.concatenate([np.cos(2 * np.pi * z), np.sin(2 * np.pi * z)], axis=1)


class _OccupationObserver:
    def __init__(self, grid, first_step, half_step, n_steps, n_batches, offset):
        self.grid = grid
        self.first = first_step
        self.half = half_step
        self.n_steps = n_steps
        self.offset = offset
        self.halves = np.zeros((2, grid.size))
        self.n_batches = n_batches
        self.batch_len = (n_steps - first_step + 1) // n_batches
        self.batch_sums = None
        self.batch_sq = None

    def __call__(self, k, X):
        if k < self.first:
            return
        ok = np.all(np.isfinite(X), axis=1)
        Y = X[ok]
        if self.offset:
            Y = Y - self.grid.lattice.from_frac(np.full(self.grid.dim, self.offset / self.grid.m))
        idx = self.grid.cell_index(Y)
        self.halves[int(k >= self.half)] += np.bincount(idx, minlength=self.grid.size)
        b = (k - self.first) // self.batch_len
        if b < self.n_batches:
            s = _fourier_stats(self.grid, Y)
            if self.batch_sums is None:
                self.batch_sums = np.zeros((X.shape[0], self.n_batches, s.shape[1]))
                self.batch_sq = np.zeros(s.shape[1])
            self.batch_sums[ok, b] += s
            self.batch_sq += np.sum(s * s, axis=0)


def _batch_ess(batch_sums, sum_sq, batch_len):
    """Batch-means effective sample size, minimized over the Fourier statistics."""
    means = batch_sums.reshape(-1, batch_sums.shape[-1]) / batch_len
    n_total = means.shape[0] * batch_len
    grand = means.mean(axis=0)
    s2 = sum_sq / n_total - grand ** 2
    var_b = means.var(axis=0, ddof=1)
    ess = [n_total * s2[j] / (batch_len * var_b[j]) for j in range(len(s2)) if var_b[j] > 0 and s2[j] > 1e-12]
    return float(min(min(ess), n_total)) if ess else float(n_total)


def estimate_invariant_occupation(coeffs, noise, cfg, total_time, burn_in=None, m=16, n_chains=64,
                                  threads=1, offset_frac=0.0, check_stationary=True):
    """Occupation histogram of ``n_chains`` chains after burn-in.

    Every chain runs for ``total_time`` (default burn-in 10%); each recorded
    step after burn-in adds one holding time ``dt`` to the cell of the wrapped
    state.  The chains are started at ``cfg.x0``.

    Raises
    ------
    NonStationary
        If the histograms of the first and second halves of the retained
        sample differ by more than 0.05 in total variation.
    """
    if burn_in is None:
        burn_in = 0.1 * total_time
    if total_time < 10 * burn_in:
        raise ValueError("total_time must be at least 10 * burn_in")
    grid = TorusGrid(coeffs.lattice, int(m))
    run_cfg = SimConfig("increment-euler", cfg.dt, float(total_time), cfg.x0,
                        seeding.derive_seed(cfg.seed, TAG_OCCUPATION))
    n_steps = run_cfg.n_steps
    first = int(np.floor(burn_in / cfg.dt)) + 1
    half = first + (n_steps - first + 1) // 2
    n_batches = max(2, -(-20 // n_chains))

    def make(i0, i1):
        return _OccupationObserver(grid, first, half, n_steps, n_batches, offset_frac)

    observers, failures = run_observed(coeffs, noise, run_cfg, n_chains, make, threads)
    halves = sum(o.halves for o in observers)
    counts = halves.sum(axis=0)
    tv_halves = tv_distance(halves[0] / halves[0].sum(), halves[1] / halves[1].sum())
    batches = np.concatenate([o.batch_sums for o in observers], axis=0)
    ess = _batch_ess(batches, sum(o.batch_sq for o in observers), observers[0].batch_len)
    hist = TorusHistogram.from_counts(grid, counts, offset_frac)
    diag = {"tv_halves": tv_halves, "ess": ess, "n_chains": n_chains, "total_time": float(total_time),
            "dt": cfg.dt, "samples": float(counts.sum()), "failed_paths": len(failures)}
    if check_stationary and tv_halves > TV_STATIONARY_TOL:
        raise NonStationary(f"TV between sample halves is {tv_halves:.4f} > {TV_STATIONARY_TOL}")
    return InvariantEstimate(hist, "occupation", float(burn_in), diag)


# ---------------------------------------------------------------------------
# grid-chain estimator


class _TransitionObserver:
    def __init__(self, grid, g0, g1, count, n_steps):
        self.grid = grid
        self.g0, self.g1 = g0, g1
        self.count = count
        self.n_steps = n_steps
        self.dest = None

    def __call__(self, k, X):
        if k == self.n_steps:
            self.dest = X.copy()


def stationary_vector(P, tol=POWER_TOL, max_iter=200_000):
    """Left fixed point of a row-stochastic matrix by power iteration on ``(P + I) / 2``."""
    n = P.shape[0]
    pi = np.full(n, 1.0 / n)
    PT = P.T.tocsr() if sparse.issparse(P) else P.T
    for it in range(max_iter):
        nxt = 0.5 * (pi + PT @ pi)
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < tol * 1e-2 or it % 50 == 49:
            if np.abs(PT @ nxt - nxt).sum() < tol:
                return nxt, it + 1
        pi = nxt
    raise ReducibleChainEstimate("power iteration did not converge")


def estimate_invariant_grid_chain(coeffs, noise, t0, m, n_samples, seed=0, dt=0.01, threads=1):
    """Stationary vector of the empirical cell-to-cell transition matrix at lag ``t0``.

    For every cell, ``n_samples`` paths start uniformly inside the cell and
    are simulated for time ``t0``; their end cells give one row of ``P``.

    Raises
    ------
    ReducibleChainEstimate
        If the estimated chain is not irreducible (some cell never entered).
    """
    m = int(m)
    grid = TorusGrid(coeffs.lattice, m)
    if grid.size > 100_000:
        raise ValueError("m^d must not exceed 1e5")
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    n_steps = max(1, int(round(t0 / dt)))
    base = seeding.derive_seed(seed, TAG_GRID_CHAIN)
    seeds = [seeding.derive_seed(base, i) for i in range(grid.size)]
    centers_frac = grid.centers_frac()

    def start(g, rng, count):
        u = rng.random((count, grid.dim)) - 0.5
        return grid.lattice.from_frac(centers_frac[g] + u / m)

    def make(g0, g1):
        return _TransitionObserver(grid, g0, g1, n_samples, n_steps)

    observers, failures = run_groups(coeffs, noise, dt, n_steps, seeds, n_samples, start, make, threads)
    rows, cols = [], []
    for o in observers:
        ok = np.all(np.isfinite(o.dest), axis=1)
        src = np.repeat(np.arange(o.g0, o.g1), n_samples)[ok]
        rows.append(src)
        cols.append(grid.cell_index(o.dest[ok]))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    C = sparse.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(grid.size, grid.size)).tocsr()
    C.sum_duplicates()
    row_tot = np.asarray(C.sum(axis=1)).ravel()
    P = sparse.diags(1.0 / row_tot) @ C
    entered = np.asarray(C.sum(axis=0)).ravel() > 0
    if not entered.all():
        raise ReducibleChainEstimate(f"{int((~entered).sum())} cells never entered; increase n_samples")
    n_comp, _ = connected_components(C, directed=True, connection="strong")
    if n_comp > 1:
        raise ReducibleChainEstimate(f"transition graph has {n_comp} strongly connected components")
    pi, iters = stationary_vector(P)
    resid = float(np.abs(P.T @ pi - pi).sum())
    hist = TorusHistogram(grid, pi)
    diag = {"t0": float(t0), "dt": dt, "n_samples": int(n_samples), "power_iterations": iters,
            "fixed_point_residual": resid, "failed_paths": len(failures)}
    est = InvariantEstimate(hist, "grid-chain", 0.0, diag)
    est.transition = P
    return est


# ---------------------------------------------------------------------------
# integration against pi


def _grid_values(f, hist):
    if isinstance(f, GridFunction):
        if f.grid.m != hist.m or f.grid.dim != hist.grid.dim:
            raise ValueError("grid function lives on a different grid")
        return f.flat
    if callable(f):
        return np.asarray(f(hist.centers()))
    vals = np.asarray(f, dtype=float)
    return vals.reshape((hist.grid.size,) + vals.shape[hist.grid.dim:]) if vals.ndim >= hist.grid.dim else vals


def mean_pi(f, inv):
    """``sum_cells f(centre) pi(cell)``; ``f`` may be vector valued."""
    hist = inv.histogram if isinstance(inv, InvariantEstimate) else inv
    vals = _grid_values(f, hist)
    p = hist.probs
    if vals.ndim == 1:
        return float(np.dot(vals, p))
    return np.tensordot(p, vals, axes=(0, 0))


def centered(f, inv, order=3):
    """Grid function ``f - Pi(f)`` on the histogram grid."""
    hist = inv.histogram if isinstance(inv, InvariantEstimate) else inv
    vals = _grid_values(f, hist)
    return GridFunction(hist.grid, vals - mean_pi(vals, hist), order=order)


def jump_intensity_functional(coeffs, noise, inv):
    """Centred ``p(z) = int f(sigma(z) y) nu(dy) - Pi(...)`` with ``f(y) = min(|y|^2, 1)``.

    For an atomic spectral measure the integral is
    ``(1/(2-alpha) + 1/alpha) sum_k lambda_k |sigma(z) phi_k|^alpha``.
    """
    a = noise.alpha
    mu = noise.mu
    hist = inv.histogram if isinstance(inv, InvariantEstimate) else inv
    x = hist.centers()
    total = np.zeros(x.shape[0])
    for phi, lam in zip(mu.directions, mu.weights):
        v = coeffs.apply_sigma(x, np.broadcast_to(phi, x.shape))
        total += lam * np.linalg.norm(v, axis=1) ** a
    vals = (1.0 / (2.0 - a) + 1.0 / a) * total
    return centered(vals, hist)


# ---------------------------------------------------------------------------
# mixing


class _Recorder:
    def __init__(self, funcs, first, stride, n_rec, B):
        self.funcs = funcs
        self.first = first
        self.stride = stride
        self.vals = np.full((len(funcs), B, n_rec), np.nan)

    def __call__(self, k, X):
        j, r = divmod(k - self.first, self.stride)
        if k < self.first or r or j >= self.vals.shape[2]:
            return
        for i, f in enumerate(self.funcs):
            self.vals[i, :, j] = f(X)


def _as_callable(f):
    return f if callable(f) else (lambda X, f=f: f(X))


def estimate_spectral_gap(coeffs, noise, test_functions, lags, cfg, n_chains=256, total_time=None,
                          burn_in=None, threads=1, sup_norms=None):
    """Exponential decay rate of stationary autocovariances.

    ``lags`` must be multiples of ``cfg.dt``.  For each test function the
    autocovariance ``C(tau)`` is estimated from ``n_chains`` chains after
    burn-in, with standard errors from the chain-to-chain spread.  A
    log-linear least-squares fit on the lags with ``C > 5 SE`` gives
    ``(A_f, gamma_f)``; the result reports ``gamma = min gamma_f`` and
    ``K = max A_f / |f|_sup^2``.

    Raises
    ------
    InsufficientDecaySignal
        If a function has fewer than two usable lags or a nonpositive rate.
    """
    lags = np.asarray(lags, dtype=float)
    lag_steps = np.rint(lags / cfg.dt).astype(int)
    if np.any(lag_steps < 1) or np.any(np.abs(lag_steps * cfg.dt - lags) > 1e-9):
        raise ValueError("lags must be positive multiples of dt")
    stride = int(np.gcd.reduce(lag_steps))
    if total_time is None:
        total_time = 200 * lags.max()
    if burn_in is None:
        burn_in = 0.1 * total_time
    first = int(np.ceil(burn_in / cfg.dt))
    n_steps = int(round(total_time / cfg.dt))
    n_rec = (n_steps - first) // stride + 1
    run_cfg = SimConfig("increment-euler", cfg.dt, float(total_time), cfg.x0, seeding.derive_seed(cfg.seed, TAG_GAP))
    funcs = [_as_callable(f) for f in test_functions]

    def make(i0, i1):
        return _Recorder(funcs, first, stride, n_rec, i1 - i0)

    observers, _ = run_observed(coeffs, noise, run_cfg, n_chains, make, threads)
    vals = np.concatenate([o.vals for o in observers], axis=1)
    per = []
    gammas, Ks, resids = [], [], []
    for i in range(len(funcs)):
        v = vals[i]
        v = v[np.all(np.isfinite(v), axis=1)]
        v = v - v.mean()
        L = v.shape[1]
        cov, se = [], []
        for ls in lag_steps:
            s = ls // stride
            prod = v[:, : L - s] * v[:, s:]
            per_chain = prod.mean(axis=1)
            cov.append(per_chain.mean())
            se.append(per_chain.std(ddof=1) / np.sqrt(len(per_chain)))
        cov, se = np.array(cov), np.array(se)
        use = cov > 5 * se
        if use.sum() < 2:
            raise InsufficientDecaySignal(f"test function {i}: only {int(use.sum())} lags above 5 SE")
        slope, icpt = np.polyfit(lags[use], np.log(cov[use]), 1)
        fit = icpt + slope * lags[use]
        resid = float(np.sqrt(np.mean((np.log(cov[use]) - fit) ** 2)))
        g = -slope
        if not g > 0:
            raise InsufficientDecaySignal(f"test function {i}: fitted rate {g:.3g} is not positive")
        A = float(np.exp(icpt))
        sup = float(sup_norms[i]) if sup_norms is not None else float(np.max(np.abs(v)))
        gammas.append(g)
        Ks.append(A / sup ** 2)
        resids.append(resid)
        per.append({"gamma": float(g), "A": A, "sup": sup, "lags_used": int(use.sum()),
                    "cov": cov.tolist(), "se": se.tolist()})
    return MixingEstimate(float(min(gammas)), float(max(Ks)), float(max(resids)), per)


# ---------------------------------------------------------------------------
# ergodic-average variance


class _IntegralObserver:
    def __init__(self, p, n_steps, dt, B):
        self.p = p
        self.n_steps = n_steps
        self.dt = dt
        self.acc = np.zeros(B)

    def __call__(self, k, X):
        w = 0.5 if k == self.n_steps else 1.0
        self.acc += w * self.dt * self.p(X)


def ergodic_variance_decay(coeffs, noise, p, t, n_list, n_paths, cfg, threads=1, inv=None):
    """Variance over paths of ``int_0^t p(X_{ns}) ds`` for each ``n``.

    The integral equals ``(1/n) int_0^{nt} p(X_u) du`` and is evaluated with
    the trapezoidal rule on the simulation grid.  Returns ``(pairs, slope)``
    where ``slope`` is the log-log regression slope of variance against ``n``.
    """
    if inv is not None:
        mp = mean_pi(p, inv)
        if abs(mp) > 1e-6:
            from .errors import NotCentered

            raise NotCentered(f"Pi(p) = {mp:.3e}")
    f = _as_callable(p)
    x0 = np.asarray(cfg.x0, dtype=float)
    p0 = float(f(x0[None])[0])
    out = []
    for j, n in enumerate(n_list):
        run_cfg = SimConfig("increment-euler", cfg.dt, float(n * t), cfg.x0,
                            seeding.derive_seed(cfg.seed, TAG_VARIANCE, j))
        n_steps = run_cfg.n_steps

        def make(i0, i1, n_steps=n_steps):
            return _IntegralObserver(f, n_steps, cfg.dt, i1 - i0)

        observers, _ = run_observed(coeffs, noise, run_cfg, n_paths, make, threads)
        acc = np.concatenate([o.acc for o in observers])
        acc = (acc + 0.5 * cfg.dt * p0) / n
        acc = acc[np.isfinite(acc)]
        out.append((int(n), float(acc.var(ddof=1))))
    ns = np.array([o[0] for o in out], dtype=float)
    vs = np.array([o[1] for o in out])
    slope = float(np.polyfit(np.log(ns), np.log(vs), 1)[0]) if np.all(vs > 0) and len(ns) > 1 else float("nan")
    return out, slope


def variance_bound(mixing, p_sup, t, n):
    """``2 K |p|^2 t / (n gamma)``."""
    return 2.0 * mixing.K * p_sup ** 2 * t / (n * mixing.gamma)
