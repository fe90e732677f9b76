"""Nonlocal generator on the torus, Poisson corrector and corrector martingale.

The generator acts on periodic grid functions as

    A u(x) = <b(x), grad u(x)>
             + sum_pairs lambda_k int_0^inf [u(x + r v) + u(x - r v) - 2 u(x)] r^(-1-alpha) dr,

with ``v = sigma(x) phi_k``.  Symmetry of the spectral measure makes the
compensator term cancel pairwise.  Substituting ``s = r |v|`` gives a common
radial variable for all cells: each pair contributes
``W int [u(x + s v^) + u(x - s v^) - 2 u(x)] s^(-1-alpha) ds`` with
``W = lambda_k |v|^alpha`` and ``v^ = v / |v|``.

Radial integrals use exact product weights of piecewise-linear interpolants
on geometric nodes ``[s_min, s_max]``.  The singular core ``s < s_min`` uses
the second-order surrogate ``s^2 v^T H v`` with the directional second
difference at ``s_min`` standing in for the Hessian, which folds into the
first node.  The tail beyond ``s_max`` is dropped and its relative size
reported.  Off-grid values come from periodic cubic interpolation.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse.linalg import splu

from . import seeding
from .errors import NotCentered, QuadratureUnderResolved, SolverDivergence
from .periodic_model import GridFunction, TorusGrid
from .sde_sim import SimConfig, run_groups, run_observed
from .stable_core import stable_constant

RESOLUTION_TOL = 1e-3
DENSE_LIMIT = 6000
SOLVE_TOL = 1e-9
TAG_MC = 21
TAG_QV = 22


def lattice_scales(lattice):
    """Shortest and longest lattice basis vector lengths."""
    lens = np.linalg.norm(lattice.basis, axis=0)
    return float(lens.min()), float(lens.max())


@dataclass(frozen=True)
class RadialQuadrature:
    """Weights for ``int_0^inf g(s) s^(-1-alpha) ds`` with ``g(s) = O(s^2)`` at 0.

    Nodes grow geometrically by ``ratio`` from ``s_min`` until the spacing
    reaches ``h_cap``, then continue uniformly to ``s_max``.  ``weights[j]``
    integrates the hat function at node ``j`` exactly; ``core`` is the
    surrogate weight for ``[0, s_min]`` applied to ``g(s_min)``.
    """

    alpha: float
    s_min: float
    s_max: float
    ratio: float = 1.05
    h_cap: float = 0.125

    def __post_init__(self):
        if not (0 < self.s_min < self.s_max):
            raise ValueError("need 0 < s_min < s_max")
        if self.ratio <= 1:
            raise ValueError("ratio must exceed 1")

    @property
    def nodes(self):
        s = [self.s_min]
        while s[-1] < self.s_max:
            step = min(s[-1] * (self.ratio - 1.0), self.h_cap)
            s.append(min(s[-1] + step, self.s_max))
        if len(s) >= 3 and s[-1] - s[-2] < 0.25 * (s[-2] - s[-3]):
            s.pop(-2)
        return np.array(s)

    def _moments(self, a, b):
        al = self.alpha
        m0 = (a ** -al - b ** -al) / al
        m1 = (b ** (1 - al) - a ** (1 - al)) / (1 - al)
        return m0, m1

    def shell_masses(self):
        """``int_{s_j}^{s_{j+1}} s^(-1-alpha) ds`` for each shell."""
        s = self.nodes
        return self._moments(s[:-1], s[1:])[0]

    @property
    def weights(self):
        s = self.nodes
        a, b = s[:-1], s[1:]
        m0, m1 = self._moments(a, b)
        h = b - a
        w = np.zeros(s.size)
        w[:-1] += (b * m0 - m1) / h
        w[1:] += (m1 - a * m0) / h
        return w

    @property
    def core(self):
        return self.s_min ** (-self.alpha) / (2.0 - self.alpha)

    @property
    def tail_mass(self):
        return self.s_max ** (-self.alpha) / self.alpha

    def full_weights(self):
        w = self.weights.copy()
        w[0] += self.core
        return w

    def to_dict(self):
        return {"alpha": self.alpha, "s_min": self.s_min, "s_max": self.s_max,
                "ratio": self.ratio, "h_cap": self.h_cap, "n_nodes": int(self.nodes.size)}


def resolution_indicators(quad, k0):
    """Relative tail and core-surrogate errors on a Fourier mode of wavenumber ``k0``.

    Both are measured against the per-unit-weight symbol ``2 C_alpha k0^alpha``.
    """
    a = quad.alpha
    sym = 2.0 * stable_constant(a) * k0 ** a
    tail = 2.0 * quad.tail_mass / sym
    core = 2.0 * k0 ** 4 * quad.s_min ** (4 - a) / (12.0 * (4 - a)) / sym
    return float(tail), float(core)


def default_quadrature(alpha, lattice, m, s_min=None, s_max=None, ratio=1.05):
    lmin, lmax = lattice_scales(lattice)
    k0 = 2.0 * np.pi / lmax
    if s_min is None:
        s_min = lmin / (4.0 * m)
    if s_max is None:
        s_max = (1.0 / (alpha * RESOLUTION_TOL * stable_constant(alpha) * k0 ** alpha)) ** (1.0 / alpha)
        s_max *= 1.0 + 1e-9
    return RadialQuadrature(alpha, float(s_min), float(s_max), ratio, h_cap=lmin / 8.0)


@dataclass
class GeneratorMatrix:
    grid: TorusGrid
    jump: sparse.csr_matrix
    drift: sparse.csr_matrix
    quadrature: RadialQuadrature
    diagnostics: dict = field(default_factory=dict)
    _pi: np.ndarray | None = field(default=None, repr=False)

    @property
    def matrix(self):
        return (self.jump + self.drift).tocsr()

    @property
    def size(self):
        return self.grid.size

    def apply(self, u):
        return self.matrix @ np.asarray(u, dtype=float)

    def invariant(self):
        """Normalized left null vector ``pi_h`` of ``A_h``."""
        if self._pi is None:
            n = self.size
            A = self.matrix
            one = np.ones((n, 1))
            M = sparse.bmat([[A.T, sparse.csr_matrix(one)], [sparse.csr_matrix(one.T), None]], format="csc")
            rhs = np.zeros(n + 1)
            rhs[-1] = 1.0
            sol = _solve(M, rhs)
            self._pi = sol[:n]
        return self._pi


def _row_block_entries(coeffs, mu, alpha, grid, quad, rows, order):
    x = grid.centers()[rows]
    B = rows.size
    d = grid.dim
    s = quad.nodes
    wq = quad.full_weights()
    J = s.size
    data, ri, ci = [], [], []
    diag = np.zeros(B)
    for phi, lam in zip(mu.pair_directions, mu.pair_weights):
        v = coeffs.apply_sigma(x, np.broadcast_to(phi, x.shape))
        a = np.linalg.norm(v, axis=1)
        vh = v / a[:, None]
        W = lam * a ** alpha
        pts = x[:, None, None, :] + np.array([1.0, -1.0])[None, None, :, None] * s[None, :, None, None] * vh[:, None, None, :]
        idx, w = grid.cubic_stencil(pts.reshape(-1, d)) if order == 3 else grid.linear_stencil(pts.reshape(-1, d))
        coef = (W[:, None, None] * wq[None, :, None] * np.ones((1, 1, 2))).reshape(-1)
        data.append((coef[:, None] * w).reshape(-1))
        ci.append(idx.reshape(-1))
        ri.append(np.repeat(np.repeat(rows, 2 * J), idx.shape[1]))
        diag -= 2.0 * W * wq.sum()
    data.append(diag)
    ri.append(rows)
    ci.append(rows)
    return np.concatenate(data), np.concatenate(ri), np.concatenate(ci)


def _drift_matrix(coeffs, grid):
    x = grid.centers()
    bz = grid.lattice.to_frac(coeffs.eval_b(x))
    m, d, n = grid.m, grid.dim, grid.size
    multi = np.stack(np.unravel_index(np.arange(n), grid.shape), axis=1)
    data, ri, ci = [], [], []
    for ax in range(d):
        for sgn in (1, -1):
            nb = multi.copy()
            nb[:, ax] = np.mod(nb[:, ax] + sgn, m)
            data.append(sgn * bz[:, ax] * m / 2.0)
            ri.append(np.arange(n))
            ci.append(np.ravel_multi_index(nb.T, grid.shape))
    return sparse.csr_matrix((np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))), shape=(n, n))


def discretize_generator(coeffs, noise, m, quadrature=None, order=3, block_rows=256, check=True):
    """Assemble ``A_h`` on the cell-centred grid with ``m`` cells per axis.

    Raises
    ------
    QuadratureUnderResolved
        If the dropped tail or the core surrogate error exceeds 1e-3 of the
        symbol on the lowest Fourier mode.
    """
    m = int(m)
    if m < 4 or m & (m - 1):
        raise ValueError("m must be a power of 2 and at least 4")
    if coeffs.dim != noise.dim:
        raise ValueError("dimension mismatch")
    grid = TorusGrid(coeffs.lattice, m)
    quad = quadrature or default_quadrature(noise.alpha, coeffs.lattice, m)
    k0 = 2.0 * np.pi / lattice_scales(coeffs.lattice)[1]
    tail, core = resolution_indicators(quad, k0)
    if check and max(tail, core) > RESOLUTION_TOL:
        raise QuadratureUnderResolved(f"tail {tail:.2e}, core {core:.2e} exceed {RESOLUTION_TOL} of the symbol")
    n = grid.size
    parts = []
    for r0 in range(0, n, block_rows):
        rows = np.arange(r0, min(r0 + block_rows, n))
        data, ri, ci = _row_block_entries(coeffs, noise.mu, noise.alpha, grid, quad, rows, order)
        blk = sparse.csr_matrix((data, (ri - r0, ci)), shape=(rows.size, n))
        blk.sum_duplicates()
        parts.append(blk)
    jump = sparse.vstack(parts, format="csr")
    drift = _drift_matrix(coeffs, grid)
    diag = {"m": m, "order": order, "tail_rel": tail, "core_rel": core, "nnz": int(jump.nnz + drift.nnz),
            "quadrature": quad.to_dict()}
    return GeneratorMatrix(grid, jump, drift, quad, diag)


def _solve(M, rhs):
    n = M.shape[0]
    if n <= DENSE_LIMIT:
        D = M.toarray()
        lu = scipy.linalg.lu_factor(D)
        sol = scipy.linalg.lu_solve(lu, rhs)
        for _ in range(3):
            r = rhs - D @ sol
            if np.max(np.abs(r)) <= SOLVE_TOL * max(1.0, np.max(np.abs(rhs))) * 1e-3:
                break
            sol = sol + scipy.linalg.lu_solve(lu, r)
        return sol
    lu = splu(M.tocsc())
    sol = lu.solve(rhs)
    for _ in range(5):
        r = rhs - M @ sol
        if np.max(np.abs(r)) <= SOLVE_TOL * max(1.0, np.max(np.abs(rhs))) * 1e-3:
            break
        sol = sol + lu.solve(r)
    return sol


@dataclass
class CorrectorField:
    """Grid values of the corrector (one column per component)."""

    grid: TorusGrid
    values: np.ndarray
    residual: float = 0.0
    mean: float = 0.0
    method: str = "pde"
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        self.values = v.reshape(self.grid.size, -1)

    @property
    def n_components(self):
        return self.values.shape[1]

    def grid_function(self, order=3):
        return GridFunction(self.grid, self.values, order=order)

    def sup_norm(self):
        return float(np.max(np.abs(self.values)))

    def to_dict(self):
        return {"method": self.method, "m": self.grid.m, "dim": self.grid.dim,
                "lattice": self.grid.lattice.basis.tolist(), "residual": self.residual, "mean": self.mean,
                "diagnostics": self.diagnostics, "values": self.values.tolist()}

    def to_csv(self, header_lines=()):
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        d, k = self.grid.dim, self.n_components
        w.writerow(["cell"] + [f"c{j + 1}" for j in range(d)] + [f"psi{j + 1}" for j in range(k)])
        for i, (c, v) in enumerate(zip(self.grid.centers(), self.values)):
            w.writerow([i] + [repr(float(a)) for a in c] + [repr(float(a)) for a in v])
        return buf.getvalue()


def center(gen, f):
    """``f - Pi_h(f)`` with ``Pi_h`` the invariant vector of ``A_h``."""
    f = np.asarray(f, dtype=float)
    pi = gen.invariant()
    return f - np.tensordot(pi, f, axes=(0, 0))


def solve_poisson(gen, f, tol=1e-6):
    """Solve ``A_h psi = f`` with ``Pi_h(psi) = 0``.

    ``f`` has shape ``(n,)`` or ``(n, k)`` and must satisfy ``Pi_h(f) = 0``
    within ``tol``.  The augmented system ``[[A, 1], [pi_h^T, 0]]`` is
    factorized once and refined iteratively.

    Raises
    ------
    NotCentered
        If ``|Pi_h(f)| > tol``.
    SolverDivergence
        If the final residual exceeds ``1e-6 |f|_inf``.
    """
    f = np.asarray(f, dtype=float)
    F = f.reshape(gen.size, -1)
    pi = gen.invariant()
    means = pi @ F
    if np.max(np.abs(means)) > tol:
        raise NotCentered(f"Pi_h(f) = {np.max(np.abs(means)):.3e} exceeds {tol}")
    n = gen.size
    A = gen.matrix
    one = np.ones((n, 1))
    M = sparse.bmat([[A, sparse.csr_matrix(one)], [sparse.csr_matrix(pi[None, :]), None]], format="csc")
    rhs = np.vstack([F, np.zeros((1, F.shape[1]))])
    sol = np.column_stack([_solve(M, rhs[:, j]) for j in range(F.shape[1])])
    psi = sol[:n]
    resid = float(np.max(np.abs(A @ psi - F)))
    scale = float(np.max(np.abs(F)))
    if not np.isfinite(resid) or resid > 1e-6 * scale + 1e-13:
        raise SolverDivergence(f"residual {resid:.3e} after refinement")
    mean = float(np.max(np.abs(pi @ psi)))
    return CorrectorField(gen.grid, psi, resid, mean, "pde",
                          {"rhs_sup": scale, "lagrange": sol[n].tolist(), "generator": gen.diagnostics})


# ---------------------------------------------------------------------------
# Monte Carlo corrector


class _PathIntegral:
    def __init__(self, f, n_steps, dt, B):
        self.f = f
        self.n_steps = n_steps
        self.dt = dt
        self.acc = None

    def __call__(self, k, X):
        val = self.f(X)
        w = 0.5 if k == self.n_steps else 1.0
        self.acc = w * self.dt * val if self.acc is None else self.acc + w * self.dt * val


def _eval(f, x):
    out = np.asarray(f(x), dtype=float)
    return out.reshape(x.shape[0], -1)


def solve_poisson_mc(coeffs, noise, f, horizon, n_paths, m, seed=0, dt=0.002, threads=1,
                     gamma=None, K=None, pi=None, antithetic=True):
    """Monte Carlo corrector ``psi(x) = -int_0^T E f(X_s^x) ds`` at cell centres.

    ``n_paths`` chains start at each cell centre (one stream per cell,
    antithetic pairs by default); the time integral uses the trapezoidal
    rule.  The field is re-centred with ``pi`` (cell weights; uniform if not
    given).  Reports per-cell standard errors and, when ``(gamma, K)`` are
    supplied, the truncation bound ``K |f| e^(-gamma T) / gamma``.
    """
    if gamma is not None and horizon < 5.0 / gamma:
        raise ValueError("horizon must be at least 5 / gamma")
    grid = TorusGrid(coeffs.lattice, int(m))
    n_steps = max(1, int(round(horizon / dt)))
    base = seeding.derive_seed(seed, TAG_MC)
    seeds = [seeding.derive_seed(base, i) for i in range(grid.size)]
    centers = grid.centers()
    fx = _eval(f, centers)
    k = fx.shape[1]

    def start(g, rng, count):
        return np.repeat(centers[g : g + 1], count, axis=0)

    def make(g0, g1):
        return _PathIntegral(lambda X: _eval(f, X), n_steps, dt, (g1 - g0) * n_paths)

    observers, failures = run_groups(coeffs, noise, dt, n_steps, seeds, n_paths, start, make, threads,
                                     antithetic=antithetic and n_paths % 2 == 0)
    acc = np.concatenate([o.acc for o in observers], axis=0).reshape(grid.size, n_paths, k)
    acc = acc + 0.5 * dt * fx[:, None, :]
    if antithetic and n_paths % 2 == 0:
        h = n_paths // 2
        pairs = 0.5 * (acc[:, :h] + acc[:, h:])
        est = -np.nanmean(pairs, axis=1)
        se = np.nanstd(pairs, axis=1, ddof=1) / np.sqrt(h)
    else:
        est = -np.nanmean(acc, axis=1)
        se = np.nanstd(acc, axis=1, ddof=1) / np.sqrt(n_paths)
    w = np.full(grid.size, 1.0 / grid.size) if pi is None else np.asarray(pi, dtype=float)
    shift = w @ est
    est = est - shift
    diag = {"horizon": float(horizon), "dt": dt, "n_paths": int(n_paths), "stderr_max": float(se.max()),
            "stderr": se.tolist(), "shift": shift.tolist(), "failed_paths": len(failures)}
    if gamma is not None and K is not None:
        fsup = float(np.max(np.abs(fx)))
        diag["truncation_bound"] = float(K * fsup * np.exp(-gamma * horizon) / gamma)
    return CorrectorField(grid, est, float("nan"), float(np.max(np.abs(w @ est))), "monte-carlo", diag)


def relative_sup_difference(a, b):
    """``max_j |a_j - b_j|_inf / |a_j|_inf`` over components."""
    va, vb = a.values, b.values
    return float(max(np.max(np.abs(va[:, j] - vb[:, j])) / np.max(np.abs(va[:, j])) for j in range(va.shape[1])))


# ---------------------------------------------------------------------------
# corrector martingale


def qv_density(coeffs, noise, psi, n, quadrature=None, order=3):
    """``Q_n(x) = int |h(n^(-1/alpha)(psi(x + sigma(x) y) - psi(x)))|^2 nu(dy)`` at cell centres.

    ``h(v) = v`` for ``|v| < 1`` and ``v / |v|`` otherwise, so ``|h(v)|^2 =
    min(|v|^2, 1)``.  Uses the generator's radial quadrature.
    """
    grid = psi.grid
    quad = quadrature or default_quadrature(noise.alpha, coeffs.lattice, grid.m)
    g = psi.grid_function(order)
    x = grid.centers()
    s = quad.nodes
    wq = quad.full_weights()
    scale = n ** (-1.0 / noise.alpha)
    out = np.zeros(grid.size)
    base = psi.values
    for phi, lam in zip(noise.mu.pair_directions, noise.mu.pair_weights):
        v = coeffs.apply_sigma(x, np.broadcast_to(phi, x.shape))
        a = np.linalg.norm(v, axis=1)
        vh = v / a[:, None]
        W = lam * a ** noise.alpha
        for sgn in (1.0, -1.0):
            pts = x[:, None, :] + sgn * s[None, :, None] * vh[:, None, :]
            vals = g(pts.reshape(-1, grid.dim)).reshape(grid.size, s.size, -1)
            dv = scale * (vals - base[:, None, :])
            out += W * (np.minimum(np.sum(dv * dv, axis=2), 1.0) @ wq)
    return GridFunction(grid, out, order=1)


class _QVObserver:
    def __init__(self, qs, limits, checkpoints, dt, B):
        self.qs = qs
        self.limits = limits
        self.checkpoints = checkpoints
        self.dt = dt
        self.acc = np.zeros((len(qs), B))
        self.rec = np.zeros((len(qs), len(checkpoints[0]), B))

    def __call__(self, k, X):
        for i, (q, lim) in enumerate(zip(self.qs, self.limits)):
            if k > lim:
                continue
            w = 0.5 if k == lim else 1.0
            self.acc[i] += w * self.dt * q(X)
            cps = self.checkpoints[i]
            for j, c in enumerate(cps):
                if k == c:
                    self.rec[i, j] = self.acc[i]


def k_martingale_qv(coeffs, noise, psi, n_list, t, n_paths, cfg, threads=1, quadrature=None,
                    n_checkpoints=4):
    """Mean predictable quadratic variation of the rescaled corrector martingale.

    For each ``n`` the quantity ``int_0^{nt} Q_n(X_u) du`` (the time-changed
    ``int_0^t int |h(n^(-1/alpha) Delta psi)|^2 nu(dy) n ds``) is averaged
    over ``n_paths`` chains.  The same chains serve all ``n`` (nested
    horizons).  Returns ``(rows, slope)``; each row holds ``n``, the mean QV
    at ``t``, its standard error, and the mean QV at ``n_checkpoints`` equally
    spaced times in ``(0, t]``.
    """
    n_list = [int(n) for n in n_list]
    qs = [qv_density(coeffs, noise, psi, n, quadrature) for n in n_list]
    limits = [int(round(n * t / cfg.dt)) for n in n_list]
    checkpoints = [[int(round(lim * (j + 1) / n_checkpoints)) for j in range(n_checkpoints)] for lim in limits]
    run_cfg = SimConfig("increment-euler", cfg.dt, max(n_list) * t, cfg.x0, seeding.derive_seed(cfg.seed, TAG_QV))

    def make(i0, i1):
        return _QVObserver(qs, limits, checkpoints, cfg.dt, i1 - i0)

    observers, _ = run_observed(coeffs, noise, run_cfg, n_paths, make, threads)
    rec = np.concatenate([o.rec for o in observers], axis=2)
    q0 = np.array([float(q(np.asarray(cfg.x0, dtype=float)[None])[0]) for q in qs])
    rows = []
    for i, n in enumerate(n_list):
        r = rec[i] + 0.5 * cfg.dt * q0[i]
        r = r[:, np.all(np.isfinite(r), axis=0)]
        rows.append({"n": n, "qv": float(r[-1].mean()), "stderr": float(r[-1].std(ddof=1) / np.sqrt(r.shape[1])),
                     "times": [t * (j + 1) / n_checkpoints for j in range(n_checkpoints)],
                     "qv_path": r.mean(axis=1).tolist()})
    ns = np.array(n_list, dtype=float)
    vals = np.array([r["qv"] for r in rows])
    slope = float(np.polyfit(np.log(ns), np.log(vals), 1)[0]) if np.all(vals > 0) and len(ns) > 1 else float("nan")
    return rows, slope
