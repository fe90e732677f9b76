"""Symmetric alpha-stable noise described by a finite atomic spectral measure.

The Levy measure of the noise is ``nu(dy) = mu(d y_hat) |y|^(-alpha-1) d|y|``
where ``mu`` is a finite symmetric measure on the unit sphere.  Here ``mu`` is
a list of atoms ``(phi_k, lambda_k)``; symmetric pairs ``{phi_k, -phi_k}``
are detected on construction and drive the samplers.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, spatial, special

from .errors import (
    AsymmetricMeasure,
    DegenerateSpectralMeasure,
    InvalidStabilityIndex,
    SingularMatrix,
)

UNIT_TOL = 1e-12
SYMMETRY_TOL = 1e-12
MERGE_TOL = 1e-12


def check_alpha(alpha):
    alpha = float(alpha)
    if not (1.0 < alpha < 2.0):
        raise InvalidStabilityIndex(f"stability index must satisfy 1 < alpha < 2, got {alpha}")
    return alpha


def _merge_directions(directions, weights, tol):
    """Group directions closer than ``tol`` and add their weights.

    Atoms are scanned in index order; each atom not yet grouped starts a
    group that absorbs every ungrouped atom within ``tol`` of it.  Groups keep
    the direction of their first member, so the result is deterministic.
    """
    n = len(weights)
    if n == 0:
        return directions, weights
    tree = spatial.cKDTree(directions)
    label = np.full(n, -1)
    keep = []
    for i in range(n):
        if label[i] >= 0:
            continue
        nb = np.asarray(tree.query_ball_point(directions[i], r=tol), dtype=int)
        nb = nb[label[nb] < 0]
        label[nb] = len(keep)
        label[i] = len(keep)
        keep.append(i)
    merged = np.bincount(label, weights=weights, minlength=len(keep))
    return directions[np.array(keep)], merged


@dataclass(frozen=True)
class SpectralMeasure:
    """Finite symmetric atomic measure on the unit sphere of R^d.

    Parameters
    ----------
    directions : (K, d) array_like
        Unit vectors (norm 1 within 1e-12).
    weights : (K,) array_like
        Positive atom weights.

    Symmetric pairs are stored in ``pair_directions`` (one representative per
    pair) and ``pair_weights``.
    """

    directions: np.ndarray
    weights: np.ndarray
    pair_directions: np.ndarray = field(init=False, repr=False, compare=False)
    pair_weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        dirs = np.array(self.directions, dtype=float, ndmin=2)
        w = np.array(self.weights, dtype=float).ravel()
        if dirs.ndim != 2 or dirs.shape[0] != w.shape[0] or dirs.shape[0] == 0:
            raise ValueError("directions must be (K, d) with K matching the number of weights")
        norms = np.linalg.norm(dirs, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("every atom direction must have Euclidean norm 1")
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("atom weights must be positive")
        dirs.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "weights", w)
        pd, pw = self._pair_atoms()
        object.__setattr__(self, "pair_directions", pd)
        object.__setattr__(self, "pair_weights", pw)

    def _pair_atoms(self):
        dirs, w = _merge_directions(self.directions, self.weights, MERGE_TOL)
        tree = spatial.cKDTree(dirs)
        dist, partner = tree.query(-dirs, k=1)
        used = np.zeros(len(w), dtype=bool)
        reps, pws = [], []
        for i in range(len(w)):
            if used[i]:
                continue
            j = partner[i]
            if dist[i] > SYMMETRY_TOL or abs(w[i] - w[j]) > SYMMETRY_TOL:
                raise AsymmetricMeasure(
                    f"atom {dirs[i].tolist()} with weight {w[i]} has no mirrored atom of equal weight"
                )
            used[i] = used[j] = True
            reps.append(dirs[i])
            pws.append(0.5 * (w[i] + w[j]))
        pd = np.array(reps)
        pw = np.array(pws)
        pd.setflags(write=False)
        pw.setflags(write=False)
        return pd, pw

    @property
    def dim(self):
        return self.directions.shape[1]

    @property
    def total_mass(self):
        return float(np.sum(self.weights))

    @property
    def n_atoms(self):
        return len(self.weights)

    def merged(self, tol=MERGE_TOL):
        d, w = _merge_directions(self.directions, self.weights, tol)
        return SpectralMeasure(d, w)

    def scaled(self, factor):
        return SpectralMeasure(self.directions, self.weights * float(factor))

    def to_dict(self, alpha):
        return {
            "alpha": float(alpha),
            "atoms": [{"dir": d.tolist(), "w": float(w)} for d, w in zip(self.directions, self.weights)],
        }

    @classmethod
    def from_dict(cls, obj):
        """Build ``(measure, alpha)`` from the JSON schema; directions are normalized."""
        try:
            alpha = check_alpha(obj["alpha"])
            atoms = obj["atoms"]
            dirs = np.array([a["dir"] for a in atoms], dtype=float, ndmin=2)
            w = np.array([a["w"] for a in atoms], dtype=float)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed spectral measure: {exc}") from exc
        norms = np.linalg.norm(dirs, axis=1)
        if np.any(norms == 0):
            raise ValueError("zero direction in spectral measure")
        return cls(dirs / norms[:, None], w), alpha


def dumps_measure(mu, alpha):
    return json.dumps(mu.to_dict(alpha), sort_keys=True)


def loads_measure(text):
    return SpectralMeasure.from_dict(json.loads(text))


@dataclass(frozen=True)
class StableNoise:
    """A validated spectral measure together with its stability index."""

    alpha: float
    mu: SpectralMeasure

    def __post_init__(self):
        object.__setattr__(self, "alpha", check_alpha(self.alpha))

    @property
    def dim(self):
        return self.mu.dim

    def to_dict(self):
        return self.mu.to_dict(self.alpha)

    @classmethod
    def from_dict(cls, obj):
        mu, alpha = SpectralMeasure.from_dict(obj)
        return cls(alpha, mu)


def axis_measure(d, weight=1.0):
    """Atoms ``+-e_i`` with common ``weight`` for ``i = 1..d``."""
    eye = np.eye(d)
    return SpectralMeasure(np.vstack([eye, -eye]), np.full(2 * d, float(weight)))


@dataclass(frozen=True)
class NondegeneracyBounds:
    c1: float
    c2: float


# ---------------------------------------------------------------------------
# symbol


@functools.lru_cache(maxsize=64)
def stable_constant(alpha):
    """``C_alpha = int_0^inf (1 - cos u) u^(-1-alpha) du`` by adaptive quadrature.

    The integral is split at ``u = 1``.  On ``[0, 1]`` the integrand is written
    as ``2 sin^2(u/2)/u^2 * u^(1-alpha)`` and integrated with an algebraic
    endpoint weight; on ``[1, inf)`` the cosine part uses the Fourier-weighted
    QAWF rule.
    """
    alpha = check_alpha(alpha)

    def smooth(u):
        if u == 0.0:
            return 0.5
        s = math.sin(0.5 * u)
        return 2.0 * s * s / (u * u)

    head, _ = integrate.quad(smooth, 0.0, 1.0, weight="alg", wvar=(1.0 - alpha, 0.0),
                             epsabs=0.0, epsrel=1e-13, limit=200)
    osc, _ = integrate.quad(lambda u: u ** (-1.0 - alpha), 1.0, np.inf, weight="cos", wvar=1.0,
                            epsabs=1e-13, limlst=200)
    return head + 1.0 / alpha - osc


def stable_constant_closed_form(alpha):
    """``-Gamma(-alpha) cos(pi alpha / 2)``, the analytic value of :func:`stable_constant`."""
    return float(-special.gamma(-alpha) * math.cos(0.5 * math.pi * alpha))


def spherical_sum(v, mu, alpha):
    """``sum_k lambda_k |<v, phi_k>|^alpha`` for one or many vectors ``v``."""
    v = np.asarray(v, dtype=float)
    proj = np.abs(v @ mu.directions.T)
    return (proj ** alpha) @ mu.weights


def levy_symbol(xi, mu, alpha):
    """Levy symbol ``psi(xi) = -C_alpha sum_k lambda_k |<xi, phi_k>|^alpha``.

    ``xi`` may be a single vector of shape ``(d,)`` or a stack ``(..., d)``.
    """
    alpha = check_alpha(alpha)
    out = -stable_constant(alpha) * spherical_sum(xi, mu, alpha)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# assumption checks


def _sphere_grid(d, n):
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        th = 2.0 * np.pi * np.arange(n) / n
        return np.column_stack([np.cos(th), np.sin(th)])
    if d == 3:
        i = np.arange(n) + 0.5
        z = 1.0 - 2.0 * i / n
        r = np.sqrt(1.0 - z * z)
        ph = np.pi * (3.0 - math.sqrt(5.0)) * i
        return np.column_stack([r * np.cos(ph), r * np.sin(ph), z])
    raise ValueError("sphere grids are available for d in {1, 2, 3}")


def _refine(g, v0, d, sign):
    """Local polish of ``sign * g`` around the unit vector ``v0``."""
    if d == 1:
        return g(v0)
    if d == 2:
        th0 = math.atan2(v0[1], v0[0])
        step = 2.0 * np.pi / 1e4

        def f(th):
            return sign * g(np.array([math.cos(th), math.sin(th)]))

        res = optimize.minimize_scalar(f, bounds=(th0 - 2 * step, th0 + 2 * step), method="bounded",
                                       options={"xatol": 1e-14})
        return sign * min(res.fun, f(th0))

    th0 = math.acos(np.clip(v0[2], -1, 1))
    ph0 = math.atan2(v0[1], v0[0])

    def f3(p):
        th, ph = p
        return sign * g(np.array([math.sin(th) * math.cos(ph), math.sin(th) * math.sin(ph), math.cos(th)]))

    res = optimize.minimize(f3, [th0, ph0], method="Nelder-Mead",
                            options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 4000})
    return sign * min(res.fun, f3([th0, ph0]))


def validate(mu, alpha, n_grid=10_000):
    """Nondegeneracy bounds of ``g(v) = sum_k lambda_k |<v, phi_k>|^alpha``.

    ``g`` is evaluated on a deterministic quasi-uniform grid of at least
    ``n_grid`` unit vectors (uniform angles for d = 2, a Fibonacci lattice for
    d = 3) and polished locally around the grid extrema.

    Raises
    ------
    DegenerateSpectralMeasure
        If the lower bound is not above 1e-10.
    """
    alpha = check_alpha(alpha)
    d = mu.dim
    grid = _sphere_grid(d, max(int(n_grid), 10_000))
    vals = spherical_sum(grid, mu, alpha)

    def g(v):
        return float(spherical_sum(v, mu, alpha))

    c1 = _refine(g, grid[np.argmin(vals)], d, +1.0)
    c2 = _refine(g, grid[np.argmax(vals)], d, -1.0)
    c1 = min(c1, float(vals.min()))
    c2 = max(c2, float(vals.max()))
    if c1 <= 1e-10:
        raise DegenerateSpectralMeasure(
            f"spectral measure is degenerate: min over the sphere of the projection integral is {c1:.3e}"
        )
    return NondegeneracyBounds(c1, c2)


# ---------------------------------------------------------------------------
# sampling


def cms_standard(alpha, u, e):
    """Chambers-Mallows-Stuck transform for symmetric stable variates.

    ``u`` are uniforms on (-pi/2, pi/2) and ``e`` unit exponentials.  The
    result has characteristic function ``exp(-|xi|^alpha)``.
    """
    return (np.sin(alpha * u) / np.cos(u) ** (1.0 / alpha)) * (np.cos((1.0 - alpha) * u) / e) ** (
        (1.0 - alpha) / alpha
    )


def draw_uniform_angle(rng, size=None):
    return (rng.random(size) - 0.5) * np.pi


def sample_stable_1d(alpha, scale, rng):
    """One symmetric stable draw with characteristic function ``exp(-scale^alpha |xi|^alpha)``.

    Consumes one uniform angle and then one unit exponential from ``rng``.
    """
    alpha = check_alpha(alpha)
    if scale <= 0:
        raise ValueError("scale must be positive")
    u = draw_uniform_angle(rng)
    e = rng.standard_exponential()
    return float(scale * cms_standard(alpha, u, e))


def pair_scales(mu, alpha, dt):
    """Per-pair stable scales ``(2 lambda_k C_alpha dt)^(1/alpha)``."""
    return (2.0 * mu.pair_weights * stable_constant(alpha) * dt) ** (1.0 / alpha)


def increments_from_draws(mu, alpha, dt, u, e):
    """Map uniform/exponential draws of shape ``(..., P)`` to increments ``(..., d)``.

    ``P`` is the number of symmetric pairs.  The pair sum is accumulated in
    pair order so results do not depend on array layout.
    """
    s = cms_standard(alpha, u, e) * pair_scales(mu, alpha, dt)
    out = s[..., 0:1] * mu.pair_directions[0]
    for p in range(1, mu.pair_directions.shape[0]):
        out = out + s[..., p : p + 1] * mu.pair_directions[p]
    return out


def sample_increment(dt, mu, alpha, rng, size=None):
    """Draw ``L_{t+dt} - L_t`` (shape ``(d,)``, or ``(size, d)`` if ``size`` is given).

    Each symmetric pair ``{phi_k, -phi_k}`` contributes ``phi_k S_k`` with
    ``S_k`` a one-dimensional symmetric stable variate of scale
    ``(2 lambda_k C_alpha dt)^(1/alpha)``; the characteristic function of the
    sum is ``exp(dt psi(xi))``.
    """
    alpha = check_alpha(alpha)
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_pairs = mu.pair_directions.shape[0]
    shape = (n_pairs,) if size is None else (int(size), n_pairs)
    u = draw_uniform_angle(rng, shape)
    e = rng.standard_exponential(shape)
    return increments_from_draws(mu, alpha, dt, u, e)


@dataclass(frozen=True)
class JumpEvent:
    time: float
    jump: np.ndarray


def large_jump_rate(mu, alpha, eps):
    """``nu({|y| > eps}) = (sum_k lambda_k) eps^(-alpha) / alpha``."""
    return mu.total_mass * eps ** (-alpha) / alpha


def sample_large_jumps(t0, t1, eps, mu, alpha, rng):
    """Jumps of the driving noise with ``|y| > eps`` on ``(t0, t1]``, sorted by time.

    Stream order: Poisson count, times, atom indices, radii.
    """
    alpha = check_alpha(alpha)
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    if eps <= 0:
        raise ValueError("eps must be positive")
    rate = (t1 - t0) * large_jump_rate(mu, alpha, eps)
    n = int(rng.poisson(rate))
    if n == 0:
        return []
    times = t1 - (t1 - t0) * rng.random(n)
    idx = rng.choice(mu.n_atoms, size=n, p=mu.weights / mu.total_mass)
    radii = eps * (1.0 - rng.random(n)) ** (-1.0 / alpha)
    order = np.argsort(times, kind="stable")
    jumps = mu.directions[idx] * radii[:, None]
    return [JumpEvent(float(times[i]), jumps[i]) for i in order]


def pushforward(mu, alpha, F):
    """Spectral measure of the image of ``nu`` under ``y -> F y``.

    Atom ``(phi, lambda)`` maps to ``(F phi / |F phi|, lambda |F phi|^alpha)``.
    """
    alpha = check_alpha(alpha)
    F = np.asarray(F, dtype=float)
    if F.shape != (mu.dim, mu.dim):
        raise ValueError("F must be a d x d matrix")
    if not np.all(np.isfinite(F)) or np.linalg.cond(F) >= 1e12:
        raise SingularMatrix("pushforward requires an invertible, well-conditioned matrix")
    img = mu.directions @ F.T
    norms = np.linalg.norm(img, axis=1)
    return SpectralMeasure(img / norms[:, None], mu.weights * norms ** alpha)
