"""Lattice-periodic drift and dispersion fields on R^d.

Coefficients come from declarative trigonometric families so that configs
serialize, experiments replay exactly, and smoothness holds by construction.
All evaluation happens in fractional coordinates ``z = B^{-1} x``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import SingularSigma

S_MAX = 0.9


@dataclass(frozen=True)
class Lattice:
    """Lattice generated by the columns of ``basis``."""

    basis: np.ndarray
    inverse: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        B = np.array(self.basis, dtype=float, ndmin=2)
        if B.shape[0] != B.shape[1]:
            raise ValueError("lattice basis must be square")
        if not np.all(np.isfinite(B)) or abs(np.linalg.det(B)) <= 0 or np.linalg.cond(B) > 1e12:
            raise ValueError("lattice basis must be invertible")
        B.setflags(write=False)
        inv = np.linalg.inv(B)
        inv.setflags(write=False)
        object.__setattr__(self, "basis", B)
        object.__setattr__(self, "inverse", inv)
        object.__setattr__(self, "_unit", bool(np.array_equal(B, np.eye(B.shape[0]))))

    @classmethod
    def unit(cls, d):
        return cls(np.eye(d))

    @property
    def dim(self):
        return self.basis.shape[0]

    def to_frac(self, x):
        """Fractional coordinates ``B^{-1} x`` for points stacked along the last axis."""
        x = np.asarray(x, dtype=float)
        if self._unit:
            return x
        return _apply(self.inverse, x)

    def from_frac(self, z):
        z = np.asarray(z, dtype=float)
        if self._unit:
            return z
        return _apply(self.basis, z)


def _apply(M, x):
    # explicit accumulation keeps results independent of batch layout
    d = M.shape[1]
    out = x[..., 0:1] * M[:, 0]
    for j in range(1, d):
        out = out + x[..., j : j + 1] * M[:, j]
    return out


def wrap(x, lattice):
    """Project ``x`` into the fundamental domain ``B [0, 1)^d``."""
    z = lattice.to_frac(x)
    zf = z - np.floor(z)
    # floor can return 1.0 after rounding for tiny negative inputs
    zf = np.where(zf >= 1.0, 0.0, zf)
    return lattice.from_frac(zf)


def wrap_frac(x, lattice):
    z = lattice.to_frac(x)
    zf = z - np.floor(z)
    return np.where(zf >= 1.0, 0.0, zf)


@dataclass(frozen=True)
class Mode:
    """One trigonometric term ``amp * f(2 pi <m, z> + phase)`` acting on ``component``."""

    component: int
    m: tuple
    amp: float
    phase: float = 0.0

    def to_dict(self):
        return {"component": self.component, "m": list(self.m), "amp": self.amp, "phase": self.phase}

    @classmethod
    def from_dict(cls, obj):
        return cls(int(obj["component"]), tuple(int(k) for k in obj["m"]), float(obj["amp"]),
                   float(obj.get("phase", 0.0)))


@dataclass(frozen=True)
class CoefficientSpec:
    """Declarative trigonometric coefficient family.

    Drift: ``b_i(x) = beta_i + sum a cos(2 pi <m, B^{-1}x> + theta)`` over the
    drift modes acting on component ``i``.

    Dispersion: ``sigma(x) = diag(c + sum s sin(2 pi <m, B^{-1}x> + theta))``
    over the sigma modes of each diagonal entry, with ``c = 1`` unless
    ``sigma_const`` is given.  The amplitudes of each entry must satisfy
    ``sum |s| <= 0.9 |c|``.
    """

    lattice: Lattice
    b_const: tuple
    b_modes: tuple = ()
    sigma_modes: tuple = ()
    sigma_const: tuple = None

    def __post_init__(self):
        d = self.lattice.dim
        if len(self.b_const) != d:
            raise ValueError("drift constant has wrong dimension")
        object.__setattr__(self, "b_const", tuple(float(v) for v in self.b_const))
        sc = (1.0,) * d if self.sigma_const is None else tuple(float(v) for v in self.sigma_const)
        if len(sc) != d or any(v == 0.0 for v in sc):
            raise ValueError("sigma diagonal constants must be nonzero, one per dimension")
        object.__setattr__(self, "sigma_const", sc)
        for mode in (*self.b_modes, *self.sigma_modes):
            if not (0 <= mode.component < d) or len(mode.m) != d:
                raise ValueError(f"mode {mode} does not match dimension {d}")
        amp = np.zeros(d)
        for mode in self.sigma_modes:
            amp[mode.component] += abs(mode.amp)
        if np.any(amp > S_MAX * np.abs(sc)):
            raise ValueError(f"sigma amplitudes per diagonal entry must not exceed {S_MAX} x its constant")

    @property
    def dim(self):
        return self.lattice.dim

    def to_dict(self):
        return {
            "lattice": self.lattice.basis.tolist(),
            "b": {"const": list(self.b_const), "modes": [m.to_dict() for m in self.b_modes]},
            "sigma": {"diag_const": list(self.sigma_const),
                      "diag_modes": [m.to_dict() for m in self.sigma_modes]},
        }

    @classmethod
    def from_dict(cls, obj):
        try:
            lattice = Lattice(np.array(obj["lattice"], dtype=float))
            b = obj.get("b", {})
            const = b.get("const", [0.0] * lattice.dim)
            b_modes = tuple(Mode.from_dict(m) for m in b.get("modes", []))
            sigma = obj.get("sigma", {})
            s_modes = tuple(Mode.from_dict(m) for m in sigma.get("diag_modes", []))
            s_const = sigma.get("diag_const")
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValueError(f"malformed coefficient spec: {exc}") from exc
        return cls(lattice, tuple(const), b_modes, s_modes, None if s_const is None else tuple(s_const))


class PeriodicCoefficients:
    """Evaluable drift ``b`` and dispersion ``sigma`` built from a :class:`CoefficientSpec`."""

    def __init__(self, spec, name=""):
        self.spec = spec
        self.lattice = spec.lattice
        self.name = name or "trigonometric"
        d = spec.dim
        self.dim = d
        self._b_const = np.array(spec.b_const)
        self._s_const = np.array(spec.sigma_const)
        self._identity_sigma = bool(np.all(self._s_const == 1.0))
        self._b_modes = self._pack(spec.b_modes)
        self._s_modes = self._pack(spec.sigma_modes)

    @staticmethod
    def _pack(modes):
        if not modes:
            return None
        comp = np.array([m.component for m in modes])
        k = np.array([m.m for m in modes], dtype=float)
        amp = np.array([m.amp for m in modes])
        phase = np.array([m.phase for m in modes])
        return comp, k, amp, phase

    @property
    def metadata(self):
        return {"family": self.name, **self.spec.to_dict()}

    @property
    def constant_drift(self):
        return self._b_modes is None

    @property
    def constant_sigma(self):
        return self._s_modes is None

    @property
    def identity_sigma(self):
        return self._s_modes is None and self._identity_sigma

    def _terms(self, z, packed, fn):
        comp, k, amp, phase = packed
        out = np.zeros(z.shape[:-1] + (self.dim,))
        for i in range(len(amp)):
            arg = 2.0 * np.pi * k[i, 0] * z[..., 0]
            for j in range(1, self.dim):
                arg = arg + 2.0 * np.pi * k[i, j] * z[..., j]
            out[..., comp[i]] += amp[i] * fn(arg + phase[i])
        return out

    def eval_b(self, x):
        x = np.asarray(x, dtype=float)
        out = np.broadcast_to(self._b_const, x.shape).copy()
        if self._b_modes is not None:
            out += self._terms(self.lattice.to_frac(x), self._b_modes, np.cos)
        return out

    def sigma_diag(self, x):
        """Diagonal of ``sigma(x)``, shape ``x.shape``."""
        x = np.asarray(x, dtype=float)
        out = np.broadcast_to(self._s_const, x.shape).copy()
        if self._s_modes is not None:
            out += self._terms(self.lattice.to_frac(x), self._s_modes, np.sin)
        return out

    def eval_sigma(self, x):
        diag = self.sigma_diag(x)
        out = np.zeros(diag.shape + (self.dim,))
        idx = np.arange(self.dim)
        out[..., idx, idx] = diag
        return out

    def apply_sigma(self, x, y):
        """``sigma(x) y`` for stacked ``x`` and ``y``."""
        if self.identity_sigma:
            return np.asarray(y, dtype=float).copy()
        return self.sigma_diag(x) * y


def eval_b(coeffs, x):
    return coeffs.eval_b(x)


def eval_sigma(coeffs, x):
    return coeffs.eval_sigma(x)


def make_coefficients(obj, name=""):
    """Coefficients from a JSON-like dict or a :class:`CoefficientSpec`."""
    spec = obj if isinstance(obj, CoefficientSpec) else CoefficientSpec.from_dict(obj)
    return PeriodicCoefficients(spec, name=name)


def constant_coefficients(d, drift=None, sigma=None):
    """Constant drift and constant diagonal ``sigma`` on ``Z^d``."""
    const = tuple(drift) if drift is not None else (0.0,) * d
    sc = None if sigma is None else tuple(sigma)
    return PeriodicCoefficients(CoefficientSpec(Lattice.unit(d), const, sigma_const=sc), name="constant")


def family_f1():
    """Acceptance family F1 on Z^2.

    ``b = (0.3 + 0.2 cos(2 pi x1), 0.1 sin(2 pi x2))`` and
    ``sigma = diag(1 + 0.5 sin(2 pi x1), 1 + 0.5 cos(2 pi x2))``.
    """
    half_pi = 0.5 * np.pi
    spec = CoefficientSpec(
        Lattice.unit(2),
        (0.3, 0.0),
        (Mode(0, (1, 0), 0.2, 0.0), Mode(1, (0, 1), 0.1, -half_pi)),
        (Mode(0, (1, 0), 0.5, 0.0), Mode(1, (0, 1), 0.5, half_pi)),
    )
    return PeriodicCoefficients(spec, name="F1")


@dataclass
class WellPosedReport:
    min_abs_det_sigma: float
    lipschitz_b: float
    lipschitz_sigma: float
    grid_n: int

    def to_dict(self):
        return {
            "min_abs_det_sigma": self.min_abs_det_sigma,
            "lipschitz_b": self.lipschitz_b,
            "lipschitz_sigma": self.lipschitz_sigma,
            "grid_n": self.grid_n,
        }


def check_wellposed(coeffs, grid_n):
    """Finite-difference checks of the coefficient assumptions on a ``grid_n^d`` torus grid.

    Lipschitz constants are the largest difference quotients between grid
    neighbours along each lattice generator; for ``sigma`` the quotient uses
    the operator norm, i.e. the Lipschitz constant of ``x -> sigma(x) y``
    uniformly over ``|y| = 1``.
    """
    if grid_n < 8:
        raise ValueError("grid_n must be at least 8")
    d = coeffs.dim
    lat = coeffs.lattice
    axes = np.meshgrid(*[np.arange(grid_n) / grid_n] * d, indexing="ij")
    z = np.stack(axes, axis=-1).reshape(-1, d)
    x = lat.from_frac(z)
    sig = coeffs.eval_sigma(x)
    det = np.abs(np.linalg.det(sig))
    min_det = float(det.min())
    b = coeffs.eval_b(x)
    lip_b = 0.0
    lip_s = 0.0
    shape = (grid_n,) * d
    b_grid = b.reshape(shape + (d,))
    s_grid = sig.reshape(shape + (d, d))
    for a in range(d):
        step = float(np.linalg.norm(lat.basis[:, a])) / grid_n
        db = np.roll(b_grid, -1, axis=a) - b_grid
        lip_b = max(lip_b, float(np.linalg.norm(db, axis=-1).max()) / step)
        ds = (np.roll(s_grid, -1, axis=a) - s_grid).reshape(-1, d, d)
        lip_s = max(lip_s, float(np.linalg.norm(ds, ord=2, axis=(1, 2)).max()) / step)
    if min_det < 1e-6:
        raise SingularSigma(f"min |det sigma| = {min_det:.3e} on the check grid")
    return WellPosedReport(min_det, lip_b, lip_s, int(grid_n))


# ---------------------------------------------------------------------------
# torus grids


@dataclass(frozen=True)
class TorusGrid:
    """Cell-centred grid with ``m`` cells per lattice axis.

    Cells are ordered C-style over fractional coordinates; cell ``i`` has
    centre ``B ((i + 1/2) / m)``.
    """

    lattice: Lattice
    m: int

    @property
    def dim(self):
        return self.lattice.dim

    @property
    def shape(self):
        return (self.m,) * self.dim

    @property
    def size(self):
        return self.m ** self.dim

    def centers_frac(self):
        axes = np.meshgrid(*[(np.arange(self.m) + 0.5) / self.m] * self.dim, indexing="ij")
        return np.stack(axes, axis=-1).reshape(-1, self.dim)

    def centers(self):
        return self.lattice.from_frac(self.centers_frac())

    def cell_index(self, x):
        """Flat cell index of (wrapped) points ``x``."""
        z = wrap_frac(x, self.lattice)
        idx = np.minimum((z * self.m).astype(np.int64), self.m - 1)
        flat = idx[..., 0]
        for j in range(1, self.dim):
            flat = flat * self.m + idx[..., j]
        return flat

    def sample(self, f):
        """Values of ``f`` at the cell centres, shaped ``grid.shape + trailing``."""
        vals = np.asarray(f(self.centers()))
        return vals.reshape(self.shape + vals.shape[1:])

    def linear_stencil(self, x):
        """Periodic multilinear interpolation stencil at points ``x``.

        Returns flat indices and weights, each of shape ``(N, 2^d)``.
        """
        return _stencil(self, x, order=1)

    def cubic_stencil(self, x):
        """Periodic tensor-product cubic Lagrange stencil, shapes ``(N, 4^d)``."""
        return _stencil(self, x, order=3)


def _stencil(grid, x, order):
    m, d = grid.m, grid.dim
    z = np.atleast_2d(grid.lattice.to_frac(np.asarray(x, dtype=float)))
    s = z * m - 0.5
    base = np.floor(s)
    t = s - base
    base = base.astype(np.int64)
    if order == 1:
        offsets = np.array([0, 1])
        w1 = [np.stack([1.0 - t[:, a], t[:, a]], axis=1) for a in range(d)]
    else:
        offsets = np.array([-1, 0, 1, 2])
        w1 = []
        for a in range(d):
            ta = t[:, a]
            w1.append(np.stack([
                -ta * (ta - 1.0) * (ta - 2.0) / 6.0,
                (ta + 1.0) * (ta - 1.0) * (ta - 2.0) / 2.0,
                -(ta + 1.0) * ta * (ta - 2.0) / 2.0,
                (ta + 1.0) * ta * (ta - 1.0) / 6.0,
            ], axis=1))
    k = len(offsets)
    n = z.shape[0]
    idx = np.zeros((n, k ** d), dtype=np.int64)
    w = np.ones((n, k ** d))
    for c, combo in enumerate(itertools.product(range(k), repeat=d)):
        flat = np.zeros(n, dtype=np.int64)
        for a in range(d):
            flat = flat * m + np.mod(base[:, a] + offsets[combo[a]], m)
            w[:, c] *= w1[a][:, combo[a]]
        idx[:, c] = flat
    return idx, w


class GridFunction:
    """Periodic function known by its values at the cell centres of a :class:`TorusGrid`.

    Off-grid values use periodic multilinear interpolation (``order=1``) or
    cubic Lagrange interpolation (``order=3``).
    """

    def __init__(self, grid, values, order=1):
        self.grid = grid
        values = np.asarray(values, dtype=float)
        if values.shape[: grid.dim] != grid.shape:
            values = values.reshape(grid.shape + values.shape[1:])
        self.values = values
        self.order = order

    @classmethod
    def from_callable(cls, grid, f, order=1):
        return cls(grid, grid.sample(f), order=order)

    @property
    def flat(self):
        return self.values.reshape((self.grid.size,) + self.values.shape[self.grid.dim:])

    def sup_norm(self):
        return float(np.max(np.abs(self.values)))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        idx, w = _stencil(self.grid, x.reshape(-1, self.grid.dim), self.order)
        flat = self.flat
        if flat.ndim == 1:
            out = np.sum(flat[idx] * w, axis=1)
        else:
            out = np.einsum("nk,nkc->nc", w, flat[idx])
        return out.reshape(lead + flat.shape[1:])
