"""Homogenized jump law: averaged spectral measure, limit symbol and limit samples.

The limit Levy measure is the ``pi``-average of the images of ``nu`` under
``y -> sigma(x) y``.  With ``pi`` discretized on cell centres and an atomic
noise measure, its spectral measure is the atom cloud

    (sigma(x_j) phi_k / |sigma(x_j) phi_k|,  pi_j lambda_k |sigma(x_j) phi_k|^alpha)

over cells ``j`` and atoms ``k``, merged where directions coincide.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import SingularSigma
from .stable_core import SpectralMeasure, levy_symbol, sample_increment

HOMOG_MERGE_TOL = 1e-9


@dataclass
class HomogenizedLaw:
    alpha: float
    mu_bar: SpectralMeasure
    provenance: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.mu_bar.dim

    @property
    def total_mass(self):
        return self.mu_bar.total_mass

    def to_dict(self):
        out = self.mu_bar.to_dict(self.alpha)
        out["provenance"] = self.provenance
        return out

    @classmethod
    def from_dict(cls, obj):
        mu, alpha = SpectralMeasure.from_dict(obj)
        return cls(alpha, mu, dict(obj.get("provenance", {})))

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def atom_cloud(coeffs, noise, centers, probs):
    """Unmerged atoms ordered by (cell, atom); cells with zero weight are skipped."""
    mu, a = noise.mu, noise.alpha
    keep = probs > 0
    x = centers[keep]
    p = probs[keep]
    C, K, d = x.shape[0], mu.n_atoms, mu.dim
    dirs = np.empty((C, K, d))
    w = np.empty((C, K))
    for k, (phi, lam) in enumerate(zip(mu.directions, mu.weights)):
        v = coeffs.apply_sigma(x, np.broadcast_to(phi, x.shape))
        nv = np.linalg.norm(v, axis=1)
        if np.any(nv <= 1e-12):
            raise SingularSigma("sigma(x) annihilates a noise direction")
        dirs[:, k] = v / nv[:, None]
        w[:, k] = p * lam * nv ** a
    return dirs.reshape(-1, d), w.reshape(-1)


def homogenized_measure(coeffs, noise, inv, merge_tol=HOMOG_MERGE_TOL):
    """Averaged spectral measure from an invariant-measure estimate.

    ``inv`` is an :class:`~lvhg.ergodic.InvariantEstimate` or
    :class:`~lvhg.ergodic.TorusHistogram`.
    """
    hist = getattr(inv, "histogram", inv)
    probs = np.asarray(hist.probs, dtype=float)
    dirs, w = atom_cloud(coeffs, noise, hist.centers(), probs)
    # normalize once more so directions are unit to working precision
    dirs = dirs / np.linalg.norm(dirs, axis=1)[:, None]
    mu_bar = SpectralMeasure(dirs, w).merged(merge_tol)
    prov = {"m": int(hist.m), "method": getattr(inv, "method", "histogram"),
            "n_cells": int(np.count_nonzero(probs > 0)), "raw_atoms": int(w.size),
            "direct_mass": float(np.sum(w)), "merge_tol": merge_tol}
    return HomogenizedLaw(noise.alpha, mu_bar, prov)


def homogenized_symbol(xi, law):
    """``psi_bar(xi) = -C_alpha sum_atoms w |<xi, phi>|^alpha``."""
    return levy_symbol(xi, law.mu_bar, law.alpha)


def sample_limit(law, t, rng, size=None):
    """Draw ``X*_t`` (or ``size`` independent copies)."""
    if t <= 0:
        raise ValueError("t must be positive")
    return sample_increment(t, law.mu_bar, law.alpha, rng, size)


def tail_mass(law, R):
    """``nu_bar({|y| > R}) = mass(mu_bar) R^(-alpha) / alpha``."""
    return law.total_mass * R ** (-law.alpha) / law.alpha


def _sphere_bins(dirs, n_bins):
    d = dirs.shape[1]
    if d == 1:
        return (dirs[:, 0] > 0).astype(int), 2, [[-1.0], [1.0]]
    if d == 2:
        ang = np.mod(np.arctan2(dirs[:, 1], dirs[:, 0]), 2 * np.pi)
        idx = np.minimum((ang / (2 * np.pi) * n_bins).astype(int), n_bins - 1)
        mids = (np.arange(n_bins) + 0.5) * 2 * np.pi / n_bins
        return idx, n_bins, [[float(np.cos(a)), float(np.sin(a))] for a in mids]
    # d == 3: equal-area bands in z times azimuth sectors
    nz, nphi = max(1, n_bins // 2), n_bins
    zi = np.minimum(((dirs[:, 2] + 1) / 2 * nz).astype(int), nz - 1)
    ph = np.mod(np.arctan2(dirs[:, 1], dirs[:, 0]), 2 * np.pi)
    pi_ = np.minimum((ph / (2 * np.pi) * nphi).astype(int), nphi - 1)
    mids = []
    for i in range(nz):
        zc = -1 + (i + 0.5) * 2 / nz
        r = np.sqrt(1 - zc * zc)
        for j in range(nphi):
            a = (j + 0.5) * 2 * np.pi / nphi
            mids.append([float(r * np.cos(a)), float(r * np.sin(a)), float(zc)])
    return zi * nphi + pi_, nz * nphi, mids


def spherical_histogram_csv(law, n_bins=36, header_lines=()):
    """Spectral mass per direction bin, for external plotting."""
    idx, nb, mids = _sphere_bins(law.mu_bar.directions, n_bins)
    mass = np.bincount(idx, weights=law.mu_bar.weights, minlength=nb)
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin"] + [f"u{j + 1}" for j in range(law.dim)] + ["mass"])
    for b in range(nb):
        w.writerow([b] + [repr(v) for v in mids[b]] + [repr(float(mass[b]))])
    return buf.getvalue()
