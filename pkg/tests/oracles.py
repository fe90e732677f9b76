"""Independent reference computations used as test oracles.

None of these import the package under test.
"""

import math

import numpy as np
from scipy import integrate


def simpson(y, h):
    return h / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum())


def stable_constant_riemann(alpha, periods=400, n_head=200_001, n_body=4_000_001):
    """``int_0^inf (1 - cos u) u^(-1-alpha) du`` by composite Simpson sums.

    ``[0, 1]`` uses ``u = v^p`` with ``p = 2 / (2 - alpha)`` to remove the
    endpoint singularity; ``[1, U]`` with ``U = 2 pi periods`` is summed
    directly; the tail uses the exact ``U^(-alpha)/alpha`` for the constant
    part and an integration-by-parts series for the cosine part.
    """
    p = 2.0 / (2.0 - alpha)
    v = np.linspace(0.0, 1.0, n_head)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = v ** p
        g = 2.0 * np.sin(0.5 * u) ** 2 * u ** (-1.0 - alpha) * p * v ** (p - 1.0)
    g[0] = 0.0 if p * (2.0 - alpha) - 1.0 > 0 else 0.5 * p
    head = simpson(g, v[1] - v[0])
    U = 2.0 * math.pi * periods
    x = np.linspace(1.0, U, n_body)
    body = simpson(2.0 * np.sin(0.5 * x) ** 2 * x ** (-1.0 - alpha), x[1] - x[0])
    b = 1.0 + alpha
    cos_tail = b * U ** (-b - 1) - b * (b + 1) * (b + 2) * U ** (-b - 3)
    return head + body + U ** (-alpha) / alpha - cos_tail


def sphere_min_max(mu_dirs, mu_w, alpha, n=2_000_000):
    """Brute-force extrema of ``sum_k w_k |<v, phi_k>|^alpha`` on a dense circle grid (d = 2)."""
    th = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    v = np.column_stack([np.cos(th), np.sin(th)])
    g = (np.abs(v @ np.asarray(mu_dirs).T) ** alpha) @ np.asarray(mu_w)
    return g.min(), g.max()


def rk4_flow(b, x0, t, n_steps):
    """High-accuracy solution of ``x' = b(x)`` by classical Runge-Kutta."""
    x = np.array(x0, dtype=float)
    h = t / n_steps
    for _ in range(n_steps):
        k1 = b(x)
        k2 = b(x + 0.5 * h * k1)
        k3 = b(x + 0.5 * h * k2)
        k4 = b(x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def stable_cdf_scipy(z, alpha):
    """Standard symmetric stable CDF (characteristic function ``exp(-|u|^alpha)``) from scipy.stats."""
    from scipy import stats

    return stats.levy_stable.cdf(z, alpha, 0.0, loc=0.0, scale=1.0)


def radial_tail_mass(total_weight, alpha, eps):
    """``nu({|y| > eps})`` by numerical radial integration of ``w r^(-1-alpha)``."""
    val, _ = integrate.quad(lambda r: r ** (-1.0 - alpha), eps, np.inf, epsabs=0, epsrel=1e-13)
    return total_weight * val
