"""Simulation of ``dX = b(X) dt + sigma(X-) dL`` and rescaled processes.

Two schemes are provided:

``increment-euler``
    ``X_{k+1} = X_k + b(X_k) dt + sigma(X_k) Delta L_k`` with exact stable
    increments ``Delta L_k``.
``jump-adapted``
    Jumps of the driving noise with ``|y| > eps`` are placed at their exact
    Poisson times; between events the state follows an Euler drift step.  The
    compensated small jumps are either dropped (default) or replaced by a
    Gaussian with matching covariance.

Both schemes run vectorized over a batch of paths.  Each path (or each group
of paths sharing a start cell) owns a private random stream, and draws are
taken in fixed-size blocks whose layout depends only on the group, never on
how paths are batched or scheduled.  Results are therefore bit-identical for
any thread count.
"""

from __future__ import annotations

import csv
import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding
from .errors import EnsembleFailure, HorizonTooShort, NumericOverflow
from .periodic_model import wrap
from .stable_core import draw_uniform_angle, increments_from_draws, sample_large_jumps

SCHEMES = ("increment-euler", "jump-adapted")
STATE_LIMIT = 1e12
JUMP_LIMIT = 1e9
CHUNK_PATHS = 1024
STEP_BLOCK = 256
BLOCK_DRAWS = 1 << 19
MAX_FAIL_FRACTION = 0.01
MAGIC = b"LVHG1"


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``eps`` is only used by the jump-adapted scheme; ``None`` there means
    ``dt^(1/alpha)``.  ``small_jumps`` is ``"drop"`` or ``"gaussian"``.
    """

    scheme: str = "increment-euler"
    dt: float = 0.01
    horizon: float = 1.0
    x0: tuple = (0.0,)
    seed: int = 0
    eps: float | None = None
    small_jumps: str = "drop"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not (0 < self.dt <= 0.1):
            raise ValueError("dt must lie in (0, 0.1]")
        if self.eps is not None and not (0 < self.eps <= 1):
            raise ValueError("eps must lie in (0, 1]")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.small_jumps not in ("drop", "gaussian"):
            raise ValueError("small_jumps must be 'drop' or 'gaussian'")
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))

    @property
    def n_steps(self):
        return int(round(self.horizon / self.dt))

    def jump_eps(self, alpha):
        return self.eps if self.eps is not None else self.dt ** (1.0 / alpha)

    def with_(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return {
            "scheme": self.scheme,
            "dt": self.dt,
            "horizon": self.horizon,
            "x0": list(self.x0),
            "seed": self.seed,
            "eps": self.eps,
            "small_jumps": self.small_jumps,
        }


@dataclass
class Path:
    """Sampled skeleton of one cadlag path.

    ``states`` hold the right-continuous values; ``left_limits`` the values
    just before each time (they differ from ``states`` only at jump times).
    """

    times: np.ndarray
    states: np.ndarray
    wrapped: np.ndarray
    path_seed: int
    left_limits: np.ndarray | None = None

    @property
    def horizon(self):
        return float(self.times[-1])


@dataclass
class RescaledPath:
    n: int
    times: np.ndarray
    states: np.ndarray


@dataclass
class PathEnsemble:
    """Paths recorded on a common time grid, in path-index order."""

    times: np.ndarray
    states: np.ndarray  # (n_paths, n_times, d)
    wrapped: np.ndarray
    path_seeds: np.ndarray
    failures: list = field(default_factory=list)
    scheme: str = "increment-euler"
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def dim(self):
        return self.states.shape[2]

    def path(self, i):
        return Path(self.times, self.states[i], self.wrapped[i], int(self.path_seeds[i]))

    def ok_mask(self):
        bad = {i for i, _ in self.failures}
        return np.array([i not in bad for i in range(self.n_paths)])


# ---------------------------------------------------------------------------
# noise feed


class _NoiseFeed:
    """Stable increments for a batch made of equally sized stream groups.

    Every group draws blocks of uniforms then exponentials of shape
    ``(nb, count, P)``; ``nb`` depends only on ``count``.  With
    ``antithetic=True`` each group draws for half its paths and uses the
    negated increments for the other half.
    """

    def __init__(self, noise, dt, rngs, count, antithetic=False):
        self.mu = noise.mu
        self.alpha = noise.alpha
        self.dt = dt
        self.rngs = rngs
        self.count = count
        self.antithetic = antithetic
        if antithetic and count % 2:
            raise ValueError("antithetic groups need an even path count")
        self.draw_count = count // 2 if antithetic else count
        self.n_pairs = self.mu.pair_directions.shape[0]
        self.nb = max(1, min(STEP_BLOCK, BLOCK_DRAWS // (self.draw_count * self.n_pairs)))
        self._block = None
        self._pos = 0

    def _refill(self, remaining):
        nb = min(self.nb, remaining)
        shape = (nb, self.draw_count, self.n_pairs)
        parts = []
        for rng in self.rngs:
            u = draw_uniform_angle(rng, shape)
            e = rng.standard_exponential(shape)
            inc = increments_from_draws(self.mu, self.alpha, self.dt, u, e)
            if self.antithetic:
                inc = np.concatenate([inc, -inc], axis=1)
            parts.append(inc)
        self._block = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
        self._pos = 0

    def next(self, remaining):
        if self._block is None or self._pos >= self._block.shape[0]:
            self._refill(remaining)
        out = self._block[self._pos]
        self._pos += 1
        return out


def _euler_run(coeffs, noise, x0, feed, dt, n_steps, on_step=None):
    """Advance a batch ``x0`` of shape ``(B, d)`` by ``n_steps`` Euler steps.

    ``on_step(k, X)`` is called after step ``k`` (1-based).  Paths whose state
    leaves ``|X| < 1e12`` or that take a jump ``|sigma dL| > 1e9`` are frozen
    at NaN and reported in the returned message array.
    """
    X = np.array(x0, dtype=float, copy=True)
    B = X.shape[0]
    failed = np.zeros(B, dtype=bool)
    messages = [None] * B
    for k in range(1, n_steps + 1):
        dL = feed.next(n_steps - k + 1)
        jump = coeffs.apply_sigma(X, dL)
        X = X + coeffs.eval_b(X) * dt + jump
        bad = ~(np.max(np.abs(X), axis=1) < STATE_LIMIT) | (np.max(np.abs(jump), axis=1) > JUMP_LIMIT)
        if bad.any():
            new = bad & ~failed
            for i in np.flatnonzero(new):
                messages[i] = f"NumericOverflow at step {k}"
            failed |= bad
            X[failed] = np.nan
        if on_step is not None:
            on_step(k, X)
    return X, failed, messages


def _path_streams(seeds):
    return [seeding.make_rng(s) for s in seeds]


def path_seeds(seed, n_paths, offset=0):
    return np.array([seeding.derive_seed(seed, offset + i) for i in range(n_paths)], dtype=np.uint64)


def _record_steps(cfg, record_times):
    n = cfg.n_steps
    if record_times is None:
        steps = np.arange(n + 1)
    else:
        steps = np.rint(np.asarray(record_times, dtype=float) / cfg.dt).astype(np.int64)
        if np.any(steps < 0) or np.any(steps > n):
            raise HorizonTooShort("record times exceed the simulation horizon")
        if np.any(np.abs(steps * cfg.dt - np.asarray(record_times)) > 1e-9 * max(1.0, cfg.horizon)):
            raise ValueError("record times must be multiples of dt")
    return steps


def _euler_chunk(coeffs, noise, cfg, seeds, steps):
    B = len(seeds)
    d = coeffs.dim
    x0 = np.tile(np.asarray(cfg.x0, dtype=float), (B, 1))
    out = np.empty((B, len(steps), d))
    pos = {int(s): j for j, s in enumerate(steps)}
    if 0 in pos:
        out[:, pos[0]] = x0

    def on_step(k, X):
        j = pos.get(k)
        if j is not None:
            out[:, j] = X

    feed = _PerPathFeed(noise, cfg.dt, seeds)
    _, failed, msgs = _euler_run(coeffs, noise, x0, feed, cfg.dt, int(steps.max(initial=0)), on_step)
    return out, failed, msgs


class _PerPathFeed:
    """Per-path streams: each path draws its own blocks of ``STEP_BLOCK`` steps."""

    def __init__(self, noise, dt, seeds):
        self.mu = noise.mu
        self.alpha = noise.alpha
        self.dt = dt
        self.rngs = _path_streams(seeds)
        self.n_pairs = self.mu.pair_directions.shape[0]
        self._block = None
        self._pos = 0

    def next(self, remaining):
        if self._block is None or self._pos >= self._block.shape[0]:
            nb = min(STEP_BLOCK, remaining)
            shape = (nb, self.n_pairs)
            B = len(self.rngs)
            u = np.empty((nb, B, self.n_pairs))
            e = np.empty((nb, B, self.n_pairs))
            for i, rng in enumerate(self.rngs):
                u[:, i] = draw_uniform_angle(rng, shape)
                e[:, i] = rng.standard_exponential(shape)
            self._block = increments_from_draws(self.mu, self.alpha, self.dt, u, e)
            self._pos = 0
        out = self._block[self._pos]
        self._pos += 1
        return out


# ---------------------------------------------------------------------------
# jump-adapted scheme


def _small_jump_cov(noise, eps):
    """Covariance per unit time of the compensated jumps with ``|y| <= eps``."""
    mu, a = noise.mu, noise.alpha
    return (mu.directions.T * mu.weights) @ mu.directions * eps ** (2.0 - a) / (2.0 - a)


def small_jump_variance(noise, eps):
    """Per-unit-time variance ``sum(lambda) eps^(2-alpha) / (2-alpha)`` of the jumps with ``|y| <= eps``."""
    return noise.mu.total_mass * eps ** (2.0 - noise.alpha) / (2.0 - noise.alpha)


def run_metadata(noise, cfg):
    """Scheme settings worth recording next to an ensemble."""
    meta = {"scheme": cfg.scheme, "dt": cfg.dt}
    if cfg.scheme == "jump-adapted":
        eps = cfg.jump_eps(noise.alpha)
        meta.update(eps=eps, small_jumps=cfg.small_jumps,
                    small_jump_variance=small_jump_variance(noise, eps) if cfg.small_jumps == "drop" else 0.0)
    return meta


def _jump_events(noise, cfg, rng, eps, grid_times):
    """Merged event list of one path: grid times and large jumps, plus Gaussian draws."""
    T = grid_times[-1]
    jumps = sample_large_jumps(0.0, T, eps, noise.mu, noise.alpha, rng)
    jt = np.array([j.time for j in jumps])
    jy = np.array([j.jump for j in jumps]).reshape(-1, noise.dim)
    times = np.concatenate([grid_times[1:], jt])
    ys = np.concatenate([np.zeros((len(grid_times) - 1, noise.dim)), jy])
    is_grid = np.concatenate([np.ones(len(grid_times) - 1, bool), np.zeros(len(jt), bool)])
    order = np.argsort(times, kind="stable")
    times, ys, is_grid = times[order], ys[order], is_grid[order]
    normals = None
    if cfg.small_jumps == "gaussian":
        normals = rng.standard_normal((len(times), noise.dim))
    return times, ys, is_grid, normals


def _jump_adapted_chunk(coeffs, noise, cfg, seeds):
    """Vectorized jump-adapted simulation of one batch.

    Per-path event lists are padded with zero-length, zero-jump events so all
    paths advance in lock-step rounds.
    """
    d = coeffs.dim
    eps = cfg.jump_eps(noise.alpha)
    n = cfg.n_steps
    grid_times = np.arange(n + 1) * cfg.dt
    events = [_jump_events(noise, cfg, seeding.make_rng(s), eps, grid_times) for s in seeds]
    B = len(seeds)
    L = max(len(e[0]) for e in events)
    T = grid_times[-1]
    times = np.full((B, L), T)
    ys = np.zeros((B, L, d))
    is_grid = np.zeros((B, L), bool)
    normals = np.zeros((B, L, d))
    for i, (t, y, g, nz) in enumerate(events):
        times[i, : len(t)] = t
        ys[i, : len(t)] = y
        is_grid[i, : len(t)] = g
        if nz is not None:
            normals[i, : len(t)] = nz
    chol = None
    if cfg.small_jumps == "gaussian":
        chol = np.linalg.cholesky(_small_jump_cov(noise, eps) + 1e-300 * np.eye(d))
    X = np.tile(np.asarray(cfg.x0, dtype=float), (B, 1))
    post = np.empty((B, L, d))
    pre = np.empty((B, L, d))
    failed = np.zeros(B, bool)
    msgs = [None] * B
    t_prev = np.zeros(B)
    for r in range(L):
        h = times[:, r] - t_prev
        t_prev = times[:, r]
        X = X + coeffs.eval_b(X) * h[:, None]
        if chol is not None:
            g = (normals[:, r] @ chol.T) * np.sqrt(h)[:, None]
            X = X + coeffs.apply_sigma(X, g)
        pre[:, r] = X
        jump = coeffs.apply_sigma(X, ys[:, r])
        X = X + jump
        bad = ~(np.max(np.abs(X), axis=1) < STATE_LIMIT) | (np.max(np.abs(jump), axis=1) > JUMP_LIMIT)
        if bad.any():
            for i in np.flatnonzero(bad & ~failed):
                msgs[i] = f"NumericOverflow at event {r}"
            failed |= bad
            X[failed] = np.nan
        post[:, r] = X
    counts = [len(e[0]) for e in events]
    return events, counts, pre, post, failed, msgs


def _to_path(cfg, seed, t, is_grid, pre, post, coeffs):
    times = np.concatenate([[0.0], t])
    x0 = np.asarray(cfg.x0, dtype=float)[None]
    states = np.concatenate([x0, post])
    left = np.concatenate([x0, pre])
    return Path(times, states, wrap(states, coeffs.lattice), int(seed), left)


# ---------------------------------------------------------------------------
# public API


def _check_dims(coeffs, noise, cfg):
    if coeffs.dim != noise.dim or len(cfg.x0) != coeffs.dim:
        raise ValueError("coefficients, noise and x0 must share the same dimension")


def simulate_euler(coeffs, noise, cfg, path_seed):
    """One increment-Euler path on the grid ``k dt``.

    Raises
    ------
    NumericOverflow
        If the state or a single jump leaves the admissible range.
    """
    _check_dims(coeffs, noise, cfg)
    steps = np.arange(cfg.n_steps + 1)
    out, failed, msgs = _euler_chunk(coeffs, noise, cfg, [int(path_seed)], steps)
    if failed[0]:
        raise NumericOverflow(msgs[0])
    times = steps * cfg.dt
    return Path(times, out[0], wrap(out[0], coeffs.lattice), int(path_seed), out[0])


def simulate_jump_adapted(coeffs, noise, cfg, path_seed):
    """One jump-adapted path on the union of the grid and the large-jump times."""
    _check_dims(coeffs, noise, cfg)
    events, counts, pre, post, failed, msgs = _jump_adapted_chunk(coeffs, noise, cfg, [int(path_seed)])
    if failed[0]:
        raise NumericOverflow(msgs[0])
    t, _, g, _ = events[0]
    c = counts[0]
    return _to_path(cfg, path_seed, t, g, pre[0, :c], post[0, :c], coeffs)


def simulate(coeffs, noise, cfg, path_seed):
    if cfg.scheme == "increment-euler":
        return simulate_euler(coeffs, noise, cfg, path_seed)
    return simulate_jump_adapted(coeffs, noise, cfg, path_seed)


def _chunk_task(coeffs, noise, cfg, seeds, steps):
    if cfg.scheme == "increment-euler":
        out, failed, msgs = _euler_chunk(coeffs, noise, cfg, seeds, steps)
        return out, failed, msgs
    events, counts, pre, post, failed, msgs = _jump_adapted_chunk(coeffs, noise, cfg, seeds)
    B, d = len(seeds), coeffs.dim
    out = np.empty((B, len(steps), d))
    x0 = np.asarray(cfg.x0, dtype=float)
    for i in range(B):
        g = events[i][2]
        grid_states = np.concatenate([x0[None], post[i, : counts[i]][g]])
        out[i] = grid_states[steps]
    return out, failed, msgs


def map_chunks(fn, items, threads=1):
    """Apply ``fn`` to each item, possibly on a thread pool, returning results in item order."""
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=int(threads)) as pool:
        return list(pool.map(fn, items))


def run_ensemble(coeffs, noise, cfg, n_paths, record_times=None, threads=1, seed_offset=0):
    """Simulate ``n_paths`` independent paths.

    Path ``i`` uses ``path_seed = derive_seed(cfg.seed, seed_offset + i)``.
    Paths are processed in fixed chunks of ``CHUNK_PATHS``; the thread count
    only changes scheduling.  Failed paths are reported in ``failures``; more
    than 1% failures raise :class:`EnsembleFailure`.
    """
    _check_dims(coeffs, noise, cfg)
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    steps = _record_steps(cfg, record_times)
    seeds = path_seeds(cfg.seed, n_paths, seed_offset)
    chunks = [seeds[i : i + CHUNK_PATHS] for i in range(0, n_paths, CHUNK_PATHS)]
    results = map_chunks(lambda ch: _chunk_task(coeffs, noise, cfg, [int(s) for s in ch], steps), chunks, threads)
    states = np.concatenate([r[0] for r in results], axis=0)
    failed = np.concatenate([r[1] for r in results])
    msgs = [m for r in results for m in r[2]]
    failures = [(int(i), msgs[i]) for i in np.flatnonzero(failed)]
    if len(failures) > MAX_FAIL_FRACTION * n_paths:
        raise EnsembleFailure(f"{len(failures)} of {n_paths} paths failed; first: {failures[0][1]}")
    times = steps * cfg.dt
    return PathEnsemble(times, states, wrap(states, coeffs.lattice), seeds, failures, cfg.scheme,
                        run_metadata(noise, cfg))


def rescale(path, n, mean_drift, alpha, t_max=None):
    """``X^(n)_t = n^(-1/alpha) (X_{nt} - n t mean_drift - x0)`` for ``t <= t_max``.

    Times of the returned path are ``path.times / n``.
    """
    if n < 1:
        raise ValueError("n must be a positive integer")
    if t_max is None:
        t_max = path.horizon / n
    if path.horizon < n * t_max - 1e-9 * max(1.0, n * t_max):
        raise HorizonTooShort(f"path horizon {path.horizon} is shorter than n * t = {n * t_max}")
    keep = path.times <= n * t_max + 1e-9 * max(1.0, n * t_max)
    t = path.times[keep] / n
    drift = np.asarray(mean_drift, dtype=float)
    x = path.states[keep]
    states = n ** (-1.0 / alpha) * (x - n * t[:, None] * drift - path.states[0])
    return RescaledPath(int(n), t, states)


def rescale_ensemble(ens, n, mean_drift, alpha, x0=None):
    """Rescaled states ``(n_paths, n_times, d)`` and times for a whole ensemble."""
    t = ens.times / n
    x0 = ens.states[:, :1] if x0 is None else np.asarray(x0, dtype=float)
    drift = np.asarray(mean_drift, dtype=float)
    return t, n ** (-1.0 / alpha) * (ens.states - n * t[None, :, None] * drift - x0)


# ---------------------------------------------------------------------------
# export


def write_ensemble_binary(ens, fh, config_hash="", seed=0):
    """Write the ``LVHG1`` columnar format.

    Layout (little-endian): magic ``b"LVHG1"``, ``uint32 d``, ``uint64
    n_paths``, ``uint64 n_times``, ``uint64 seed``, 64-byte ASCII config hash
    (NUL padded), ``float64 times[n_times]``, then ``float64`` states stored
    column by column as ``[d][n_times][n_paths]``.
    """
    d, n_paths, n_times = ens.dim, ens.n_paths, len(ens.times)
    h = config_hash.encode("ascii")[:64].ljust(64, b"\0")
    fh.write(MAGIC + struct.pack("<IQQQ", d, n_paths, n_times, int(seed) & 0xFFFFFFFFFFFFFFFF) + h)
    fh.write(np.ascontiguousarray(ens.times, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(np.transpose(ens.states, (2, 1, 0)), dtype="<f8").tobytes())


def read_ensemble_binary(fh):
    head = fh.read(5 + struct.calcsize("<IQQQ") + 64)
    if head[:5] != MAGIC:
        raise ValueError("not an LVHG1 ensemble file")
    d, n_paths, n_times, seed = struct.unpack("<IQQQ", head[5 : 5 + struct.calcsize("<IQQQ")])
    config_hash = head[-64:].rstrip(b"\0").decode("ascii")
    times = np.frombuffer(fh.read(8 * n_times), dtype="<f8").copy()
    cols = np.frombuffer(fh.read(8 * d * n_times * n_paths), dtype="<f8").reshape(d, n_times, n_paths)
    states = np.ascontiguousarray(np.transpose(cols, (2, 1, 0)))
    meta = {"d": d, "n_paths": n_paths, "n_times": n_times, "seed": seed, "config_hash": config_hash}
    return times, states, meta


def ensemble_csv(ens, header_lines=()):
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "time"] + [f"x{j + 1}" for j in range(ens.dim)])
    for i in range(ens.n_paths):
        for k, t in enumerate(ens.times):
            w.writerow([i, repr(float(t))] + [repr(float(v)) for v in ens.states[i, k]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# observed runs (reducers consume states step by step)


def _segmented_run(coeffs, noise, x0, feed, dt, n_steps, observer, wrap_every):
    """Euler run in segments, wrapping states onto the torus between segments.

    Wrapping leaves the dynamics unchanged (coefficients are periodic) and
    keeps long chains away from precision loss.  ``observer(k, X)`` sees
    wrapped or unwrapped states depending on position in the segment, so it
    must only use periodic functions of the state.
    """
    X = np.array(x0, dtype=float)
    failed = np.zeros(X.shape[0], bool)
    msgs = [None] * X.shape[0]
    done = 0
    while done < n_steps:
        seg = min(wrap_every, n_steps - done)
        off = done
        cb = None if observer is None else (lambda k, Y, off=off: observer(off + k, Y))
        X, f, m = _euler_run(coeffs, noise, X, feed, dt, seg, cb)
        for i in np.flatnonzero(f & ~failed):
            msgs[i] = m[i]
        failed |= f
        ok = ~failed
        X[ok] = wrap(X[ok], coeffs.lattice)
        done += seg
    return X, failed, msgs


def run_observed(coeffs, noise, cfg, n_paths, make_observer, threads=1, x0=None, wrap_every=1000):
    """Run ``n_paths`` per-path-seeded Euler chains with per-step observers.

    ``make_observer(i0, i1)`` returns a callable ``(k, X)`` for the chunk of
    paths ``i0:i1``; the list of observers is returned in chunk order
    together with the failure list.  Seeds match :func:`run_ensemble`.
    """
    seeds = path_seeds(cfg.seed, n_paths)
    starts = np.tile(np.asarray(cfg.x0, dtype=float), (n_paths, 1)) if x0 is None else np.asarray(x0, dtype=float)
    bounds = [(i, min(i + CHUNK_PATHS, n_paths)) for i in range(0, n_paths, CHUNK_PATHS)]

    def task(b):
        i0, i1 = b
        obs = make_observer(i0, i1)
        feed = _PerPathFeed(noise, cfg.dt, [int(s) for s in seeds[i0:i1]])
        _, failed, msgs = _segmented_run(coeffs, noise, starts[i0:i1], feed, cfg.dt, cfg.n_steps, obs, wrap_every)
        return obs, failed, msgs

    results = map_chunks(task, bounds, threads)
    failures = [(i0 + int(j), r[2][j]) for (i0, _), r in zip(bounds, results) for j in np.flatnonzero(r[1])]
    if len(failures) > MAX_FAIL_FRACTION * n_paths:
        raise EnsembleFailure(f"{len(failures)} of {n_paths} paths failed; first: {failures[0][1]}")
    return [r[0] for r in results], failures


def run_groups(coeffs, noise, dt, n_steps, group_seeds, count, start_fn, make_observer,
               threads=1, antithetic=False, wrap_every=1000):
    """Run ``count`` paths for each group, one random stream per group.

    ``start_fn(g, rng, count)`` returns the ``(count, d)`` start points of
    group ``g`` and may consume its stream first.  Groups are batched so that
    a batch holds at most ``CHUNK_PATHS`` paths (at least one group); batch
    layout does not affect the draws.  ``make_observer(g0, g1)`` builds the
    observer for groups ``g0:g1``; observers are returned in group order.
    """
    n_groups = len(group_seeds)
    per = max(1, CHUNK_PATHS // count)
    bounds = [(g, min(g + per, n_groups)) for g in range(0, n_groups, per)]

    def task(b):
        g0, g1 = b
        rngs = [seeding.make_rng(int(s)) for s in group_seeds[g0:g1]]
        x0 = np.concatenate([start_fn(g0 + j, rng, count) for j, rng in enumerate(rngs)], axis=0)
        feed = _NoiseFeed(noise, dt, rngs, count, antithetic)
        obs = make_observer(g0, g1)
        _, failed, msgs = _segmented_run(coeffs, noise, x0, feed, dt, n_steps, obs, wrap_every)
        return obs, failed, msgs

    results = map_chunks(task, bounds, threads)
    n_paths = n_groups * count
    failures = [(g0 * count + int(j), r[2][j]) for (g0, _), r in zip(bounds, results) for j in np.flatnonzero(r[1])]
    if len(failures) > MAX_FAIL_FRACTION * n_paths:
        raise EnsembleFailure(f"{len(failures)} of {n_paths} paths failed; first: {failures[0][1]}")
    return [r[0] for r in results], failures
