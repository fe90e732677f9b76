"""Command line driver: ``lvhg validate|invariant|corrector|verify|report``.

All tunables live in a JSON config; flags only choose paths, thread count
and a seed override.  Every file written embeds the config hash and seed.
Exit codes: 0 pass, 2 validation failure, 3 numerical failure, 4 acceptance
failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .corrector import (
    center,
    discretize_generator,
    k_martingale_qv,
    relative_sup_difference,
    solve_poisson,
    solve_poisson_mc,
)
from .errors import ConfigError, LvhgError, ValidationError
from .ergodic import (
    InvariantEstimate,
    estimate_invariant_grid_chain,
    estimate_invariant_occupation,
    estimate_spectral_gap,
    mean_pi,
)
from .homogenize import homogenized_measure, spherical_histogram_csv
from .periodic_model import (
    CoefficientSpec,
    PeriodicCoefficients,
    check_wellposed,
    constant_coefficients,
    family_f1,
)
from .sde_sim import SimConfig, write_ensemble_binary
from .stable_core import SpectralMeasure, StableNoise, check_alpha, validate
from .verify import KS_THRESHOLD, convergence_sweep

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 2, 3, 4
PI_FILE = "invariant_occupation.json"


class AcceptanceFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# config


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(cfg):
    """SHA-256 of the canonical serialization, ignoring the output directory."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(canonical_json(body).encode("ascii")).hexdigest()


def load_config(path, seed=None, out=None):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg.setdefault("seed", 0)
    if out is not None:
        cfg["output_dir"] = str(out)
    cfg.setdefault("output_dir", "lvhg_out")
    return cfg


def _section(cfg, name, required=()):
    sec = cfg.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"config section '{name}' is missing")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    for key in required:
        node = sec
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"config value '{name}.{key}' is required")
            node = node[part]
    return sec


def build_noise(cfg):
    try:
        return StableNoise.from_dict(_section(cfg, "noise", ("alpha", "atoms")))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"noise: {exc}") from exc


def build_coefficients(cfg):
    sec = _section(cfg, "coefficients", ())
    fam = sec.get("family")
    try:
        if fam == "F1":
            return family_f1()
        if fam == "constant":
            d = int(sec.get("dim", len(sec.get("drift", [])) or 2))
            return constant_coefficients(d, sec.get("drift"), sec.get("sigma"))
        if fam is not None:
            raise ConfigError(f"unknown coefficient family {fam!r}")
        return PeriodicCoefficients(CoefficientSpec.from_dict(sec), name=sec.get("name", ""))
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"coefficients: {exc}") from exc


def build_sim(cfg, d):
    sec = dict(_section(cfg, "sim"))
    try:
        return SimConfig(
            scheme=sec.get("scheme", "increment-euler"),
            dt=float(sec.get("dt", 0.01)),
            horizon=float(sec.get("horizon", 1.0)),
            x0=tuple(sec.get("x0", [0.0] * d)),
            seed=int(cfg["seed"]),
            eps=sec.get("eps"),
            small_jumps=sec.get("small_jumps", "drop"),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"sim: {exc}") from exc


class Context:
    def __init__(self, cfg, threads=1):
        self.cfg = cfg
        self.threads = max(1, int(threads or 1))
        self.hash = config_hash(cfg)
        self.seed = int(cfg["seed"])
        self.out = Path(cfg["output_dir"])

    def build(self):
        self.noise = build_noise(self.cfg)
        self.coeffs = build_coefficients(self.cfg)
        if self.noise.dim != self.coeffs.dim:
            raise ConfigError("noise and coefficients have different dimensions")
        self.sim = build_sim(self.cfg, self.coeffs.dim)
        return self

    # output helpers
    def meta(self):
        return {"config_hash": self.hash, "seed": self.seed}

    def header(self):
        return [f"config_hash={self.hash},seed={self.seed}"]

    def write_json(self, name, body):
        self.out.mkdir(parents=True, exist_ok=True)
        obj = {**self.meta(), **body}
        (self.out / name).write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")

    def write_text(self, name, text):
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / name).write_text(text)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


# ---------------------------------------------------------------------------
# commands


def cmd_validate(ctx):
    """Assumption checks; returns the report dict."""
    cfg = ctx.cfg
    checks = {}
    noise_sec = cfg.get("noise") or {}
    alpha = None
    try:
        alpha = check_alpha(noise_sec.get("alpha"))
        checks["A1"] = {"status": "PASS", "alpha": alpha}
    except (LvhgError, TypeError, ValueError) as exc:
        checks["A1"] = {"status": "FAIL", "message": str(exc)}
    mu = None
    try:
        atoms = noise_sec["atoms"]
        dirs = np.array([a["dir"] for a in atoms], dtype=float, ndmin=2)
        w = np.array([a["w"] for a in atoms], dtype=float)
        mu = SpectralMeasure(dirs / np.linalg.norm(dirs, axis=1)[:, None], w)
        checks["A2"] = {"status": "PASS", "n_atoms": mu.n_atoms}
    except (LvhgError, KeyError, TypeError, ValueError) as exc:
        checks["A2"] = {"status": "FAIL", "message": str(exc)}
    if mu is not None and alpha is not None:
        try:
            bounds = validate(mu, alpha)
            checks["A3"] = {"status": "PASS", "c1": bounds.c1, "c2": bounds.c2}
        except LvhgError as exc:
            checks["A3"] = {"status": "FAIL", "message": str(exc)}
    else:
        checks["A3"] = {"status": "SKIPPED", "message": "requires A1 and A2"}
    coeffs = None
    try:
        coeffs = build_coefficients(cfg)
        checks["A4"] = {"status": "PASS", "lattice": coeffs.lattice.basis.tolist()}
    except (LvhgError, ValueError) as exc:
        checks["A4"] = {"status": "FAIL", "message": str(exc)}
    if coeffs is not None:
        try:
            grid_n = int(_section(cfg, "validate").get("grid_n", 64))
            rep = check_wellposed(coeffs, grid_n)
            ok = mu is None or mu.dim == coeffs.dim
            checks["A5"] = {"status": "PASS" if ok else "FAIL", **rep.to_dict()}
            if not ok:
                checks["A5"]["message"] = "noise and coefficient dimensions differ"
        except (LvhgError, ValueError) as exc:
            checks["A5"] = {"status": "FAIL", "message": str(exc)}
    else:
        checks["A5"] = {"status": "SKIPPED", "message": "requires A4"}
    status = "PASS" if all(c["status"] == "PASS" for c in checks.values()) else "FAIL"
    report = {"command": "validate", "status": status, "checks": checks}
    ctx.write_json("validate.json", report)
    if status != "PASS":
        failed = [k for k, c in checks.items() if c["status"] != "PASS"]
        raise ValidationError("assumption checks failed: " + ", ".join(failed))
    return report


def _occupation(ctx):
    sec = _section(ctx.cfg, "ergodic", ("occupation.total_time",))
    occ = sec["occupation"]
    return estimate_invariant_occupation(
        ctx.coeffs, ctx.noise, ctx.sim, float(occ["total_time"]), occ.get("burn_in"),
        m=int(occ.get("m", 64)), n_chains=int(occ.get("n_chains", 64)), threads=ctx.threads)


def cmd_invariant(ctx):
    sec = _section(ctx.cfg, "ergodic", ("occupation.total_time", "grid_chain.n_samples"))
    gc_sec = sec["grid_chain"]
    tol = float(sec.get("tv_tolerance", 0.03))
    occ = _occupation(ctx)
    gc = estimate_invariant_grid_chain(ctx.coeffs, ctx.noise, float(gc_sec.get("t0", 0.1)),
                                       int(gc_sec.get("m", 16)), int(gc_sec["n_samples"]), ctx.seed,
                                       float(gc_sec.get("dt", ctx.sim.dt)), ctx.threads)
    tv = occ.histogram.tv(gc.histogram)
    pb = mean_pi(ctx.coeffs.eval_b, occ)
    ctx.write_json(PI_FILE, {"command": "invariant", **occ.to_dict()})
    ctx.write_json("invariant_grid_chain.json", {"command": "invariant", **gc.to_dict()})
    ctx.write_text("invariant_occupation.csv", occ.histogram.to_csv(ctx.header()))
    ctx.write_text("invariant_grid_chain.csv", gc.histogram.to_csv(ctx.header()))
    status = "PASS" if tv < tol else "FAIL"
    summary = {"command": "invariant", "status": status, "tv_methods": tv, "tv_tolerance": tol,
               "mean_drift": pb, "mean_drift_grid_chain": mean_pi(ctx.coeffs.eval_b, gc),
               "occupation": occ.diagnostics, "grid_chain": gc.diagnostics}
    ctx.write_json("invariant.json", summary)
    if status != "PASS":
        raise AcceptanceFailure(f"invariant estimators differ by TV {tv:.4f} >= {tol}")
    return summary


def cmd_corrector(ctx):
    sec = _section(ctx.cfg, "corrector", ("m",))
    m = int(sec["m"])
    gen = discretize_generator(ctx.coeffs, ctx.noise, m)
    x = gen.grid.centers()
    pi_h = gen.invariant()
    b_mean = pi_h @ ctx.coeffs.eval_b(x)
    # constant drift: b - Pi(b) vanishes identically
    f = np.zeros((gen.size, ctx.coeffs.dim)) if ctx.coeffs.constant_drift else center(gen, ctx.coeffs.eval_b(x))
    pde = solve_poisson(gen, f)
    summary = {"command": "corrector", "m": m, "mean_drift_h": b_mean, "residual": pde.residual,
               "mean": pde.mean, "sup_norm": pde.sup_norm(), "generator": gen.diagnostics}
    ok = pde.residual < 1e-6 * max(float(np.max(np.abs(ctx.coeffs.eval_b(x)))), 1e-300)
    fsup = float(np.max(np.abs(f)))
    mc_sec = sec.get("mc")
    mc = None
    if mc_sec:
        def fn(X):
            return ctx.coeffs.eval_b(X) - b_mean

        gamma = K = None
        horizon = mc_sec.get("horizon")
        if fsup > 0:
            gap_sec = sec.get("gap", {})
            dt_gap = float(gap_sec.get("dt", mc_sec.get("dt", 0.002)))
            lags = np.arange(1, int(gap_sec.get("n_lags", 20)) + 1) * dt_gap
            comps = [(lambda X, j=j: ctx.coeffs.eval_b(X)[:, j]) for j in range(ctx.coeffs.dim)
                     if np.max(np.abs(f[:, j])) > 0]
            mix = estimate_spectral_gap(ctx.coeffs, ctx.noise, comps, lags,
                                        ctx.sim.with_(dt=dt_gap), int(gap_sec.get("n_chains", 256)),
                                        float(gap_sec.get("total_time", 4.0)), threads=ctx.threads)
            gamma, K = mix.gamma, mix.K
            summary["mixing"] = mix.to_dict()
            if horizon is None:
                horizon = 5.0 / gamma
        if horizon is None:
            horizon = float(mc_sec.get("default_horizon", 0.1))
        mc = solve_poisson_mc(ctx.coeffs, ctx.noise, fn, float(horizon), int(mc_sec.get("n_paths", 1000)), m,
                              ctx.seed, float(mc_sec.get("dt", 0.002)), ctx.threads, gamma, K, pi_h)
        ctx.write_text("corrector_mc.csv", mc.to_csv(ctx.header()))
        summary["mc"] = {k: v for k, v in mc.diagnostics.items() if k != "stderr"}
        if fsup > 0:
            diff = relative_sup_difference(pde, mc)
            tol = float(mc_sec.get("tolerance", 0.1))
            summary["mc"]["relative_sup_difference"] = diff
            summary["mc"]["tolerance"] = tol
            ok = ok and diff < tol
        else:
            summary["mc"]["sup_norm"] = mc.sup_norm()
    qv_sec = sec.get("qv")
    if qv_sec:
        rows, slope = k_martingale_qv(ctx.coeffs, ctx.noise, pde, qv_sec.get("n", [16, 64, 256, 1024]),
                                      float(qv_sec.get("t", 1.0)), int(qv_sec.get("n_paths", 1000)),
                                      ctx.sim, ctx.threads)
        target = 1.0 - 2.0 / ctx.noise.alpha
        summary["qv"] = {"rows": rows, "slope": slope, "target_slope": target}
        if fsup > 0:
            summary["qv"]["within_tolerance"] = bool(abs(slope - target) <= float(qv_sec.get("tolerance", 0.15)))
            ok = ok and summary["qv"]["within_tolerance"]
    summary["status"] = "PASS" if ok else "FAIL"
    ctx.write_text("corrector_pde.csv", pde.to_csv(ctx.header()))
    ctx.write_json("corrector_pde.json", {"command": "corrector", **pde.to_dict()})
    ctx.write_json("corrector.json", summary)
    if not ok:
        raise AcceptanceFailure("corrector checks failed")
    return summary


def _load_pi(ctx):
    path = ctx.out / PI_FILE
    if not path.exists():
        return None
    try:
        obj = json.loads(path.read_text())
        if obj.get("config_hash") != ctx.hash:
            raise ConfigError(f"{path} was produced by a different config")
        return InvariantEstimate.from_dict(obj)
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot load invariant measure from {path}: {exc}") from exc


def cmd_verify(ctx):
    sec = _section(ctx.cfg, "verify", ("n", "n_paths"))
    occ = _load_pi(ctx)
    source = "file"
    if occ is None:
        occ = _occupation(ctx)
        source = "computed"
    pb = mean_pi(ctx.coeffs.eval_b, occ)
    law = homogenized_measure(ctx.coeffs, ctx.noise, occ)
    law.provenance["pi_source"] = source
    ctx.write_json("homogenized.json", {"command": "verify", **law.to_dict()})
    ctx.write_text("homogenized_sphere.csv", spherical_histogram_csv(law, header_lines=ctx.header()))
    write_ens = bool(sec.get("write_ensembles", True))

    def sink(n, ens):
        if write_ens:
            ctx.out.mkdir(parents=True, exist_ok=True)
            with open(ctx.out / f"ensemble_n{n}.lvhg", "wb") as fh:
                write_ensemble_binary(ens, fh, ctx.hash, ctx.seed)

    t = float(sec.get("t", 1.0))
    rep = convergence_sweep(ctx.coeffs, ctx.noise, law, [int(n) for n in sec["n"]], int(sec["n_paths"]), ctx.sim,
                            pb, t, threads=ctx.threads, D_threshold=float(sec.get("D_threshold", 0.05)),
                            ensemble_sink=sink)
    ks_tol = float(sec.get("ks_threshold", KS_THRESHOLD))
    a_tol = float(sec.get("alpha_tol", 0.05))
    ks_ok = max(rep.ks[-1]) < ks_tol
    a_ok = all(abs(a - ctx.noise.alpha) <= a_tol for a in rep.alpha_hat[-1])
    status = "PASS" if (rep.verdict == "PASS" and ks_ok and a_ok) else "FAIL"
    body = {"command": "verify", "status": status, "mean_drift": pb, "ks_threshold": ks_tol,
            "ks_ok": ks_ok, "alpha_tol": a_tol, "alpha_ok": a_ok, "report": rep.to_dict(),
            "homogenized_total_mass": law.total_mass}
    ctx.write_json("convergence.json", body)
    ctx.write_text("convergence.csv", rep.to_csv(ctx.header()))
    ctx.write_text("convergence_plot.csv", rep.plot_csv(ctx.header()))
    if status != "PASS":
        raise AcceptanceFailure("convergence sweep did not pass")
    return body


def cmd_report(out, expected_hash=None):
    """Merge JSON artifacts of ``out`` into ``report.json`` and ``report.csv``."""
    out = Path(out)
    names = sorted(p.name for p in out.glob("*.json") if p.name != "report.json") if out.is_dir() else []
    if not names:
        raise ValidationError(f"no artifacts found in {out}")
    artifacts, rows, hashes, seeds = {}, [], set(), set()
    for name in names:
        try:
            obj = json.loads((out / name).read_text())
        except ValueError as exc:
            raise ValidationError(f"corrupted artifact {name}: {exc}") from exc
        artifacts[name] = obj
        hashes.add(obj.get("config_hash"))
        seeds.add(obj.get("seed"))
        rows.append([name, obj.get("command", ""), obj.get("status", ""), obj.get("config_hash", ""),
                     obj.get("seed", "")])
    mismatch = sorted(n for n, o in artifacts.items()
                      if o.get("config_hash") != (expected_hash or sorted(map(str, hashes))[0]))
    if expected_hash is None and len(hashes) == 1:
        mismatch = []
    for p in sorted(out.glob("*.csv")):
        if p.name == "report.csv":
            continue
        first = p.read_text().split("\n", 1)[0]
        h = first[len("# config_hash="):].split(",")[0] if first.startswith("# config_hash=") else None
        if h is None or (expected_hash is not None and h != expected_hash) or (
                expected_hash is None and h not in hashes):
            mismatch.append(p.name)
    the_hash = expected_hash or (hashes.pop() if len(hashes) == 1 else None)
    report = {"config_hash": the_hash, "seed": seeds.pop() if len(seeds) == 1 else None,
              "versions": {"lvhg": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                           "python": platform.python_version()},
              "artifacts": artifacts, "hash_mismatch": sorted(set(mismatch)),
              "status": "FAIL" if mismatch else "PASS"}
    (out / "report.json").write_text(json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n")
    lines = [f"# config_hash={the_hash},seed={report['seed']}", "artifact,command,status,config_hash,seed"]
    lines += [",".join(str(v) for v in r) for r in rows]
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    if mismatch:
        raise ValidationError("config hash mismatch in: " + ", ".join(report["hash_mismatch"]))
    return report


COMMANDS = ("validate", "invariant", "corrector", "verify", "report")


def build_parser():
    p = argparse.ArgumentParser(prog="lvhg", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")
    p.add_argument("--seed", type=int, help="override the config seed")
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "report":
        if args.config:
            cfg = load_config(args.config, args.seed, args.out)
            return cmd_report(cfg["output_dir"], config_hash(cfg))
        if not args.out:
            raise ConfigError("report needs --out or --config")
        return cmd_report(args.out)
    if not args.config:
        raise ConfigError(f"{args.command} needs --config")
    ctx = Context(load_config(args.config, args.seed, args.out), args.threads)
    if args.command == "validate":
        return cmd_validate(ctx)
    ctx.build()
    return {"invariant": cmd_invariant, "corrector": cmd_corrector, "verify": cmd_verify}[args.command](ctx)


def main(argv=None):
    try:
        run(argv)
    except AcceptanceFailure as exc:
        print(f"lvhg: acceptance failure: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except LvhgError as exc:
        print(f"lvhg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        print(f"lvhg: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
