"""Command-line entry point: ``heavysgd {run,check-ppd,verify-lemmas,fit-rate,stable-test}``.

Experiment configs are YAML mappings with the sections ``model``, ``noise``,
``schedule``, ``run`` and ``analysis``; every key has a default (see
``DEFAULTS`` and ``MODEL_DEFAULTS``), and unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import analysis as an
from ._io import SCHEMA_VERSION, dumps, jsonable, write_atomic, write_json
from .errors import HeavySgdError, ParameterError
from .models import GlmOracle, GlmSpec, LinearModelSpec, OlsOracle
from .ppd import SymMatrix, classify_cones
from .sgd_core import (
    AffineGradient,
    AdditiveNoiseOracle,
    Experiment,
    MultiplicativeNoise,
    NoiseSpec,
    SgdTrace,
    StepSchedule,
    checkpoint_plan,
    replicate,
)
from .stable import NoiseLaw, RngStream

OUT_ENV = "HEAVYSGD_OUT"
EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3

MODEL_DEFAULTS = {
    "synthetic-quadratic": {"A": [[1.0, 0.0], [0.0, 1.0]], "x_star": [0.0, 0.0]},
    "ols": {"beta0": [1.0, -1.0], "cov_chol": None},
    "glm": {"beta0": [1.0, -1.0], "cov_chol": None, "cgf": "logistic", "lam": 0.1,
            "panel_size": 100000, "panel_seed": 0},
}

DEFAULTS = {
    "model": {"kind": "synthetic-quadratic"},
    "noise": {"law": "pareto", "alpha": 1.5, "scale": 1.0, "symmetrize": True, "multiplicative": 0.0},
    "schedule": {"gamma0": 0.5, "rho": 0.7, "t0": 0},
    "run": {"T": 10000, "R": 100, "checkpoint_ratio": 1.25, "seed": 0, "x0": None},
    "analysis": {"moment_orders": [1.2], "burn_in": 100, "directions": None, "level": 0.01,
                 "hill_window": None, "min_stable_samples": 500},
}

TRACE_COLUMNS = ("replication", "t", "coordinate", "x", "x_bar", "err", "err_bar", "scaled_err_bar")


class ConfigError(ParameterError):
    pass


# ---------------------------------------------------------------------------
# Config resolution


def _merge(section, given, defaults):
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given))
    return out


def resolve_config(raw) -> dict:
    """Apply defaults and validate; returns a plain, JSON-serializable mapping."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    model_in = dict(raw.get("model") or {})
    kind = model_in.get("kind", DEFAULTS["model"]["kind"])
    if kind not in MODEL_DEFAULTS:
        raise ConfigError(f"model.kind must be one of {sorted(MODEL_DEFAULTS)}, got {kind!r}")
    cfg = {"model": _merge("model", model_in, {"kind": kind, **MODEL_DEFAULTS[kind]})}
    for sec in ("noise", "schedule", "run", "analysis"):
        cfg[sec] = _merge(sec, raw.get(sec), DEFAULTS[sec])
    build(cfg)  # raises on invalid values
    return jsonable(cfg)


def load_config(path) -> dict:
    """Read a YAML config or a run manifest (whose ``config`` entry is used)."""
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"config is not valid YAML: {err}") from None
    if isinstance(data, dict) and "schema_version" in data and "config" in data:
        return data["config"]
    return data


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _dim_of(model):
    key = "x_star" if model["kind"] == "synthetic-quadratic" else "beta0"
    return len(np.atleast_1d(np.asarray(model[key], dtype=float)))


def _chol(model, n):
    return np.eye(n) if model["cov_chol"] is None else np.asarray(model["cov_chol"], dtype=float)


def build(cfg):
    """(oracle, x0, x_star, schedule, checkpoints, noise_law) from a merged config."""
    model, noise, sch, run = cfg["model"], cfg["noise"], cfg["schedule"], cfg["run"]
    try:
        law = NoiseLaw(noise["law"], float(noise["alpha"]), float(noise["scale"]), bool(noise["symmetrize"]))
        schedule = StepSchedule(float(sch["gamma0"]), float(sch["rho"]), int(sch["t0"]))
        n = _dim_of(model)
        mult = float(noise["multiplicative"])
        if mult < 0:
            raise ConfigError("noise.multiplicative must be >= 0")
        if model["kind"] == "synthetic-quadratic":
            A = np.asarray(model["A"], dtype=float)
            xs = np.asarray(model["x_star"], dtype=float).ravel()
            if A.shape != (n, n):
                raise ConfigError(f"model.A must be {n}x{n}")
            SymMatrix(A)
            rule = MultiplicativeNoise(mult) if mult > 0 else None
            oracle = AdditiveNoiseOracle(AffineGradient(A, A @ xs), NoiseSpec(law, rule), n)
        else:
            if mult != 0:
                raise ConfigError("noise.multiplicative applies to the synthetic-quadratic model only")
            if model["kind"] == "ols":
                spec = LinearModelSpec(model["beta0"], _chol(model, n), law)
                oracle = OlsOracle(spec)
            else:
                spec = GlmSpec(model["cgf"], float(model["lam"]), model["beta0"], _chol(model, n), law,
                               int(model["panel_size"]), int(model["panel_seed"]))
                oracle = GlmOracle(spec)
            xs = spec.x_star
        T, R = int(run["T"]), int(run["R"])
        if T < 1 or R < 1:
            raise ConfigError("run.T and run.R must be >= 1")
        cps = checkpoint_plan(T, float(run["checkpoint_ratio"]))
        x0 = np.zeros(n) if run["x0"] is None else np.asarray(run["x0"], dtype=float).ravel()
        if x0.size != n:
            raise ConfigError(f"run.x0 must have {n} entries")
        an_cfg = cfg["analysis"]
        for p in an_cfg["moment_orders"]:
            if not 0 < float(p) < 2:
                raise ConfigError(f"analysis.moment_orders entries must lie in (0, 2), got {p}")
        if int(an_cfg["burn_in"]) < 1:
            raise ConfigError("analysis.burn_in must be >= 1")
        if not 0 < float(an_cfg["level"]) < 1:
            raise ConfigError("analysis.level must lie in (0, 1)")
    except ParameterError:
        raise
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"invalid config value: {err}") from None
    return oracle, x0, np.asarray(xs, dtype=float), schedule, cps, law


def theory_conditions(cfg) -> tuple:
    """(conditions, warnings) for the rate and stable-limit statements."""
    law = cfg["noise"]
    alpha = 2.0 if law["law"] in ("gaussian", "none") else float(law["alpha"])
    rho = float(cfg["schedule"]["rho"])
    cond, warns = {"tail_index": alpha, "rho": rho}, []
    if alpha < 2:
        lo, hi = an.gclt_exponent_window(alpha, rho)
        cond["gclt_exponent_window"] = [lo, hi]
        cond["gclt_condition_holds"] = bool(lo <= hi)
        if lo > hi:
            warns.append(f"no moment order p satisfies max((a+a*rho)/(1+a*rho), a*rho) <= p <= a "
                         f"for a={alpha}, rho={rho}; the stable limit of the average is not covered")
        if cfg["model"]["kind"] == "glm":
            ok = 1.0 / rho < alpha
            cond["nonlinear_condition_holds"] = bool(ok)
            if not ok:
                warns.append(f"nonlinear model needs 1/rho < alpha, got 1/rho={1 / rho:.4g}, alpha={alpha}")
    for p in cfg["analysis"]["moment_orders"]:
        if float(p) >= alpha:
            warns.append(f"moment order {p} >= tail index {alpha}: E|x_t - x*|^p may be infinite")
    return cond, warns


# ---------------------------------------------------------------------------
# Trace files


def traces_csv(reps, x_star, alpha) -> str:
    blocks = []
    for rid, tr in zip(reps.replication_ids, reps.traces):
        K, n = tr.iterates.shape
        t = np.repeat(tr.checkpoints, n)
        coord = np.tile(np.arange(n), K)
        x = tr.iterates.ravel()
        xb = tr.pr_averages.ravel()
        err = (tr.iterates - x_star).ravel()
        errb = (tr.pr_averages - x_star).ravel()
        scaled = t.astype(float) ** (1.0 - 1.0 / alpha) * errb
        blocks.append(np.column_stack([np.full(t.size, rid), t, coord, x, xb, err, errb, scaled]))
    buf = io.StringIO()
    buf.write(",".join(TRACE_COLUMNS) + "\n")
    if blocks:
        np.savetxt(buf, np.vstack(blocks), delimiter=",",
                   fmt=["%d", "%d", "%d"] + ["%.17g"] * 5)
    return buf.getvalue()


def read_traces(run_dir) -> tuple:
    """Rebuild (traces, manifest) from a run directory."""
    run_dir = Path(run_dir)
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"{run_dir} is not a run directory: {err}") from None
    data = np.loadtxt(run_dir / "traces.csv", delimiter=",", skiprows=1, ndmin=2)
    x_star = np.asarray(manifest["x_star"], dtype=float)
    n = x_star.size
    traces = []
    if data.size:
        for rid in np.unique(data[:, 0]).astype(int):
            rows = data[data[:, 0] == rid]
            cps = rows[::n, 1].astype(np.int64)
            traces.append(SgdTrace(cps, rows[:, 3].reshape(-1, n), rows[:, 4].reshape(-1, n),
                                   np.asarray(manifest["config"]["run"]["x0"] or np.zeros(n), dtype=float),
                                   x_star, manifest["config"]["run"]["seed"], int(rid)))
    return traces, manifest


class _Loaded(list):
    def __init__(self, traces, censored):
        super().__init__(traces)
        self.n_censored = censored


# ---------------------------------------------------------------------------
# Analysis shared by run / fit-rate / stable-test


def analyze_rates(traces, cfg, alpha) -> list:
    rho = float(cfg["schedule"]["rho"])
    out = []
    for p in cfg["analysis"]["moment_orders"]:
        p = float(p)
        curve = an.moment_curve(traces, p)
        theory = an.rate_exponent(rho, p, alpha)
        try:
            fit = an.fit_rate(curve, int(cfg["analysis"]["burn_in"]), theory)
        except HeavySgdError as err:
            fit = None
            note = str(err)
        else:
            note = None
        out.append((p, curve, fit, note))
    return out


def analyze_stable(traces, cfg, alpha):
    a = cfg["analysis"]
    dirs = None if a["directions"] is None else np.asarray(a["directions"], dtype=float)
    window = None if a["hill_window"] is None else tuple(a["hill_window"])
    return an.stable_limit_diagnostic(traces, alpha, directions=dirs, level=float(a["level"]),
                                      hill_window=window, min_samples=int(a["min_stable_samples"]))


def _tail_alpha(cfg):
    law = cfg["noise"]
    return 2.0 if law["law"] in ("gaussian", "none") else min(2.0, float(law["alpha"]))


# ---------------------------------------------------------------------------
# Commands


def _emit_error(err, code):
    sys.stderr.write(json.dumps({"error": type(err).__name__, "message": str(err), "exit_code": code}) + "\n")
    return code


def _warn(msg):
    sys.stderr.write(json.dumps({"warning": msg}) + "\n")


def _out_root(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "runs")


def cmd_run(args) -> int:
    raw = load_config(args.config)
    if args.seed is not None:
        raw = dict(raw or {})
        raw["run"] = dict(raw.get("run") or {}, seed=args.seed)
    cfg = resolve_config(raw)
    oracle, x0, x_star, schedule, cps, law = build(cfg)
    cond, warns = theory_conditions(cfg)
    for w in warns:
        _warn(w)
    run_id = config_hash(cfg)
    run_dir = _out_root(args) / f"run-{run_id}"
    alpha = _tail_alpha(cfg)

    exp = Experiment(oracle, x0, schedule, int(cfg["run"]["T"]), cps, x_star)
    t_start = time.perf_counter()
    reps = replicate(exp, int(cfg["run"]["R"]), RngStream(int(cfg["run"]["seed"])), workers=max(1, args.threads))
    elapsed = time.perf_counter() - t_start

    files = {"traces.csv": traces_csv(reps, x_star, alpha)}
    diverged = reps.censored_fraction > 0.5
    analysis = {"schema_version": SCHEMA_VERSION, "censored": reps.n_censored, "requested": reps.requested}
    if reps.traces and not diverged:
        rates = analyze_rates(reps, cfg, alpha)
        analysis["rates"] = [{"p": p, "curve": c, "fit": f, "note": note} for p, c, f, note in rates]
        for p, c, f, _ in rates:
            files[f"moments_p{p:g}.csv"] = an.curve_csv(c, f)
        try:
            analysis["stable_limit"] = analyze_stable(reps, cfg, alpha)
        except HeavySgdError as err:
            analysis["stable_limit"] = {"skipped": str(err)}
        audits = [tr.audit for tr in reps.traces if tr.audit is not None]
        if audits:
            analysis["m_bound_audit"] = {
                "K": audits[0].K,
                "worst_mean_ratio": max(a.mean_ratio for a in audits),
                "all_ok": all(a.ok for a in audits),
            }
    files["analysis.json"] = dumps(analysis)
    for name, text in files.items():
        write_atomic(run_dir / name, text)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "run_id": run_id,
        "status": "diverged" if diverged else "ok",
        "config": cfg,
        "x_star": x_star,
        "oracle": oracle.describe(),
        "conditions": cond,
        "warnings": warns,
        "replications": {"requested": reps.requested, "completed": len(reps),
                         "censored": [list(c) for c in reps.censored]},
        "trace_columns": list(TRACE_COLUMNS),
        "files": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in sorted(files.items())},
    }
    write_json(run_dir / "manifest.json", manifest)
    print(json.dumps({"run_dir": str(run_dir), "status": manifest["status"], "censored": reps.n_censored,
                      "elapsed_seconds": round(elapsed, 3)}))
    if diverged:
        sys.stderr.write(json.dumps({"error": "DivergenceError", "exit_code": EXIT_DIVERGED,
                                     "message": f"{reps.n_censored} of {reps.requested} replications diverged"}) + "\n")
        return EXIT_DIVERGED
    return EXIT_OK


def _read_matrix(path):
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
        mat = np.asarray(data, dtype=float)
        if mat.ndim != 2:
            raise ValueError
    except (yaml.YAMLError, ValueError, TypeError):
        mat = np.loadtxt(io.StringIO(text), ndmin=2)
    return SymMatrix(mat)


def _yes_no(flag):
    return "-" if flag is None else "yes" if flag else "no"


def cmd_check_ppd(args) -> int:
    q = _read_matrix(args.matrix)
    table = classify_cones(q, args.p, resolution=args.resolution)
    if args.format == "json":
        print(dumps(table), end="")
        return EXIT_OK
    print(f"{'cone':<10}{'p':>7}{'margin':>16}  {'PD':<4}{'PSD':<5}{'status':<14}agrees")
    for r in table.rows:
        print(f"{r.label:<10}{r.p:>7g}{r.margin:>16.10g}  {_yes_no(r.member_pd):<4}"
              f"{_yes_no(r.member_psd):<5}{r.status:<14}{_yes_no(r.agrees)}")
    return EXIT_OK


BUDGETS = {
    "quick": {"vec": 10**4, "pexp": 2000, "fabian_T": 10**6, "rho_T": 10**5, "phi_T": 1500},
    "default": {"vec": 10**5, "pexp": 10**4, "fabian_T": 10**6, "rho_T": 10**5, "phi_T": 5000},
    "full": {"vec": 10**6, "pexp": 10**5, "fabian_T": 10**6, "rho_T": 10**6, "phi_T": 5000},
}


def lemma_suite(budget: str = "default", seed: int = 0) -> list:
    """Run the inequality and recursion oracles; returns (name, passed, detail) rows."""
    b = BUDGETS[budget]
    rows = []
    sweep = an.vecexpandp_sweep(b["vec"], RngStream(seed, 10))
    rows.append(("vecexpandp", sweep.holds, {"trials": sweep.trials, "violations": sweep.violations,
                                             "worst_excess": sweep.worst_excess}))
    pareto = NoiseLaw("pareto", 1.8).draw
    for n in (1, 3):
        r = an.check_p_expand(pareto, 0.5, 100, b["pexp"], n, RngStream(seed, 11 + n))
        rows.append((f"p_expand n={n}", r.holds, r.to_dict()))
    grid = an.fabian_grid(b["fabian_T"])
    bad = [(g.A, g.B, g.alpha, g.beta, g.oscillation) for g in grid if not g.holds]
    rows.append(("fabian grid", not bad, {"points": len(grid), "max_oscillation": max(g.oscillation for g in grid),
                                          "failing": bad}))
    T = b["rho_T"]
    s = an.check_rho_exp(0.5, 0.9, 1.0, 1.0, T)
    rows.append(("rho_exp", bool(s[-1] < 0.05 and s[-1] < s[T // 10 - 1]),
                 {"T": T, "s_T": s[-1], "s_T/10": s[T // 10 - 1]}))
    T = b["phi_T"]
    A = np.diag([1.0, 2.0])
    u = an.check_phi_sum(A, 0.5, 0.9, 1.0, T)
    us = an.check_phi_sum_scalar(A, 0.5, 0.9, 1.0, T)
    tail = u[3 * T // 4 - 1:]
    gap = float(np.max(np.abs(u - us)))
    ok = bool(u[-1] < 0.1 and np.all(np.diff(tail) < 0) and gap <= 1e-10)
    rows.append(("phi_sum", ok, {"T": T, "u_T": u[-1], "u_3T/4": tail[0], "scalar_gap": gap}))
    return rows


def cmd_verify_lemmas(args) -> int:
    t0 = time.perf_counter()
    rows = lemma_suite(args.budget, args.seed or 0)
    elapsed = time.perf_counter() - t0
    if args.format == "json":
        print(dumps({"schema_version": SCHEMA_VERSION, "budget": args.budget, "elapsed_seconds": elapsed,
                     "checks": [{"name": n, "passed": ok, "detail": d} for n, ok, d in rows]}), end="")
    else:
        for name, ok, detail in rows:
            print(f"{'PASS' if ok else 'FAIL'}  {name:<16} {json.dumps(jsonable(detail))}")
        print(f"budget={args.budget} elapsed={elapsed:.1f}s")
    return EXIT_OK if all(ok for _, ok, _ in rows) else EXIT_FAIL


def cmd_fit_rate(args) -> int:
    traces, manifest = read_traces(args.run_dir)
    cfg = copy.deepcopy(manifest["config"])
    if args.p:
        cfg["analysis"]["moment_orders"] = args.p
    if args.burn_in is not None:
        cfg["analysis"]["burn_in"] = args.burn_in
    loaded = _Loaded(traces, len(manifest["replications"]["censored"]))
    if not traces:
        raise ConfigError("run directory holds no uncensored traces")
    rates = analyze_rates(loaded, cfg, _tail_alpha(cfg))
    out = {"schema_version": SCHEMA_VERSION, "run_id": manifest["run_id"],
           "rates": [{"p": p, "curve": c, "fit": f, "note": note} for p, c, f, note in rates]}
    write_json(Path(args.run_dir) / "fit-rate.json", out)
    for p, c, f, _ in rates:
        write_atomic(Path(args.run_dir) / f"moments_p{p:g}.csv", an.curve_csv(c, f))
    print(dumps({"rates": [{"p": p, "fit": f} for p, _, f, _ in rates]}), end="")
    return EXIT_OK


def cmd_stable_test(args) -> int:
    traces, manifest = read_traces(args.run_dir)
    cfg = copy.deepcopy(manifest["config"])
    if args.level is not None:
        cfg["analysis"]["level"] = args.level
    alpha = args.alpha if args.alpha is not None else _tail_alpha(cfg)
    loaded = _Loaded(traces, len(manifest["replications"]["censored"]))
    report = analyze_stable(loaded, cfg, alpha)
    write_json(Path(args.run_dir) / "stable-test.json", report)
    print(dumps(report), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the master seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for replications")
    common.add_argument("--out", default=None, help=f"output root (default ${OUT_ENV} or ./runs)")
    common.add_argument("--budget", choices=sorted(BUDGETS), default="default")

    parser = argparse.ArgumentParser(prog="heavysgd", description="Heavy-tailed SGD experiments and oracles")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run a configured experiment")
    p.add_argument("config", nargs="?", default=None, help="YAML config or run manifest")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check-ppd", parents=[common], help="classify a symmetric matrix into p-PD cones")
    p.add_argument("matrix", help="YAML/JSON nested list or whitespace-separated text")
    p.add_argument("--p", type=float, nargs="+", default=[1.0, 1.5, 2.0])
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_check_ppd)

    p = sub.add_parser("verify-lemmas", parents=[common], help="run the lemma oracle suite")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_verify_lemmas)

    p = sub.add_parser("fit-rate", parents=[common], help="re-fit moment rates of a run directory")
    p.add_argument("run_dir")
    p.add_argument("--p", type=float, nargs="+", default=None)
    p.add_argument("--burn-in", type=int, default=None)
    p.set_defaults(func=cmd_fit_rate)

    p = sub.add_parser("stable-test", parents=[common], help="stable-limit diagnostics of a run directory")
    p.add_argument("run_dir")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--level", type=float, default=None)
    p.set_defaults(func=cmd_stable_test)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParameterError, ValueError) as err:
        return _emit_error(err, EXIT_INVALID)
    except HeavySgdError as err:
        return _emit_error(err, EXIT_FAIL)


if __name__ == "__main__":
    sys.exit(main())
