"""Scenario runner: ``rlfa run --config c.json`` and ``rlfa sweep --config c.json --axis k=v1,v2``.

Each scenario reads a flat JSON config, runs one seeded pipeline and writes
``metadata.json`` plus CSV tables into its output directory. Relative
output directories resolve against ``$RLFA_OUTPUT_ROOT`` (default
``./rlfa-runs``).

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 assertion
failure.
"""

import argparse
import copy
import json
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import sklearn

from . import __version__
from ._validation import InvalidInputError, NumericalFailure
from .algorithms import (
    FunctionClass,
    fitted_q_iteration,
    fitted_reward,
    lsvi_ucb,
    policy_gradient,
)
from .io import csv_text, read_csv, write_csv, write_json, write_schema_csv
from .kernels import Kernel, center_basis, mercer_spectrum, power_function, rkhs_unit_target, sphere_sample, tail_sum
from .linear import FeatureMap, build_linear_mdp, check_linear_closure, random_linear_spec
from .mdp import FiniteMDP, QFunction, evaluate_policy, random_mdp, softmax_suboptimality_bound, solve_exact
from .mismatch import (
    DistributionSet,
    PerturbationInstance,
    default_candidates,
    delta_complexity,
    perturbation_response,
)
from .simulator import EpisodicSimulator, GenerativeModel, regret_slope

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_ASSERTION = 0, 2, 3, 4
OUTPUT_ENV = "RLFA_OUTPUT_ROOT"
COMMON_FIELDS = {"scenario", "seed", "output_dir"}


class ConfigError(InvalidInputError):
    """Configuration file or command line is invalid."""


@dataclass
class ScenarioResult:
    summary: dict
    tables: dict = field(default_factory=dict)  # file name -> (columns, rows, schema or None)
    checks: list = field(default_factory=list)  # (name, passed)
    headline: str = None


def _kernel(params):
    return Kernel(params["kernel"], alpha=params.get("alpha", 1.0),
                  d=params["d"] if params["kernel"] in ("ntk", "random-feature") else None)


def run_exact_dp(p, seed):
    rng = np.random.default_rng(seed)
    S, A, H = p["S"], p["A"], p["H"]
    mdp = random_mdp(S, A, H, rng)
    if p["reward"] is not None:
        mdp = mdp.with_reward(np.full((H, S, A), float(p["reward"])))
    sol = solve_exact(mdp)
    v = sol.qstar.state_values()
    act = sol.pistar.probs.argmax(axis=2)
    rows = [(h, s, float(v[h, s]), int(act[h, s])) for h in range(H) for s in range(S)]
    return ScenarioResult({"jstar": sol.jstar}, {"values.csv": (["h", "s", "vstar", "action"], rows, None)},
                          headline="jstar")


def run_softmax_bound(p, seed):
    rng = np.random.default_rng(seed)
    rows, checks = [], []
    for t in range(p["trials"]):
        mdp = random_mdp(p["S"], p["A"], p["H"], rng)
        beta = p["betas"][t % len(p["betas"])]
        qstar = solve_exact(mdp).qstar.values
        q = QFunction(qstar + p["perturbation"] * rng.uniform(-1, 1, size=qstar.shape))
        lhs, rhs = softmax_suboptimality_bound(mdp, q, beta)
        ok = lhs >= -1e-8 and rhs - lhs >= -1e-8
        rows.append((t, beta, lhs, rhs, rhs - lhs, ok))
        checks.append((f"trial{t}", ok))
    slack = min(r[4] for r in rows)
    return ScenarioResult({"trials": len(rows), "min_slack": slack, "all_pass": all(c for _, c in checks)},
                          {"bound.csv": (["trial", "beta", "lhs", "rhs", "slack", "pass"], rows, None)},
                          checks, "min_slack")


def run_fqi(p, seed):
    rng = np.random.default_rng(seed)
    S, A, H = p["S"], p["A"], p["H"]
    mdp = random_mdp(S, A, H, rng)
    gm = GenerativeModel(mdp, seed=seed, noise=p["noise"])
    rep = fitted_q_iteration(gm, FunctionClass.linear(FeatureMap.tabular(S, A), p["lam"]), n=p["n"])
    gap = solve_exact(mdp).jstar - evaluate_policy(mdp, rep.policy).j
    rows = [(h, float(rep.diagnostics["loss"][h]), int(rep.diagnostics["clipped"][h])) for h in range(H)]
    return ScenarioResult({"gap": gap, "queries": gm.query_count},
                          {"steps.csv": (["h", "loss", "clipped"], rows, None)}, headline="gap")


def run_lsvi_ucb(p, seed):
    S, A, H, K = p["S"], p["A"], p["H"], p["K"]
    mdp = random_mdp(S, A, H, np.random.default_rng(seed))
    lam = p["lam"] if p["lam"] is not None else 1.0 / K
    rep = lsvi_ucb(EpisodicSimulator(mdp, seed=seed), FunctionClass.linear(FeatureMap.tabular(S, A), lam),
                   K, beta=p["beta"], c=p["c"], n_reg=p["n_reg"], evaluation_mdp=mdp)
    cum = rep.ledger.cumulative
    summary = {"regret": float(cum[-1]), "regret_per_episode": float(cum[-1] / K),
               "slope": regret_slope(cum), "optimism_fraction": rep.summary["optimism_fraction"],
               "beta": rep.config["beta"], "lam": lam}
    return ScenarioResult(summary, {"regret.csv": (None, rep.ledger.rows(), "regret")}, headline="regret")


def run_policy_gradient(p, seed):
    S, A, H = p["S"], p["A"], p["H"]
    mdp = random_mdp(S, A, H, np.random.default_rng(seed))
    fm = FeatureMap.tabular(S, A)
    rep = policy_gradient(EpisodicSimulator(mdp, seed=seed), np.zeros((H, S * A)), fm,
                          p["N"], p["K"], p["eta"], evaluation_mdp=mdp)
    rows = list(enumerate(rep.learning_curve))
    summary = {"J_initial": rep.learning_curve[0], "J_final": rep.learning_curve[-1],
               "jstar": solve_exact(mdp).jstar}
    return ScenarioResult(summary, {"learning.csv": (None, rows, "learning")}, headline="J_final")


def run_fitted_reward(p, seed):
    S, A, H = p["S"], p["A"], p["H"]
    rng = np.random.default_rng(seed)
    base = random_mdp(S, A, H, rng)
    pts = rng.uniform(-1, 1, size=(S, A, 2))
    k = Kernel("gaussian", p["alpha"])
    grid = pts.reshape(-1, 2)
    rew = np.stack([rkhs_unit_target(k, grid, rng, nonnegative=True)(grid).reshape(S, A) for _ in range(H)])
    mdp = base.with_reward(rew)
    gm = GenerativeModel(mdp, seed=seed, noise=p["noise"])
    rep = fitted_reward(gm, k, pts, np.full(S * A, 1.0 / (S * A)), p["n"], evaluation_mdp=mdp)
    rows = [(h, float(rep.diagnostics["multiplier"][h]), float(rep.diagnostics["rkhs_norm"][h]))
            for h in range(H)]
    return ScenarioResult({"gap": rep.summary["gap"], "queries": gm.query_count},
                          {"fit.csv": (["h", "multiplier", "rkhs_norm"], rows, None)}, headline="gap")


def _sphere_spectrum(p, d, rng):
    X = sphere_sample(p["n_points"], d, rng)
    k = Kernel(p["kernel"], alpha=p["alpha"], d=d if p["kernel"] in ("ntk", "random-feature") else None)
    return mercer_spectrum(k, X, np.full(p["n_points"], 1.0 / p["n_points"]))


def run_spectrum(p, seed):
    sp = _sphere_spectrum(p, p["d"], np.random.default_rng(seed))
    lam = sp.eigenvalues
    tails = lam.sum() - np.cumsum(lam)
    rows = [(i + 1, float(lam[i]), float(max(tails[i], 0.0))) for i in range(lam.size)]
    return ScenarioResult({"tail_sum": tail_sum(sp, p["n"]), "trace": sp.trace},
                          {"spectrum.csv": (None, rows, "spectrum")}, headline="tail_sum")


def run_power_function(p, seed):
    rng = np.random.default_rng(seed)
    m = p["n_points"]
    X = sphere_sample(m, p["d"], rng)
    k = _kernel(p)
    rho = rng.dirichlet(np.ones(m))
    sp = mercer_spectrum(k, X, rho)
    rows, checks = [], []
    for n in p["centers"]:
        idx = rng.choice(m, size=n, replace=False)
        p2 = float(rho @ power_function(k, X[idx], X) ** 2)
        tail = tail_sum(sp, n)
        basis = float(rho @ (center_basis(k, X[idx], X) ** 2).sum(axis=1))
        top = float(sp.eigenvalues[:n].sum())
        ok = p2 >= tail - 1e-8 and basis <= top + 1e-8
        rows.append((n, p2, tail, basis, top, ok))
        checks.append((f"n{n}", ok))
    recon = float(np.abs(sp.reconstruct() - k.gram(X)).max())
    trace_err = abs(sp.eigenvalues.sum() - float(rho @ k.diag(X)))
    checks += [("reconstruction", recon <= 1e-8), ("trace", trace_err <= 1e-10)]
    margin = min(min(r[1] - r[2], r[4] - r[3]) for r in rows)
    return ScenarioResult(
        {"min_margin": margin, "reconstruction_error": recon, "trace_error": trace_err},
        {"power.csv": (["n", "power_sq_mean", "tail_sum", "basis_sq_mean", "top_sum", "pass"], rows, None)},
        checks, "min_margin")


def run_perturbation(p, seed):
    rng = np.random.default_rng(seed)
    m = p["support"]
    X = sphere_sample(m, p["d"], rng)
    Pi = DistributionSet(X, rng.dirichlet(np.ones(m), size=p["n_rho"]))
    K = _kernel(p).gram(X)
    cands = default_candidates(Pi)
    rows, checks, deltas = [], [], []
    for eps in p["epsilons"]:
        for j, nu in enumerate(cands):
            res = perturbation_response(PerturbationInstance(K, nu, eps, Pi))
            for i, v in enumerate(res.per_rho):
                rows.append((eps, j, i, float(v), res.dual_gap))
        deltas.append(delta_complexity(K, Pi, eps, cands).value)
    mono = all(a <= b + 1e-9 for a, b in zip(deltas, deltas[1:]))
    checks.append(("monotone_in_epsilon", mono))
    return ScenarioResult({"delta": dict(zip(map(str, p["epsilons"]), deltas))},
                          {"response.csv": (None, rows, "response")}, checks, None)


def run_curse_demo(p, seed):
    rows = []
    for d in p["dims"]:
        sp = _sphere_spectrum(p, d, np.random.default_rng(seed))
        rows.append((d, tail_sum(sp, p["n"])))
    tails = [r[1] for r in rows]
    inc = all(a < b for a, b in zip(tails, tails[1:]))
    return ScenarioResult({"tails": dict((str(d), t) for d, t in rows), "increasing": inc,
                           "tail_max_d": tails[-1]},
                          {"curse.csv": (["d", "tail_sum"], rows, None)},
                          [("strictly_increasing", inc)], "tail_max_d")


def run_closure_check(p, seed):
    rng = np.random.default_rng(seed)
    spec = random_linear_spec(p["S"], p["A"], p["H"], p["d"], rng)
    mdp = build_linear_mdp(spec)
    rep = check_linear_closure(mdp, spec.features, p["trials"], rng)
    rows = [(i, h, float(rep.residuals[i, h])) for i in range(rep.residuals.shape[0])
            for h in range(p["H"])]
    ok = rep.max_residual <= 1e-8
    return ScenarioResult({"max_residual": rep.max_residual, "constant": rep.constant},
                          {"closure.csv": (["trial", "h", "residual"], rows, None)},
                          [("closed", ok)], "max_residual")


SCENARIOS = {
    "exact-dp": (run_exact_dp, {"S": 3, "A": 2, "H": 3, "reward": None}),
    "theorem1": (run_softmax_bound, {"trials": 200, "S": 4, "A": 3, "H": 3, "betas": [0.5, 1.0, 2.0, 8.0],
                                "perturbation": 0.3}),
    "fqi": (run_fqi, {"S": 5, "A": 2, "H": 3, "n": 100, "lam": 1e-3, "noise": "exact"}),
    "lsvi-ucb": (run_lsvi_ucb, {"S": 5, "A": 2, "H": 3, "K": 2000, "beta": 2.0, "c": 1.0, "lam": None,
                                "n_reg": "K"}),
    "policy-gradient": (run_policy_gradient, {"S": 2, "A": 2, "H": 3, "N": 1000, "K": 50, "eta": 1.0}),
    "fitted-reward": (run_fitted_reward, {"S": 6, "A": 2, "H": 3, "n": 64, "alpha": 1.0,
                                          "noise": "unit-gaussian"}),
    "spectrum": (run_spectrum, {"kernel": "laplacian", "alpha": 1.0, "d": 4, "n_points": 512, "n": 64}),
    "power-function": (run_power_function, {"kernel": "gaussian", "alpha": 1.0, "d": 3, "n_points": 64,
                                            "centers": [1, 4, 16]}),
    "perturbation": (run_perturbation, {"kernel": "laplacian", "alpha": 1.0, "d": 3, "support": 8,
                                        "n_rho": 3, "epsilons": [0.01, 0.05, 0.1, 0.5]}),
    "curse-demo": (run_curse_demo, {"kernel": "laplacian", "alpha": 1.0, "dims": [2, 4, 8],
                                    "n_points": 512, "n": 64}),
    "closure-check": (run_closure_check, {"S": 6, "A": 3, "H": 3, "d": 4, "trials": 50}),
}


@dataclass
class ScenarioConfig:
    """Validated scenario configuration; ``params`` holds the resolved instance fields."""

    scenario: str
    seed: int = 0
    output_dir: str = None
    params: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        name = doc.get("scenario")
        if name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
        defaults = SCENARIOS[name][1]
        unknown = set(doc) - COMMON_FIELDS - set(defaults)
        if unknown:
            raise ConfigError(f"unknown fields for {name}: {sorted(unknown)}")
        seed = doc.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
        params = copy.deepcopy(defaults)
        params.update({k: v for k, v in doc.items() if k in defaults})
        return cls(name, seed, doc.get("output_dir"), params)

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self):
        return {"scenario": self.scenario, "seed": self.seed, "output_dir": self.output_dir, **self.params}

    def with_value(self, name, value):
        doc = self.to_dict()
        if name not in doc:
            raise ConfigError(f"axis {name!r} is not a field of scenario {self.scenario}")
        doc[name] = value
        return ScenarioConfig.from_dict(doc)


def output_root():
    return Path(os.environ.get(OUTPUT_ENV, "rlfa-runs"))


def resolve_output(cfg):
    if cfg.output_dir is None:
        return output_root() / f"{cfg.scenario}-seed{cfg.seed}"
    out = Path(cfg.output_dir)
    return out if out.is_absolute() else output_root() / out


@dataclass
class RunArtifact:
    directory: Path
    status: int
    summary: dict
    checks: list
    headline: float = None
    error: str = None


def _versions():
    return {"rlfa": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "python": platform.python_version()}


def run_scenario(cfg):
    """Run one scenario, write its artifacts and return a :class:`RunArtifact`."""
    out = resolve_output(cfg)
    runner = SCENARIOS[cfg.scenario][0]
    t0 = time.perf_counter()
    status, error, result = EXIT_OK, None, None
    try:
        result = runner(cfg.params, cfg.seed)
    except (InvalidInputError, KeyError, TypeError, ValueError) as exc:
        status, error = EXIT_CONFIG, f"{type(exc).__name__}: {exc}"
    except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        status, error = EXIT_NUMERICAL, f"{type(exc).__name__}: {exc}"
    wall = time.perf_counter() - t0
    summary, checks, headline = {}, [], None
    if result is not None:
        summary, checks = result.summary, result.checks
        if result.headline is not None:
            headline = float(result.summary[result.headline])
        for name, (columns, rows, schema) in result.tables.items():
            if schema is not None:
                write_schema_csv(out / name, schema, rows, seed=cfg.seed)
            else:
                write_csv(out / name, columns, rows, {"scenario": cfg.scenario, "seed": cfg.seed})
        if checks and not all(ok for _, ok in checks):
            status = EXIT_ASSERTION
            failed = [name for name, ok in checks if not ok]
            error = f"{len(failed)} check(s) failed: {', '.join(failed[:10])}"
    meta = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": _versions(),
        "wall_time_s": wall,
        "status": status,
        "error": error,
        "summary": summary,
        "checks": {"total": len(checks), "passed": sum(ok for _, ok in checks)},
    }
    write_json(out / "metadata.json", meta)
    return RunArtifact(out, status, summary, checks, headline, error)


def parse_axis(text):
    """``name=v1,v2,...`` with JSON-decoded values (bare words stay strings)."""
    name, sep, values = text.partition("=")
    if not sep or not name:
        raise ConfigError(f"axis must look like name=v1,v2; got {text!r}")
    tokens = [t for t in values.split(",") if t.strip()]
    if not tokens:
        raise ConfigError(f"axis {name!r} has no values")
    parsed = []
    for t in tokens:
        try:
            parsed.append(json.loads(t))
        except json.JSONDecodeError:
            parsed.append(t.strip())
    return name.strip(), parsed


def _run_point(cfg):
    return run_scenario(cfg)


def sweep(cfg, axis, values, seeds=None, workers=None, directory=None):
    """Run ``cfg`` at every axis value and seed; write ``aggregate.csv``.

    Returns ``(artifacts, aggregate_path)``. Failing points are recorded in
    the aggregate and do not stop the sweep.
    """
    if not values:
        raise ConfigError("sweep axis is empty")
    seeds = [cfg.seed] if not seeds else list(seeds)
    base = Path(directory) if directory is not None else output_root() / f"sweep-{cfg.scenario}-{axis}"
    jobs, keys = [], []
    for v in values:
        for s in seeds:
            point = cfg.with_value(axis, v)
            point.seed = s
            point.output_dir = str(base / f"{axis}={json.dumps(v)}" / f"seed{s}")
            jobs.append(point)
            keys.append((v, s))
    workers = workers or os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            arts = list(pool.map(_run_point, jobs))
    else:
        arts = [_run_point(j) for j in jobs]
    columns = [axis, "runs", "failed", "median", "q1", "q3"]
    slope_col = cfg.scenario == "lsvi-ucb"
    if slope_col:
        columns += ["run_slope", "loglog_slope"]
    rows, medians = [], []
    for v in values:
        group = [a for a, (kv, _) in zip(arts, keys) if kv == v]
        ok = [a.headline for a in group if a.status == EXIT_OK and a.headline is not None]
        q1, med, q3 = np.percentile(ok, [25, 50, 75]) if ok else (np.nan,) * 3
        row = [json.dumps(v) if not isinstance(v, (int, float)) else v, len(group),
               sum(a.status != EXIT_OK for a in group), float(med), float(q1), float(q3)]
        medians.append(float(med))
        if slope_col:
            slopes = [a.summary.get("slope") for a in group if a.status == EXIT_OK]
            row.append(float(np.median(slopes)) if slopes else float("nan"))
        rows.append(row)
    if slope_col:
        # slope of log median headline against log axis value, shared by all rows
        x, y = np.asarray(values, dtype=float), np.asarray(medians)
        ok = (x > 0) & (y > 0)
        fit = float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0]) if ok.sum() >= 2 else float("nan")
        for row in rows:
            row.append(fit)
    path = write_csv(base / "aggregate.csv", columns, rows, {"scenario": cfg.scenario, "axis": axis})
    return arts, path


def build_parser():
    parser = argparse.ArgumentParser(prog="rlfa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--config", required=True)
    sw = sub.add_parser("sweep", help="run a scenario over one parameter axis")
    sw.add_argument("--config", required=True)
    sw.add_argument("--axis", required=True, help="name=v1,v2,...")
    sw.add_argument("--seeds", default=None, help="comma-separated seeds per axis value")
    sw.add_argument("--workers", type=int, default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = ScenarioConfig.load(args.config)
        if args.command == "run":
            art = run_scenario(cfg)
            print(json.dumps({"status": art.status, "output": str(art.directory),
                              "summary": art.summary, "error": art.error}, default=float))
            return art.status
        name, values = parse_axis(args.axis)
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
        arts, path = sweep(cfg, name, values, seeds, args.workers)
        print(csv_text(*_read_back(path)), end="")
        failures = [a.status for a in arts if a.status != EXIT_OK]
        return max(failures) if failures else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _read_back(path):
    _, header, rows = read_csv(path)
    return header, rows
