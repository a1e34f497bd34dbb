"""Command-line driver: ``oedkit {solve,invert,check,enumerate,baseline,sweep}``.

Every command reads one JSON config (unknown keys are rejected), resolves
defaults, and writes plain CSV/JSON files whose headers carry the resolved
config and seed.  Exit codes: 0 success, 1 configuration or input error,
2 tolerance or iteration limit not met, 3 enumeration cap exceeded.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .bayes import IndefiniteHessian, map_estimate
from .criteria import CriterionSpec, gradient_check, oed_objective
from .kernels import SpaceTimeCovariance, WeightKernelSpec, build_theta, gaspari_cohn, weighted_precision
from .optimize import (
    EnumerationCapExceeded,
    OptimizerConfig,
    binary_criterion,
    binary_weights,
    brute_force_enumerate,
    continuation,
    random_baseline,
    solve_oed,
    summarize,
    threshold_to_budget,
)
from .testbed import ModelConfig, Testbed, UndefinedRAE, build_testbed, error_metrics, synth_data

SCHEMA_VERSION = 1

EXIT_OK, EXIT_CONFIG, EXIT_UNMET, EXIT_CAP = 0, 1, 2, 3

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int1 = {"type": "integer", "minimum": 1}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_box = {"type": "array", "items": _num, "minItems": 4, "maxItems": 4}


def _section(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": _section({
            "nx": {"type": "integer", "minimum": 2},
            "ny": {"type": "integer", "minimum": 2},
            "dt": _pos,
            "kappa": _pos,
            "max_speed": _nonneg,
            "obs_times": {"type": "array", "items": _pos, "minItems": 1},
            "t_pred": _nonneg,
            "obstacles": {"type": "array", "items": _box},
            "amplitude": _pos,
            "prior_delta": _pos,
            "prior_max_var": {"anyOf": [_pos, {"type": "null"}]},
            "pred_box": _box,
            "pred_n": _int1,
            "truth_center": _pair,
            "truth_width": _pos,
        }),
        "sensors": _section({
            "count": _int1,
            "coords": {"anyOf": [{"type": "array", "items": _pair, "minItems": 1},
                                 {"type": "null"}]},
            "ell": _nonneg,
            "time_ell": _nonneg,
            "sigma": {"anyOf": [_pos, {"type": "null"}]},
            "noise_level": _pos,
        }),
        "kernel": _section({
            "kind": {"enum": ["sqrt", "exp", "sigmoid"]},
            "a": {"type": "number", "minimum": 1},
            "temporal": {"enum": ["gauss", "gc", None]},
            "time_scale": _pos,
            "continuation": {"anyOf": [{"type": "array", "items": _pos, "minItems": 1},
                                       {"type": "null"}]},
        }),
        "criterion": _section({
            "kind": {"enum": ["A", "D"]},
            "randomized": {"type": "boolean"},
            "n_r": _int1,
            "alpha": _nonneg,
            "budget": _int1,
        }),
        "optimizer": _section({
            "pgtol": _pos,
            "max_iters": {"type": "integer", "minimum": 0},
            "memory": _int1,
            "ftol": _nonneg,
            "seed": {"type": "integer", "minimum": 0},
        }),
        "check": _section({
            "step": _pos,
            "steps": {"type": "array", "items": _pos, "minItems": 1},
            "tol": _pos,
        }),
        "enumerate": _section({
            "k": _int1,
            "cap": _int1,
        }),
        "baseline": _section({
            "n_samples": _int1,
        }),
        "sweep": _section({
            "k_max": _int1,
        }),
        "output": _section({
            "directory": {"type": "string"},
        }),
    },
}

DEFAULTS = {
    "model": {
        "nx": 24, "ny": 24, "dt": 0.2, "kappa": 0.01, "max_speed": 0.5,
        "obs_times": [1.0, 1.2, 1.4, 1.6, 1.8, 2.0], "t_pred": 2.2, "obstacles": [],
        "amplitude": 300.0, "prior_delta": 0.1, "prior_max_var": None,
        "pred_box": [0.6, 0.8, 0.2, 0.4], "pred_n": 4,
        "truth_center": [0.35, 0.65], "truth_width": 0.12,
    },
    "sensors": {"count": 43, "coords": None, "ell": 0.0, "time_ell": 0.0,
                "sigma": None, "noise_level": 0.005},
    "kernel": {"kind": "sigmoid", "a": 1.0, "temporal": None, "time_scale": 1.0,
               "continuation": None},
    "criterion": {"kind": "A", "randomized": False, "n_r": 5, "alpha": 0.0, "budget": 8},
    "optimizer": {"pgtol": 1e-5, "max_iters": 200, "memory": 10, "ftol": 0.0, "seed": 0},
    "check": {"step": 1e-5, "steps": [1e-3, 1e-5, 1e-7], "tol": 1e-6},
    "enumerate": {"k": 1, "cap": 10**6},
    "baseline": {"n_samples": 100},
    "sweep": {"k_max": 8},
    "output": {"directory": "out"},
}


class ConfigError(Exception):
    pass


# config handling -------------------------------------------------------------

def parse_config_text(text: str) -> dict:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        offset = len(text[:err.pos].encode("utf-8"))
        raise ConfigError(f"malformed JSON at line {err.lineno} column {err.colno} "
                          f"(byte offset {offset}): {err.msg}") from None
    return resolve_config(raw)


def resolve_config(raw) -> dict:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = ".".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{where}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
    cfg = copy.deepcopy(DEFAULTS)
    for name, section in raw.items():
        cfg[name].update(section)
    return cfg


def load_config(path: str | None) -> dict:
    if path is None:
        return resolve_config({})
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    return parse_config_text(text)


def model_config(cfg: dict) -> ModelConfig:
    m = dict(cfg["model"])
    m["obs_times"] = tuple(m["obs_times"])
    m["obstacles"] = tuple(tuple(b) for b in m["obstacles"])
    m["pred_box"] = tuple(m["pred_box"])
    m["truth_center"] = tuple(m["truth_center"])
    try:
        return ModelConfig(**m)
    except ValueError as err:
        raise ConfigError(f"model: {err}") from None


def kernel_spec(cfg: dict) -> WeightKernelSpec:
    k = cfg["kernel"]
    return WeightKernelSpec(k["kind"], float(k["a"]), k["temporal"], float(k["time_scale"]))


def criterion_spec(cfg: dict, seed: int) -> CriterionSpec:
    c = cfg["criterion"]
    try:
        return CriterionSpec(c["kind"], c["randomized"], c["n_r"], float(c["alpha"]), 1, seed)
    except ValueError as err:
        raise ConfigError(f"criterion: {err}") from None


def optimizer_config(cfg: dict, seed: int) -> OptimizerConfig:
    o = cfg["optimizer"]
    return OptimizerConfig(pgtol=o["pgtol"], max_iters=o["max_iters"], memory=o["memory"],
                           ftol=o["ftol"], seed=seed)


def build_experiment(cfg: dict, seed: int) -> Testbed:
    s = cfg["sensors"]
    try:
        tb = build_testbed(model_config(cfg), nsens=s["count"], coords=s["coords"],
                           ell=s["ell"], sigma=s["sigma"], noise_level=s["noise_level"],
                           seed=seed)
    except ValueError as err:
        raise ConfigError(f"sensors: {err}") from None
    if s["time_ell"] > 0:
        # errors correlated in time as well: dense space-time covariance
        times = np.asarray(tb.config.obs_times)
        rho = gaspari_cohn(np.abs(times[:, None] - times[None, :]) / s["time_ell"])
        R = tb.problem.noise.data.blocks[0]
        noise = SpaceTimeCovariance.dense(np.kron(rho, R), tb.sensors.count)
        problem = tb.problem.with_noise(noise)
        y = synth_data(problem.forward, noise, tb.theta_true, np.random.default_rng(seed))
        tb = Testbed(tb.config, tb.sensors, tb.dynamics, problem, tb.theta_true,
                     tb.goal_true, y, tb.sigma, tb.ell)
    return tb


# output helpers --------------------------------------------------------------

def _header(cfg: dict, seed: int) -> dict:
    return {"schema_version": SCHEMA_VERSION, "oedkit_version": __version__,
            "seed": seed, "config": cfg}


def _floats(a) -> list:
    return [float(x) for x in np.asarray(a, dtype=float).ravel()]


def write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path: Path, cfg: dict, seed: int, columns: list[str], rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema_version: {SCHEMA_VERSION}\n")
        fh.write(f"# seed: {seed}\n")
        fh.write("# config: " + json.dumps(cfg, sort_keys=True, separators=(",", ":")) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _out_dir(cfg: dict) -> Path:
    d = Path(cfg["output"]["directory"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _ids(active) -> str:
    return ";".join(str(int(i)) for i in active)


# commands -------------------------------------------------------------------

def cmd_solve(cfg: dict, seed: int) -> int:
    tb = build_experiment(cfg, seed)
    kernel = kernel_spec(cfg)
    spec = criterion_spec(cfg, seed)
    opt = optimizer_config(cfg, seed)
    budget = cfg["criterion"]["budget"]
    if budget > tb.sensors.count:
        raise ConfigError(f"criterion.budget={budget} exceeds sensors.count={tb.sensors.count}")
    stages = []
    if cfg["kernel"]["continuation"]:
        cont = continuation(tb.problem, spec, kernel, opt, budget, cfg["kernel"]["continuation"])
        res = cont.result
        stages = [{"a": s.a, "relaxed": s.value, "thresholded_binary": s.binary_value,
                   "distance_to_binary": s.distance_to_binary} for s in cont.stages]
    else:
        res = solve_oed(tb.problem, spec, kernel, opt, budget)
    out = _out_dir(cfg)
    payload = _header(cfg, seed)
    payload.update({
        "sensor_locations": [_floats(p) for p in tb.sensors.locations],
        "relaxed_design": _floats(res.relaxed_design),
        "weights": _floats(res.weights),
        "binary_design": [int(v) for v in res.binary_design],
        "active": res.active,
        "budget": budget,
        "criterion": {k: float(v) for k, v in res.values.items()},
        "objective": float(res.objective),
        "iterations": res.iterations,
        "evaluations": res.nfev,
        "converged": res.converged,
        "message": res.message,
        "continuation": stages,
    })
    write_json(out / "design.json", payload)
    rows = [(i, f, pg) for i, (f, pg) in enumerate(zip(res.history, res.pg_history))]
    write_csv(out / "history.csv", cfg, seed, ["iteration", "objective", "projected_gradient"],
              rows)
    print(f"solve: {res.message}; criterion {res.values}; active {res.active}")
    return EXIT_OK if res.converged else EXIT_UNMET


def _load_design(path: str, nsens: int):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"cannot read design {path}: {err.strerror}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"malformed design JSON: {err.msg} at line {err.lineno}") from None
    kind = None
    if isinstance(data, dict):
        if "binary_design" in data:
            vec, kind = data["binary_design"], "binary"
        elif "relaxed_design" in data:
            vec, kind = data["relaxed_design"], "relaxed"
        elif "design" in data:
            vec = data["design"]
        else:
            raise ConfigError("design file has no binary_design, relaxed_design or design entry")
    else:
        vec = data
    try:
        v = np.asarray(vec, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError("design entries must be numbers") from None
    if v.ndim != 1 or v.size != nsens:
        raise ConfigError(f"design has {v.size} entries but the config defines {nsens} sensors")
    if kind is None:
        kind = "binary" if np.all((v == 0) | (v == 1)) else "relaxed"
    return v, kind


def cmd_invert(cfg: dict, seed: int, design_path: str) -> int:
    tb = build_experiment(cfg, seed)
    design, kind = _load_design(design_path, tb.sensors.count)
    P = tb.problem
    if kind == "binary":
        W = binary_weights(P, design)
    else:
        kernel = kernel_spec(cfg)
        theta = build_theta(kernel, design, P.times, spacetime=P.noise.spacetime)
        W = weighted_precision(P.noise, theta)
    theta_map = map_estimate(P, W, tb.y)
    pred = P.goal.P @ theta_map
    prior_pred = P.goal.P @ P.prior.mean
    try:
        rae, rmse = error_metrics(pred, tb.goal_true)
        rae_list = [None if np.isnan(r) else float(r) for r in rae]
    except UndefinedRAE as err:
        rmse, rae_list = err.rmse, None
    prior_rmse = float(np.sqrt(np.mean((prior_pred - tb.goal_true) ** 2)))
    out = _out_dir(cfg)
    write_csv(out / "map.csv", cfg, seed, ["cell", "map", "truth"],
              [(i, m, t) for i, (m, t) in enumerate(zip(theta_map, tb.theta_true))])
    payload = _header(cfg, seed)
    payload.update({
        "design_kind": kind,
        "design": _floats(design),
        "goal_prediction": _floats(pred),
        "goal_truth": _floats(tb.goal_true),
        "prior_prediction": _floats(prior_pred),
        "rae": rae_list,
        "rmse": float(rmse),
        "prior_rmse": prior_rmse,
    })
    write_json(out / "metrics.json", payload)
    print(f"invert: {kind} design, goal RMSE {rmse:.6g} (prior {prior_rmse:.6g})")
    return EXIT_OK


def _check_point(P, spec, kernel, opt, n, seed):
    """Random design near the optimizer start where the weighted Hessian is SPD."""
    rng = np.random.default_rng(seed)
    start = opt.start(kernel, n)
    u = rng.uniform(-1.0, 1.0, n)
    scale = 0.3 if kernel.kind == "sqrt" else 1.0
    for _ in range(30):
        z = start + scale * u
        try:
            return z, oed_objective(P, spec, kernel, z)[1]
        except IndefiniteHessian:
            scale *= 0.5
    return start, oed_objective(P, spec, kernel, start)[1]


def cmd_check(cfg: dict, seed: int) -> int:
    tb = build_experiment(cfg, seed)
    kernel = kernel_spec(cfg)
    spec = criterion_spec(cfg, seed)
    n = tb.sensors.count
    P = tb.problem
    z, g = _check_point(P, spec, kernel, optimizer_config(cfg, seed), n, seed)

    def f(x):
        return oed_objective(P, spec, kernel, x)[0]

    c = cfg["check"]
    main = gradient_check(f, g, z, c["step"])
    sweep = [gradient_check(f, g, z, h) for h in c["steps"]]
    out = _out_dir(cfg)
    write_csv(out / "check.csv", cfg, seed, ["sensor", "design", "analytic", "finite_difference",
                                             "abs_error"],
              [(i, z[i], main.analytic[i], main.fd[i], abs(main.analytic[i] - main.fd[i]))
               for i in range(n)])
    write_csv(out / "check_steps.csv", cfg, seed, ["step", "max_rel_error", "worst_sensor"],
              [(r.step, r.max_rel_err, r.worst_index) for r in sweep])
    ok = main.max_rel_err <= c["tol"]
    print(f"check: max relative error {main.max_rel_err:.3e} at sensor {main.worst_index} "
          f"(step {main.step:g}, tolerance {c['tol']:g}) -> {'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_UNMET


def cmd_enumerate(cfg: dict, seed: int) -> int:
    tb = build_experiment(cfg, seed)
    spec = criterion_spec(cfg, seed)
    e = cfg["enumerate"]
    entries = brute_force_enumerate(tb.problem, spec, e["k"], cap=e["cap"])
    out = _out_dir(cfg)
    write_csv(out / "enumerate.csv", cfg, seed, ["rank", "criterion", "active"],
              [(r, ent.value, _ids(ent.active)) for r, ent in enumerate(entries)])
    print(f"enumerate: {len(entries)} subsets of size {e['k']}; best {entries[0].active} "
          f"with {entries[0].value:.6g}")
    return EXIT_OK


def cmd_baseline(cfg: dict, seed: int) -> int:
    tb = build_experiment(cfg, seed)
    spec = criterion_spec(cfg, seed)
    k = cfg["criterion"]["budget"]
    n = cfg["baseline"]["n_samples"]
    samples = random_baseline(tb.problem, spec, k, n, np.random.default_rng(seed + 1),
                              tb.y, tb.goal_true)
    out = _out_dir(cfg)
    write_csv(out / "baseline.csv", cfg, seed, ["sample", "criterion", "rmse", "active"],
              [(i, s.value, s.rmse, _ids(s.active)) for i, s in enumerate(samples)])
    sc = summarize([s.value for s in samples])
    sr = summarize([s.rmse for s in samples])
    write_csv(out / "baseline_summary.csv", cfg, seed, ["statistic", "criterion", "rmse"],
              [(key, sc[key], sr[key]) for key in ("min", "q1", "median", "q3", "max", "mean")])
    print(f"baseline: {n} random designs of size {k}; median criterion {sc['median']:.6g}, "
          f"median RMSE {sr['median']:.6g}")
    return EXIT_OK


def cmd_sweep(cfg: dict, seed: int) -> int:
    tb = build_experiment(cfg, seed)
    kernel = kernel_spec(cfg)
    spec = criterion_spec(cfg, seed)
    opt = optimizer_config(cfg, seed)
    P = tb.problem
    k_max = min(cfg["sweep"]["k_max"], tb.sensors.count)
    res = solve_oed(P, spec, kernel, opt, budget=None)
    rows = []
    for k in range(1, k_max + 1):
        b = threshold_to_budget(res.relaxed_design, kernel, k)
        rows.append((k, "oed", binary_criterion(P, spec, b), _ids(np.flatnonzero(b))))
    best = brute_force_enumerate(P, spec, 1)[0]
    rows.append((1, "brute_force", best.value, _ids(best.active)))
    out = _out_dir(cfg)
    write_csv(out / "sweep.csv", cfg, seed, ["k", "source", "criterion", "active"], rows)
    print(f"sweep: k = 1..{k_max}; brute-force best single sensor {best.active[0]}")
    return EXIT_OK if res.converged else EXIT_UNMET


# entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oedkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"oedkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "solve": "optimize a relaxed design and threshold it to the budget",
        "invert": "solve the inverse problem with a given design",
        "check": "compare analytic and finite-difference gradients",
        "enumerate": "rank all k-subsets of sensors by the criterion",
        "baseline": "evaluate random k-subsets",
        "sweep": "criterion of thresholded designs for k = 1..k_max",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON experiment config (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override optimizer.seed")
        p.add_argument("--out", help="override output.directory")
        if name == "invert":
            p.add_argument("--design", required=True, help="design.json or a JSON list")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg["optimizer"]["seed"] = args.seed
        if args.out is not None:
            cfg["output"]["directory"] = args.out
        seed = int(cfg["optimizer"]["seed"])
        if args.command == "invert":
            return cmd_invert(cfg, seed, args.design)
        return {"solve": cmd_solve, "check": cmd_check, "enumerate": cmd_enumerate,
                "baseline": cmd_baseline, "sweep": cmd_sweep}[args.command](cfg, seed)
    except ConfigError as err:
        print(f"oedkit: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except EnumerationCapExceeded as err:
        print(f"oedkit: {err}", file=sys.stderr)
        return EXIT_CAP
    except IndefiniteHessian as err:
        print(f"oedkit: {err}; try a smaller kernel scaling or a different start",
              file=sys.stderr)
        return EXIT_UNMET


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
