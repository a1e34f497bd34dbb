"""Relaxed design optimization, thresholding and baseline designs."""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .bayes import IndefiniteHessian, InverseProblem, map_estimate
from .criteria import (
    CriterionSpec,
    criterion_value,
    evaluate_weights,
    oed_objective,
)
from .kernels import SQRT_FLOOR, WeightKernelSpec, build_theta, diag_weight, weighted_precision

__all__ = [
    "OptimizerConfig",
    "OEDResult",
    "OptimizationError",
    "EnumerationCapExceeded",
    "projected_lbfgs",
    "solve_oed",
    "threshold_to_budget",
    "binary_weights",
    "thresholded_weights",
    "binary_criterion",
    "brute_force_enumerate",
    "EnumEntry",
    "BaselineSample",
    "random_baseline",
    "summarize",
    "goal_rmse",
    "ContinuationStage",
    "ContinuationResult",
    "continuation",
    "worker_count",
]

DEFAULT_ENUM_CAP = 10**6


class OptimizationError(RuntimeError):
    """The optimizer could not make progress; ``last_design`` is the last valid iterate."""

    def __init__(self, msg: str, last_design: np.ndarray):
        self.last_design = last_design
        super().__init__(msg)


class EnumerationCapExceeded(ValueError):
    pass


def worker_count() -> int:
    """Thread cap from ``OEDKIT_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("OEDKIT_THREADS", "1")))
    except ValueError:
        return 1


def _ordered_map(fn, items):
    n = worker_count()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# optimizer -----------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    """Settings for the projected L-BFGS solver.

    ``bounds=None`` picks the kernel's natural domain: ``[SQRT_FLOOR, 1]``
    for SQRT and no bounds otherwise.  ``initial_design=None`` starts every
    sensor at the design value whose diagonal weight is 0.5.
    A positive ``ftol`` also stops on a relative objective change below it
    (reported as not converged); the default relies on ``pgtol`` alone.
    """

    pgtol: float = 1e-5
    max_iters: int = 200
    memory: int = 10
    ftol: float = 0.0
    initial_design: float | Sequence[float] | None = None
    bounds: tuple[float, float] | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.pgtol > 0:
            raise ValueError("pgtol must be positive")
        if self.max_iters < 0 or self.memory < 1:
            raise ValueError("max_iters must be >= 0 and memory >= 1")
        if self.bounds is not None and not self.bounds[0] < self.bounds[1]:
            raise ValueError("lower bound must be below upper bound")

    def resolve_bounds(self, kernel: WeightKernelSpec):
        if self.bounds is not None:
            lo, hi = self.bounds
            if kernel.bounded and (lo < 0 or hi > 1):
                raise ValueError("SQRT designs must stay inside [0, 1]")
            return float(lo), float(hi)
        return (SQRT_FLOOR, 1.0) if kernel.bounded else None

    def start(self, kernel: WeightKernelSpec, nsens: int) -> np.ndarray:
        if self.initial_design is not None:
            x0 = np.broadcast_to(np.asarray(self.initial_design, dtype=float), (nsens,))
            return x0.copy()
        if kernel.kind == "sqrt":
            v = 0.5
        elif kernel.kind == "exp":
            v = math.log(2.0) / (2.0 * kernel.a)
        else:
            v = 0.0
        return np.full(nsens, v)


@dataclass
class _LBFGSOutcome:
    x: np.ndarray
    f: float
    g: np.ndarray
    history: list[float]
    pg_history: list[float]
    iterations: int
    nfev: int
    converged: bool
    message: str


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((rho, a))
        q -= a * y
    if S:
        q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def projected_lbfgs(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0,
                    bounds: tuple[float, float] | None = None, pgtol: float = 1e-5,
                    max_iters: int = 200, memory: int = 10, ftol: float = 0.0,
                    c1: float = 1e-4, max_backtracks: int = 50) -> _LBFGSOutcome:
    """Minimize ``fun`` (returning value and gradient) over a box.

    Directions come from the L-BFGS two-loop recursion restricted to the
    variables not pinned at a bound; steps follow the projection arc with
    Armijo backtracking.  Trial points where ``fun`` raises
    :class:`IndefiniteHessian` are treated as infeasible and shrink the step.
    """
    if bounds is None:
        proj = lambda z: z  # noqa: E731
    else:
        lo, hi = bounds
        proj = lambda z: np.clip(z, lo, hi)  # noqa: E731

    x = proj(np.asarray(x0, dtype=float).copy())
    f, g = fun(x)
    nfev = 1
    history, pg_hist = [f], []
    S: list[np.ndarray] = []
    Y: list[np.ndarray] = []
    message = "maximum iterations reached"
    converged = False
    it = 0
    while True:
        pg = float(np.max(np.abs(proj(x - g) - x), initial=0.0))
        pg_hist.append(pg)
        if pg <= pgtol:
            converged, message = True, "projected gradient below tolerance"
            break
        if it >= max_iters:
            break

        if bounds is None:
            free = np.ones_like(x, dtype=bool)
        else:
            at_lo = (x <= lo) & (g > 0)
            at_hi = (x >= hi) & (g < 0)
            free = ~(at_lo | at_hi)
        gf = np.where(free, g, 0.0)

        step = None
        for attempt in ("quasi-newton", "gradient"):
            if attempt == "quasi-newton" and S:
                d = -_two_loop(gf, S, Y) * free
                if not gf @ d < 0:
                    continue
                t = 1.0
            elif attempt == "quasi-newton":
                continue
            else:
                d = -gf
                t = min(1.0, 1.0 / max(float(np.max(np.abs(gf))), 1e-300))
            for _ in range(max_backtracks):
                xt = proj(x + t * d)
                if np.array_equal(xt, x):
                    break
                try:
                    ft, gt = fun(xt)
                    nfev += 1
                except IndefiniteHessian:
                    t *= 0.5
                    continue
                if np.isfinite(ft) and ft <= f + c1 * (g @ (xt - x)):
                    step = (xt, ft, gt)
                    break
                t *= 0.5
            if step is not None:
                break
            S.clear()
            Y.clear()
        if step is None:
            message = "line search could not reduce the objective"
            break

        xn, fn, gn = step
        s, y = xn - x, gn - g
        if s @ y > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        rel = (f - fn) / max(abs(f), abs(fn), 1.0)
        x, f, g = xn, fn, gn
        history.append(f)
        it += 1
        if ftol > 0 and rel <= ftol:
            pg_hist.append(float(np.max(np.abs(proj(x - g) - x), initial=0.0)))
            message = "relative reduction of the objective below ftol"
            break
    return _LBFGSOutcome(x, f, g, history, pg_hist, it, nfev, converged, message)


# thresholding and binary designs --------------------------------------------

def threshold_to_budget(design, kernel: WeightKernelSpec, k: int) -> np.ndarray:
    """0/1 indicator of the ``k`` largest diagonal weights (ties: lowest index)."""
    z = np.asarray(design.relaxed_design if isinstance(design, OEDResult) else design,
                   dtype=float)
    if not 1 <= k <= z.size:
        raise ValueError(f"budget k={k} outside [1, {z.size}]")
    w, _ = diag_weight(kernel, z)
    order = np.argsort(-np.asarray(w), kind="stable")
    out = np.zeros(z.size)
    out[order[:k]] = 1.0
    return out


def binary_weights(problem: InverseProblem, active):
    """Weighted precision for an on/off design: ``Gamma^{-1}`` restricted to active sensors."""
    b = np.asarray(active, dtype=float)
    theta = build_theta(WeightKernelSpec("sqrt"), b, problem.times,
                        spacetime=problem.noise.spacetime)
    return weighted_precision(problem.noise, theta)


def thresholded_weights(problem: InverseProblem, kernel: WeightKernelSpec, design, active):
    """Relaxed kernel weights with inactive sensors' rows and columns zeroed."""
    theta = build_theta(kernel, design, problem.times, spacetime=problem.noise.spacetime)
    mask = build_theta(WeightKernelSpec("sqrt"), np.asarray(active, dtype=float),
                       problem.times, spacetime=problem.noise.spacetime)
    if problem.noise.spacetime:
        return weighted_precision(problem.noise, theta * mask)
    return weighted_precision(problem.noise, theta.hadamard(mask))


def binary_criterion(problem: InverseProblem, spec: CriterionSpec, active) -> float:
    st = evaluate_weights(problem, binary_weights(problem, active))
    return criterion_value(problem, spec, None, None, st)


@dataclass
class OEDResult:
    """Outcome of one relaxed solve plus its thresholded variants.

    ``values`` holds the criterion (without penalty, exact evaluation) at the
    relaxed, thresholded-relaxed and thresholded-binary designs.
    """

    relaxed_design: np.ndarray
    weights: np.ndarray
    binary_design: np.ndarray | None
    values: dict[str, float]
    objective: float
    history: list[float]
    pg_history: list[float]
    iterations: int
    nfev: int
    converged: bool
    message: str
    budget: int | None = None

    @property
    def active(self) -> list[int]:
        if self.binary_design is None:
            return []
        return [int(i) for i in np.flatnonzero(self.binary_design)]


def _report_spec(spec: CriterionSpec) -> CriterionSpec:
    return replace(spec, randomized=False, alpha=0.0)


def solve_oed(problem: InverseProblem, spec: CriterionSpec, kernel: WeightKernelSpec,
              config: OptimizerConfig = OptimizerConfig(), budget: int | None = None,
              x0=None) -> OEDResult:
    """Minimize ``Psi + alpha * Phi`` over the relaxed design, then threshold.

    Raises
    ------
    IndefiniteHessian
        If the starting design already gives an indefinite weighted Hessian.
    OptimizationError
        If the optimizer cannot evaluate the objective anywhere along its path.
    """
    problem.require_identity_mass()
    bounds = config.resolve_bounds(kernel)
    start = config.start(kernel, problem.nsens) if x0 is None else np.asarray(x0, float)

    def fun(z):
        return oed_objective(problem, spec, kernel, z)

    try:
        out = projected_lbfgs(fun, start, bounds, config.pgtol, config.max_iters,
                              config.memory, config.ftol)
    except IndefiniteHessian:
        raise
    except (FloatingPointError, np.linalg.LinAlgError) as err:
        raise OptimizationError(str(err), start) from err

    z = out.x
    w, _ = diag_weight(kernel, z)
    rspec = _report_spec(spec)
    values = {"relaxed": criterion_value(problem, rspec, kernel, z)}
    binary = None
    if budget is not None:
        binary = threshold_to_budget(z, kernel, budget)
        st = evaluate_weights(problem, thresholded_weights(problem, kernel, z, binary))
        values["thresholded_relaxed"] = criterion_value(problem, rspec, None, None, st)
        values["thresholded_binary"] = binary_criterion(problem, rspec, binary)
    return OEDResult(z, np.asarray(w, dtype=float), binary, values, out.f, out.history,
                     out.pg_history, out.iterations, out.nfev, out.converged, out.message,
                     budget)


# enumeration and baselines --------------------------------------------------

@dataclass(frozen=True)
class EnumEntry:
    active: tuple[int, ...]
    value: float

    def indicator(self, nsens: int) -> np.ndarray:
        b = np.zeros(nsens)
        b[list(self.active)] = 1.0
        return b


def brute_force_enumerate(problem: InverseProblem, spec: CriterionSpec, k: int,
                          cap: int = DEFAULT_ENUM_CAP) -> list[EnumEntry]:
    """Criterion of every ``k``-subset with unit weights, sorted ascending.

    Ties keep lexicographic subset order.
    """
    n = problem.nsens
    if not 1 <= k <= n:
        raise ValueError(f"budget k={k} outside [1, {n}]")
    total = math.comb(n, k)
    if total > cap:
        raise EnumerationCapExceeded(
            f"C({n}, {k}) = {total} subsets exceeds the cap of {cap}; "
            "use k=1 or a testbed with fewer candidate sensors")
    rspec = replace(spec, alpha=0.0)
    subsets = list(itertools.combinations(range(n), k))

    def score(sub):
        b = np.zeros(n)
        b[list(sub)] = 1.0
        return binary_criterion(problem, rspec, b)

    values = _ordered_map(score, subsets)
    order = sorted(range(total), key=lambda i: (values[i], i))
    return [EnumEntry(subsets[i], float(values[i])) for i in order]


@dataclass(frozen=True)
class BaselineSample:
    active: tuple[int, ...]
    value: float
    rmse: float


def goal_rmse(problem: InverseProblem, W, y, goal_true) -> float:
    est = problem.goal.P @ map_estimate(problem, W, y)
    return float(np.sqrt(np.mean((est - np.asarray(goal_true)) ** 2)))


def random_baseline(problem: InverseProblem, spec: CriterionSpec, k: int, n_samples: int,
                    rng: np.random.Generator, y, goal_true) -> list[BaselineSample]:
    """Criterion and goal RMSE for uniformly random ``k``-subsets.

    Subsets are drawn up front so the result does not depend on threading.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n = problem.nsens
    if not 1 <= k <= n:
        raise ValueError(f"budget k={k} outside [1, {n}]")
    subsets = [tuple(sorted(int(i) for i in rng.choice(n, size=k, replace=False)))
               for _ in range(n_samples)]
    rspec = replace(spec, alpha=0.0)

    def run(sub):
        b = np.zeros(n)
        b[list(sub)] = 1.0
        W = binary_weights(problem, b)
        st = evaluate_weights(problem, W)
        return BaselineSample(sub, criterion_value(problem, rspec, None, None, st),
                              goal_rmse(problem, W, y, goal_true))

    return _ordered_map(run, subsets)


def summarize(values) -> dict[str, float]:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"min": float(v.min()), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(v.max()), "mean": float(v.mean())}


# continuation ---------------------------------------------------------------

@dataclass(frozen=True)
class ContinuationStage:
    a: float
    value: float
    binary_value: float | None
    distance_to_binary: float


@dataclass
class ContinuationResult:
    result: OEDResult
    stages: list[ContinuationStage] = field(default_factory=list)


def continuation(problem: InverseProblem, spec: CriterionSpec, kernel: WeightKernelSpec,
                 config: OptimizerConfig = OptimizerConfig(), budget: int | None = None,
                 schedule: Sequence[float] = (1.0, 2.0, 5.0, 10.0)) -> ContinuationResult:
    """Re-solve with increasing sigmoid steepness, warm-starting each stage."""
    if kernel.kind != "sigmoid":
        raise ValueError("continuation applies to the SIGMOID kernel")
    sched = [float(a) for a in schedule]
    if not sched or any(b <= a for a, b in zip(sched, sched[1:])):
        raise ValueError("schedule must be non-empty and strictly increasing")
    x0 = None
    stages = []
    res = None
    for a in sched:
        ker = kernel.with_a(a)
        res = solve_oed(problem, spec, ker, config, budget, x0=x0)
        x0 = res.relaxed_design
        dist = float(np.mean(np.minimum(res.weights, 1.0 - res.weights)))
        stages.append(ContinuationStage(a, res.values["relaxed"],
                                        res.values.get("thresholded_binary"), dist))
    return ContinuationResult(res, stages)
