"""Experiment runner: scenario suite, grid-search reference and CLI.

Config files are JSON with a ``schema_version`` field; see
``configs/full_suite.json`` for the full layout. Outputs are flat CSV files
with 17 significant digits so that reruns can be compared byte for byte.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import controller, qp
from .bioplant import (
    BioPlant,
    Dataset,
    MetabolicNetwork,
    MonodKinetics,
    PlantError,
    UncertaintyScenario,
    load_dataset,
    solve_steady_state,
)
from .controller import ControllerConfig, Trajectory
from .model import ProblemSpec

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_FAILED = 2
EXIT_CONFIG = 3

# fixed-point acceptance thresholds
OUTPUT_FEAS_TOL = 1e-8
FIRST_ORDER_TOL = 1e-6
LYAPUNOV_TOL = 1e-9
BOUND_TOL = 1e-12


class ConfigError(ValueError):
    pass


def _scenario_from_dict(d: dict) -> UncertaintyScenario:
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError(f"scenario entry needs a 'kind': {d!r}")
    unknown = set(d) - {"kind", "seed", "modes", "spread"}
    if unknown:
        raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
    try:
        return UncertaintyScenario(d["kind"], d.get("seed"), tuple(d.get("modes", ())),
                                   float(d.get("spread", 0.5)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _scenario_to_dict(sc: UncertaintyScenario) -> dict:
    out = {"kind": sc.kind}
    if sc.kind == "perturbed":
        out.update(seed=sc.seed, spread=sc.spread)
    if sc.kind == "dropped":
        out["modes"] = list(sc.modes)
    return out


def default_scenarios() -> tuple[UncertaintyScenario, ...]:
    """Nominal run, six seeded parameter perturbations and five mode deletions."""
    return (
        (UncertaintyScenario(),)
        + tuple(UncertaintyScenario("perturbed", seed=s) for s in range(6))
        + tuple(UncertaintyScenario("dropped", modes=m)
                for m in ((2,), (3,), (4,), (2, 3), (3, 4)))
    )


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a suite run.

    ``reference_resolution`` is the number of grid points per input axis for
    the brute-force optimum; ``reference_refine_step`` the spacing of the
    local sub-grid placed around the best coarse point. Lipschitz constants
    for the one-step violation monitor are estimated from
    ``lipschitz_samples`` seeded secant pairs.
    """

    scenarios: tuple[UncertaintyScenario, ...] = field(default_factory=default_scenarios)
    dataset: Optional[str] = None
    alpha: float = 0.0015
    u0: tuple[float, ...] = (1.0, 1.0)
    max_steps: int = 200_000
    convergence_tol: float = 1e-9
    out_dir: str = "runs/suite"
    reference_resolution: int = 200
    reference_refine_step: float = 0.02
    lipschitz_samples: int = 200
    lipschitz_seed: int = 0
    workers: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        object.__setattr__(self, "u0", tuple(float(v) for v in self.u0))
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if not self.scenarios:
            raise ConfigError("no scenarios configured")
        labels = [s.label for s in self.scenarios]
        if len(set(labels)) != len(labels):
            raise ConfigError("scenario ids must be unique")
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError("alpha must be positive")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")
        if not self.convergence_tol > 0:
            raise ConfigError("convergence_tol must be positive")
        if self.reference_resolution < 2:
            raise ConfigError("reference_resolution must be at least 2")
        if not 0 < self.reference_refine_step <= 0.1:
            raise ConfigError("reference_refine_step must lie in (0, 0.1]")
        if self.lipschitz_samples < 1:
            raise ConfigError("lipschitz_samples must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        if "schema_version" not in raw:
            raise ConfigError("config is missing schema_version")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw = dict(raw)
        if "scenarios" in kw:
            if not isinstance(kw["scenarios"], list):
                raise ConfigError("scenarios must be a list")
            kw["scenarios"] = tuple(_scenario_from_dict(d) for d in kw["scenarios"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "dataset": self.dataset,
            "alpha": self.alpha,
            "u0": list(self.u0),
            "max_steps": self.max_steps,
            "convergence_tol": self.convergence_tol,
            "out_dir": self.out_dir,
            "reference_resolution": self.reference_resolution,
            "reference_refine_step": self.reference_refine_step,
            "lipschitz_samples": self.lipschitz_samples,
            "lipschitz_seed": self.lipschitz_seed,
            "workers": self.workers,
            "scenarios": [_scenario_to_dict(s) for s in self.scenarios],
        }

    def with_seed_offset(self, offset: int) -> "ExperimentConfig":
        scs = tuple(replace(s, seed=s.seed + offset) if s.kind == "perturbed" else s
                    for s in self.scenarios)
        return replace(self, scenarios=scs)

    def validate_against(self, ds: Dataset) -> None:
        if len(self.u0) != ds.spec.input_dim:
            raise ConfigError(f"u0 needs {ds.spec.input_dim} entries")
        if not ds.spec.input_set.contains(np.array(self.u0)):
            raise ConfigError(f"u0={list(self.u0)} is outside the input set")
        for sc in self.scenarios:
            if sc.kind == "dropped" and any(not 1 <= j <= ds.kin.n_modes for j in sc.modes):
                raise ConfigError(f"scenario {sc.label} drops a mode outside 1..{ds.kin.n_modes}")


# ---------------------------------------------------------------- reference

def reference_optimum(net: MetabolicNetwork, kin_true: MonodKinetics, spec: ProblemSpec,
                      resolution: int, refine_step: float = 0.02,
                      bounds: Optional[tuple[Sequence[float], Sequence[float]]] = None):
    """Best output-feasible grid point, then one local refinement.

    The coarse grid has ``resolution`` points per axis over the input box;
    the refinement covers one coarse cell around the incumbent with spacing
    at most ``refine_step``. Returns ``(u_best, objective_best)`` in the
    problem's own sense (largest objective when maximizing).
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2 per axis")
    if not refine_step > 0:
        raise ValueError("refine_step must be positive")
    if bounds is None:
        lo, hi = controller.bounding_box(spec.input_set)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    axes = [np.linspace(a, b, resolution) for a, b in zip(lo, hi)]
    best_u, best_val = _grid_search(net, kin_true, spec, axes, None, -math.inf)
    if best_u is None:
        raise ValueError("no output-feasible point on the reference grid")
    cell = (hi - lo) / (resolution - 1)
    fine = []
    for i in range(len(lo)):
        a = max(lo[i], best_u[i] - cell[i])
        b = min(hi[i], best_u[i] + cell[i])
        n = max(2, int(math.ceil((b - a) / refine_step)) + 1)
        fine.append(np.linspace(a, b, n))
    best_u, best_val = _grid_search(net, kin_true, spec, fine, best_u, best_val)
    return best_u, spec.sign * -best_val


def _grid_search(net, kin, spec, axes, best_u, best_val):
    """Maximize ``-cost`` over a 2-D tensor grid; ties keep the first point seen."""
    if len(axes) != 2:
        raise ValueError("grid search is implemented for two inputs")
    out = spec.output_set
    c = None
    for i, a in enumerate(axes[0]):
        col = axes[1] if i % 2 == 0 else axes[1][::-1]  # snake order keeps warm starts close
        for b in col:
            u = np.array([a, b])
            if not spec.input_set.contains(u):
                continue
            try:
                c, _ = solve_steady_state(net, kin, u, warm_start=c)
            except PlantError:
                c = None
                continue
            if not out.contains(c, OUTPUT_FEAS_TOL):
                continue
            val = -spec.cost(u, c)
            if val > best_val:
                best_u, best_val = u, val
    return best_u, best_val


# ---------------------------------------------------------------- csv output

def trajectory_columns(p: int, m: int, n_in: int, n_out: int) -> list[str]:
    """Column order of ``trajectory.csv``."""
    cols = ["step"]
    cols += [f"u_{i + 1}" for i in range(p)]
    cols += [f"y_{i + 1}" for i in range(m)]
    cols += [f"w_{i + 1}" for i in range(p)]
    cols += [f"y_next_{i + 1}" for i in range(m)]
    cols += ["objective", "cost", "violation_sum", "lyapunov", "max_output_violation",
             "kkt_residual", "first_order_residual", "delta_norm"]
    cols += [f"nu_{i + 1}" for i in range(n_in)]
    cols += [f"mu_{i + 1}" for i in range(n_out)]
    cols += [f"bound_lhs_{i + 1}" for i in range(n_out)]
    cols += [f"bound_rhs_{i + 1}" for i in range(n_out)]
    return cols


def _fmt(x: float) -> str:
    return format(x, ".17g")


def trajectory_rows(traj: Trajectory, n_out: int) -> list[str]:
    nan_bounds = [math.nan] * n_out
    lines = []
    for r in traj.records:
        lhs = r.violation_bound_lhs.tolist() if r.violation_bound_lhs.size else nan_bounds
        rhs = r.violation_bound_rhs.tolist() if r.violation_bound_rhs.size else nan_bounds
        vals = (r.u.tolist() + r.y.tolist() + r.w.tolist() + r.y_next.tolist()
                + [r.objective, r.cost, r.violation_sum, r.lyapunov, r.max_output_violation,
                   r.kkt_residual, r.first_order_residual, r.delta_norm]
                + r.nu.tolist() + r.mu.tolist() + lhs + rhs)
        lines.append(str(r.step) + "," + ",".join(map(_fmt, vals)))
    return lines


def write_trajectory_csv(path: Path, traj: Trajectory, spec: ProblemSpec) -> None:
    n_in, n_out = spec.input_set.n_constraints, spec.output_set.n_constraints
    cols = trajectory_columns(spec.input_dim, spec.output_dim, n_in, n_out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        fh.write("\n".join(trajectory_rows(traj, n_out)))
        fh.write("\n")


def read_trajectory_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


SUMMARY_COLUMNS = (
    "scenario", "status", "converged", "steps", "final_u", "final_y", "final_objective",
    "reference_gap", "max_lyapunov_increase", "max_bound_slack", "final_output_violation",
    "final_first_order_residual", "xi", "error",
)


# ---------------------------------------------------------------- suite

@dataclass
class ScenarioResult:
    """Per-scenario outcome plus the diagnostics the invariant checks need.

    ``max_bound_slack`` is the largest ``lhs - rhs`` of the one-step
    violation bound over all steps and rows (nonpositive when it holds).
    """

    scenario: str
    status: str
    converged: bool = False
    steps: int = 0
    final_u: tuple[float, ...] = ()
    final_y: tuple[float, ...] = ()
    final_objective: float = math.nan
    reference_gap: float = math.nan
    max_lyapunov_increase: float = math.nan
    max_bound_slack: float = math.nan
    final_output_violation: float = math.nan
    final_first_order_residual: float = math.nan
    xi: float = math.nan
    error: str = ""
    seconds: float = 0.0

    def summary_row(self) -> list[str]:
        return [
            self.scenario, self.status, str(int(self.converged)), str(self.steps),
            " ".join(map(_fmt, self.final_u)), " ".join(map(_fmt, self.final_y)),
            _fmt(self.final_objective), _fmt(self.reference_gap),
            _fmt(self.max_lyapunov_increase), _fmt(self.max_bound_slack),
            _fmt(self.final_output_violation), _fmt(self.final_first_order_residual),
            _fmt(self.xi), self.error.replace(",", ";").replace("\n", " "),
        ]


@dataclass
class SuiteResult:
    results: list[ScenarioResult]
    reference_u: Optional[np.ndarray]
    reference_objective: float
    lipschitz: tuple[float, ...]
    seconds: float

    @property
    def all_converged(self) -> bool:
        return all(r.status == "OK" and r.converged for r in self.results)

    def by_label(self) -> dict[str, ScenarioResult]:
        return {r.scenario: r for r in self.results}


def lipschitz_pairs(spec: ProblemSpec, n: int, seed: int) -> np.ndarray:
    """Secant pairs for the Lipschitz estimate.

    One third are independent uniform pairs over the input set; the rest are
    short (length 1e-2) secants based uniformly in the input set and in its
    low-feed corner ``[lo, lo + 10]``, where the steady-state map bends most.
    """
    rng = np.random.default_rng(seed)
    lo, hi = controller.bounding_box(spec.input_set)
    p = spec.input_dim
    n_far = max(1, n // 3)
    n_near = max(1, n - n_far)
    far = controller.sample_polyhedron(spec.input_set, 2 * n_far, rng).reshape(n_far, 2, p)
    base = np.concatenate([
        rng.uniform(lo, hi, size=(n_near - n_near // 2, p)),
        rng.uniform(lo, np.minimum(hi, lo + 10.0), size=(n_near // 2, p)),
    ])
    d = rng.normal(size=base.shape)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    partner = np.clip(base + 1e-2 * d, lo, hi)
    near = np.stack([base, partner], axis=1)
    return np.concatenate([far, near])


def _summarize(label: str, traj: Trajectory, spec: ProblemSpec, ref_obj: float,
               seconds: float) -> ScenarioResult:
    fin = traj.final
    y_end = traj.final_state.y
    u_end = traj.final_state.u
    obj_end = float(spec.lam_u @ u_end + spec.lam_y @ y_end)
    incs = traj.lyapunov_increments()
    slack = -math.inf
    for r in traj.records:
        if r.violation_bound_lhs.size:
            slack = max(slack, float((r.violation_bound_lhs - r.violation_bound_rhs).max()))
    out_viol = float(np.max(spec.output_set.mat @ y_end - spec.output_set.vec))
    return ScenarioResult(
        scenario=label,
        status="OK",
        converged=traj.converged,
        steps=len(traj),
        final_u=tuple(u_end.tolist()),
        final_y=tuple(y_end.tolist()),
        final_objective=obj_end,
        reference_gap=abs(obj_end - ref_obj) if math.isfinite(ref_obj) else math.nan,
        max_lyapunov_increase=float(incs.max()) if incs.size else 0.0,
        max_bound_slack=slack if math.isfinite(slack) else math.nan,
        final_output_violation=out_viol,
        final_first_order_residual=fin.first_order_residual,
        xi=traj.xi,
        seconds=seconds,
    )


def run_scenario(ds: Dataset, sc: UncertaintyScenario, cfg: ExperimentConfig,
                 lipschitz: Optional[tuple[float, ...]], ref_obj: float = math.nan,
                 out_dir: Optional[Path] = None, u0=None) -> ScenarioResult:
    """Run one scenario; any controller or plant failure becomes a FAILED row."""
    t0 = time.perf_counter()
    ccfg = ControllerConfig(alpha=cfg.alpha, max_steps=cfg.max_steps,
                            convergence_tol=cfg.convergence_tol, lipschitz=lipschitz)
    try:
        plant = BioPlant(ds.net, ds.kin, sc)
        traj = controller.run(ds.spec, plant, cfg.u0 if u0 is None else u0, ccfg)
        if out_dir is not None:
            write_trajectory_csv(out_dir / sc.label / "trajectory.csv", traj, ds.spec)
        res = _summarize(sc.label, traj, ds.spec, ref_obj, time.perf_counter() - t0)
        if not traj.converged:
            res.status = "FAILED"
            res.error = f"no convergence within {cfg.max_steps} steps"
        return res
    except (qp.QpError, PlantError, ValueError, ArithmeticError) as exc:
        return ScenarioResult(sc.label, "FAILED", error=f"{type(exc).__name__}: {exc}",
                              seconds=time.perf_counter() - t0)


def _worker(args):
    cfg, sc, lipschitz, ref_obj, out_dir = args
    ds = load_dataset(cfg.dataset)
    return run_scenario(ds, sc, cfg, lipschitz, ref_obj, out_dir)


def run_suite(cfg: ExperimentConfig, out_dir=None, with_reference: bool = True,
              lipschitz: Optional[tuple[float, ...]] = None, log=None) -> SuiteResult:
    """Run every configured scenario and write ``summary.csv``.

    ``out_dir=None`` uses ``cfg.out_dir``; ``False`` writes nothing.
    """
    t0 = time.perf_counter()
    ds = load_dataset(cfg.dataset)
    cfg.validate_against(ds)
    out = None if out_dir is False else Path(cfg.out_dir if out_dir is None else out_dir)

    ref_u, ref_obj = None, math.nan
    if with_reference:
        ref_u, ref_obj = reference_optimum(ds.net, ds.kin, ds.spec, cfg.reference_resolution,
                                           cfg.reference_refine_step)
    if lipschitz is None:
        pairs = lipschitz_pairs(ds.spec, cfg.lipschitz_samples, cfg.lipschitz_seed)
        _, l = controller.estimate_lipschitz_constants(BioPlant(ds.net, ds.kin), ds.spec,
                                                       pairs=pairs)
        lipschitz = tuple(l.tolist())

    jobs = [(cfg, sc, lipschitz, ref_obj, out) for sc in cfg.scenarios]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_worker, jobs))
    else:
        results = []
        for sc in cfg.scenarios:
            res = run_scenario(ds, sc, cfg, lipschitz, ref_obj, out)
            if log is not None:
                log(f"{res.scenario:<14} {res.status:<6} steps={res.steps:<7} "
                    f"objective={res.final_objective:.6f} ({res.seconds:.1f} s)")
            results.append(res)

    if out is not None:
        write_summary(out / "summary.csv", results)
    return SuiteResult(results, ref_u, ref_obj, lipschitz, time.perf_counter() - t0)


def write_summary(path: Path, results: Sequence[ScenarioResult]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(SUMMARY_COLUMNS)] + [",".join(r.summary_row()) for r in results]
    path.write_text("\n".join(lines) + "\n")


def read_summary(path) -> list[dict[str, str]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path} is empty")
    header = lines[0].split(",")
    if tuple(header) != SUMMARY_COLUMNS:
        raise ValueError(f"{path} does not have the summary columns")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:]]


# ---------------------------------------------------------------- checks

@dataclass(frozen=True)
class CheckOutcome:
    name: str
    passed: bool
    detail: str


def check_results(results: Sequence[ScenarioResult], objective_tol: float = 1e-3,
                  u_tol: float = 2e-3) -> list[CheckOutcome]:
    """Invariants over a finished suite: per-scenario and cross-scenario."""
    out = []
    ok = [r for r in results if r.status == "OK"]
    failed = [r.scenario for r in results if r.status != "OK"]
    out.append(CheckOutcome("all scenarios converged", not failed,
                            f"failed: {failed}" if failed else f"{len(results)} scenarios"))

    bad = [(r.scenario, r.max_lyapunov_increase) for r in ok
           if not r.max_lyapunov_increase <= LYAPUNOV_TOL]
    out.append(CheckOutcome("Lyapunov candidate nonincreasing", not bad, _worst(bad)))

    bad = [(r.scenario, r.max_bound_slack) for r in ok
           if not r.max_bound_slack <= BOUND_TOL]
    out.append(CheckOutcome("one-step output-violation bound", not bad, _worst(bad)))

    bad = [(r.scenario, r.final_output_violation) for r in ok
           if not r.final_output_violation <= OUTPUT_FEAS_TOL]
    bad += [(r.scenario, r.final_first_order_residual) for r in ok
            if not r.final_first_order_residual <= FIRST_ORDER_TOL]
    out.append(CheckOutcome("fixed-point optimality", not bad, _worst(bad)))

    if len(ok) >= 2:
        objs = np.array([r.final_objective for r in ok])
        us = np.array([r.final_u for r in ok])
        spread_obj = float(objs.max() - objs.min())
        spread_u = float(max(np.abs(a - b).max() for a in us for b in us))
        out.append(CheckOutcome("final objectives agree", spread_obj <= objective_tol,
                                f"spread {spread_obj:.3e}"))
        out.append(CheckOutcome("final inputs agree", spread_u <= u_tol,
                                f"spread {spread_u:.3e}"))
    return out


def _worst(bad):
    if not bad:
        return "ok"
    name, val = max(bad, key=lambda t: t[1] if math.isfinite(t[1]) else math.inf)
    return f"{len(bad)} offending; worst {name} = {val:.3e}"


def _results_from_summary(rows) -> list[ScenarioResult]:
    res = []
    for d in rows:
        def f(k):
            return float(d[k]) if d[k] else math.nan

        res.append(ScenarioResult(
            scenario=d["scenario"], status=d["status"], converged=d["converged"] == "1",
            steps=int(d["steps"]),
            final_u=tuple(float(v) for v in d["final_u"].split()),
            final_y=tuple(float(v) for v in d["final_y"].split()),
            final_objective=f("final_objective"), reference_gap=f("reference_gap"),
            max_lyapunov_increase=f("max_lyapunov_increase"),
            max_bound_slack=f("max_bound_slack"),
            final_output_violation=f("final_output_violation"),
            final_first_order_residual=f("final_first_order_residual"),
            xi=f("xi"), error=d["error"],
        ))
    return res


# ---------------------------------------------------------------- CLI

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="feedopt",
                                 description="Feedback-optimization experiments on the bioreactor model.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name, text in (("run", "run the scenario suite"),
                       ("reference", "grid-search reference optimum"),
                       ("check", "invariant checks on an existing output directory")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON experiment config (defaults built in)")
        p.add_argument("--out", help="output directory (overrides the config)")
        if name != "check":
            p.add_argument("--seed-offset", type=int, default=0,
                           help="added to every perturbation seed")
            p.add_argument("--alpha", type=float, help="step size (overrides the config)")
    return ap


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed_offset", 0):
        cfg = cfg.with_seed_offset(args.seed_offset)
    if getattr(args, "alpha", None) is not None:
        cfg = replace(cfg, alpha=args.alpha)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.cmd != "check":
            cfg.validate_against(load_dataset(cfg.dataset))
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.out_dir)
    if args.cmd == "reference":
        ds = load_dataset(cfg.dataset)
        u, val = reference_optimum(ds.net, ds.kin, ds.spec, cfg.reference_resolution,
                                   cfg.reference_refine_step)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"u": u.tolist(), "objective": val,
                   "resolution": cfg.reference_resolution,
                   "refine_step": cfg.reference_refine_step}
        (out / "reference.json").write_text(json.dumps(payload, indent=2) + "\n")
        print(f"reference optimum u={u.tolist()} objective={val:.10g}")
        return EXIT_OK

    if args.cmd == "run":
        res = run_suite(cfg, out, log=print)
        print(f"reference objective {res.reference_objective:.10g}; "
              f"{sum(r.status == 'OK' for r in res.results)}/{len(res.results)} converged "
              f"in {res.seconds:.1f} s")
        return EXIT_OK if res.all_converged else EXIT_FAILED

    try:
        results = _results_from_summary(read_summary(out / "summary.csv"))
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot read {out / 'summary.csv'}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    checks = check_results(results)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAILED


if __name__ == "__main__":
    raise SystemExit(main())
