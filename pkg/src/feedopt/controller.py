"""Discrete feedback-optimization loop and its monitors.

Each step measures the plant's steady state ``y = h(u)``, solves the
projection QP built from the reported Jacobian, and applies
``u <- u + alpha * w``. Alongside, the loop records the quantities that the
convergence argument relies on:

* the Lyapunov candidate ``V(u) = cost(u, h(u)) + xi * sum_i max(0, C_i h(u) - d_i)``,
* the one-step output-violation bound
  ``C_i h(u+) - d_i <= -alpha C_i delta w + l_i/2 ||alpha w||^2``,
* the first-order (KKT) residual of the steady-state problem at ``(u, h(u))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from . import qp
from .model import DimensionError, PlantModel, Polyhedron, ProblemSpec, check_membership


@dataclass(frozen=True)
class ControllerConfig:
    """Step size, stopping rule and monitor switches.

    ``lyapunov_xi=None`` picks the penalty weight after the run as twice the
    largest output-constraint multiplier seen. ``lipschitz`` holds the
    constants ``l_i`` of ``C_i dh/du`` used by the violation-bound monitor;
    without them that monitor is skipped.
    """

    alpha: float = 0.0015
    max_steps: int = 100_000
    convergence_tol: float = 1e-8
    lyapunov_xi: Optional[float] = None
    monitor_lyapunov: bool = True
    monitor_violation: bool = True
    monitor_kkt: bool = True
    lipschitz: Optional[tuple[float, ...]] = None
    qp_tol: float = qp.DEFAULT_TOL
    feas_tol: float = 1e-9

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.convergence_tol > 0 or not self.qp_tol > 0 or not self.feas_tol > 0:
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.lyapunov_xi is not None and self.lyapunov_xi < 0:
            raise ValueError("lyapunov_xi must be nonnegative")
        if self.lipschitz is not None:
            object.__setattr__(self, "lipschitz", tuple(float(v) for v in self.lipschitz))


@dataclass(frozen=True)
class ControllerState:
    u: np.ndarray
    y: np.ndarray
    step: int = 0


@dataclass(slots=True)
class TrajectoryRecord:
    """One controller step taken from ``(u, y)``.

    ``y_next`` is the steady state measured after applying ``u + alpha*w``.
    ``violation_bound_lhs``/``rhs`` are the two sides of the one-step
    output-violation bound, one entry per output constraint (empty when the
    monitor is off).
    """

    step: int
    u: np.ndarray
    y: np.ndarray
    w: np.ndarray
    y_next: np.ndarray
    objective: float
    cost: float
    violation_sum: float
    lyapunov: float
    max_output_violation: float
    violation_bound_lhs: np.ndarray
    violation_bound_rhs: np.ndarray
    kkt_residual: float
    first_order_residual: float
    nu: np.ndarray
    mu: np.ndarray
    delta_norm: float = 0.0

    @property
    def step_norm(self) -> float:
        return math.sqrt(float(self.w @ self.w))


@dataclass
class Trajectory:
    records: list[TrajectoryRecord]
    converged: bool
    xi: float
    alpha: float
    final_state: ControllerState

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __iter__(self):
        return iter(self.records)

    @property
    def final(self) -> TrajectoryRecord:
        return self.records[-1]

    def lyapunov_increments(self) -> np.ndarray:
        v = np.array([r.lyapunov for r in self.records])
        return np.diff(v)

    def max_mu(self) -> float:
        return max((float(r.mu.max()) for r in self.records if r.mu.size), default=0.0)


def first_order_residual(spec: ProblemSpec, u, y, jac, nu, mu, slacks=None) -> float:
    """Residual of the steady-state problem's KKT conditions at ``(u, y)``.

    Stationarity uses ``jac`` (the reported Jacobian) for the output
    sensitivities; feasibility is judged on the measured ``y``. ``slacks``
    may pass the stacked ``[b - A u, d - C y]`` if already known.
    """
    A = spec.input_set.mat
    C = spec.output_set.mat
    if slacks is None:
        slacks = np.concatenate([spec.input_set.vec - A @ np.asarray(u, float),
                                 spec.output_set.vec - C @ np.asarray(y, float)])
    gu, gy = spec.cost_gradients()
    lam = np.concatenate([nu, mu])
    if lam.size and lam.any():
        stat = gu + jac.T @ (gy + C.T @ mu) + A.T @ nu
        mult = max(0.0, -float(lam.min()), float(np.abs(lam * slacks).max()))
    else:
        stat = gu + jac.T @ gy
        mult = 0.0
    primal = max(0.0, -float(slacks.min())) if slacks.size else 0.0
    return max(float(np.abs(stat).max()), primal, mult)


def _sensitivities(plant, u, y):
    if hasattr(plant, "sensitivities"):
        return plant.sensitivities(u, y)
    return plant.jacobian(u, y), plant.reported_jacobian(u, y)


def initial_state(plant: PlantModel, u0) -> ControllerState:
    u0 = np.array(u0, dtype=float)
    return ControllerState(u0, np.asarray(plant.output(u0), dtype=float), 0)


def step(spec: ProblemSpec, plant: PlantModel, state: ControllerState,
         cfg: ControllerConfig) -> tuple[ControllerState, TrajectoryRecord]:
    """Apply one update ``u+ = u + alpha * w`` and measure the new steady state."""
    u, y, alpha = state.u, state.y, cfg.alpha
    need_true = cfg.monitor_violation and cfg.lipschitz is not None
    if need_true:
        J_true, J_rep = _sensitivities(plant, u, y)
    else:
        J_true, J_rep = None, plant.reported_jacobian(u, y)

    inst = qp.build_instance(spec, u, y, J_rep, alpha, tol=cfg.feas_tol)
    sol = qp.solve(inst, tol=cfg.qp_tol)
    w = sol.w
    du = alpha * w
    u_next = u + du
    y_next = np.asarray(plant.output(u_next, warm_start=y + J_rep @ du), dtype=float)

    C, d = spec.output_set.mat, spec.output_set.vec
    # output slacks are the tail of the QP right-hand side
    pos = np.maximum(-inst.ineq_vec[inst.n_input:], 0.0)
    objective = float(spec.lam_u @ u + spec.lam_y @ y)
    cost = spec.sign * objective
    vsum = float(pos.sum())
    xi = cfg.lyapunov_xi
    lyap = cost + xi * vsum if (cfg.monitor_lyapunov and xi is not None) else math.nan

    if need_true:
        delta = J_rep - J_true
        lhs = C @ y_next - d
        rhs = _violation_rhs(C, delta, w, alpha, cfg.lipschitz)
        dnorm = _spectral_norm(delta) if J_rep is not J_true else 0.0
    else:
        lhs = rhs = np.zeros(0)
        dnorm = math.nan
    fo = (first_order_residual(spec, u, y, J_rep, sol.nu, sol.mu, inst.ineq_vec)
          if cfg.monitor_kkt else math.nan)

    rec = TrajectoryRecord(
        step=state.step,
        u=u,
        y=y,
        w=w,
        y_next=y_next,
        objective=objective,
        cost=cost,
        violation_sum=vsum,
        lyapunov=lyap,
        max_output_violation=float(pos.max()) if vsum > 0.0 else 0.0,
        violation_bound_lhs=lhs,
        violation_bound_rhs=rhs,
        kkt_residual=sol.kkt_residual,
        first_order_residual=fo,
        nu=sol.nu,
        mu=sol.mu,
        delta_norm=dnorm,
    )
    return ControllerState(u_next, y_next, state.step + 1), rec


def _spectral_norm(a: np.ndarray) -> float:
    if a.shape[1] != 2:
        return float(np.linalg.norm(a, 2))
    # largest eigenvalue of the 2x2 Gram matrix in closed form
    (p, q), (_, r) = (a.T @ a).tolist()
    mid = 0.5 * (p + r)
    return math.sqrt(max(mid + math.sqrt(max(0.25 * (p - r) ** 2 + q * q, 0.0)), 0.0))


def _violation_rhs(C, delta, w, alpha, lipschitz):
    l = np.asarray(lipschitz, dtype=float)
    if l.shape != (C.shape[0],):
        raise DimensionError(f"need one Lipschitz constant per output constraint ({C.shape[0]})")
    aw = alpha * w
    return -(C @ (delta @ aw)) + 0.5 * l * float(aw @ aw)


def run(spec: ProblemSpec, plant: PlantModel, u0, cfg: ControllerConfig) -> Trajectory:
    """Iterate until ``||alpha w|| <= convergence_tol`` or ``max_steps``.

    Hitting ``max_steps`` is not an exception: the trajectory is returned
    with ``converged=False``. QP failures (for instance an empty linearized
    feasible set) and plant solver failures propagate.
    """
    state = initial_state(plant, u0)
    if not spec.input_set.contains(state.u, cfg.feas_tol):
        raise ValueError(f"u0={state.u} is outside the input set")
    records: list[TrajectoryRecord] = []
    converged = False
    for _ in range(cfg.max_steps):
        try:
            state, rec = step(spec, plant, state, cfg)
        except qp.QpInfeasible as exc:
            exc.step = state.step
            exc.u = state.u
            raise
        records.append(rec)
        if cfg.alpha * rec.step_norm <= cfg.convergence_tol:
            converged = True
            break

    xi = cfg.lyapunov_xi
    if xi is None:
        xi = 2.0 * max((float(r.mu.max()) for r in records if r.mu.size), default=0.0)
        if cfg.monitor_lyapunov:
            for r in records:
                r.lyapunov = r.cost + xi * r.violation_sum
    return Trajectory(records, converged, xi, cfg.alpha, state)


def lyapunov_value(spec: ProblemSpec, plant: PlantModel, u, xi: float, warm_start=None) -> float:
    """``V(u)`` evaluated on the true steady state ``h(u)``."""
    y = np.asarray(plant.output(np.asarray(u, dtype=float), warm_start=warm_start), dtype=float)
    viol = check_membership(spec.output_set, y)
    return spec.cost(u, y) + xi * float(np.maximum(-viol, 0.0).sum())


def violation_bound_check(record: TrajectoryRecord, delta, lipschitz, alpha: float,
                          output_set: Polyhedron, tol: float = 1e-12) -> np.ndarray:
    """Per output constraint, whether the one-step violation bound holds.

    ``delta`` is the Jacobian error at the record's input, known only in
    simulation. ``tol`` absorbs floating-point rounding in the comparison.
    """
    C, d = output_set.mat, output_set.vec
    lhs = C @ np.asarray(record.y_next, float) - d
    rhs = _violation_rhs(C, np.asarray(delta, float), np.asarray(record.w, float), alpha, lipschitz)
    return lhs <= rhs + tol


def bounding_box(poly: Polyhedron) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate-wise bounds of a polyhedron (must be bounded)."""
    n = poly.dim
    lo, hi = np.empty(n), np.empty(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        for sgn, out in ((1.0, lo), (-1.0, hi)):
            res = linprog(sgn * e, A_ub=poly.mat, b_ub=poly.vec, bounds=[(None, None)] * n,
                          method="highs")
            if res.status != 0:
                raise ValueError("input set is empty or unbounded")
            out[i] = res.x[i]
    return lo, hi


def sample_polyhedron(poly: Polyhedron, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples by rejection from the bounding box."""
    lo, hi = bounding_box(poly)
    out = []
    while len(out) < n:
        cand = rng.uniform(lo, hi, size=(max(n, 16), poly.dim))
        ok = np.all(cand @ poly.mat.T <= poly.vec, axis=1)
        out.extend(cand[ok])
    return np.array(out[:n])


def estimate_lipschitz_constants(plant: PlantModel, spec: ProblemSpec, n_samples: int = 200,
                                 seed: int = 0, pairs=None) -> tuple[float, np.ndarray]:
    """Empirical Lipschitz constants ``(L, l)`` from secant slopes.

    ``L`` is for the closed-loop cost gradient ``grad_u cost(u, h(u))`` and
    ``l[i]`` for the row ``C_i dh/du``. ``pairs`` is an ``(n, 2, p)`` array
    of input pairs; by default ``n_samples`` pairs are drawn uniformly from
    the input set. Sample maxima are lower bounds on the true constants.
    """
    if pairs is None:
        if n_samples < 1:
            raise ValueError("need at least 1 pair")
        rng = np.random.default_rng(seed)
        pairs = sample_polyhedron(spec.input_set, 2 * n_samples, rng).reshape(n_samples, 2, -1)
    pairs = np.asarray(pairs, dtype=float)
    if pairs.ndim != 3 or pairs.shape[1] != 2 or pairs.shape[2] != spec.input_dim:
        raise DimensionError(f"pairs must have shape (n, 2, {spec.input_dim})")
    gu, gy = spec.cost_gradients()
    C = spec.output_set.mat
    L = 0.0
    l = np.zeros(C.shape[0])
    for a, b in pairs:
        dist = float(np.linalg.norm(a - b))
        if dist == 0.0:
            continue
        Ja = np.asarray(plant.jacobian(a, plant.output(a)), dtype=float)
        Jb = np.asarray(plant.jacobian(b, plant.output(b)), dtype=float)
        L = max(L, float(np.linalg.norm(Ja.T @ gy - Jb.T @ gy)) / dist)
        l = np.maximum(l, np.linalg.norm(C @ (Ja - Jb), axis=1) / dist)
    return L, l


@dataclass(frozen=True)
class RobustBoundInputs:
    lambda_min_G: float
    M_delta: float
    M_nabla: float
    L: float
    l: tuple[float, ...]
    C_row_norms: tuple[float, ...]
    xi: float

    def __post_init__(self):
        object.__setattr__(self, "l", tuple(float(v) for v in self.l))
        object.__setattr__(self, "C_row_norms", tuple(float(v) for v in self.C_row_norms))
        if len(self.l) != len(self.C_row_norms):
            raise ValueError("l and C_row_norms must have one entry per output constraint")
        vals = (self.lambda_min_G, self.M_delta, self.M_nabla, self.L, self.xi, *self.l,
                *self.C_row_norms)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("bound inputs must be finite")
        if any(v < 0 for v in vals):
            raise ValueError("bound inputs must be nonnegative")
        if not self.lambda_min_G > 0:
            raise ValueError("lambda_min_G must be positive")


def compute_alpha_star(b: RobustBoundInputs) -> float:
    """Step-size bound below which the Lyapunov candidate cannot increase.

    The penalty weight multiplies both the curvature and the
    uncertainty term of every output constraint. Returns ``inf`` when every
    term in the denominator vanishes.
    """
    per_row = sum(b.xi * li / 2.0 + b.xi * ci * b.M_delta for li, ci in zip(b.l, b.C_row_norms))
    denom = b.M_delta * b.M_nabla + b.L + per_row
    if denom == 0.0:
        return math.inf
    return 2.0 * b.lambda_min_G / denom
