"""Per-step projection QP of the feedback-optimization law.

The step direction ``w`` solves

    min  scale * (1/2 w'Gw + (G g)'w)   s.t.  M w <= r

which is the metric projection of ``-g`` onto the linearized feasible
region. ``scale`` is the step size, so the returned multipliers are those of
the step-size-scaled problem; they coincide with the first-order multipliers
of the underlying steady-state problem at a fixed point (``w = 0``).

The solver is the dual active-set method of Goldfarb and Idnani: start at the
unconstrained minimizer ``-g`` and repeatedly add the most violated
constraint, dropping active constraints whose multiplier would turn negative.
Problems here have two or three variables and a dozen rows, so the reduced
matrices are recomputed from scratch at every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .model import DimensionError, ProblemSpec, check_membership

DEFAULT_TOL = 1e-9
_COND_LIMIT = 1e13


class QpError(RuntimeError):
    pass


class QpInfeasible(QpError):
    """The linearized feasible region is empty.

    ``slacks`` holds ``r - M w`` at the point where infeasibility was detected.
    """

    def __init__(self, message: str, slacks: np.ndarray, constraint: int):
        super().__init__(message)
        self.slacks = slacks
        self.constraint = constraint


class QpMaxIterations(QpError):
    pass


class NumericalBreakdown(QpError):
    pass


@dataclass(frozen=True)
class QpInstance:
    G: np.ndarray
    g: np.ndarray
    ineq_mat: np.ndarray
    ineq_vec: np.ndarray
    scale: float = 1.0
    n_input: int = 0

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float).reshape(-1)
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        M = np.atleast_2d(np.asarray(self.ineq_mat, dtype=float))
        r = np.asarray(self.ineq_vec, dtype=float).reshape(-1)
        p = g.shape[0]
        if M.size == 0:
            M = M.reshape(0, p)
        if M.ndim != 2 or M.shape[1] != p:
            raise DimensionError(f"ineq_mat has shape {M.shape}, expected (k, {p})")
        if G.shape != (p, p):
            raise DimensionError(f"G has shape {G.shape}, expected {(p, p)}")
        if M.shape[0] != r.shape[0]:
            raise DimensionError("ineq_mat and ineq_vec disagree in row count")
        if not 0 <= self.n_input <= r.shape[0]:
            raise DimensionError("n_input exceeds the number of constraints")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "ineq_mat", M)
        object.__setattr__(self, "ineq_vec", r)

    @property
    def dim(self) -> int:
        return self.g.shape[0]

    @property
    def n_constraints(self) -> int:
        return self.ineq_vec.shape[0]

    def objective(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return float(self.scale * (0.5 * w @ self.G @ w + (self.G @ self.g) @ w))


@dataclass(frozen=True)
class QpSolution:
    w: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    active_set: tuple[int, ...]
    kkt_residual: float
    iterations: int = 0
    degenerate: bool = False
    dropped: tuple[int, ...] = field(default=())

    @property
    def multipliers(self) -> np.ndarray:
        return np.concatenate([self.nu, self.mu])


def build_instance(spec: ProblemSpec, u, y, reported_jacobian, alpha: float,
                   tol: float = 1e-9) -> QpInstance:
    """Assemble the step QP at the measured point ``(u, y)``.

    Input rows come first (``alpha*A w <= b - A u``), followed by output rows
    linearized with the reported Jacobian (``alpha*C J w <= d - C y``).
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    J = np.asarray(reported_jacobian, dtype=float)
    p, m = spec.input_dim, spec.output_dim
    if u.shape != (p,) or y.shape != (m,) or J.shape != (m, p):
        raise DimensionError(
            f"expected u:{(p,)}, y:{(m,)}, J:{(m, p)}; got {u.shape}, {y.shape}, {J.shape}"
        )
    in_slack = spec.input_set.vec - spec.input_set.mat @ u
    if in_slack.min() < -tol:
        raise ValueError(f"u is outside the input set (min slack {in_slack.min():.3e})")
    G = spec.metric_at(u)
    gu, gy = spec.cost_gradients()
    if spec.identity_metric:
        g = gu + J.T @ gy
    else:
        try:
            g = np.linalg.solve(G, gu + J.T @ gy)
        except np.linalg.LinAlgError:
            raise ValueError("metric is singular") from None
    A, C = spec.input_set.mat, spec.output_set.mat
    out_slack = spec.output_set.vec - C @ y
    M = alpha * np.concatenate((A, C @ J))
    r = np.concatenate([in_slack, out_slack])
    return QpInstance(G, g, M, r, scale=alpha, n_input=A.shape[0])


def _split(inst: QpInstance, lam: np.ndarray):
    return lam[: inst.n_input].copy(), lam[inst.n_input:].copy()


def kkt_residual(inst: QpInstance, sol: QpSolution) -> float:
    """Largest violation among stationarity, primal and dual feasibility and complementarity."""
    w = np.asarray(sol.w, dtype=float)
    lam = np.concatenate([np.asarray(sol.nu, float), np.asarray(sol.mu, float)])
    if w.shape != (inst.dim,) or lam.shape != (inst.n_constraints,):
        raise DimensionError("solution does not match instance dimensions")
    M, r = inst.ineq_mat, inst.ineq_vec
    stat = inst.scale * (inst.G @ (w + inst.g)) + M.T @ lam
    slack = r - M @ w
    terms = [np.max(np.abs(stat)) if stat.size else 0.0]
    if lam.size:
        terms += [
            max(0.0, -slack.min()),
            max(0.0, -lam.min()),
            np.max(np.abs(lam * slack)),
        ]
    return float(max(terms))


def _violation_threshold(M, r, x):
    return 1e-13 * (1.0 + np.abs(r) + np.abs(M) @ np.abs(x))


def solve(inst: QpInstance, tol: float = DEFAULT_TOL, max_iter: int | None = None,
          initial_active: Sequence[int] = ()) -> QpSolution:
    """Solve a strictly convex inequality-constrained QP.

    ``initial_active`` lists constraints to bring in first (those violated
    when their turn comes), before the most-violated rule takes over. The
    minimizer does not depend on it.

    Raises:
        QpInfeasible: the constraints admit no point.
        QpMaxIterations: more than ``max_iter`` add/drop operations.
        NumericalBreakdown: the active constraint normals are numerically
            dependent in a way the drop rule could not resolve, or the
            metric is not positive definite.
    """
    G, g, M, r = inst.G, inst.g, inst.ineq_mat, inst.ineq_vec
    p, k = inst.dim, inst.n_constraints
    x = -g
    if k == 0:
        sol = QpSolution(x.copy(), np.zeros(0), np.zeros(0), (), 0.0)
        return _finish(inst, sol, tol)
    viol = M @ x - r
    if viol.max() <= 0.0 or np.all(viol <= _violation_threshold(M, r, x)):
        # w = -g makes stationarity exact and all multipliers vanish
        res = max(float(viol.max()), 0.0)
        if res > tol:
            raise NumericalBreakdown(f"KKT residual {res:.3e} exceeds tolerance {tol:.1e}")
        return QpSolution(x.copy(), np.zeros(inst.n_input), np.zeros(k - inst.n_input), (), res)

    if max_iter is None:
        max_iter = 100 * k
    H = inst.scale * G
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise NumericalBreakdown("metric is not positive definite") from None
    Linv = scipy.linalg.solve_triangular(L, np.eye(p), lower=True)
    Hinv = Linv.T @ Linv

    active: list[int] = []
    mult: list[float] = []
    queue = [int(i) for i in initial_active]
    dropped: list[int] = []
    degenerate = False
    it = 0

    while True:
        viol = M @ x - r
        thresh = _violation_threshold(M, r, x)
        cand = None
        while queue:
            i = queue.pop(0)
            if i not in active and viol[i] > thresh[i]:
                cand = i
                break
        if cand is None:
            masked = np.where(viol > thresh, viol, -np.inf)
            if active:
                masked[active] = -np.inf
            if not np.isfinite(masked.max()):
                break
            cand = int(np.argmax(masked))  # argmax breaks ties by lowest index
        n_p = -M[cand]
        u_new = 0.0
        while True:
            it += 1
            if it > max_iter:
                raise QpMaxIterations(f"no solution after {max_iter} active-set changes")
            if active:
                Nm = -M[active].T
                Q = Nm.T @ Hinv @ Nm
                if np.linalg.cond(Q) > _COND_LIMIT:
                    raise NumericalBreakdown("active constraint normals are dependent")
                Nstar = np.linalg.solve(Q, Nm.T @ Hinv)
                z = Hinv @ n_p - Hinv @ Nm @ (Nstar @ n_p)
                rr = Nstar @ n_p
            else:
                z = Hinv @ n_p
                rr = np.zeros(0)

            t1, drop = np.inf, None
            for j, rj in enumerate(rr):
                if rj > 1e-14 and mult[j] / rj < t1:
                    t1, drop = mult[j] / rj, j
            zn = float(z @ n_p)
            s_p = float(M[cand] @ x - r[cand])
            if zn <= 1e-14 * max(1.0, float(n_p @ Hinv @ n_p)):
                t2 = np.inf
                degenerate = degenerate or bool(active)
            else:
                t2 = s_p / zn
            t = min(t1, t2)
            if not np.isfinite(t):
                raise QpInfeasible(
                    f"constraint {cand} cannot be satisfied together with the active set {active}",
                    slacks=r - M @ x,
                    constraint=cand,
                )
            if np.isfinite(t2):
                x = x + t * z
            for j in range(len(mult)):
                mult[j] -= t * rr[j]
            u_new += t
            if t2 <= t1:
                active.append(cand)
                mult.append(u_new)
                break
            dropped.append(active[drop])
            del active[drop]
            del mult[drop]

    lam = np.zeros(k)
    lam[active] = np.maximum(mult, 0.0)
    sol = QpSolution(x, *_split(inst, lam), tuple(active), 0.0, iterations=it,
                     degenerate=degenerate, dropped=tuple(dropped))
    return _finish(inst, sol, tol, polish=True)


def _polish(inst: QpInstance, sol: QpSolution) -> QpSolution | None:
    """Re-solve the equality-constrained problem on the final active set."""
    act = list(sol.active_set)
    p, na = inst.dim, len(act)
    H = inst.scale * inst.G
    Ma = inst.ineq_mat[act]
    K = np.zeros((p + na, p + na))
    K[:p, :p] = H
    K[:p, p:] = Ma.T
    K[p:, :p] = Ma
    rhs = np.concatenate([-H @ inst.g, inst.ineq_vec[act]])
    try:
        z = scipy.linalg.solve(K, rhs, assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning):
        return None
    if not np.all(np.isfinite(z)) or np.any(z[p:] < 0):
        return None
    lam = np.zeros(inst.n_constraints)
    lam[act] = z[p:]
    return QpSolution(z[:p], *_split(inst, lam), sol.active_set, 0.0, sol.iterations,
                      sol.degenerate, sol.dropped)


def _finish(inst, sol, tol, polish=False):
    res = kkt_residual(inst, sol)
    if polish and res > 1e-3 * tol and not sol.degenerate:
        better = _polish(inst, sol)
        if better is not None:
            res_b = kkt_residual(inst, better)
            if res_b < res:
                sol, res = better, res_b
    if res > tol:
        raise NumericalBreakdown(f"KKT residual {res:.3e} exceeds tolerance {tol:.1e}")
    return QpSolution(sol.w, sol.nu, sol.mu, sol.active_set, res, sol.iterations,
                      sol.degenerate, sol.dropped)
