"""Problem data for steady-state feedback optimization.

The optimization problem is

    min  Phi(u, y)   s.t.  y = h(u),  A u <= b,  C y <= d

with an affine objective ``Phi(u, y) = lam_u @ u + lam_y @ y``. The plant map
``h`` is never known to the controller; it only sees measured outputs and a
(possibly wrong) Jacobian reported by a :class:`PlantModel`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

DEFAULT_FEAS_TOL = 1e-9


class DimensionError(ValueError):
    """Raised when array shapes do not match the problem dimensions."""


def _as_vector(x, n: Optional[int] = None, name: str = "x") -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise DimensionError(f"{name} has length {v.shape[0]}, expected {n}")
    return v


@dataclass(frozen=True)
class Polyhedron:
    """The region ``{x : mat @ x <= vec}``."""

    mat: np.ndarray
    vec: np.ndarray

    def __post_init__(self):
        mat = np.array(self.mat, dtype=float, ndmin=2)
        vec = np.array(self.vec, dtype=float).reshape(-1)
        if mat.shape[0] != vec.shape[0]:
            raise DimensionError(
                f"polyhedron has {mat.shape[0]} rows but {vec.shape[0]} right-hand sides"
            )
        if np.any(np.all(mat == 0.0, axis=1)):
            raise ValueError("polyhedron contains an all-zero constraint row")
        mat.setflags(write=False)
        vec.setflags(write=False)
        object.__setattr__(self, "mat", mat)
        object.__setattr__(self, "vec", vec)

    @property
    def dim(self) -> int:
        return self.mat.shape[1]

    @property
    def n_constraints(self) -> int:
        return self.mat.shape[0]

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]) -> "Polyhedron":
        """Box ``lower <= x <= upper``; upper-bound rows first, then lower-bound rows."""
        lo = _as_vector(lower, name="lower")
        hi = _as_vector(upper, len(lo), name="upper")
        eye = np.eye(len(lo))
        return cls(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))

    def contains(self, x, tol: float = DEFAULT_FEAS_TOL) -> bool:
        return bool(np.all(check_membership(self, x, tol) >= -tol))


def check_membership(poly: Polyhedron, x, tol: float = DEFAULT_FEAS_TOL) -> np.ndarray:
    """Return the constraint slacks ``b - A x``.

    ``x`` lies in ``poly`` iff every slack is ``>= -tol``; ``tol`` is accepted
    here so that callers can pass it through, the slacks themselves are exact.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    v = _as_vector(x, poly.dim)
    return poly.vec - poly.mat @ v


def identity_metric(p: int) -> Callable[[np.ndarray], np.ndarray]:
    eye = np.eye(p)
    eye.setflags(write=False)
    return lambda u: eye


@dataclass(frozen=True)
class ProblemSpec:
    """Affine objective, metric and constraint sets.

    ``sense="max"`` maximizes ``lam_u @ u + lam_y @ y``; internally the
    controller always minimizes :meth:`cost`, which is the objective with the
    sign flipped in that case.
    """

    lam_u: np.ndarray
    lam_y: np.ndarray
    input_set: Polyhedron
    output_set: Polyhedron
    metric: Optional[Callable[[np.ndarray], np.ndarray]] = None
    sense: str = "min"
    identity_metric: bool = field(init=False, repr=False, compare=False)
    _grads: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lam_u = _as_vector(self.lam_u, name="lam_u").copy()
        lam_y = _as_vector(self.lam_y, name="lam_y").copy()
        if self.input_set.dim != lam_u.shape[0]:
            raise DimensionError("input_set dimension does not match lam_u")
        if self.output_set.dim != lam_y.shape[0]:
            raise DimensionError("output_set dimension does not match lam_y")
        if self.sense not in ("min", "max"):
            raise ValueError("sense must be 'min' or 'max'")
        lam_u.setflags(write=False)
        lam_y.setflags(write=False)
        object.__setattr__(self, "lam_u", lam_u)
        object.__setattr__(self, "lam_y", lam_y)
        sign = -1.0 if self.sense == "max" else 1.0
        gu, gy = sign * lam_u, sign * lam_y
        gu.setflags(write=False)
        gy.setflags(write=False)
        object.__setattr__(self, "_grads", (gu, gy))
        if self.metric is None:
            object.__setattr__(self, "metric", identity_metric(lam_u.shape[0]))
            object.__setattr__(self, "identity_metric", True)
        else:
            object.__setattr__(self, "identity_metric", False)

    @property
    def input_dim(self) -> int:
        return self.lam_u.shape[0]

    @property
    def output_dim(self) -> int:
        return self.lam_y.shape[0]

    @property
    def sign(self) -> float:
        return -1.0 if self.sense == "max" else 1.0

    def cost(self, u, y) -> float:
        return self.sign * eval_objective(self, u, y)

    def cost_gradients(self) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of :meth:`cost` w.r.t. ``u`` and ``y`` (constant for affine costs)."""
        return self._grads

    def metric_at(self, u) -> np.ndarray:
        return np.asarray(self.metric(u), dtype=float)

    def check_metric(self, points) -> None:
        """Raise ``ValueError`` unless the metric is symmetric positive definite at ``points``."""
        for u in points:
            G = self.metric_at(u)
            if G.shape != (self.input_dim, self.input_dim):
                raise DimensionError(f"metric has shape {G.shape}")
            if not np.allclose(G, G.T, rtol=0, atol=1e-12):
                raise ValueError(f"metric is not symmetric at u={u}")
            try:
                np.linalg.cholesky(G)
            except np.linalg.LinAlgError:
                raise ValueError(f"metric is not positive definite at u={u}") from None


def eval_objective(spec: ProblemSpec, u, y) -> float:
    uu = _as_vector(u, spec.input_dim, "u")
    yy = _as_vector(y, spec.output_dim, "y")
    return float(spec.lam_u @ uu + spec.lam_y @ yy)


def metric_norm_sq(v, G) -> float:
    v = np.asarray(v, dtype=float)
    return float(v @ np.asarray(G, dtype=float) @ v)


@dataclass(frozen=True)
class JacobianEstimate:
    """A Jacobian as the controller sees it next to the true one."""

    nominal: np.ndarray
    reported: np.ndarray
    delta_norm_bound: float = np.inf

    def __post_init__(self):
        nominal = np.array(self.nominal, dtype=float, ndmin=2)
        reported = np.array(self.reported, dtype=float, ndmin=2)
        if nominal.shape != reported.shape:
            raise DimensionError("nominal and reported Jacobians differ in shape")
        if self.delta_norm_bound < 0:
            raise ValueError("delta_norm_bound must be nonnegative")
        object.__setattr__(self, "nominal", nominal)
        object.__setattr__(self, "reported", reported)

    @property
    def delta(self) -> np.ndarray:
        return self.reported - self.nominal

    def within_bound(self) -> bool:
        return bool(np.linalg.norm(self.delta, 2) <= self.delta_norm_bound)


class PlantModel(Protocol):
    """What the controller needs from a plant.

    ``output`` returns the steady state reached under a constant input (the
    measurement); ``warm_start`` is a hint for iterative plants and may be
    ignored. ``jacobian`` is the true sensitivity, only used by monitors that
    are evaluable in simulation. ``reported_jacobian`` is what the controller
    is allowed to use.
    """

    def output(self, u: np.ndarray, warm_start: Optional[np.ndarray] = None) -> np.ndarray: ...

    def jacobian(self, u: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    def reported_jacobian(self, u: np.ndarray, y: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class AffinePlant:
    """``h(u) = H u + y0`` with an optionally biased reported Jacobian."""

    H: np.ndarray
    y0: np.ndarray
    bias: Optional[np.ndarray] = field(default=None)

    def output(self, u, warm_start=None):
        return np.asarray(self.H, float) @ np.asarray(u, float) + np.asarray(self.y0, float)

    def jacobian(self, u, y):
        return np.array(self.H, dtype=float)

    def reported_jacobian(self, u, y):
        J = np.array(self.H, dtype=float)
        return J if self.bias is None else J + np.asarray(self.bias, float)
