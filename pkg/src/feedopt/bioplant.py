"""Continuous-perfusion bioreactor used as the steady-state plant.

External metabolite concentrations ``c = [s1, s2, p1, p2]`` settle where the
mass balance

    0 = N * A_ext @ E @ eta(s1, s2) - F * c + F2 @ S_in

holds. ``eta`` are elementary-flux-mode activities with Monod kinetics and
substrate inhibition; they only depend on the two substrates. The plant input
is the feed composition ``S_in`` and the measured output is ``c``.

Differentiating the balance gives the input-output sensitivity

    dh/dS_in = [F * I - N * A_ext @ E @ d(eta)/dc]^{-1} @ F2

The leading minus sign matters; it is checked against finite differences of
the Newton solve in the test suite.
"""

from __future__ import annotations

import json
import math
from operator import mul
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .model import Polyhedron, ProblemSpec

STEADY_STATE_TOL = 1e-10
KINETIC_PARAMS = ("eta_max", "k_a1", "k_i1", "k_a2", "k_i2")


class PlantError(RuntimeError):
    pass


class NewtonDivergence(PlantError):
    pass


class NegativeSteadyState(PlantError):
    pass


class SingularSystemMatrix(PlantError):
    pass


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MetabolicNetwork:
    """Stoichiometry and perfusion parameters.

    ``A_ext`` maps reaction fluxes to external metabolites and ``E`` maps
    mode activities to fluxes, so ``A_ext @ E`` has one column per mode. The
    first ``n_substrates`` external metabolites are fed.
    """

    A_ext: np.ndarray
    E: np.ndarray
    N: float = 2.15
    F: float = 0.5
    n_substrates: int = 2
    NAE: np.ndarray = field(init=False, repr=False, compare=False)
    F1: np.ndarray = field(init=False, repr=False, compare=False)
    F2: np.ndarray = field(init=False, repr=False, compare=False)
    sub_rows: tuple = field(init=False, repr=False, compare=False)
    prod_rows: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        A = _frozen(self.A_ext)
        E = _frozen(self.E)
        if A.ndim != 2 or E.ndim != 2 or A.shape[1] != E.shape[0]:
            raise ValueError(f"A_ext {A.shape} and E {E.shape} are not conformable")
        if not self.F > 0:
            raise ValueError("flow rate F must be positive")
        n = A.shape[0]
        if not 0 < self.n_substrates <= n:
            raise ValueError("n_substrates out of range")
        object.__setattr__(self, "A_ext", A)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "NAE", _frozen(self.N * (A @ E)))
        object.__setattr__(self, "F1", _frozen(self.F * np.eye(n)))
        F2 = np.zeros((n, self.n_substrates))
        F2[np.arange(self.n_substrates), np.arange(self.n_substrates)] = self.F
        object.__setattr__(self, "F2", _frozen(F2))
        if self.n_substrates != 2:
            raise ValueError("the Monod rate law is defined for exactly two substrates")
        rows = tuple(tuple(float(v) for v in r) for r in self.NAE)
        object.__setattr__(self, "sub_rows", rows[:2])
        object.__setattr__(self, "prod_rows", rows[2:])

    @property
    def n_external(self) -> int:
        return self.A_ext.shape[0]

    @property
    def n_modes(self) -> int:
        return self.E.shape[1]

    def with_modes(self, keep: Sequence[int]) -> "MetabolicNetwork":
        """Network restricted to the given (0-based) EFM columns."""
        return MetabolicNetwork(self.A_ext, self.E[:, list(keep)], self.N, self.F, self.n_substrates)


@dataclass(frozen=True)
class MonodKinetics:
    """Per-mode Monod parameters, one row ``(eta_max, k_a1, k_i1, k_a2, k_i2)`` per mode."""

    params: np.ndarray
    rows: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        P = _frozen(np.array(self.params, dtype=float, ndmin=2))
        if P.shape[1] != len(KINETIC_PARAMS):
            raise ValueError(f"expected {len(KINETIC_PARAMS)} parameters per mode, got {P.shape[1]}")
        if np.any(P < 0) or not np.all(np.isfinite(P)):
            raise ValueError("kinetic parameters must be finite and nonnegative")
        object.__setattr__(self, "params", P)
        object.__setattr__(self, "rows", tuple(tuple(float(v) for v in r) for r in P))

    @property
    def n_modes(self) -> int:
        return self.params.shape[0]

    def with_modes(self, keep: Sequence[int]) -> "MonodKinetics":
        return MonodKinetics(self.params[list(keep)])

    def perturbed(self, rng: np.random.Generator, spread: float = 0.5) -> "MonodKinetics":
        """Every parameter drawn independently from ``U[(1-spread)*p, (1+spread)*p]``."""
        factors = rng.uniform(1.0 - spread, 1.0 + spread, size=self.params.shape)
        return MonodKinetics(self.params * factors)


def _monod(P, s1: float, s2: float, grad: bool = False):
    """Mode rates (and their substrate derivatives) as plain lists.

    ``P`` is a sequence of ``(eta_max, k_a1, k_i1, k_a2, k_i2)`` rows. Scalar
    arithmetic beats numpy for four modes, and this runs several times per
    controller step.
    """
    eta, d1, d2 = [], [], []
    for em, ka1, ki1, ka2, ki2 in P:
        t1 = s1 + ka1
        t2 = s2 + ka2
        a1 = 1.0 / t1 if t1 > 0.0 else 0.0
        a2 = 1.0 / t2 if t2 > 0.0 else 0.0
        b1 = 1.0 / (1.0 + ki1 * s1)
        b2 = 1.0 / (1.0 + ki2 * s2)
        f1 = s1 * a1 * b1
        f2 = s2 * a2 * b2
        eta.append(em * f1 * f2)
        if grad:
            # d/ds [s/(s+ka) / (1+ki s)] = (ka/(s+ka) - ki s/(1+ki s)) / ((s+ka)(1+ki s))
            d1.append(em * f2 * a1 * b1 * (ka1 * a1 - s1 * ki1 * b1))
            d2.append(em * f1 * a2 * b2 * (ka2 * a2 - s2 * ki2 * b2))
    if grad:
        return eta, d1, d2
    return eta


def _check_conc(s1, s2):
    if s1 < 0 or s2 < 0:
        raise ValueError(f"negative substrate concentration ({s1}, {s2})")


def eval_eta(kin: MonodKinetics, s1: float, s2: float) -> np.ndarray:
    _check_conc(s1, s2)
    return np.array(_monod(kin.rows, float(s1), float(s2)))


def grad_eta(kin: MonodKinetics, c_ext) -> np.ndarray:
    """``d(eta)/dc`` with one row per mode; only the two substrate columns are nonzero."""
    c = np.asarray(c_ext, dtype=float)
    _check_conc(c[0], c[1])
    _, d1, d2 = _monod(kin.rows, float(c[0]), float(c[1]), grad=True)
    out = np.zeros((kin.n_modes, c.shape[0]))
    out[:, 0] = d1
    out[:, 1] = d2
    return out


def _feed(net: MetabolicNetwork, S_in) -> np.ndarray:
    S = np.asarray(S_in, dtype=float)
    if S.shape != (net.n_substrates,):
        raise ValueError(f"S_in must have length {net.n_substrates}")
    if min(S.tolist()) < 0.0:
        if min(S.tolist()) < -1e-12:
            raise ValueError("feed concentrations must be nonnegative")
        S = np.maximum(S, 0.0)  # rounding at the lower input bound
    return S


def mass_balance_residual(net: MetabolicNetwork, kin: MonodKinetics, c, S_in) -> np.ndarray:
    """Full mass-balance residual, evaluated densely."""
    c = np.asarray(c, dtype=float)
    return net.NAE @ eval_eta(kin, c[0], c[1]) - net.F1 @ c + net.F2 @ _feed(net, S_in)


def _dot(row, v):
    return sum(map(mul, row, v))


def _newton(net, P, S, s1, s2, tol, max_iter):
    """Damped Newton on the two substrate balances.

    The rates do not depend on the products, so the product balances are
    solved exactly afterwards. Steps are halved (up to 30 times) until the
    residual max-norm decreases with nonnegative substrates. Every iterate
    carries its rate derivatives, so the ones returned belong to the root.

    Returns ``(s1, s2, iterations, eta, d_eta/ds1, d_eta/ds2)``.
    """
    rows, F = net.sub_rows, net.F
    ra, rb = rows
    f1, f2 = (F * v for v in S.tolist())
    eta, d1, d2 = _monod(P, s1, s2, grad=True)
    r1 = _dot(ra, eta) - F * s1 + f1
    r2 = _dot(rb, eta) - F * s2 + f2
    rn = max(abs(r1), abs(r2))
    for it in range(max_iter + 1):
        if rn <= tol:
            return s1, s2, it, eta, d1, d2
        if it == max_iter:
            break
        j11 = _dot(ra, d1) - F
        j12 = _dot(ra, d2)
        j21 = _dot(rb, d1)
        j22 = _dot(rb, d2) - F
        det = j11 * j22 - j12 * j21
        if det == 0.0 or not math.isfinite(det):
            raise NewtonDivergence("singular Newton matrix")
        ds1 = (-r1 * j22 + r2 * j12) / det
        ds2 = (-r2 * j11 + r1 * j21) / det
        t = 1.0
        for _ in range(31):
            n1, n2 = s1 + t * ds1, s2 + t * ds2
            if n1 >= 0.0 and n2 >= 0.0:
                e, g1, g2 = _monod(P, n1, n2, grad=True)
                q1 = _dot(ra, e) - F * n1 + f1
                q2 = _dot(rb, e) - F * n2 + f2
                qn = max(abs(q1), abs(q2))
                if qn < rn:
                    break
            t *= 0.5
        else:
            raise NewtonDivergence(f"line search failed at residual {rn:.3e}")
        s1, s2, r1, r2, rn, eta, d1, d2 = n1, n2, q1, q2, qn, e, g1, g2
    raise NewtonDivergence(f"no convergence in {max_iter} iterations (residual {rn:.3e})")


def _assemble(net, s1, s2, eta):
    F = net.F
    return np.array([s1, s2] + [_dot(row, eta) / F for row in net.prod_rows])


def solve_steady_state(net: MetabolicNetwork, kin: MonodKinetics, S_in,
                       warm_start=None, tol: float = STEADY_STATE_TOL, max_iter: int = 60):
    """Damped Newton on the mass balance; returns ``(c_ext, newton_iterations)``.

    Without a warm start the iteration begins at the kinetics-free solution
    ``c = F1^{-1} F2 S_in``. A root with negative entries is rejected; the
    solve is then restarted from the state reached by time integration.
    """
    c, it, _ = _solve(net, kin, S_in, warm_start, tol, max_iter)
    return c, it


def _solve(net, kin, S_in, warm_start, tol, max_iter):
    S = _feed(net, S_in)
    P = kin.rows
    if warm_start is None:
        x1, x2 = float(S[0]), float(S[1])
    else:
        x1, x2 = max(float(warm_start[0]), 0.0), max(float(warm_start[1]), 0.0)
    try:
        s1, s2, it, eta, d1, d2 = _newton(net, P, S, x1, x2, tol, max_iter)
    except NewtonDivergence:
        if warm_start is None:
            raise
        s1, s2, it, eta, d1, d2 = _newton(net, P, S, float(S[0]), float(S[1]), tol, max_iter)
    c = _assemble(net, s1, s2, eta)
    if c.min() < -1e-12:
        c_ode = integrate_to_steady_state(net, kin, S)
        s1, s2, it2, eta, d1, d2 = _newton(net, P, S, max(c_ode[0], 0.0), max(c_ode[1], 0.0),
                                           tol, max_iter)
        it += it2
        c = _assemble(net, s1, s2, eta)
        if c.min() < -1e-12:
            raise NegativeSteadyState(f"steady state has negative entries: {c}")
    return c, it, (d1, d2)


def steady_state(net: MetabolicNetwork, kin: MonodKinetics, S_in, warm_start=None,
                 tol: float = STEADY_STATE_TOL) -> np.ndarray:
    return solve_steady_state(net, kin, S_in, warm_start, tol)[0]


def integrate_to_steady_state(net: MetabolicNetwork, kin: MonodKinetics, S_in, c0=None,
                              t_end: float = 400.0, rtol: float = 1e-12,
                              atol: float = 1e-14) -> np.ndarray:
    """Reference steady state from explicit (DOP853) integration of the reactor ODE.

    Starts from an empty reactor unless ``c0`` is given. Only used to check
    the Newton solve.
    """
    feed = net.F2 @ _feed(net, S_in)
    P, NAE, F = kin.rows, net.NAE, net.F

    def rhs(t, c):
        eta = np.array(_monod(P, max(c[0], 0.0), max(c[1], 0.0)))
        return NAE @ eta - F * c + feed

    y0 = np.zeros(net.n_external) if c0 is None else np.asarray(c0, dtype=float)
    sol = solve_ivp(rhs, (0.0, t_end), y0, method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise PlantError(f"integration failed: {sol.message}")
    return sol.y[:, -1]


def _sensitivity(net: MetabolicNetwork, P, c) -> np.ndarray:
    """``[F*I - NAE @ d(eta)/dc]^{-1} @ F2`` using the block structure.

    ``d(eta)/dc`` has nonzero columns only for the substrates, so the
    bracketed matrix is block lower triangular: invert the 2x2 substrate
    block, then the product rows follow by substitution.
    """
    _, d1, d2 = _monod(P, float(c[0]), float(c[1]), grad=True)
    return _sensitivity_from_rates(net, d1, d2)


def _sensitivity_from_rates(net, d1, d2) -> np.ndarray:
    F = net.F
    r0, r1 = net.sub_rows
    m11 = F - _dot(r0, d1)
    m12 = -_dot(r0, d2)
    m21 = -_dot(r1, d1)
    m22 = F - _dot(r1, d2)
    det = m11 * m22 - m12 * m21
    scale = max(abs(m11 * m22), abs(m12 * m21), 1e-300)
    if not math.isfinite(det) or abs(det) <= 1e-14 * scale:
        raise SingularSystemMatrix("steady-state system matrix is singular")
    k = F / det
    t11, t12, t21, t22 = m22 * k, -m12 * k, -m21 * k, m11 * k
    out = [[t11, t12], [t21, t22]]
    for row in net.prod_rows:
        kp1 = _dot(row, d1) / F
        kp2 = _dot(row, d2) / F
        out.append([kp1 * t11 + kp2 * t21, kp1 * t12 + kp2 * t22])
    return np.array(out)


def jacobian(net: MetabolicNetwork, kin: MonodKinetics, S_in, c=None) -> np.ndarray:
    """Sensitivity of the steady state to the feed, ``d c_ext / d S_in``.

    ``c`` may pass an already computed steady state at ``S_in``.
    """
    if c is None:
        c = steady_state(net, kin, S_in)
    c = np.asarray(c, dtype=float)
    _check_conc(c[0], c[1])
    return _sensitivity(net, kin.rows, c)


@dataclass(frozen=True)
class UncertaintyScenario:
    """How the controller's kinetic model differs from the true plant.

    ``kind`` is ``"nominal"``, ``"perturbed"`` (all parameters redrawn from a
    seeded uniform distribution of relative half-width ``spread``) or
    ``"dropped"`` (the 1-based ``modes`` are missing from the model).
    """

    kind: str = "nominal"
    seed: Optional[int] = None
    modes: tuple[int, ...] = ()
    spread: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(int(j) for j in self.modes))
        if self.kind not in ("nominal", "perturbed", "dropped"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "perturbed":
            if self.seed is None:
                raise ValueError("perturbed scenario needs a seed")
            if not 0 <= self.spread < 1:
                raise ValueError("spread must lie in [0, 1)")
        if self.kind == "dropped" and not self.modes:
            raise ValueError("dropped scenario needs at least one mode")
        if self.kind != "dropped" and self.modes:
            raise ValueError("modes only apply to dropped scenarios")

    @property
    def label(self) -> str:
        if self.kind == "perturbed":
            return f"perturbed-s{self.seed}"
        if self.kind == "dropped":
            return "dropped-" + "-".join(map(str, self.modes))
        return "nominal"

    def model(self, net: MetabolicNetwork, kin: MonodKinetics):
        """The ``(network, kinetics)`` pair the controller believes in."""
        if self.kind == "perturbed":
            return net, kin.perturbed(np.random.default_rng(self.seed), self.spread)
        if self.kind == "dropped":
            n = kin.n_modes
            if any(not 1 <= j <= n for j in self.modes):
                raise ValueError(f"dropped modes {self.modes} outside 1..{n}")
            keep = [j for j in range(n) if j + 1 not in self.modes]
            return net.with_modes(keep), kin.with_modes(keep)
        return net, kin


def reported_jacobian(net: MetabolicNetwork, kin_true: MonodKinetics,
                      scenario: UncertaintyScenario, S_in, c=None):
    """Model-based sensitivity evaluated at the measured steady state.

    Returns ``(reported, delta)`` with ``delta = reported - true``.
    """
    if c is None:
        c = steady_state(net, kin_true, S_in)
    c = np.asarray(c, dtype=float)
    true = jacobian(net, kin_true, S_in, c)
    net_m, kin_m = scenario.model(net, kin_true)
    rep = _sensitivity(net_m, kin_m.rows, c)
    return rep, rep - true


def box_grid(lower, upper, n: int) -> np.ndarray:
    """``n x n`` tensor grid over a 2-D box, as an ``(n*n, 2)`` array."""
    if n < 2:
        raise ValueError("grid needs at least 2 points per axis")
    g1 = np.linspace(lower[0], upper[0], n)
    g2 = np.linspace(lower[1], upper[1], n)
    return np.array([(a, b) for a in g1 for b in g2])


def estimate_delta_bound(net: MetabolicNetwork, kin_true: MonodKinetics,
                         scenario: UncertaintyScenario, grid: Iterable) -> float:
    """Largest spectral norm of ``delta`` over ``grid``.

    A sampled maximum, so it can only under-estimate the supremum over the
    input set.
    """
    pts = np.asarray(list(grid), dtype=float)
    if pts.size == 0:
        raise ValueError("empty grid")
    if scenario.kind == "nominal":
        return 0.0
    net_m, kin_m = scenario.model(net, kin_true)
    best = 0.0
    c = None
    for S in pts:
        c = steady_state(net, kin_true, S, warm_start=c)
        delta = _sensitivity(net_m, kin_m.rows, c) - _sensitivity(net, kin_true.rows, c)
        best = max(best, float(np.linalg.norm(delta, 2)))
    return best


class BioPlant:
    """Simulated reactor: exact steady states, model-based reported Jacobian."""

    def __init__(self, net: MetabolicNetwork, kin: MonodKinetics,
                 scenario: UncertaintyScenario = UncertaintyScenario()):
        self.net = net
        self.kin = kin
        self.scenario = scenario
        self.model_net, self.model_kin = scenario.model(net, kin)
        self.last_newton_iterations = 0
        self._last = None

    def output(self, u, warm_start=None):
        c, it, rates = _solve(self.net, self.kin, u, warm_start, STEADY_STATE_TOL, 60)
        self.last_newton_iterations = it
        self._last = (c, rates)
        return c

    def jacobian(self, u, y):
        # the rate derivatives at the last computed steady state are reused
        if self._last is not None and y is self._last[0]:
            return _sensitivity_from_rates(self.net, *self._last[1])
        return _sensitivity(self.net, self.kin.rows, np.asarray(y, dtype=float))

    def reported_jacobian(self, u, y):
        if self.scenario.kind == "nominal":
            return self.jacobian(u, y)
        return _sensitivity(self.model_net, self.model_kin.rows, np.asarray(y, dtype=float))

    def sensitivities(self, u, y):
        """``(true, reported)`` Jacobians at the measured output ``y``."""
        true = self.jacobian(u, y)
        if self.scenario.kind == "nominal":
            return true, true
        return true, self.reported_jacobian(u, y)


@dataclass(frozen=True)
class Dataset:
    net: MetabolicNetwork
    kin: MonodKinetics
    spec: ProblemSpec
    input_lower: np.ndarray
    input_upper: np.ndarray


def load_dataset(path=None) -> Dataset:
    """Read a network/kinetics file; ``None`` loads the packaged default data."""
    if path is None:
        text = resources.files("feedopt").joinpath("data/supplement.json").read_text()
    else:
        text = Path(path).read_text()
    raw = json.loads(text)
    for key in ("A_ext", "E", "N", "F", "kinetics"):
        if key not in raw:
            raise ValueError(f"dataset is missing {key!r}")
    net = MetabolicNetwork(raw["A_ext"], raw["E"], float(raw["N"]), float(raw["F"]),
                           int(raw.get("n_substrates", 2)))
    kin = MonodKinetics(raw["kinetics"])
    if kin.n_modes != net.n_modes:
        raise ValueError(f"{kin.n_modes} kinetic rows for {net.n_modes} flux modes")
    ib = raw.get("input_bounds", {"lower": [0.0] * net.n_substrates,
                                  "upper": [100.0] * net.n_substrates})
    ob = raw.get("output_bounds", {"lower": [0.0] * net.n_external,
                                   "upper": [100.0] * net.n_external})
    obj = raw.get("objective", {})
    lam_y = obj.get("lam_y", [0.0] * (net.n_external - 1) + [1.0])
    spec = ProblemSpec(
        lam_u=obj.get("lam_u", [0.0] * net.n_substrates),
        lam_y=lam_y,
        input_set=Polyhedron.box(ib["lower"], ib["upper"]),
        output_set=Polyhedron.box(ob["lower"], ob["upper"]),
        sense=obj.get("sense", "max"),
    )
    return Dataset(net, kin, spec, np.array(ib["lower"], float), np.array(ib["upper"], float))
