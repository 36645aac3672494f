import json
import math
from dataclasses import replace

import numpy as np
import pytest

from feedopt import qp
from feedopt.bioplant import BioPlant, UncertaintyScenario, steady_state
from feedopt.controller import (
    ControllerConfig,
    RobustBoundInputs,
    compute_alpha_star,
    estimate_lipschitz_constants,
    first_order_residual,
    initial_state,
    lyapunov_value,
    run,
    step,
    violation_bound_check,
)
from feedopt.model import AffinePlant, Polyhedron, ProblemSpec
from conftest import GOLDEN
from oracles import ode_steady_state, qp_lattice


def _bounds(**kw):
    base = dict(lambda_min_G=1.0, M_delta=0.0, M_nabla=3.0, L=2.0, l=(0.0, 0.0),
                C_row_norms=(1.0, 1.0), xi=0.0)
    base.update(kw)
    return RobustBoundInputs(**base)


# ---------------------------------------------------------------- alpha*

def test_alpha_star_nominal_reduces_to_lambda_min():
    assert compute_alpha_star(_bounds(lambda_min_G=0.7)) == pytest.approx(0.7)


def test_alpha_star_infinite_without_terms():
    assert compute_alpha_star(_bounds(L=0.0, M_nabla=0.0)) == math.inf


def test_alpha_star_conservative_grouping():
    b = _bounds(M_delta=0.5, M_nabla=2.0, L=1.0, l=(4.0, 2.0), C_row_norms=(1.0, 3.0), xi=2.0)
    # 0.5*2 + 1 + [2*4/2 + 2*1*0.5] + [2*2/2 + 2*3*0.5] = 1 + 1 + 5 + 5
    assert compute_alpha_star(b) == pytest.approx(2.0 / 12.0)


@pytest.mark.parametrize("field", ["M_delta", "L", "xi", "M_nabla"])
def test_alpha_star_rejects_negative_inputs(field):
    with pytest.raises(ValueError):
        _bounds(**{field: -1.0})


def test_alpha_star_rejects_nonpositive_curvature():
    with pytest.raises(ValueError):
        _bounds(lambda_min_G=0.0)
    with pytest.raises(ValueError):
        _bounds(L=math.inf)


# ---------------------------------------------------------------- small affine problems

def _affine_problem(H, y0, upper_y, lam_u=(0.0, 0.0), lam_y=(1.0,), bias=None):
    spec = ProblemSpec(lam_u, lam_y, Polyhedron.box([0, 0], [10, 10]),
                       Polyhedron([[1.0]], [upper_y]))
    return spec, AffinePlant(np.array(H, float), np.array(y0, float), bias)


def test_lyapunov_without_violation_is_cost():
    spec, plant = _affine_problem([[1.0, 1.0]], [0.0], 5.0)
    u = np.array([1.0, 2.0])
    assert lyapunov_value(spec, plant, u, 10.0) == pytest.approx(spec.cost(u, plant.output(u)))


def test_lyapunov_with_zero_weight_is_cost():
    spec, plant = _affine_problem([[1.0, 1.0]], [0.0], 1.0)
    u = np.array([3.0, 3.0])
    assert lyapunov_value(spec, plant, u, 0.0) == pytest.approx(6.0)


def test_lyapunov_adds_weighted_violation():
    spec, plant = _affine_problem([[1.0, 1.0]], [0.0], 1.0)
    u = np.array([3.0, 3.0])  # y = 6 violates y <= 1 by 5
    assert lyapunov_value(spec, plant, u, 0.3) == pytest.approx(6.0 + 0.3 * 5.0)


def test_zero_step_is_fixed_point():
    spec, plant = _affine_problem([[1.0, 0.0]], [0.0], 5.0, lam_y=(0.0,))
    st = initial_state(plant, [2.0, 2.0])
    nxt, rec = step(spec, plant, st, ControllerConfig())
    np.testing.assert_array_equal(rec.w, 0.0)
    np.testing.assert_array_equal(nxt.u, st.u)
    np.testing.assert_array_equal(nxt.y, st.y)
    tr = run(spec, plant, [2.0, 2.0], ControllerConfig())
    assert len(tr) == 1 and tr.converged


def test_converges_to_active_output_constraint():
    # maximize u1 + u2 subject to y = u1 + 2 u2 <= 4 and the box; optimum u = (4, 0)
    spec = ProblemSpec([1.0, 1.0], [0.0], Polyhedron.box([0, 0], [10, 10]),
                       Polyhedron([[1.0]], [4.0]), sense="max")
    plant = AffinePlant(np.array([[1.0, 2.0]]), np.array([0.0]))
    tr = run(spec, plant, [1.0, 1.0], ControllerConfig(alpha=0.05, convergence_tol=1e-12))
    assert tr.converged
    np.testing.assert_allclose(tr.final_state.u, [4.0, 0.0], atol=1e-9)
    fin = tr.final
    assert fin.first_order_residual <= 1e-9
    # the output constraint carries the multiplier of the steady-state problem
    assert fin.mu[0] == pytest.approx(1.0, abs=1e-9)
    assert tr.xi == pytest.approx(2.0 * tr.max_mu())
    assert np.all(tr.lyapunov_increments() <= 1e-12)


def test_first_order_residual_direct_evaluation():
    spec, plant = _affine_problem([[1.0, 0.0]], [0.0], 5.0, lam_u=(1.0, 0.0), lam_y=(0.0,))
    # at u = (0, 3) the lower bound on u1 is active with multiplier 1
    J = plant.jacobian(None, None)
    y = plant.output(np.array([0.0, 3.0]))
    assert first_order_residual(spec, [0.0, 3.0], y, J, np.array([0, 0, 1.0, 0]), np.zeros(1)) == 0.0
    assert first_order_residual(spec, [0.0, 3.0], y, J, np.zeros(4), np.zeros(1)) == 1.0


def test_given_xi_is_kept():
    spec, plant = _affine_problem([[1.0, 0.0]], [0.0], 5.0)
    tr = run(spec, plant, [2.0, 2.0], ControllerConfig(lyapunov_xi=3.0, max_steps=5))
    assert tr.xi == 3.0
    r = tr.records[0]
    assert r.lyapunov == pytest.approx(r.cost + 3.0 * r.violation_sum)


def test_max_steps_reported_not_raised():
    spec, plant = _affine_problem([[1.0, 1.0]], [0.0], 50.0, lam_y=(-1.0,))
    tr = run(spec, plant, [1.0, 1.0], ControllerConfig(alpha=1e-3, max_steps=10))
    assert not tr.converged
    assert len(tr) == 10


def test_infeasible_linearization_raises_with_location():
    # the output cannot move (H = 0) yet it violates its bound
    spec, plant = _affine_problem([[0.0, 0.0]], [2.0], 1.0)
    with pytest.raises(qp.QpInfeasible) as err:
        run(spec, plant, [1.0, 1.0], ControllerConfig())
    assert err.value.step == 0
    np.testing.assert_array_equal(err.value.u, [1.0, 1.0])
    assert err.value.slacks.size == 5


def test_start_outside_input_set_rejected():
    spec, plant = _affine_problem([[1.0, 0.0]], [0.0], 5.0)
    with pytest.raises(ValueError):
        run(spec, plant, [-1.0, 1.0], ControllerConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(alpha=0.0)
    with pytest.raises(ValueError):
        ControllerConfig(convergence_tol=0.0)
    with pytest.raises(ValueError):
        ControllerConfig(lyapunov_xi=-1.0)
    with pytest.raises(ValueError):
        ControllerConfig(max_steps=0)


# ---------------------------------------------------------------- violation bound

def test_bound_nominal_linear_reduces_to_feasibility():
    spec, plant = _affine_problem([[1.0, 1.0]], [0.0], 3.0, lam_y=(-1.0,))
    cfg = ControllerConfig(alpha=0.5, lipschitz=(0.0,))
    tr = run(spec, plant, [0.5, 0.5], replace(cfg, max_steps=20))
    for r in tr:
        ok = violation_bound_check(r, np.zeros((1, 2)), (0.0,), cfg.alpha, spec.output_set)
        assert ok[0] == (r.y_next[0] <= 3.0 + 1e-12)
        assert ok[0]


def test_bound_with_zero_step_is_feasibility():
    spec, plant = _affine_problem([[1.0, 0.0]], [0.0], 5.0, lam_y=(0.0,))
    _, rec = step(spec, plant, initial_state(plant, [2.0, 2.0]), ControllerConfig(lipschitz=(0.0,)))
    assert violation_bound_check(rec, np.ones((1, 2)), (0.0,), 0.1, spec.output_set)[0]


def test_bound_detects_biased_model():
    # reported slope 0 while the true slope is 1: the model thinks the output cannot move
    spec, plant = _affine_problem([[1.0, 0.0]], [0.0], 1.0, lam_u=(-1.0, 0.0), lam_y=(0.0,),
                                  bias=[[-1.0, 0.0]])
    cfg = ControllerConfig(alpha=1.0, lipschitz=(0.0,), max_steps=3)
    st = initial_state(plant, [0.5, 0.0])
    _, rec = step(spec, plant, st, cfg)
    assert rec.y_next[0] > 1.0  # the true output overshoots
    assert violation_bound_check(rec, [[-1.0, 0.0]], (0.0,), 1.0, spec.output_set)[0]
    assert not violation_bound_check(rec, [[0.0, 0.0]], (0.0,), 1.0, spec.output_set)[0]


# ---------------------------------------------------------------- Lipschitz estimates

def test_lipschitz_zero_for_affine_plant():
    spec, plant = _affine_problem([[1.0, -2.0]], [0.5], 5.0)
    L, l = estimate_lipschitz_constants(plant, spec, n_samples=20, seed=1)
    assert L <= 1e-9
    assert np.all(l <= 1e-9)


def test_lipschitz_bioplant_golden(dataset):
    golden = json.loads((GOLDEN / "lipschitz_uniform.json").read_text())
    L, l = estimate_lipschitz_constants(BioPlant(dataset.net, dataset.kin), dataset.spec,
                                        n_samples=golden["n_samples"], seed=golden["seed"])
    assert L == pytest.approx(golden["L"], rel=1e-12)
    np.testing.assert_allclose(l, golden["l"], rtol=1e-12)


def test_lipschitz_pairs_shape_checked(dataset):
    with pytest.raises(Exception):
        estimate_lipschitz_constants(BioPlant(dataset.net, dataset.kin), dataset.spec,
                                     pairs=np.zeros((3, 2)))


# ---------------------------------------------------------------- bioplant steps

def test_one_step_matches_oracles(dataset):
    plant = BioPlant(dataset.net, dataset.kin)
    st = initial_state(plant, [50.0, 50.0])
    cfg = ControllerConfig()
    nxt, rec = step(dataset.spec, plant, st, cfg)
    inst = qp.build_instance(dataset.spec, st.u, st.y, plant.jacobian(st.u, st.y), cfg.alpha)
    radius = 2.0 * float(np.abs(inst.g).max()) + 1e-3
    w_lat, h = qp_lattice(inst.G, inst.g, inst.ineq_mat, inst.ineq_vec, np.zeros(2), radius, 801)
    np.testing.assert_allclose(nxt.u, st.u + cfg.alpha * w_lat, atol=cfg.alpha * h)
    c_ode, _ = ode_steady_state(dataset.net.NAE, dataset.net.F, nxt.u, dataset.kin.params)
    np.testing.assert_allclose(nxt.y, c_ode, atol=1e-6)
    np.testing.assert_array_equal(rec.y_next, nxt.y)


def test_inputs_stay_in_box(dataset):
    plant = BioPlant(dataset.net, dataset.kin, UncertaintyScenario("dropped", modes=(3,)))
    tr = run(dataset.spec, plant, [1.0, 1.0], ControllerConfig(max_steps=12_000))
    U = np.array([r.u for r in tr])
    assert U.min() >= -1e-9 and U.max() <= 100 + 1e-9


def test_nominal_monitors_along_prefix(dataset):
    plant = BioPlant(dataset.net, dataset.kin)
    tr = run(dataset.spec, plant, [1.0, 1.0], ControllerConfig(max_steps=2000, lipschitz=(1.0,) * 8))
    assert tr.xi == 0.0
    assert np.all(tr.lyapunov_increments() <= 1e-9)
    for r in tr:
        assert np.all(r.violation_bound_lhs <= r.violation_bound_rhs + 1e-12)
        assert r.delta_norm == 0.0
        if r.step % 500 == 0:
            np.testing.assert_allclose(r.y, steady_state(dataset.net, dataset.kin, r.u), atol=1e-10)


def test_runs_are_deterministic(dataset):
    cfg = ControllerConfig(max_steps=500, lipschitz=(1.0,) * 8)
    sc = UncertaintyScenario("perturbed", seed=2)
    a = run(dataset.spec, BioPlant(dataset.net, dataset.kin, sc), [1.0, 1.0], cfg)
    b = run(dataset.spec, BioPlant(dataset.net, dataset.kin, sc), [1.0, 1.0], cfg)
    for ra, rb in zip(a, b):
        assert ra.u.tobytes() == rb.u.tobytes()
        assert ra.y_next.tobytes() == rb.y_next.tobytes()
        assert ra.delta_norm == rb.delta_norm


def test_delta_norm_is_spectral_norm(dataset):
    sc = UncertaintyScenario("dropped", modes=(2,))
    plant = BioPlant(dataset.net, dataset.kin, sc)
    tr = run(dataset.spec, plant, [1.0, 1.0], ControllerConfig(max_steps=3, lipschitz=(1.0,) * 8))
    r = tr.records[-1]
    true, rep = plant.sensitivities(r.u, steady_state(dataset.net, dataset.kin, r.u))
    assert r.delta_norm == pytest.approx(np.linalg.norm(rep - true, 2), rel=1e-9)
