import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from feedopt.model import (
    AffinePlant,
    DimensionError,
    JacobianEstimate,
    Polyhedron,
    ProblemSpec,
    check_membership,
    eval_objective,
    metric_norm_sq,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
# squares of these stay clear of underflow
moderate = finite.filter(lambda x: x == 0.0 or abs(x) > 1e-100)


def _spec(lam_u=(0.0, 0.0), lam_y=(0, 0, 0, 1), **kw):
    return ProblemSpec(
        lam_u=lam_u,
        lam_y=lam_y,
        input_set=Polyhedron.box([0, 0], [100, 100]),
        output_set=Polyhedron.box([0] * 4, [100] * 4),
        **kw,
    )


def test_objective_selects_last_output():
    assert eval_objective(_spec(), [0.0, 0.0], [1, 2, 3, 4]) == 4.0


def test_objective_zero_weights():
    spec = _spec(lam_y=(0, 0, 0, 0))
    assert eval_objective(spec, [3.0, 7.0], [1, 2, 3, 4]) == 0.0


def test_objective_zero_output():
    assert eval_objective(_spec(), [5.0, 5.0], [0, 0, 0, 0]) == 0.0


def test_objective_rejects_wrong_length():
    with pytest.raises(DimensionError):
        eval_objective(_spec(), [0.0, 0.0], [1, 2, 3])


def test_max_sense_flips_cost_only():
    spec = _spec(sense="max")
    assert eval_objective(spec, [0, 0], [1, 2, 3, 4]) == 4.0
    assert spec.cost([0, 0], [1, 2, 3, 4]) == -4.0
    gu, gy = spec.cost_gradients()
    np.testing.assert_array_equal(gy, [0, 0, 0, -1])
    np.testing.assert_array_equal(gu, [0, 0])


def test_unknown_sense_rejected():
    with pytest.raises(ValueError):
        _spec(sense="maximize")


@pytest.mark.parametrize("x, expected", [([50.0], [50, 50]), ([100.0], [0, 100]), ([101.0], [-1, 101])])
def test_membership_slacks(x, expected):
    poly = Polyhedron([[1.0], [-1.0]], [100.0, 0.0])
    np.testing.assert_array_equal(check_membership(poly, x, 1e-9), expected)


def test_membership_dimension_mismatch():
    with pytest.raises(DimensionError):
        check_membership(Polyhedron.box([0, 0], [1, 1]), [0.5])


def test_membership_negative_tol():
    with pytest.raises(ValueError):
        check_membership(Polyhedron.box([0], [1]), [0.5], -1.0)


def test_polyhedron_row_count_mismatch():
    with pytest.raises(DimensionError):
        Polyhedron([[1.0, 0.0]], [1.0, 2.0])


def test_polyhedron_zero_row():
    with pytest.raises(ValueError):
        Polyhedron([[1.0, 0.0], [0.0, 0.0]], [1.0, 1.0])


def test_box_layout():
    poly = Polyhedron.box([0, -1], [2, 3])
    np.testing.assert_array_equal(poly.mat, [[1, 0], [0, 1], [-1, 0], [0, -1]])
    np.testing.assert_array_equal(poly.vec, [2, 3, 0, 1])


def test_spec_dimension_checks():
    with pytest.raises(DimensionError):
        ProblemSpec([0, 0, 0], [0, 0, 0, 1], Polyhedron.box([0, 0], [1, 1]),
                    Polyhedron.box([0] * 4, [1] * 4))


def test_metric_check_accepts_identity_and_rejects_indefinite():
    _spec().check_metric([np.zeros(2), np.ones(2)])
    bad = _spec(metric=lambda u: np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        bad.check_metric([np.zeros(2)])
    asym = _spec(metric=lambda u: np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        asym.check_metric([np.zeros(2)])


def test_jacobian_estimate():
    est = JacobianEstimate(np.eye(2), np.eye(2) + 0.1, delta_norm_bound=0.25)
    np.testing.assert_allclose(est.delta, 0.1 * np.ones((2, 2)))
    assert est.within_bound()  # ||0.1 * ones(2,2)||_2 = 0.2
    assert not JacobianEstimate(np.eye(2), 2 * np.eye(2), 0.5).within_bound()
    with pytest.raises(DimensionError):
        JacobianEstimate(np.eye(2), np.eye(3))


def test_affine_plant():
    plant = AffinePlant(np.array([[1.0, 2.0]]), np.array([3.0]), bias=np.array([[0.5, 0.0]]))
    np.testing.assert_allclose(plant.output(np.array([1.0, 1.0])), [6.0])
    np.testing.assert_allclose(plant.reported_jacobian(None, None) - plant.jacobian(None, None),
                               [[0.5, 0.0]])


@given(arrays(float, 3, elements=moderate), arrays(float, (3, 3), elements=finite))
def test_metric_norm_positive(v, B):
    G = B @ B.T + np.eye(3)
    val = metric_norm_sq(v, G)
    if np.any(v != 0):
        assert val > 0
    assert metric_norm_sq(v, np.eye(3)) == pytest.approx(float(v @ v))


@settings(max_examples=200)
@given(arrays(float, (4, 2), elements=finite), arrays(float, 4, elements=finite),
       arrays(float, 2, elements=finite))
def test_membership_matches_direct_evaluation(A, b, x):
    A[np.all(A == 0, axis=1), 0] = 1.0
    poly = Polyhedron(A, b)
    slack = check_membership(poly, x)
    assert np.array_equal(slack >= 0, A @ x <= b)
