"""Feedback optimization of steady-state plants under Jacobian uncertainty."""

from .model import AffinePlant, JacobianEstimate, PlantModel, Polyhedron, ProblemSpec, check_membership, eval_objective
from .qp import QpInstance, QpSolution, build_instance, kkt_residual, solve
from .controller import (
    ControllerConfig,
    ControllerState,
    RobustBoundInputs,
    Trajectory,
    TrajectoryRecord,
    compute_alpha_star,
    estimate_lipschitz_constants,
    lyapunov_value,
    run,
    step,
    violation_bound_check,
)
from .bioplant import BioPlant, MetabolicNetwork, MonodKinetics, UncertaintyScenario, load_dataset
from .harness import ExperimentConfig, reference_optimum, run_suite

__version__ = "0.1.0"
