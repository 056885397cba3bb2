"""Integral control barrier functions: safety filters for dynamically defined controllers."""

from .core import (
    AffinePlantDynamics,
    AugmentedState,
    ClassK,
    EvaluationError,
    PlantDynamics,
    ReferenceSignal,
    validate_class_k,
)
from .integrator import ClosedLoopField, IntegrationError, SimulationHalted, Trajectory, rk4_step, simulate
from .barrier import BarrierFunction, PDData, StateBarrier, compute_d, compute_p
from .minnorm import HalfspaceProblem, QPSolution, RelativeDegreeError, minnorm_multi, minnorm_single
from .controllers import DynamicController, FilterDiagnostics, Predictor, QPInfeasible

__all__ = [
    "AffinePlantDynamics", "AugmentedState", "ClassK", "EvaluationError", "PlantDynamics",
    "ReferenceSignal", "validate_class_k", "ClosedLoopField", "IntegrationError",
    "SimulationHalted", "Trajectory", "rk4_step", "simulate", "BarrierFunction", "PDData",
    "StateBarrier", "compute_d", "compute_p", "HalfspaceProblem", "QPSolution",
    "RelativeDegreeError", "minnorm_multi", "minnorm_single", "DynamicController",
    "FilterDiagnostics", "Predictor", "QPInfeasible",
]
