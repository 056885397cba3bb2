"""Dynamically defined controllers ``u' = phi(x, u, t)`` and their safety filters."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .barrier import (
    BarrierFunction,
    StateBarrier,
    extend_state_barrier,
    input_bound_barrier,
    pd_from_values,
    state_barrier_data,
)
from .core import AffinePlantDynamics, ClassK, PlantDynamics, ReferenceSignal
from .integrator import ClosedLoopField, HaltSimulation, Trajectory
from .minnorm import (
    ZERO_NORM,
    RelativeDegreeError,
    minnorm_offset,
    minnorm_single,
    solve_rows,
)

JACOBIAN_FD_STEP = 1e-5
MAX_CONDITION = 1e12

HALT = "halt"
ZERO = "zero"  # continue with v = 0; offers no safety guarantee


class SingularJacobianError(np.linalg.LinAlgError):
    def __init__(self, condition: float):
        self.condition = condition
        super().__init__(f"output Jacobian is singular (condition number {condition:.3g})")


class QPInfeasible(HaltSimulation):
    """The stacked filter program has no solution; raised under the halt policy."""


def _newton_direction(J: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if J.shape == (1, 1):
        if J[0, 0] == 0.0 or not np.isfinite(J[0, 0]):
            raise SingularJacobianError(np.inf)
        return rhs / J[0, 0]
    cond = np.linalg.cond(J)
    if not cond < MAX_CONDITION:
        raise SingularJacobianError(cond)
    return np.linalg.solve(J, rhs)


@dataclass(frozen=True)
class DynamicController:
    """Control law defined by the differential equation ``u' = phi(x, u, t)``."""

    m: int
    phi: Callable[[np.ndarray, np.ndarray, float], np.ndarray]

    def __call__(self, x, u, t) -> np.ndarray:
        return self.phi(x, u, t)


@dataclass(frozen=True)
class Predictor:
    """Predicted output ``g(x, u)`` at the end of the horizon, with optional du-Jacobian."""

    g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_u: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def __call__(self, x, u) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.g(x, u), dtype=float))

    def jacobian(self, x, u) -> np.ndarray:
        if self.jac_u is not None:
            return np.atleast_2d(np.asarray(self.jac_u(x, u), dtype=float))
        u = np.asarray(u, dtype=float)
        cols = []
        probe = u.copy()
        for j in range(u.shape[0]):
            probe[j] = u[j] + JACOBIAN_FD_STEP
            # copies guard against g returning (a view of) its argument
            hi = self(x, probe).copy()
            probe[j] = u[j] - JACOBIAN_FD_STEP
            lo = self(x, probe).copy()
            probe[j] = u[j]
            cols.append((hi - lo) / (2.0 * JACOBIAN_FD_STEP))
        return np.column_stack(cols)


@dataclass
class FilterDiagnostics:
    v_star: np.ndarray
    d_values: Tuple[float, ...]
    feasible: bool = True
    active: Tuple[bool, ...] = ()


def closed_loop(plant: PlantDynamics, controller) -> ClosedLoopField:
    """Augmented field ``(x', u') = (f(x, u), controller(x, u, t))``."""
    f = plant.f
    return ClosedLoopField(plant.n, plant.m, lambda x, u, t: (f(x, u), controller(x, u, t)))


def memoryless_nr(g, jac, r: ReferenceSignal) -> DynamicController:
    """Newton-Raphson flow ``u' = (dg/du)^-1 (r(t) - g(u))`` for a static plant ``y = g(u)``."""

    def phi(x, u, t):
        J = np.atleast_2d(np.asarray(jac(u), dtype=float))
        return _newton_direction(J, r(t) - np.atleast_1d(g(u)))

    return DynamicController(r.m, phi)


def nr_flow_controller(pred: Predictor, r: ReferenceSignal, alpha: float) -> DynamicController:
    """Tracking law ``u' = alpha (dg/du)^-1 (r(t) - g(x, u))`` on the predicted output."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")

    def phi(x, u, t):
        return alpha * _newton_direction(pred.jacobian(x, u), r(t) - pred(x, u))

    return DynamicController(r.m, phi)


def feedforward_controller(k, grad_k, plant: PlantDynamics, alpha: float) -> DynamicController:
    """``u' = dk/dx f(x, u) + (alpha / 2)(k(x) - u)``, driving ``u`` onto ``k(x)``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")

    def phi(x, u, t):
        return np.atleast_2d(grad_k(x)) @ plant.f(x, u) + 0.5 * alpha * (np.atleast_1d(k(x)) - u)

    return DynamicController(plant.m, phi)


@dataclass(frozen=True)
class ICBFFilter:
    """``u' = phi + v*`` with the closed-form min-norm correction for one barrier."""

    phi: Callable
    barrier: BarrierFunction
    plant: PlantDynamics

    @property
    def m(self) -> int:
        return self.plant.m

    def evaluate(self, x, u, t, xdot=None) -> Tuple[np.ndarray, FilterDiagnostics]:
        nominal = self.phi(x, u, t)
        if xdot is None:
            xdot = self.plant.f(x, u)
        pd = pd_from_values(self.barrier, x, u, xdot, nominal)
        v = minnorm_single(pd.p, pd.d)
        return nominal + v, FilterDiagnostics(v, (pd.d,), True, (pd.d > 0.0,))

    def __call__(self, x, u, t) -> np.ndarray:
        return self.evaluate(x, u, t)[0]

    def diagnose(self, x, u, t) -> FilterDiagnostics:
        return self.evaluate(x, u, t)[1]

    def closed_loop(self) -> ClosedLoopField:
        """Filtered augmented field; ``f(x, u)`` is evaluated once per call."""
        f, phi, barrier, n = self.plant.f, self.phi, self.barrier, self.plant.n

        def udot(x, u, t, xdot):
            nominal = phi(x, u, t)
            pd = pd_from_values(barrier, x, u, xdot, nominal)
            return nominal + minnorm_single(pd.p, pd.d)

        def rhs(x, u, t):
            xdot = f(x, u)
            return xdot, udot(x, u, t, xdot)

        def stacked(y, t):
            x, u = y[:n], y[n:]
            xdot = f(x, u)
            return np.concatenate((xdot, udot(x, u, t, xdot)))

        return ClosedLoopField(n, self.plant.m, rhs, stacked)


def icbf_filter(phi, b: BarrierFunction, plant: PlantDynamics) -> ICBFFilter:
    return ICBFFilter(phi, b, plant)


def input_bound_filter(phi, u_max_sq: float, gamma_u: ClassK, plant: PlantDynamics) -> ICBFFilter:
    """Filter keeping ``||u||^2 <= u_max_sq``; the input barrier always satisfies ``p = 0 => d <= 0``."""
    return ICBFFilter(phi, input_bound_barrier(u_max_sq, gamma_u), plant)


@dataclass(frozen=True)
class StateCBFController:
    """Classic CBF program on an auxiliary input ``mu`` added to the integrator state ``u``.

    The plant sees ``mu* + u`` where ``u' = phi`` and ``mu*`` minimises
    ``||mu + u - k(x)||^2`` subject to ``p_x^T mu >= d_x - p_x^T u``.
    """

    k_nominal: Callable[[np.ndarray], np.ndarray]
    barrier: StateBarrier
    affine: AffinePlantDynamics
    phi: Callable

    def __call__(self, x, u, t) -> Tuple[np.ndarray, np.ndarray]:
        p_x, d_x = state_barrier_data(self.barrier, self.affine, x)
        bias = u - np.atleast_1d(self.k_nominal(x))
        try:
            mu = minnorm_offset(p_x, d_x - float(p_x @ u), bias)
        except RelativeDegreeError as exc:
            raise RelativeDegreeError(f"h_x is not a CBF at x={x!r}: {exc}") from None
        return mu, mu + u

    def applied_input(self, x, u, t) -> np.ndarray:
        return self(x, u, t)[1]

    def closed_loop(self) -> ClosedLoopField:
        f0, f1, phi = self.affine.f0, self.affine.f1, self.phi

        def rhs(x, u, t):
            applied = self(x, u, t)[1]
            return f0(x) + f1(x) @ applied, phi(x, u, t)

        return ClosedLoopField(self.affine.n, self.affine.m, rhs)


def state_cbf_controller(k_nominal, sb: StateBarrier, affine: AffinePlantDynamics, phi) -> StateCBFController:
    return StateCBFController(k_nominal, sb, affine, phi)


@dataclass(frozen=True)
class CombinedFilter:
    """Joint state and input filter: rows ``(p_x, d_e)`` and ``(p_u, d_u)`` in one min-norm program.

    ``policy`` is ``"halt"`` (raise :class:`QPInfeasible`) or ``"zero"`` (apply ``v = 0``,
    which gives up the safety guarantee) when the program is infeasible.
    """

    phi: Callable
    state_barrier: StateBarrier
    affine: AffinePlantDynamics
    u_max_sq: float
    h_e: BarrierFunction
    h_u: BarrierFunction
    policy: str = HALT

    @property
    def m(self) -> int:
        return self.affine.m

    def evaluate(self, x, u, t) -> Tuple[np.ndarray, FilterDiagnostics]:
        nominal = self.phi(x, u, t)
        xdot = self.affine.f(x, u)
        pd_e = pd_from_values(self.h_e, x, u, xdot, nominal)
        pd_u = pd_from_values(self.h_u, x, u, xdot, nominal)
        if pd_e.d > ZERO_NORM and float(pd_e.p.dot(pd_e.p)) < ZERO_NORM * ZERO_NORM:
            raise RelativeDegreeError(f"p_x vanishes at x={x!r} while d_e = {pd_e.d!r} > 0")
        sol = solve_rows([pd_e.p.tolist(), pd_u.p.tolist()], [pd_e.d, pd_u.d])
        d_values = (pd_e.d, pd_u.d)
        if sol.feasible:
            active = (0 in sol.active_set and pd_e.d > 0.0, 1 in sol.active_set and pd_u.d > 0.0)
            return nominal + sol.v_star, FilterDiagnostics(sol.v_star, d_values, True, active)
        return nominal, FilterDiagnostics(np.zeros(self.m), d_values, False, (False, False))

    def __call__(self, x, u, t) -> np.ndarray:
        return self.resolve(self.evaluate(x, u, t), t)

    def resolve(self, result, t) -> np.ndarray:
        """Apply the infeasibility policy to an :meth:`evaluate` result."""
        udot, diag = result
        if not diag.feasible and self.policy == HALT:
            raise QPInfeasible(f"combined filter program infeasible at t={t!r} (d_e={diag.d_values[0]!r}, "
                               f"d_u={diag.d_values[1]!r})")
        return udot

    def diagnose(self, x, u, t) -> FilterDiagnostics:
        return self.evaluate(x, u, t)[1]

    def check_initial(self, x0, u0) -> list:
        """List the violated start conditions ``h_x >= 0``, ``h_e >= 0``, ``h_u >= 0``; warn if any."""
        problems = []
        if self.state_barrier.h_x(x0) < 0:
            problems.append("h_x(x0) < 0")
        if self.h_e.value(x0, u0) < 0:
            problems.append("h_e(x0, u0) < 0")
        if self.h_u.value(x0, u0) < 0:
            problems.append("h_u(u0) < 0")
        if problems:
            warnings.warn("initial condition outside the guaranteed set: " + ", ".join(problems))
        return problems


def combined_filter(phi, sb: StateBarrier, affine: AffinePlantDynamics, u_max_sq: float,
                    gammas: Tuple[ClassK, ClassK, Optional[ClassK]], policy: str = HALT,
                    h_e_grad_x: Optional[Callable] = None) -> CombinedFilter:
    """Build the joint filter. ``gammas = (gamma_x, gamma_u, gamma_e)``; ``sb.gamma_x`` is replaced by ``gamma_x``."""
    if policy not in (HALT, ZERO):
        raise ValueError(f"unknown infeasibility policy {policy!r}")
    gamma_x, gamma_u, gamma_e = gammas
    sb = StateBarrier(sb.h_x, sb.grad, gamma_x)
    h_e = extend_state_barrier(sb, affine, gamma_e, grad_x=h_e_grad_x)
    h_u = input_bound_barrier(u_max_sq, gamma_u)
    return CombinedFilter(phi, sb, affine, u_max_sq, h_e, h_u, policy)


def tracking_error_metrics(traj: Trajectory, r: ReferenceSignal, output_map, tail_fraction: float = 0.25):
    """Return ``(sup_tail_error, eta2_estimate)`` over the trailing ``tail_fraction`` of ``traj``.

    ``sup_tail_error`` is the largest ``||r(t) - y(t)||`` in the window and
    ``eta2_estimate`` the largest ``||r'(t)||``.
    """
    if not 0 < tail_fraction <= 1:
        raise ValueError("tail_fraction must lie in (0, 1]")
    t = traj.times
    start = t[-1] - tail_fraction * (t[-1] - t[0])
    idx = np.nonzero(t >= start - 1e-12)[0]
    err = max(float(np.linalg.norm(r(t[k]) - np.atleast_1d(output_map(traj.x[k])))) for k in idx)
    eta2 = max(float(np.linalg.norm(r.derivative(t[k]))) for k in idx)
    return err, eta2
