"""Barrier functions on the augmented state and the p/d calculus used by the filters.

A barrier ``h(x, u)`` with rate ``gamma`` defines

    p(x, u)    = (dh/du)^T
    d(x, u, t) = -(dh/dx f(x, u) + dh/du phi(x, u, t) + gamma(h))

so that the barrier condition along ``u' = phi + v`` reads ``p^T v >= d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np

from .core import AffinePlantDynamics, ClassK, EvaluationError, PlantDynamics, require_finite

FD_STEP = 1e-6


def central_gradient(fn: Callable[[np.ndarray], float], at: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    at = np.asarray(at, dtype=float)
    grad = np.empty(at.shape[0])
    probe = at.copy()
    for i in range(at.shape[0]):
        probe[i] = at[i] + step
        hi = fn(probe)
        probe[i] = at[i] - step
        lo = fn(probe)
        probe[i] = at[i]
        grad[i] = (hi - lo) / (2.0 * step)
    return grad


@dataclass(frozen=True)
class BarrierFunction:
    """Scalar field ``h(x, u)`` whose 0-superlevel set is the safe set.

    Missing gradients fall back to central finite differences.
    """

    h: Callable[[np.ndarray, np.ndarray], float]
    gamma: ClassK
    grad_x: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    grad_u: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    name: str = "h"
    # optional (x, u) -> (h, dh/dx, dh/du) sharing work between the three
    jet_fn: Optional[Callable] = None

    def jet(self, x, u):
        if self.jet_fn is not None:
            return self.jet_fn(x, u)
        return self.value(x, u), self.dx(x, u), self.du(x, u)

    def value(self, x, u) -> float:
        return float(self.h(x, u))

    def dx(self, x, u) -> np.ndarray:
        if self.grad_x is not None:
            return np.asarray(self.grad_x(x, u), dtype=float)
        return central_gradient(lambda xx: self.h(xx, u), x)

    def du(self, x, u) -> np.ndarray:
        if self.grad_u is not None:
            return np.asarray(self.grad_u(x, u), dtype=float)
        return central_gradient(lambda uu: self.h(x, uu), u)


@dataclass(frozen=True)
class StateBarrier:
    """State-only barrier ``h_x(x)`` with analytic gradient and rate ``gamma_x``."""

    h_x: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    gamma_x: ClassK


class PDData(NamedTuple):
    p: np.ndarray
    d: float


def compute_p(b: BarrierFunction, x, u) -> np.ndarray:
    return require_finite(b.du(x, u), f"dh/du of {b.name}")


def pd_from_values(b: BarrierFunction, x, u, xdot, udot_nominal) -> PDData:
    """p and d given precomputed ``f(x, u)`` and ``phi(x, u, t)``."""
    h, gx, p = b.jet(x, u)
    d = -(float(gx.dot(xdot)) + float(p.dot(udot_nominal)) + float(b.gamma(h)))
    # a non-finite p propagates into d
    if not math.isfinite(d):
        raise EvaluationError(f"d for {b.name} is not finite (p = {p!r})")
    return PDData(p, d)


def compute_d(b: BarrierFunction, plant: PlantDynamics, phi, x, u, t: float) -> float:
    """Scalar d; the unmodified flow satisfies the barrier condition iff ``d <= 0``."""
    return pd_from_values(b, x, u, plant.f(x, u), phi(x, u, t)).d


@dataclass
class ICBFViolation:
    index: int
    x: np.ndarray
    u: np.ndarray
    t: float
    p_norm: float
    d: float


def check_icbf_condition(b: BarrierFunction, plant: PlantDynamics, phi,
                         sample_points: Sequence, tol: float = 1e-9) -> List[ICBFViolation]:
    """Empirically check ``p = 0 => d <= 0`` over ``(x, u, t)`` samples.

    Returns the samples where ``||p|| <= tol`` and ``d > tol``.
    """
    if tol < 0:
        raise ValueError("tol must be non-negative")
    violations = []
    for i, (x, u, t) in enumerate(sample_points):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        pd = pd_from_values(b, x, u, plant.f(x, u), phi(x, u, t))
        p_norm = float(np.linalg.norm(pd.p))
        if p_norm <= tol and pd.d > tol:
            violations.append(ICBFViolation(i, x, u, t, p_norm, pd.d))
    return violations


def input_bound_barrier(u_max_sq: float, gamma_u: ClassK) -> BarrierFunction:
    """``h_u = u_max_sq - u^T u``; ``u_max_sq`` bounds the squared input norm."""
    if not u_max_sq > 0:
        raise ValueError("u_max_sq must be positive")
    def jet(x, u):
        u = np.asarray(u, dtype=float)
        return u_max_sq - float(u.dot(u)), np.zeros(np.shape(x)[0]), -2.0 * u

    return BarrierFunction(
        h=lambda x, u: u_max_sq - float(u @ u),
        gamma=gamma_u,
        grad_x=lambda x, u: np.zeros(np.shape(x)[0]),
        grad_u=lambda x, u: -2.0 * np.asarray(u, dtype=float),
        name="h_u",
        jet_fn=jet,
    )


def state_barrier_data(sb: StateBarrier, affine: AffinePlantDynamics, x):
    """Return ``(p_x, d_x)`` with ``p_x = (dh_x/dx f1)^T`` and ``d_x = -(dh_x/dx f0 + gamma_x(h_x))``."""
    grad = np.asarray(sb.grad(x), dtype=float)
    p_x = grad.dot(affine.f1(x))
    d_x = -(float(grad.dot(affine.f0(x))) + float(sb.gamma_x(sb.h_x(x))))
    if not (math.isfinite(d_x) and math.isfinite(float(p_x.sum()))):
        raise EvaluationError(f"state barrier data not finite: p_x={p_x!r}, d_x={d_x!r}")
    return p_x, d_x


def extend_state_barrier(sb: StateBarrier, affine: AffinePlantDynamics,
                         gamma_e: Optional[ClassK] = None,
                         grad_x: Optional[Callable] = None) -> BarrierFunction:
    """Barrier extension ``h_e(x, u) = p_x(x)^T u - d_x(x)`` (the rate-shifted ``dh_x/dt``).

    ``dh_e/du`` is ``p_x(x)`` by construction. ``dh_e/dx`` needs second derivatives of
    ``h_x`` and defaults to central differences unless ``grad_x`` is supplied.
    ``gamma_e`` defaults to half of ``gamma_x``.
    """
    if gamma_e is None:
        gamma_e = sb.gamma_x.scaled(0.5)

    def h_e(x, u):
        p_x, d_x = state_barrier_data(sb, affine, x)
        return float(p_x @ u) - d_x

    def p_e(x, u):
        return state_barrier_data(sb, affine, x)[0]

    def jet(x, u):
        p_x, d_x = state_barrier_data(sb, affine, x)
        gx = grad_x(x, u) if grad_x is not None else central_gradient(lambda xx: h_e(xx, u), x)
        return float(p_x.dot(u)) - d_x, np.asarray(gx, dtype=float), p_x

    return BarrierFunction(h=h_e, gamma=gamma_e, grad_x=grad_x, grad_u=p_e, name="h_e", jet_fn=jet)
