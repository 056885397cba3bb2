"""Shared vocabulary: plants, augmented states, class-K rate functions, references.

Vectors are dense float64 numpy arrays of fixed dimension. Every field held by
these types is assumed to be a pure function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Vector = np.ndarray
Field = Callable[..., np.ndarray]

FD_REFERENCE_STEP = 1e-5


class EvaluationError(ArithmeticError):
    """A field returned a non-finite or wrongly shaped value."""


def as_vector(value, dim: Optional[int] = None, name: str = "vector") -> np.ndarray:
    """Coerce ``value`` to a 1-D float64 array, optionally checking its length."""
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} must have length {dim}, got {arr.shape[0]}")
    return arr


def require_finite(value, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"{what} is not finite: {arr!r}")
    return arr


@dataclass(frozen=True)
class PlantDynamics:
    """General plant ``x' = f(x, u)`` with ``n`` states and ``m`` inputs."""

    n: int
    m: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def __call__(self, x, u) -> np.ndarray:
        return self.f(x, u)


@dataclass(frozen=True)
class AffinePlantDynamics:
    """Control-affine plant ``x' = f0(x) + f1(x) u``.

    ``f1`` returns an ``(n, m)`` matrix.
    """

    n: int
    m: int
    f0: Callable[[np.ndarray], np.ndarray]
    f1: Callable[[np.ndarray], np.ndarray]

    def f(self, x, u) -> np.ndarray:
        return self.f0(x) + self.f1(x) @ u

    __call__ = f

    def as_plant(self) -> PlantDynamics:
        return PlantDynamics(self.n, self.m, self.f)


@dataclass(frozen=True)
class AugmentedState:
    """The stacked pair ``z = (x, u)`` integrated by the closed loop."""

    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        x = as_vector(self.x, name="x")
        u = as_vector(self.u, name="u")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ValueError("augmented state entries must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def m(self) -> int:
        return self.u.shape[0]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.x, self.u])

    @classmethod
    def from_stacked(cls, z, n: int) -> "AugmentedState":
        z = np.asarray(z, dtype=float)
        return cls(z[:n], z[n:])


@dataclass(frozen=True)
class ClassK:
    """Extended class-K rate function.

    Build with :meth:`linear`, :meth:`cubic` or :meth:`custom`. Construction never
    validates; call :func:`validate_class_k` to check monotonicity and ``gamma(0) = 0``.
    """

    kind: str
    param: float = 1.0
    func: Optional[Callable[[float], float]] = field(default=None, compare=False)

    @classmethod
    def linear(cls, slope: float) -> "ClassK":
        return cls("linear", float(slope))

    @classmethod
    def cubic(cls, coefficient: float) -> "ClassK":
        return cls("cubic", float(coefficient))

    @classmethod
    def custom(cls, func: Callable[[float], float]) -> "ClassK":
        return cls("custom", 1.0, func)

    def __call__(self, r):
        if self.kind == "linear":
            return self.param * r
        if self.kind == "cubic":
            return self.param * r * r * r
        if self.kind == "custom":
            return self.func(r)
        raise ValueError(f"unknown class-K kind {self.kind!r}")

    def scaled(self, factor: float) -> "ClassK":
        """Return ``r -> factor * gamma(r)``."""
        if self.kind in ("linear", "cubic"):
            return ClassK(self.kind, self.param * factor)
        inner = self.func
        return ClassK.custom(lambda r: factor * inner(r))


@dataclass
class ClassKReport:
    ok: bool
    gamma_at_zero: float
    # (r_left, r_right) pairs of grid neighbours where gamma failed to increase
    violations: list = field(default_factory=list)

    def describe(self) -> str:
        if self.ok:
            return "class-K check passed"
        parts = []
        if abs(self.gamma_at_zero) > 1e-12:
            parts.append(f"gamma(0) = {self.gamma_at_zero!r}")
        if self.violations:
            lo = self.violations[0][0]
            hi = self.violations[-1][1]
            parts.append(f"not increasing on {len(self.violations)} grid intervals within [{lo}, {hi}]")
        return "; ".join(parts)


def validate_class_k(gamma: ClassK, range: tuple = (-10.0, 10.0), samples: int = 1001) -> ClassKReport:
    """Check ``gamma(0) = 0`` and strict increase on a uniform grid over ``range``."""
    lo, hi = float(range[0]), float(range[1])
    if samples < 2:
        raise ValueError("samples must be at least 2")
    if not lo <= 0.0 <= hi:
        raise ValueError("range must contain 0")
    grid = np.linspace(lo, hi, samples)
    values = np.array([float(gamma(r)) for r in grid])
    g0 = float(gamma(0.0))
    bad = np.nonzero(~(np.diff(values) > 0.0))[0]
    violations = [(float(grid[i]), float(grid[i + 1])) for i in bad]
    ok = abs(g0) <= 1e-12 and not violations and bool(np.all(np.isfinite(values)))
    return ClassKReport(ok=ok, gamma_at_zero=g0, violations=violations)


@dataclass(frozen=True)
class ReferenceSignal:
    """Reference ``r(t)`` in output space with optional analytic derivative."""

    m: int
    r: Callable[[float], np.ndarray]
    r_dot: Optional[Callable[[float], np.ndarray]] = None

    @classmethod
    def constant(cls, value) -> "ReferenceSignal":
        value = as_vector(value)
        zero = np.zeros_like(value)
        return cls(value.shape[0], lambda t: value, lambda t: zero)

    def __call__(self, t: float) -> np.ndarray:
        return as_vector(self.r(t), self.m, "reference")

    def derivative(self, t: float) -> np.ndarray:
        if self.r_dot is not None:
            return as_vector(self.r_dot(t), self.m, "reference derivative")
        h = FD_REFERENCE_STEP
        return (self(t + h) - self(t - h)) / (2.0 * h)
