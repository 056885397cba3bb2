"""Fixed-step RK4 integration of the augmented closed loop and trajectory recording."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .core import AugmentedState, PlantDynamics, as_vector

DEFAULT_DT = 1e-3
MAX_STEPS = 10**8


class IntegrationError(ArithmeticError):
    """A Runge-Kutta stage produced a non-finite value."""

    def __init__(self, t: float, index: int, message: str = ""):
        self.t = t
        self.index = index
        self.trajectory = None
        super().__init__(message or f"non-finite stage value at t={t!r}, component {index}")


class HaltSimulation(Exception):
    """Raised from inside a field or probe to stop a run deliberately."""


class SimulationHalted(RuntimeError):
    """A run stopped early; ``trajectory`` holds every step stored before the halt."""

    def __init__(self, reason: str, t: float, trajectory: "Trajectory"):
        self.reason = reason
        self.t = t
        self.trajectory = trajectory
        super().__init__(f"simulation halted at t={t!r}: {reason}")


@dataclass(frozen=True)
class ClosedLoopField:
    """Stacked right-hand side ``(x, u, t) -> (x', u')``.

    ``stacked_fn(y, t)``, when given, evaluates the same field on the flat vector
    ``y = (x, u)`` and is used by the integrator in place of ``func``.
    """

    n: int
    m: int
    func: Optional[Callable[[np.ndarray, np.ndarray, float], Tuple[np.ndarray, np.ndarray]]] = None
    stacked_fn: Optional[Callable[[np.ndarray, float], np.ndarray]] = None

    def __post_init__(self):
        if self.func is None and self.stacked_fn is None:
            raise ValueError("either func or stacked_fn is required")

    def __call__(self, z: AugmentedState, t: float):
        if self.func is None:
            out = self.stacked_fn(z.stacked(), t)
            return out[:self.n], out[self.n:]
        return self.func(z.x, z.u, t)

    def stacked(self, y: np.ndarray, t: float) -> np.ndarray:
        if self.stacked_fn is not None:
            return self.stacked_fn(y, t)
        n = self.n
        xdot, udot = self.func(y[:n], y[n:], t)
        out = np.empty(n + self.m)
        out[:n] = xdot
        out[n:] = udot
        return out


def _check_stage(k: np.ndarray, t: float) -> np.ndarray:
    # a finite sum implies finite entries; otherwise check exactly (the sum may overflow)
    if math.isfinite(k.sum()):
        return k
    finite = np.isfinite(k)
    if not finite.all():
        raise IntegrationError(t, int(np.argmin(finite)))
    return k


def _rk4_stacked(rhs: ClosedLoopField, y: np.ndarray, t: float, dt: float) -> np.ndarray:
    half = 0.5 * dt
    stacked = rhs.stacked
    k1 = stacked(y, t)
    k2 = stacked(y + half * k1, t + half)
    k3 = stacked(y + half * k2, t + half)
    k4 = stacked(y + dt * k3, t + dt)
    y_next = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not math.isfinite(y_next.sum()):
        # non-finite stages propagate into y_next; report the first offender
        for k in (k1, k2, k3, k4, y_next):
            _check_stage(k, t)
    return y_next


def rk4_step(rhs: ClosedLoopField, z: AugmentedState, t: float, dt: float) -> AugmentedState:
    """Advance ``z`` by one classical Runge-Kutta step of size ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    y = _rk4_stacked(rhs, z.stacked(), t, dt)
    return AugmentedState.from_stacked(y, rhs.n)


@dataclass
class Trajectory:
    """Uniformly sampled closed-loop run.

    Attributes:
        times: sample times, shape ``(K,)``.
        x: plant states, shape ``(K, n)``.
        u: control values, shape ``(K, m)``.
        aux: named per-step scalar channels; NaN marks a missing value.
    """

    times: np.ndarray
    x: np.ndarray
    u: np.ndarray
    dt: float
    aux: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.times.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    @property
    def states(self):
        return [AugmentedState(x, u) for x, u in zip(self.x, self.u)]

    def final(self) -> AugmentedState:
        return AugmentedState(self.x[-1], self.u[-1])


Probe = Callable[[np.ndarray, np.ndarray, float], float]
Channels = Union[Mapping[str, Probe], Sequence[Tuple[str, Probe]], None]


def sample_count(t_end: float, dt: float) -> int:
    """Number of stored samples, ``floor(t_end / dt) + 1``, robust to float rounding."""
    ratio = t_end / dt
    steps = math.floor(ratio)
    if math.isclose(ratio, steps + 1, rel_tol=1e-12, abs_tol=1e-9):
        steps += 1
    return steps + 1


def simulate(
    rhs: ClosedLoopField,
    z0: AugmentedState,
    t_end: float,
    dt: float = DEFAULT_DT,
    channels: Channels = None,
    t0: float = 0.0,
) -> Trajectory:
    """Integrate ``rhs`` from ``z0`` on the grid ``t0 + k * dt``.

    Probes are called as ``probe(x, u, t)`` on every stored sample and their
    results recorded in ``Trajectory.aux``. A probe registered under a tuple of
    names returns one value per name.

    Raises:
        IntegrationError: a stage went non-finite (``.trajectory`` holds the partial run).
        SimulationHalted: a field or probe raised :class:`HaltSimulation`.
    """
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if t_end / dt > MAX_STEPS:
        raise ValueError(f"t_end/dt exceeds {MAX_STEPS} steps")
    if z0.n != rhs.n or z0.m != rhs.m:
        raise ValueError("initial state does not match the closed-loop dimensions")

    probes = list(channels.items()) if isinstance(channels, Mapping) else list(channels or [])
    K = sample_count(t_end, dt)
    n, m = rhs.n, rhs.m
    times = t0 + dt * np.arange(K)
    ys = np.empty((K, n + m))
    names = [name for key, _ in probes for name in (key if isinstance(key, tuple) else (key,))]
    # multi-channel probes write a row of this table
    table = np.full((K, len(names)), np.nan)
    slots = []
    col = 0
    for key, probe in probes:
        width = len(key) if isinstance(key, tuple) else 1
        slots.append((col, width, isinstance(key, tuple), probe))
        col += width

    def partial(k: int) -> Trajectory:
        chans = {name: table[:k, j].copy() for j, name in enumerate(names)}
        return Trajectory(times[:k].copy(), ys[:k, :n].copy(), ys[:k, n:].copy(), dt, chans)

    y = z0.stacked()
    stored = 0
    try:
        for k in range(K):
            t = float(times[k])
            if k > 0:
                y = _rk4_stacked(rhs, y, float(times[k - 1]), dt)
            ys[k] = y
            stored = k + 1
            if slots:
                x, u = y[:n], y[n:]
                row = table[k]
                for col, width, multi, probe in slots:
                    if multi:
                        row[col:col + width] = probe(x, u, t)
                    else:
                        row[col] = probe(x, u, t)
    except HaltSimulation as exc:
        # halted inside a step from the last stored sample, or inside its probes
        t_halt = float(times[stored - 1]) if stored else float(t0)
        raise SimulationHalted(str(exc), t_halt, partial(stored)) from exc
    except IntegrationError as exc:
        exc.trajectory = partial(stored)
        raise
    return Trajectory(times, ys[:, :n], ys[:, n:], dt, {name: table[:, j].copy() for j, name in enumerate(names)})


def predict_constant_input(
    plant: PlantDynamics,
    x,
    u_const,
    T: float,
    dt_pred: Optional[float] = None,
) -> np.ndarray:
    """Predict ``x(t + T)`` by integrating ``x' = f(x, u_const)`` with the input frozen."""
    if not T > 0:
        raise ValueError("prediction horizon T must be positive")
    if dt_pred is None:
        dt_pred = T / 100.0
    if not dt_pred > 0:
        raise ValueError("dt_pred must be positive")
    q = round(T / dt_pred)
    if q < 1 or abs(q * dt_pred - T) > 1e-9 * max(T, 1.0):
        raise ValueError("T must be an integer multiple of dt_pred")

    frozen = np.zeros(plant.m)
    rhs = ClosedLoopField(plant.n, plant.m, lambda xx, uu, t: (plant.f(xx, uu), frozen))
    z = AugmentedState(as_vector(x, plant.n, "x"), as_vector(u_const, plant.m, "u"))
    t = 0.0
    for _ in range(q):
        z = rk4_step(rhs, z, t, dt_pred)
        t += dt_pred
    return z.x
