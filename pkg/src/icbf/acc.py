"""Adaptive cruise control benchmark.

State ``x = (position, speed, gap to lead vehicle)``, input ``u`` = wheel force (N).
Several parameter defaults (mass, resistance coefficients, ``c_ad``, ``T``, the
initial condition, the nominal gain ``k_gain``) are stand-in values picked for
representative behaviour; all are overridable.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, NamedTuple, Optional

import numpy as np

from .barrier import BarrierFunction, StateBarrier, pd_from_values
from .controllers import (
    HALT,
    QPInfeasible,
    CombinedFilter,
    DynamicController,
    ICBFFilter,
    Predictor,
    StateCBFController,
    closed_loop,
    combined_filter,
    input_bound_filter,
    state_cbf_controller,
)
from .core import AffinePlantDynamics, AugmentedState, ClassK, ReferenceSignal
from .integrator import ClosedLoopField, predict_constant_input
from .minnorm import minnorm_single, solve_rows

PREDICTOR_MODES = ("paper", "exact_linear", "numeric")
VARIANTS = ("unfiltered", "input_only", "state_only", "combined")
HEADWAY = 1.8  # s, "half the speedometer" following rule


@dataclass(frozen=True)
class AccParams:
    m: float = 1650.0
    c0: float = 0.1
    c1: float = 5.0
    c2: float = 0.25
    v0: float = 14.0
    vd: float = 24.0
    g: float = 9.81
    c_ad: float = 0.3
    T: float = 1.0
    alpha: float = 10.0
    gamma: float = 1.0
    k_gain: float = 0.5

    def __post_init__(self):
        for name in ("m", "c1", "T", "alpha", "gamma", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("c0", "c2", "k_gain"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.c_ad <= 1:
            raise ValueError("c_ad must lie in (0, 1]")

    def rolling_resistance(self, speed: float) -> float:
        return self.c0 + self.c1 * speed + self.c2 * speed * speed

    @property
    def u_max(self) -> float:
        """Wheel-force bound ``m c_ad g``."""
        return self.m * self.c_ad * self.g

    @property
    def decay(self) -> float:
        """``exp(-c1 T / m)``, the linearised speed decay over one horizon."""
        return math.exp(-self.c1 * self.T / self.m)


def acc_dynamics(params: AccParams) -> AffinePlantDynamics:
    m, v0 = params.m, params.v0
    f1 = np.array([[0.0], [1.0 / m], [0.0]])
    f1.setflags(write=False)

    def f0(x):
        speed = x[1]
        return np.array([speed, -params.rolling_resistance(speed) / m, v0 - speed])

    return AffinePlantDynamics(3, 1, f0, lambda x: f1)


def acc_predictor(params: AccParams, mode: str = "exact_linear") -> Predictor:
    """Predicted speed error ``x2(t+T) - vd`` under frozen input, from the ``c2 = 0`` model.

    ``paper`` keeps the closed form exactly as published (its zero-horizon limit is
    ``x2`` rather than ``x2 - vd``); ``exact_linear`` is the solution of the
    linearised speed equation; ``numeric`` integrates the linearised plant with RK4.
    """
    c0, c1, m, vd = params.c0, params.c1, params.m, params.vd
    e = params.decay
    slope = (1.0 - e) / c1

    def jac(x, u):
        return np.array([[slope]])

    if mode == "paper":
        def g(x, u):
            a = c0 - u[0] + m * vd
            return np.array([-(a - c1 * e * (x[1] + a / c1)) / c1])
        return Predictor(g, jac)
    if mode == "exact_linear":
        def g(x, u):
            return np.array([e * x[1] + slope * (u[0] - c0) - vd])
        return Predictor(g, jac)
    if mode == "numeric":
        linear = acc_dynamics(AccParams(**{**asdict(params), "c2": 0.0})).as_plant()

        def g(x, u):
            xT = predict_constant_input(linear, x, u, params.T, params.T / 100.0)
            return np.array([xT[1] - vd])
        return Predictor(g)
    raise ValueError(f"unknown predictor mode {mode!r}; expected one of {PREDICTOR_MODES}")


def acc_phi(params: AccParams, pred: Predictor,
            reference: Optional[Callable[[float], float]] = None) -> DynamicController:
    """Tracking law ``u' = alpha c1 (exp(-c1 T/m) - 1)^-1 (y_hat - r)``.

    ``reference`` is the desired value of the output ``x2 - vd`` (zero by default).
    """
    gain = params.alpha * params.c1 / (params.decay - 1.0)

    if reference is None:
        def phi(x, u, t):
            return gain * pred(x, u)
    else:
        def phi(x, u, t):
            return gain * (pred(x, u) - reference(t))
    return DynamicController(1, phi)


class AccBarriers(NamedTuple):
    state: StateBarrier
    u_max_sq: float
    gamma_u: ClassK
    gamma_e: ClassK


def acc_barriers(params: AccParams) -> AccBarriers:
    """Following-distance barrier ``h_x = x3 - 1.8 x2`` and the squared wheel-force bound."""
    grad = np.array([0.0, -HEADWAY, 1.0])
    grad.setflags(write=False)
    gamma = ClassK.linear(params.gamma)
    sb = StateBarrier(
        h_x=lambda x: float(x[2] - HEADWAY * x[1]),
        grad=lambda x: grad,
        gamma_x=gamma,
    )
    return AccBarriers(sb, params.u_max ** 2, gamma, ClassK.linear(0.5 * params.gamma))


def h_e_gradient_x(params: AccParams):
    """Analytic ``dh_e/dx`` for the ACC extension barrier (linear ``gamma_x``)."""
    m, c1, c2, gamma = params.m, params.c1, params.c2, params.gamma

    def grad(x, u):
        return np.array([0.0, HEADWAY * (c1 + 2.0 * c2 * x[1]) / m - 1.0 - HEADWAY * gamma, gamma])

    return grad


def nominal_force(params: AccParams):
    """Force-balance speed tracker ``k(x) = F_r(x) + m k_gain (vd - x2)``."""
    def k(x):
        return np.array([params.rolling_resistance(x[1]) + params.m * params.k_gain * (params.vd - x[1])])
    return k


CHANNELS = ("h_x", "h_u", "h_e", "d_e", "d_u", "v_norm", "active_x", "active_u", "feasible")
NAN = float("nan")


@dataclass
class Variant:
    """One closed loop of the scenario, ready to simulate.

    ``channels`` maps a name (or a tuple of names) to a probe ``(x, u, t)``;
    ``applied_input`` returns the wheel force the plant actually receives.
    """

    name: str
    rhs: ClosedLoopField
    channels: Dict
    controller: object
    applied_input: Callable


@dataclass
class AccScenario:
    params: AccParams
    plant: AffinePlantDynamics
    barriers: AccBarriers
    h_e: BarrierFunction
    h_u: BarrierFunction
    predictor: Predictor
    phi: DynamicController
    z0: AugmentedState
    controllers: Dict[str, Variant]
    reference: ReferenceSignal
    combined_filter: CombinedFilter

    def output(self, x) -> float:
        return x[1]


class _LastCall:
    """Memoise a function of ``(x, u, t)`` on the most recent argument."""

    def __init__(self, fn):
        self.fn = fn
        self.key = None
        self.value = None

    def __call__(self, x, u, t):
        key = (t, x.tobytes(), u.tobytes())
        if key != self.key:
            self.value = self.fn(x, u, t)
            self.key = key
        return self.value


def _flag(value: bool) -> float:
    return 1.0 if value else 0.0


class ScalarAcc:
    """Scalar evaluation of the four ACC closed loops.

    Computes the same quantities as the generic filter components (barrier
    p/d values, the min-norm corrections, the state-CBF program) with plain
    float arithmetic, which is several times faster for this 3-state, 1-input plant.
    """

    def __init__(self, params: AccParams, pred: Predictor, predictor_mode: str,
                 offset: Optional[Callable[[float], float]], policy: str):
        p = params
        self.m, self.c0, self.c1, self.c2 = p.m, p.c0, p.c1, p.c2
        self.v0, self.vd, self.gamma = p.v0, p.vd, p.gamma
        self.gamma_e = 0.5 * p.gamma
        self.k_gain = p.k_gain
        self.u_max_sq = p.u_max ** 2
        e = p.decay
        self.e = e
        self.slope = (1.0 - e) / p.c1
        self.gain = p.alpha * p.c1 / (e - 1.0)
        self.p_x = -HEADWAY / p.m
        self.mode = predictor_mode
        self.pred = pred
        self.offset = offset
        self.policy = policy

    def y_hat(self, x1, x2, x3, u):
        if self.mode == "exact_linear":
            return self.e * x2 + self.slope * (u - self.c0) - self.vd
        if self.mode == "paper":
            a = self.c0 - u + self.m * self.vd
            return -(a - self.c1 * self.e * (x2 + a / self.c1)) / self.c1
        return float(self.pred(np.array([x1, x2, x3]), np.array([u]))[0])

    def phi(self, x1, x2, x3, u, t):
        y = self.y_hat(x1, x2, x3, u)
        if self.offset is not None:
            y -= self.offset(t)
        return self.gain * y

    def _terms(self, x2, x3, ua, ph):
        """Barrier values and d's at applied force ``ua`` with nominal ``u' = ph``."""
        m, gamma = self.m, self.gamma
        fr = self.c0 + self.c1 * x2 + self.c2 * x2 * x2
        h_x = x3 - HEADWAY * x2
        d_x = -(HEADWAY * fr / m + (self.v0 - x2) + gamma * h_x)
        h_e = self.p_x * ua - d_x
        ge2 = HEADWAY * (self.c1 + 2.0 * self.c2 * x2) / m - 1.0 - HEADWAY * gamma
        d_e = -(ge2 * (ua - fr) / m + gamma * (self.v0 - x2) + self.p_x * ph + self.gamma_e * h_e)
        h_u = self.u_max_sq - ua * ua
        d_u = -(-2.0 * ua * ph + gamma * h_u)
        return fr, h_x, d_x, h_e, d_e, h_u, d_u

    def unfiltered(self, y, t, probing=False):
        x1, x2, x3, u = y
        ph = self.phi(x1, x2, x3, u, t)
        fr, h_x, _, h_e, d_e, h_u, d_u = self._terms(x2, x3, u, ph)
        return u, ph, (h_x, h_u, h_e, d_e, d_u, 0.0, NAN, NAN, NAN), fr

    def input_only(self, y, t, probing=False):
        x1, x2, x3, u = y
        ph = self.phi(x1, x2, x3, u, t)
        fr, h_x, _, h_e, d_e, h_u, d_u = self._terms(x2, x3, u, ph)
        v = float(minnorm_single(np.array([-2.0 * u]), d_u)[0])
        return u, ph + v, (h_x, h_u, h_e, d_e, d_u, abs(v), NAN, _flag(d_u > 0.0), NAN), fr

    def state_only(self, y, t, probing=False):
        x1, x2, x3, u = y
        m, p_x = self.m, self.p_x
        fr = self.c0 + self.c1 * x2 + self.c2 * x2 * x2
        k = fr + m * self.k_gain * (self.vd - x2)
        h_x = x3 - HEADWAY * x2
        d_x = -(HEADWAY * fr / m + (self.v0 - x2) + self.gamma * h_x)
        # minnorm_offset(p_x, d_x - p_x u, u - k) in scalar form
        mu = k - u
        rhs, s = d_x - p_x * u, p_x * (k - u)
        if s < rhs:
            mu = mu + ((rhs - s) / (p_x * p_x)) * p_x
        ua = mu + u
        ph = self.phi(x1, x2, x3, u, t)
        h_e = p_x * ua - d_x
        active = abs(ua - k) > 1e-9 * max(1.0, abs(k))
        return ua, ph, (h_x, self.u_max_sq - ua * ua, h_e, NAN, NAN, abs(ua - k), _flag(active), NAN, NAN), fr

    def combined(self, y, t, probing=False):
        x1, x2, x3, u = y
        ph = self.phi(x1, x2, x3, u, t)
        fr, h_x, _, h_e, d_e, h_u, d_u = self._terms(x2, x3, u, ph)
        sol = solve_rows([[self.p_x], [-2.0 * u]], [d_e, d_u])
        if sol.feasible:
            v = float(sol.v_star[0])
            act = (0 in sol.active_set and d_e > 0.0, 1 in sol.active_set and d_u > 0.0)
        else:
            if self.policy == HALT and not probing:
                raise QPInfeasible(f"combined filter program infeasible at t={t!r} (d_e={d_e!r}, d_u={d_u!r})")
            v, act = 0.0, (False, False)
        chans = (h_x, h_u, h_e, d_e, d_u, abs(v), _flag(act[0]), _flag(act[1]), _flag(sol.feasible))
        return u, ph + v, chans, fr

    def variant(self, name: str, applied_input: Callable, controller) -> Variant:
        evaluate = getattr(self, name)
        m, v0 = self.m, self.v0

        def stacked(y, t):
            ua, udot, _, fr = evaluate(y.tolist(), t)
            x2 = y[1]
            return np.array([x2, (ua - fr) / m, v0 - x2, udot])

        def probe(x, u, t):
            return evaluate([x[0], x[1], x[2], u[0]], t, True)[2]

        return Variant(name, ClosedLoopField(3, 1, stacked_fn=stacked), {CHANNELS: probe}, controller, applied_input)


def build_acc_scenario(params: Optional[AccParams] = None, predictor_mode: str = "exact_linear",
                       z0: Optional[AugmentedState] = None, policy: str = HALT,
                       r_amp: float = 0.0, r_freq: float = 0.2, fast: bool = True) -> AccScenario:
    """Assemble the unfiltered, input-only, state-only and combined closed loops.

    The speed reference is ``vd + r_amp sin(r_freq t)``. With ``fast`` the loops
    run on :class:`ScalarAcc`; otherwise they are composed from the generic
    filter components. Both record the channels in :data:`CHANNELS`.
    """
    params = params or AccParams()
    if z0 is None:
        z0 = AugmentedState(np.array([0.0, 20.0, 100.0]), np.array([0.0]))
    plant = acc_dynamics(params)
    bars = acc_barriers(params)
    sb = bars.state
    pred = acc_predictor(params, predictor_mode)

    if r_amp:
        def offset(t):
            return r_amp * math.sin(r_freq * t)
        reference = ReferenceSignal(1, lambda t: np.array([params.vd + offset(t)]),
                                    lambda t: np.array([r_amp * r_freq * math.cos(r_freq * t)]))
    else:
        offset = None
        reference = ReferenceSignal.constant([params.vd])
    phi = acc_phi(params, pred, offset)

    combined: CombinedFilter = combined_filter(phi, sb, plant, bars.u_max_sq,
                                               (sb.gamma_x, bars.gamma_u, bars.gamma_e),
                                               policy=policy, h_e_grad_x=h_e_gradient_x(params))
    input_only: ICBFFilter = input_bound_filter(phi, bars.u_max_sq, bars.gamma_u, plant.as_plant())
    state_only: StateCBFController = state_cbf_controller(nominal_force(params), sb, plant, phi)

    def identity(x, u, t):
        return u

    if fast:
        scalar = ScalarAcc(params, pred, predictor_mode, offset, policy)
        variants = {
            "unfiltered": scalar.variant("unfiltered", identity, phi),
            "input_only": scalar.variant("input_only", identity, input_only),
            "state_only": scalar.variant("state_only", state_only.applied_input, state_only),
            "combined": scalar.variant("combined", identity, combined),
        }
    else:
        variants = _generic_variants(plant, sb, phi, combined, input_only, state_only, identity)
    return AccScenario(params, plant, bars, combined.h_e, combined.h_u, pred, phi, z0, variants,
                       reference, combined)


def _generic_variants(plant, sb, phi, combined, input_only, state_only, identity):
    h_e, h_u = combined.h_e, combined.h_u
    f = plant.f

    def probe_for(evaluate_diag, applied, with_d):
        def probe(x, u, t):
            ua = applied(x, u, t)
            nominal = phi(x, u, t)
            if with_d:
                xdot = f(x, ua)
                d_e = pd_from_values(h_e, x, ua, xdot, nominal).d
                d_u = pd_from_values(h_u, x, ua, xdot, nominal).d
            else:
                d_e = d_u = NAN
            extra = evaluate_diag(x, u, t, d_e, d_u)
            return (sb.h_x(x), h_u.value(x, ua), h_e.value(x, ua)) + extra
        return probe

    variants = {}
    probe = probe_for(lambda x, u, t, d_e, d_u: (d_e, d_u, 0.0, NAN, NAN, NAN), identity, True)
    variants["unfiltered"] = Variant("unfiltered", closed_loop(plant, phi), {CHANNELS: probe}, phi, identity)

    eval_in = _LastCall(input_only.evaluate)

    def in_diag(x, u, t, d_e, d_u):
        diag = eval_in(x, u, t)[1]
        return (d_e, diag.d_values[0], float(np.linalg.norm(diag.v_star)), NAN, _flag(diag.active[0]), NAN)

    rhs_in = ClosedLoopField(3, 1, lambda x, u, t: (f(x, u), eval_in(x, u, t)[0]))
    variants["input_only"] = Variant("input_only", rhs_in, {CHANNELS: probe_for(in_diag, identity, True)},
                                     input_only, identity)

    k_nom = state_only.k_nominal
    state_call = _LastCall(state_only)

    def applied_state(x, u, t):
        return state_call(x, u, t)[1]

    def state_diag(x, u, t, d_e, d_u):
        k = k_nom(x)[0]
        gap = abs(applied_state(x, u, t)[0] - k)
        return (NAN, NAN, gap, _flag(gap > 1e-9 * max(1.0, abs(k))), NAN, NAN)

    f0, f1 = plant.f0, plant.f1
    rhs_state = ClosedLoopField(3, 1, lambda x, u, t: (f0(x) + f1(x) @ applied_state(x, u, t), phi(x, u, t)))
    variants["state_only"] = Variant("state_only", rhs_state,
                                     {CHANNELS: probe_for(state_diag, applied_state, False)},
                                     state_only, applied_state)

    eval_c = _LastCall(combined.evaluate)

    def comb_diag(x, u, t, d_e, d_u):
        diag = eval_c(x, u, t)[1]
        return (diag.d_values[0], diag.d_values[1], float(np.linalg.norm(diag.v_star)),
                _flag(diag.active[0]), _flag(diag.active[1]), _flag(diag.feasible))

    rhs_c = ClosedLoopField(3, 1, lambda x, u, t: (f(x, u), combined.resolve(eval_c(x, u, t), t)))
    variants["combined"] = Variant("combined", rhs_c, {CHANNELS: probe_for(comb_diag, identity, False)},
                                   combined, identity)
    return variants


def param_names():
    return [f.name for f in fields(AccParams)]
