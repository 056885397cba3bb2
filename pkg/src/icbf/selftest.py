"""Quick property checks runnable without a test framework (``icbf selftest``)."""

from __future__ import annotations

import math
import sys

import numpy as np

from .acc import AccParams, acc_barriers, acc_dynamics, build_acc_scenario, h_e_gradient_x
from .barrier import central_gradient, extend_state_barrier
from .core import AugmentedState, ClassK
from .integrator import ClosedLoopField, simulate
from .minnorm import HalfspaceProblem, minnorm_multi, minnorm_single, oracle_qp


def check_qp_oracle(rng, count=200):
    worst = 0.0
    for _ in range(count):
        m, k = rng.integers(1, 5), rng.integers(1, 5)
        prob = HalfspaceProblem(rng.uniform(-2, 2, (k, m)), rng.uniform(-2, 2, k))
        a, b = minnorm_multi(prob), oracle_qp(prob)
        if a.status != b.status:
            return False, f"status mismatch on P={prob.P.tolist()}, d={prob.d.tolist()}"
        if a.feasible:
            worst = max(worst, float(np.linalg.norm(a.v_star - b.v_star)))
    return worst <= 1e-8, f"max |v1 - v2| = {worst:.2e} over {count} instances"


def check_closed_form(rng, count=1000):
    for _ in range(count):
        m = rng.integers(1, 5)
        p = rng.uniform(-2, 2, m)
        if np.linalg.norm(p) < 1e-3:
            continue
        d = rng.uniform(-3, 3)
        v = minnorm_single(p, d)
        if d <= 0 and np.any(v != 0):
            return False, f"nonzero correction for d={d}"
        if d > 0 and abs(p @ v - d) > 1e-10 * max(1.0, d):
            return False, f"constraint not tight for d={d}"
    return True, f"{count} instances"


def check_rk4_order():
    errs = []
    dts = [0.1, 0.05, 0.025]
    for dt in dts:
        rhs = ClosedLoopField(0, 1, lambda x, u, t: (x, -u))
        traj = simulate(rhs, AugmentedState(np.zeros(0), np.array([1.0])), 1.0, dt)
        errs.append(abs(traj.u[-1, 0] - math.exp(-1.0)))
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    return 3.7 <= slope <= 4.3, f"slope {slope:.3f}"


def check_gradients(rng, count=50):
    params = AccParams()
    bars = acc_barriers(params)
    plant = acc_dynamics(params)
    h_e = extend_state_barrier(bars.state, plant, ClassK.linear(0.5), grad_x=h_e_gradient_x(params))
    worst = 0.0
    for _ in range(count):
        x = rng.uniform([0, 0, 0], [100, 30, 150])
        u = rng.uniform(-5000, 5000, 1)
        for analytic, numeric in (
            (bars.state.grad(x), central_gradient(bars.state.h_x, x)),
            (h_e.dx(x, u), central_gradient(lambda xx: h_e.value(xx, u), x)),
        ):
            scale = max(1.0, float(np.max(np.abs(numeric))))
            worst = max(worst, float(np.max(np.abs(analytic - numeric))) / scale)
    return worst <= 1e-5, f"max relative error {worst:.2e}"


def check_acc_combined():
    sc = build_acc_scenario()
    v = sc.controllers["combined"]
    traj = simulate(v.rhs, sc.z0, 10.0, 1e-3, v.channels)
    lo = min(np.nanmin(traj.aux["h_x"]), np.nanmin(traj.aux["h_u"]))
    return lo >= -1e-2, f"min(h_x, h_u) = {lo:.3e} over 10 s"


def run_selftest(seed: int = 0, stream=None) -> bool:
    rng = np.random.default_rng(seed)
    checks = [
        ("qp oracle equivalence", lambda: check_qp_oracle(rng)),
        ("closed-form correction", lambda: check_closed_form(rng)),
        ("rk4 order", check_rk4_order),
        ("analytic gradients", lambda: check_gradients(rng)),
        ("acc combined invariance", check_acc_combined),
    ]
    ok_all = True
    for name, fn in checks:
        ok, detail = fn()
        ok_all &= ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}", file=stream or sys.stdout)
    return ok_all
