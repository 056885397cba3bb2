"""Acceptance checks, one test per criterion, each reporting a PASS/FAIL line."""

import math
import os
import subprocess
import sys
import time

import numpy as np

from conftest import ACCEPTANCE_LINES
from icbf.acc import (
    AccParams,
    acc_barriers,
    acc_dynamics,
    acc_predictor,
    build_acc_scenario,
    h_e_gradient_x,
)
from icbf.barrier import BarrierFunction, central_gradient, extend_state_barrier, input_bound_barrier
from icbf.controllers import DynamicController, closed_loop, feedforward_controller, icbf_filter, tracking_error_metrics
from icbf.core import AugmentedState, ClassK, PlantDynamics
from icbf.integrator import ClosedLoopField, HaltSimulation, SimulationHalted, simulate
from icbf.minnorm import HalfspaceProblem, minnorm_multi, minnorm_single, oracle_qp

DT = 1e-3
SLACK = 10 * DT


def report(number, title, ok, detail, elapsed=None, budget=None):
    timing = ""
    if elapsed is not None:
        timing = f" [{elapsed:.2f}s / {budget:g}s]"
        ok = ok and elapsed < budget
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}: {detail}{timing}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def run_variant(name, **kwargs):
    sc = build_acc_scenario(**kwargs)
    v = sc.controllers[name]
    return sc, simulate(v.rhs, sc.z0, 40.0, DT, v.channels)


def test_01_qp_oracle_equivalence():
    r = np.random.default_rng(101)
    start = time.perf_counter()
    mismatched, worst, feasible = 0, 0.0, 0
    for _ in range(1000):
        m, k = int(r.integers(1, 5)), int(r.integers(1, 5))
        prob = HalfspaceProblem(r.uniform(-2, 2, (k, m)), r.uniform(-2, 2, k))
        a, b = minnorm_multi(prob), oracle_qp(prob)
        if a.status != b.status:
            mismatched += 1
        elif a.feasible:
            feasible += 1
            worst = max(worst, abs(np.linalg.norm(a.v_star) - np.linalg.norm(b.v_star)),
                        float(np.linalg.norm(a.v_star - b.v_star)))
    elapsed = time.perf_counter() - start
    report(1, "QP oracle equivalence", mismatched == 0 and worst <= 1e-8,
           f"{mismatched} status mismatches, {feasible} feasible, max deviation {worst:.2e}", elapsed, 5)


def test_02_closed_form_fidelity():
    r = np.random.default_rng(102)
    cases = []
    while len(cases) < 10_000:
        m = int(r.integers(1, 5))
        p = r.uniform(-3, 3, m)
        if np.linalg.norm(p) >= 1e-3:
            cases.append((p, float(r.uniform(-5, 5))))
    start = time.perf_counter()
    bad = 0
    for p, d in cases:
        v = minnorm_single(p, d)
        if d > 0:
            bad += not abs(p @ v - d) <= 1e-10 * max(1.0, d)
        else:
            bad += not np.all(v == 0.0)
    elapsed = time.perf_counter() - start
    report(2, "closed-form min-norm fidelity", bad == 0, f"{bad} failures in {len(cases)}", elapsed, 1)


def test_03_rk4_order():
    start = time.perf_counter()
    dts = np.array([0.2, 0.1, 0.05, 0.025])
    errs = []
    rhs = ClosedLoopField(0, 1, lambda x, u, t: (x, -u))
    for dt in dts:
        traj = simulate(rhs, AugmentedState(np.zeros(0), [1.0]), 1.0, dt)
        errs.append(abs(traj.u[-1, 0] - math.exp(-1.0)))
    slope = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    elapsed = time.perf_counter() - start
    report(3, "RK4 convergence order", 3.7 <= slope <= 4.3, f"slope {slope:.3f}", elapsed, 1)


def random_polynomial_system(r):
    """Polynomial plant, an I-CBF with ``dh/du`` bounded away from 0, and a nominal law pushing h down."""
    n, m = int(r.integers(1, 4)), int(r.integers(1, 4))
    A = -np.eye(n) + 0.3 * r.normal(size=(n, n))
    B = r.normal(size=(n, m))
    cubic = 0.1 * r.uniform(0.5, 1.5, n)

    def f(x, u):
        return A.dot(x) + B.dot(u) - cubic * x * x * x

    c = r.choice([-1.0, 1.0], m) * r.uniform(0.5, 2.0, m)
    eps = np.sign(c) * r.uniform(0.01, 0.1, m)  # same sign as c, so |dh/du_i| >= |c_i|
    eps3 = 3.0 * eps
    a0, a, kappa = r.uniform(1.0, 3.0), 0.5 * r.normal(size=n), r.uniform(0.05, 0.3)

    def h(x, u):
        return a0 + (a - kappa * x).dot(x) + (c + eps * u * u).dot(u)

    def jet(x, u):
        u2 = u * u
        return a0 + (a - kappa * x).dot(x) + (c + eps * u2).dot(u), a - (2.0 * kappa) * x, c + eps3 * u2

    b = BarrierFunction(h, ClassK.linear(r.uniform(0.5, 2.0)),
                        grad_x=lambda x, u: jet(x, u)[1], grad_u=lambda x, u: jet(x, u)[2], jet_fn=jet)
    push = -np.sign(c) * r.uniform(0.5, 2.0, m)
    D = 0.5 * r.normal(size=(m, n))
    phi = DynamicController(m, lambda x, u, t: push + D.dot(x))
    return PlantDynamics(n, m, f), b, phi, AugmentedState(np.zeros(n), np.zeros(m))


def _run_batch(seed):
    r = np.random.default_rng(seed)
    worst, violations = np.inf, 0
    for _ in range(20):
        plant, b, phi, z0 = random_polynomial_system(r)
        assert b.value(z0.x, z0.u) > 0
        traj = simulate(icbf_filter(phi, b, plant).closed_loop(), z0, 10.0, DT, {"h": lambda x, u, t: b.h(x, u)})
        worst = min(worst, float(traj.aux["h"].min()))

        def first_violation(x, u, t):
            if b.h(x, u) < 0:
                raise HaltSimulation("h < 0")
            return 0.0
        try:
            simulate(closed_loop(plant, phi), z0, 10.0, DT, {"stop": first_violation})
        except SimulationHalted:
            violations += 1
    return worst, violations


def test_04_filtered_invariance_random_systems():
    start = time.perf_counter()
    for seed in range(104, 109):
        worst, violations = _run_batch(seed)
        if violations >= 10:
            break
    elapsed = time.perf_counter() - start
    report(4, "I-CBF filter invariance on random polynomial systems",
           worst >= -SLACK and violations >= 10,
           f"batch seed {seed}: min filtered h {worst:.3e}, unfiltered violations {violations}/20", elapsed, 30)


def test_05_input_bound_run():
    start = time.perf_counter()
    sc, traj = run_variant("input_only")
    elapsed = time.perf_counter() - start
    bound = sc.params.u_max
    peak = float(np.max(np.abs(traj.u)))
    report(5, "ACC input-only wheel-force bound", peak <= bound * (1 + 1e-4),
           f"max |u| {peak:.3f} N vs bound {bound:.3f} N", elapsed, 5)


def test_06_state_only_run():
    start = time.perf_counter()
    _, traj = run_variant("state_only")
    elapsed = time.perf_counter() - start
    lo = float(np.min(traj.aux["h_x"]))
    report(6, "ACC state-only following distance", lo >= -SLACK, f"min h_x {lo:.3e}", elapsed, 5)


def test_07_combined_run():
    start = time.perf_counter()
    sc, traj = run_variant("combined")
    elapsed = time.perf_counter() - start
    bars = acc_barriers(sc.params)
    x0, u0 = sc.z0.x, sc.z0.u
    start_ok = (bars.state.h_x(x0) >= 0 and sc.h_e.value(x0, u0) >= 0 and sc.h_u.value(x0, u0) >= 0)
    hx, hu = float(np.min(traj.aux["h_x"])), float(np.min(traj.aux["h_u"]))
    infeasible = int(np.sum(traj.aux["feasible"] != 1.0))
    final_speed = float(traj.x[-1, 1])
    ok = start_ok and hx >= -SLACK and hu >= -SLACK and infeasible == 0 and abs(final_speed - 14.0) <= 0.5
    report(7, "ACC combined filter", ok,
           f"start in sets {start_ok}, min h_x {hx:.3e}, min h_u {hu:.3e}, infeasible steps {infeasible}, "
           f"final speed {final_speed:.4f} m/s", elapsed, 10)


def test_08_feedforward_rate():
    start = time.perf_counter()
    plant = PlantDynamics(1, 1, lambda x, u: u.copy())
    rates = {}
    for alpha in (2.0, 4.0, 8.0):
        phi = feedforward_controller(lambda x: -x, lambda x: -np.eye(1), plant, alpha)
        traj = simulate(closed_loop(plant, phi), AugmentedState([1.0], [2.0]), 3.0, DT)
        err = np.abs(traj.u[:, 0] + traj.x[:, 0])
        rates[alpha] = -float(np.polyfit(traj.times, np.log(err), 1)[0])
    elapsed = time.perf_counter() - start
    ok = all(abs(rate - a / 2) <= 0.1 * a / 2 for a, rate in rates.items())
    detail = ", ".join(f"alpha {a:g}: rate {r:.4f}" for a, r in rates.items())
    report(8, "feedforward error decay at alpha/2", ok, detail, elapsed, 5)


def _tail_error(sc, traj):
    return tracking_error_metrics(traj, sc.reference, lambda x: np.atleast_1d(sc.output(x)), 0.25)[0]


def test_09_tracking_surrogate():
    # the predictor is exact when c2 = 0, so the residual is the reference-rate term alone
    linear = AccParams(c2=0.0)
    start = time.perf_counter()
    sc, traj = run_variant("unfiltered", params=linear)
    initial = abs(sc.params.vd - sc.z0.x[1])
    const_err = _tail_error(sc, traj)
    tails = {}
    for alpha in (10.0, 20.0):
        p = AccParams(c2=0.0, alpha=alpha)
        s, tr = run_variant("unfiltered", params=p, r_amp=1.0, r_freq=0.2)
        tails[alpha] = _tail_error(s, tr)
    elapsed = time.perf_counter() - start
    ok = const_err <= 0.01 * initial and tails[20.0] <= tails[10.0]
    report(9, "tracking error surrogate (c2 = 0 plant)", ok,
           f"constant-reference tail error {const_err:.3e} vs 1% of {initial:g}; "
           f"sinusoid tail error alpha 10 {tails[10.0]:.4e}, alpha 20 {tails[20.0]:.4e}", elapsed, 10)


def _rel_err(a, b):
    a, b = np.atleast_1d(np.asarray(a, float)), np.atleast_1d(np.asarray(b, float))
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def test_10_gradient_checks():
    r = np.random.default_rng(110)
    start = time.perf_counter()
    p = AccParams()
    plant, bars = acc_dynamics(p), acc_barriers(p)
    h_e = extend_state_barrier(bars.state, plant, bars.gamma_e, grad_x=h_e_gradient_x(p))
    h_u = input_bound_barrier(bars.u_max_sq, bars.gamma_u)
    h_u3 = input_bound_barrier(4.0, ClassK.linear(1.0))
    preds = {mode: acc_predictor(p, mode) for mode in ("paper", "exact_linear")}
    worst = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(100):
        x = r.uniform([0, 0, 0], [100, 30, 150])
        u = r.uniform(-5000, 5000, 1)
        note("h_x", _rel_err(bars.state.grad(x), central_gradient(bars.state.h_x, x)))
        note("h_e dx", _rel_err(h_e.dx(x, u), central_gradient(lambda xx: h_e.value(xx, u), x)))
        note("h_e du", _rel_err(h_e.du(x, u), central_gradient(lambda uu: h_e.value(x, uu), u)))
        note("h_u du", _rel_err(h_u.du(x, u), central_gradient(lambda uu: h_u.value(x, uu), u, step=1e-2)))
        note("h_u dx", _rel_err(h_u.dx(x, u), central_gradient(lambda xx: h_u.value(xx, u), x)))
        v = r.uniform(-2, 2, 3)
        note("h_u du (m=3)", _rel_err(h_u3.du(x, v), central_gradient(lambda uu: h_u3.value(x, uu), v)))
        for mode, pred in preds.items():
            note(f"predictor {mode}", _rel_err(pred.jac_u(x, u), central_gradient(lambda uu: pred(x, uu)[0], u, step=1e-2)))
    elapsed = time.perf_counter() - start
    ok = all(err <= 1e-5 for err in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(10, "analytic gradients vs central differences", ok, detail, elapsed, 2)


def test_11_cli_determinism(tmp_path):
    cfg = tmp_path / "default.cfg"
    cfg.write_text("")
    env = dict(os.environ)
    src = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src")
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    start = time.perf_counter()
    outputs = []
    for name in ("first", "second"):
        work = tmp_path / name
        work.mkdir()
        proc = subprocess.run([sys.executable, "-m", "icbf.cli", "run", str(cfg)], cwd=work, env=env,
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outputs.append((work / "icbf_out" / "combined.csv").read_bytes())
    elapsed = time.perf_counter() - start
    identical = outputs[0] == outputs[1]
    rows = outputs[0].count(b"\n") - 1
    report(11, "CLI run determinism", identical and rows == 40001,
           f"byte-identical {identical}, {rows} rows, {len(outputs[0])} bytes", elapsed, 20)
