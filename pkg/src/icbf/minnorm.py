"""Exact small-scale min-norm quadratic programs over halfspace intersections.

All problems have the form ``min ||v - c||^2  s.t.  p_i^T v >= d_i``. The solvers
enumerate active sets, which is exact and cheap for the handful of constraints a
safety filter stacks.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

ZERO_NORM = 1e-12
FEAS_TOL = 1e-9
MAX_ROWS = 8

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"


class RelativeDegreeError(ArithmeticError):
    """The barrier gradient in ``u`` vanishes where the constraint is binding."""


@dataclass(frozen=True)
class HalfspaceProblem:
    """Constraints ``P[i] @ v >= d[i]``."""

    P: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        d = np.atleast_1d(np.asarray(self.d, dtype=float))
        if P.shape[0] != d.shape[0]:
            raise ValueError("P and d must have the same number of rows")
        if not 1 <= P.shape[0] <= MAX_ROWS:
            raise ValueError(f"between 1 and {MAX_ROWS} constraints are supported")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(d))):
            raise ValueError("constraint data must be finite")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "d", d)

    @classmethod
    def from_rows(cls, rows: Sequence) -> "HalfspaceProblem":
        P = [np.atleast_1d(np.asarray(p, dtype=float)) for p, _ in rows]
        return cls(np.vstack(P), np.array([float(d) for _, d in rows]))

    @property
    def m(self) -> int:
        return self.P.shape[1]

    def __len__(self) -> int:
        return self.P.shape[0]


@dataclass(frozen=True)
class QPSolution:
    v_star: np.ndarray
    active_set: Tuple[int, ...]
    status: str

    @property
    def feasible(self) -> bool:
        return self.status == OPTIMAL


def minnorm_single(p, d: float) -> np.ndarray:
    """Closed-form ``argmin ||v||^2 s.t. p^T v >= d``.

    Returns ``(d / ||p||^2) p`` when ``d > 0`` and the zero vector otherwise.

    Raises:
        RelativeDegreeError: ``p`` vanishes while ``d > 0``.
    """
    p = np.asarray(p, dtype=float)
    if d <= 0.0:
        return np.zeros(p.shape[0])
    d = float(d)
    pp = float(p.dot(p))
    if pp < ZERO_NORM * ZERO_NORM:
        if d > ZERO_NORM:
            raise RelativeDegreeError(f"p = 0 while d = {d!r} > 0; not an integral CBF here")
        return np.zeros(p.shape[0])
    return (d / pp) * p


def minnorm_offset(p, d: float, bias) -> np.ndarray:
    """Solve ``argmin ||mu + bias||^2 s.t. p^T mu >= d``.

    With ``bias = u - k(x)`` this is the state-CBF program whose applied input is ``mu + u``.
    """
    p = np.asarray(p, dtype=float)
    mu0 = -np.asarray(bias, dtype=float)
    d = float(d)
    s = float(p @ mu0)
    if s >= d:
        return mu0
    pp = float(p @ p)
    if pp < ZERO_NORM * ZERO_NORM:
        if d - s > ZERO_NORM:
            raise RelativeDegreeError(f"p = 0 while the constraint is violated by {d - s!r}")
        return mu0
    return mu0 + ((d - s) / pp) * p


def _independent(G: np.ndarray) -> bool:
    eig = np.linalg.eigvalsh(G)
    return eig[0] > 1e-12 * max(eig[-1], 1e-300)


def minnorm_multi(problem: HalfspaceProblem) -> QPSolution:
    """Global minimiser of ``||v||^2`` over the polyhedron, or an infeasible status.

    Active sets are enumerated by size, then lexicographically, over linearly
    independent row subsets; the first KKT point (feasible, non-negative
    multipliers) is the unique optimum. If none exists, every enumerated
    candidate is probed for feasibility before infeasibility is reported.
    With a single decision variable the polyhedron is an interval and the
    minimiser is 0 clipped into it.
    """
    return solve_rows(problem.P.tolist(), problem.d.tolist())


def solve_rows(rows: Sequence[Sequence[float]], dl: Sequence[float]) -> QPSolution:
    """:func:`minnorm_multi` on plain ``rows`` / ``dl`` float lists, without validation."""
    k, m = len(rows), len(rows[0])
    sq = [sum(a * a for a in r) for r in rows]
    keep = []
    for i in range(k):
        if sq[i] < ZERO_NORM * ZERO_NORM:
            if dl[i] > ZERO_NORM:
                return QPSolution(np.zeros(m), (), INFEASIBLE)
            continue
        keep.append(i)
    norms = [math.sqrt(s) for s in sq]
    if m == 1:
        return _solve_interval([rows[i][0] for i in keep], [dl[i] for i in keep], keep, rows, dl, norms)

    def residuals(v):
        vn = math.sqrt(sum(a * a for a in v))
        out = []
        for i in range(k):
            s = sum(a * b for a, b in zip(rows[i], v)) - dl[i]
            out.append((s, FEAS_TOL * max(1.0, abs(dl[i]), norms[i] * vn)))
        return out

    def feasible(v):
        res = residuals(v)
        return all(res[i][0] >= -res[i][1] for i in keep)

    def finish(v):
        tight = tuple(i for i, (s, tol) in enumerate(residuals(v)) if abs(s) <= tol)
        return QPSolution(np.array(v, dtype=float), tight, OPTIMAL)

    candidates = []
    for size in range(0, min(len(keep), m) + 1):
        for subset in itertools.combinations(keep, size):
            if size == 0:
                v = [0.0] * m
                lam_ok = True
            elif size == 1:
                i = subset[0]
                lam = dl[i] / sq[i]
                v = [lam * a for a in rows[i]]
                lam_ok = lam >= 0.0
            else:
                PA = np.array([rows[i] for i in subset])
                G = PA @ PA.T
                if not _independent(G):
                    continue
                lam = np.linalg.solve(G, np.array([dl[i] for i in subset]))
                v = (PA.T @ lam).tolist()
                lam_ok = bool(np.all(lam >= -1e-12 * max(1.0, float(np.max(np.abs(lam))))))
            if feasible(v):
                if lam_ok:
                    return finish(v)
                candidates.append(v)

    # phase-1 probe: a nonempty polyhedron always contains one of the candidates
    if candidates:
        return finish(min(candidates, key=lambda c: sum(a * a for a in c)))
    return QPSolution(np.zeros(m), (), INFEASIBLE)


def _solve_interval(p, d, keep, rows, dl, norms) -> QPSolution:
    """One-dimensional case: the feasible set is an interval and ``v*`` is 0 clipped into it."""
    lo, hi = -math.inf, math.inf
    for pi, di in zip(p, d):
        bound = di / pi
        if pi > 0.0:
            lo = max(lo, bound)
        else:
            hi = min(hi, bound)
    v = min(max(0.0, lo), hi)
    tight = []
    for i in range(len(rows)):
        s = rows[i][0] * v - dl[i]
        tol = FEAS_TOL * max(1.0, abs(dl[i]), norms[i] * abs(v))
        if i in keep and s < -tol:
            return QPSolution(np.zeros(1), (), INFEASIBLE)
        if abs(s) <= tol:
            tight.append(i)
    return QPSolution(np.array([v]), tuple(tight), OPTIMAL)


def oracle_qp(problem: HalfspaceProblem, objective_center=None) -> QPSolution:
    """Reference solver for ``min ||v - center||^2`` used to cross-check the others.

    Projects the centre onto the affine hull of every row subset with a
    pseudo-inverse and keeps the best feasible projection. Exponential in the
    number of rows and intended for tests only.
    """
    P, d = problem.P, problem.d
    k, m = P.shape
    if m > 4:
        raise ValueError("oracle_qp supports m <= 4")
    c = np.zeros(m) if objective_center is None else np.asarray(objective_center, dtype=float)

    best, best_cost = None, np.inf
    for mask in range(1 << k):
        rows = [i for i in range(k) if mask >> i & 1]
        if rows:
            A = P[rows]
            b = d[rows]
            v = c + np.linalg.pinv(A) @ (b - A @ c)
            if np.max(np.abs(A @ v - b)) > 1e-9 * max(1.0, float(np.max(np.abs(b)))):
                continue  # inconsistent equalities
        else:
            v = c.copy()
        slack = P @ v - d
        scale = np.maximum(1.0, np.maximum(np.abs(d), np.abs(P).sum(axis=1) * np.abs(v).max()))
        if np.all(slack >= -1e-9 * scale):
            cost = float((v - c) @ (v - c))
            if cost < best_cost - 1e-15:
                best, best_cost = v, cost
    if best is None:
        return QPSolution(np.zeros(m), (), INFEASIBLE)
    tight = tuple(i for i in range(k) if abs(P[i] @ best - d[i]) <= 1e-9 * max(1.0, abs(d[i])))
    return QPSolution(best, tight, OPTIMAL)
