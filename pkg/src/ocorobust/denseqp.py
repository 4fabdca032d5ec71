"""Dense strictly convex QP solver (dual active-set method of Goldfarb-Idnani).

Solves  min 1/2 x'Hx + q'x  s.t.  A_in x <= b_in,  A_eq x = b_eq
for small dense problems with H positive definite. The dual method starts
from the unconstrained optimum and adds violated constraints one at a time,
so no feasible starting point is needed and the returned active set satisfies
complementary slackness exactly. Fully deterministic: ties break on the
lowest constraint index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, FactorizationError, InfeasibleError
from .matlin import as_matrix, as_vector

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10000

_EMPTY = None


@dataclass
class QpProblem:
    hessian: np.ndarray
    linear: np.ndarray
    ineq_normals: np.ndarray = _EMPTY
    ineq_offsets: np.ndarray = _EMPTY
    eq_normals: np.ndarray = _EMPTY
    eq_offsets: np.ndarray = _EMPTY

    def __post_init__(self):
        self.hessian = as_matrix(self.hessian, "hessian")
        self.linear = as_vector(self.linear, "linear")
        n = self.linear.size
        if self.hessian.shape != (n, n):
            raise DimensionMismatch("hessian shape does not match linear term")
        scale = max(1.0, float(np.abs(self.hessian).max()))
        if not np.allclose(self.hessian, self.hessian.T, atol=1e-10 * scale, rtol=0.0):
            raise FactorizationError("hessian is not symmetric")
        if self.ineq_normals is None:
            self.ineq_normals = np.zeros((0, n))
            self.ineq_offsets = np.zeros(0)
        else:
            self.ineq_normals = as_matrix(self.ineq_normals, "ineq_normals")
            self.ineq_offsets = as_vector(self.ineq_offsets, "ineq_offsets")
        if self.eq_normals is None:
            self.eq_normals = np.zeros((0, n))
            self.eq_offsets = np.zeros(0)
        else:
            self.eq_normals = as_matrix(self.eq_normals, "eq_normals")
            self.eq_offsets = as_vector(self.eq_offsets, "eq_offsets")
        for mat, off, label in (
            (self.ineq_normals, self.ineq_offsets, "ineq"),
            (self.eq_normals, self.eq_offsets, "eq"),
        ):
            if mat.shape[1] != n or mat.shape[0] != off.size:
                raise DimensionMismatch(f"{label} constraint dims inconsistent")
        try:
            scipy.linalg.cho_factor(self.hessian, check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            raise FactorizationError("hessian is not positive definite") from exc

    @property
    def nvar(self):
        return self.linear.size


@dataclass
class QpSolution:
    x: np.ndarray
    kkt_residual: float
    status: str  # "optimal" | "infeasible" | "max_iter"
    ineq_multipliers: np.ndarray = None
    eq_multipliers: np.ndarray = None


def solve_qp(p, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Solve the QP. Status "optimal" guarantees KKT residual <= tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = p.nvar
    meq = p.eq_offsets.size
    mineq = p.ineq_offsets.size
    # Combined constraints in ">= d" form: equalities first (kept verbatim,
    # the working sign is tracked separately), then negated inequalities.
    cn = np.vstack([p.eq_normals, -p.ineq_normals]) if meq + mineq else np.zeros((0, n))
    cd = np.concatenate([p.eq_offsets, -p.ineq_offsets])
    cho = scipy.linalg.cho_factor(p.hessian, check_finite=False)
    x, active, mult, signs, status = _gi_core(cho, p.linear, cn, cd, meq, tol, max_iter)
    return _assemble(p.hessian, p.linear, p.ineq_normals, p.ineq_offsets,
                     p.eq_normals, p.eq_offsets, x, active, mult, signs, meq,
                     status, tol)


def _gi_core(cho, linear, cn, cd, meq, tol, max_iter):
    """Dual active-set iteration on prefactored data; no validation."""
    mineq = cd.size - meq

    def hsolve(v):
        return scipy.linalg.cho_solve(cho, v, check_finite=False)

    x = hsolve(-linear)
    active: list[int] = []
    mult: list[float] = []
    signs: dict[int, float] = {}
    feas_scale = 1.0 + float(np.abs(cd).max()) if cd.size else 1.0
    drop_tol = 1e-11

    def directions(n_eff):
        if not active:
            z = hsolve(n_eff)
            return z, np.zeros(0)
        nmat = np.stack([signs.get(j, 1.0) * cn[j] for j in active], axis=1)
        hin = hsolve(nmat)
        hinp = hsolve(n_eff)
        bmat = nmat.T @ hin
        r = np.linalg.solve(bmat, nmat.T @ hinp)
        z = hinp - hin @ r
        return z, r

    pending_eq = list(range(meq))
    iters = 0
    while True:
        if pending_eq:
            idx = pending_eq.pop(0)
            slack = float(cn[idx] @ x - cd[idx])
            sigma = -1.0 if slack > 0 else 1.0
        else:
            if mineq:
                slacks = cn[meq:] @ x - cd[meq:]
                if active:
                    slacks[[j - meq for j in active if j >= meq]] = 0.0
                cand = int(np.argmin(slacks))
                if slacks[cand] >= -tol * 0.1:
                    return x, active, mult, signs, "optimal"
                idx, sigma = cand + meq, 1.0
            else:
                return x, active, mult, signs, "optimal"

        n_eff = sigma * cn[idx]
        d_eff = sigma * cd[idx]
        u_plus = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                return x, active, mult, signs, "max_iter"
            z, r = directions(n_eff)
            ztn = float(n_eff @ z)
            slack = float(n_eff @ x - d_eff)
            if abs(slack) <= 1e-13 * feas_scale and ztn <= drop_tol and idx < meq:
                break  # redundant but consistent equality
            t1, block = np.inf, None
            for pos, j in enumerate(active):
                if j >= meq and r[pos] > drop_tol:
                    ratio = mult[pos] / r[pos]
                    if ratio < t1 - 1e-15:
                        t1, block = ratio, pos
            t2 = -slack / ztn if ztn > drop_tol else np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                return x, active, mult, signs, "infeasible"
            step = min(t1, t2)
            if np.isfinite(t2):
                x = x + step * z
            for pos in range(len(mult)):
                mult[pos] -= step * r[pos]
            u_plus += step
            if t2 <= t1:
                active.append(idx)
                mult.append(u_plus)
                signs[idx] = sigma
                break
            active.pop(block)
            mult.pop(block)


def _assemble(hessian, linear, ineq_n, ineq_b, eq_n, eq_b, x, active, mult,
              signs, meq, status, tol):
    lam = np.zeros(ineq_b.size)
    nu = np.zeros(meq)
    for j, u in zip(active, mult):
        if j < meq:
            nu[j] = -u * signs.get(j, 1.0)
        else:
            lam[j - meq] = u
    grad = hessian @ x + linear + ineq_n.T @ lam + eq_n.T @ nu
    res = float(np.linalg.norm(grad))
    if ineq_b.size:
        viol = ineq_n @ x - ineq_b
        res = max(res, float(viol.max(initial=0.0)))
        res = max(res, float(np.abs(lam * viol).max(initial=0.0)))
        res = max(res, float(max(0.0, -lam.min(initial=0.0))))
    if meq:
        res = max(res, float(np.abs(eq_n @ x - eq_b).max()))
    if status == "optimal" and res > tol:
        status = "max_iter"
    return QpSolution(x=x, kkt_residual=res, status=status, ineq_multipliers=lam, eq_multipliers=nu)


class PrefactoredQp:
    """Repeated QP solves sharing the Hessian and all constraint normals.

    Validates and factors once; each ``solve`` supplies the linear term and
    the right-hand sides only. Used on the per-step hot paths.
    """

    def __init__(self, hessian, ineq_normals=None, eq_normals=None):
        self.hessian = as_matrix(hessian, "hessian")
        n = self.hessian.shape[0]
        scale = max(1.0, float(np.abs(self.hessian).max()))
        if not np.allclose(self.hessian, self.hessian.T, atol=1e-10 * scale, rtol=0.0):
            raise FactorizationError("hessian is not symmetric")
        try:
            self.cho = scipy.linalg.cho_factor(self.hessian, check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            raise FactorizationError("hessian is not positive definite") from exc
        self.ineq_normals = (np.zeros((0, n)) if ineq_normals is None
                             else as_matrix(ineq_normals, "ineq_normals"))
        self.eq_normals = (np.zeros((0, n)) if eq_normals is None
                           else as_matrix(eq_normals, "eq_normals"))
        self.meq = self.eq_normals.shape[0]
        self.cn = np.vstack([self.eq_normals, -self.ineq_normals])

    def solve(self, linear, ineq_offsets=None, eq_offsets=None,
              tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
        ineq_b = (np.zeros(self.ineq_normals.shape[0]) if ineq_offsets is None
                  else np.asarray(ineq_offsets, float))
        eq_b = (np.zeros(self.meq) if eq_offsets is None
                else np.asarray(eq_offsets, float))
        cd = np.concatenate([eq_b, -ineq_b])
        linear = np.asarray(linear, float)
        x, active, mult, signs, status = _gi_core(
            self.cho, linear, self.cn, cd, self.meq, tol, max_iter)
        return _assemble(self.hessian, linear, self.ineq_normals, ineq_b,
                         self.eq_normals, eq_b, x, active, mult, signs,
                         self.meq, status, tol)


def project_polytope(x, target, eq=None, tol=DEFAULT_TOL):
    """Euclidean projection of x onto {y : target constraints, eq constraints}.

    ``target`` is an HPolytope or TightenedOffsets; ``eq`` an optional
    (matrix, vector) pair of equality constraints.
    """
    x = as_vector(x, "x")
    eq_n, eq_b = (None, None) if eq is None else (eq[0], eq[1])
    prob = QpProblem(
        hessian=2.0 * np.eye(x.size),
        linear=-2.0 * x,
        ineq_normals=target.normals,
        ineq_offsets=target.offsets,
        eq_normals=eq_n,
        eq_offsets=eq_b,
    )
    sol = solve_qp(prob, tol=tol)
    if sol.status != "optimal":
        raise InfeasibleError(f"projection failed with status {sol.status}")
    return sol.x


def polytope_is_empty(normals, offsets, tol=1e-9):
    """Exact emptiness test for {x : normals x <= offsets} via a feasibility QP."""
    normals = as_matrix(normals, "normals")
    offsets = as_vector(offsets, "offsets")
    prob = QpProblem(
        hessian=2.0 * np.eye(normals.shape[1]),
        linear=np.zeros(normals.shape[1]),
        ineq_normals=normals,
        ineq_offsets=offsets,
    )
    sol = solve_qp(prob)
    return sol.status == "infeasible"
