"""Lower-level TV-IC solver.

Minimizes, jointly over ``(u, v)``,

    eps/2 (|u|_H1^2 + |v|^2) + |grad u|_{gamma,L1} + lam1 |v|_{gamma,L1}
        + lam2/2 |f - u - v|^2

with a primal-dual semismooth Newton method: the curvature blocks of the
Newton matrix are built from dual variables ``q ~ h_gamma(grad u)`` and
``w ~ h_gamma(v)`` that are carried along and projected, which avoids the
stalling of plain primal Newton for large ``gamma``. The right-hand side is
always the primal residual and the matrix is SPD, so every step is a descent
direction for the energy; steps are damped with an Armijo rule on the energy.
The ``v`` block of the matrix is diagonal and is eliminated by a Schur
complement before the sparse factorization.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fidelity import (
    FidelityParams,
    SmoothingParams,
    _radial,
    _radial_antiderivative,
    h_gamma,
    h_gamma_jacobian,
)
from .grid import ImageGrid, VectorField, as_grid, check_same_grid, difference_matrices

logger = logging.getLogger(__name__)


class SolverBreakdown(RuntimeError):
    """Raised when a linear solve fails or an iterate stops being finite."""


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-6
    max_iter: int = 35
    step_tol: float | None = None
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    max_backtracks: int = 40
    linear_solver: str = "direct"
    linear_tol: float = 1e-10
    curvature_floor: float = 1e-6

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.armijo_c < 1 or not 0 < self.armijo_shrink < 1:
            raise ValueError("Armijo parameters must lie in (0, 1)")
        if self.linear_solver not in ("direct", "cg"):
            raise ValueError(f"unknown linear_solver {self.linear_solver!r}")
        if not 0 <= self.curvature_floor < 1:
            raise ValueError("curvature_floor must lie in [0, 1)")


@dataclass
class SolverState:
    """Solution pair ``y = (u, v)`` with diagnostics and the Newton duals."""

    u: ImageGrid
    v: ImageGrid
    residual_norm: float = np.inf
    iterations: int = 0
    converged: bool = False
    stop_reason: str = ""
    q: VectorField | None = None
    w: np.ndarray | None = None
    energy_history: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)

    @property
    def mesh_h(self) -> float:
        return self.u.mesh_h


def _flat(g: ImageGrid) -> np.ndarray:
    return np.asarray(g.data, dtype=float).ravel()


class _Problem:
    """Flattened lower-level problem; everything is row-major vectors."""

    def __init__(self, f: ImageGrid, params: FidelityParams, smoothing: SmoothingParams, freeze_v: bool = False):
        self.f_grid = f
        self.shape = f.shape
        self.h = f.mesh_h
        self.f = _flat(f)
        self.n = self.f.size
        self.l1 = params.lambda1
        self.l2 = params.lambda2
        self.eps = smoothing.epsilon
        self.gamma = smoothing.gamma
        self.freeze_v = freeze_v
        self.Dx, self.Dy = difference_matrices(*self.shape, self.h)
        self.lap = (self.Dx.T @ self.Dx + self.Dy.T @ self.Dy).tocsr()

    def grad(self, u):
        return self.Dx @ u, self.Dy @ u

    def energy(self, u, v) -> float:
        gx, gy = self.grad(u)
        g = self.gamma
        res = self.f - u - v
        total = (
            0.5 * self.eps * (u @ u + gx @ gx + gy @ gy + v @ v)
            + _radial_antiderivative(np.hypot(gx, gy), g).sum()
            + self.l1 * _radial_antiderivative(np.abs(v), g).sum()
            + 0.5 * self.l2 * (res @ res)
        )
        return float(total * self.h**2)

    def residual(self, u, v):
        gx, gy = self.grad(u)
        g = self.gamma
        hz = h_gamma(np.stack([gx, gy], axis=-1), g, vector=True)
        q = u + v - self.f
        ru = self.eps * (u + self.lap @ u) + self.Dx.T @ hz[:, 0] + self.Dy.T @ hz[:, 1] + self.l2 * q
        if self.freeze_v:
            return ru, np.zeros_like(v)
        rv = self.eps * v + self.l1 * h_gamma(v, g) + self.l2 * q
        return ru, rv

    def residual_norm(self, ru, rv) -> float:
        return float(self.h * np.sqrt(ru @ ru + rv @ rv))

    def tv_block(self, cxx, cxy, cyy):
        Dx, Dy = self.Dx, self.Dy
        blk = Dx.T @ sp.diags(cxx) @ Dx + Dy.T @ sp.diags(cyy) @ Dy
        if np.any(cxy):
            off = Dx.T @ sp.diags(cxy) @ Dy
            blk = blk + off + off.T
        return blk

    def uu_base(self):
        ident = sp.identity(self.n, format="csr")
        return self.eps * (ident + self.lap) + self.l2 * ident

    def vv_diag(self, curvature):
        return (self.eps + self.l1 * curvature) + self.l2


def _m_profile(r, gamma):
    """``m(r) = r / rho(r)`` and ``m'(r)``, so ``h_gamma(z) = z / m(|z|)``."""
    rho, drho = _radial(r, gamma)
    lin = r <= (1.0 - 0.5 / gamma) / gamma
    rs = np.where(lin, 1.0, rho)
    m = np.where(lin, 1.0 / gamma, r / rs)
    dm = np.where(lin, 0.0, (rs - r * drho) / (rs * rs))
    return m, dm


def _project(scale_dm, mag, bound=1.0):
    # rescale so that scale_dm * mag <= bound
    over = scale_dm * mag > bound
    return np.where(over, bound / np.where(over, scale_dm * mag, 1.0), 1.0)


def _factor_solve(mat, rhs):
    return spla.splu(mat.tocsc(), permc_spec="COLAMD").solve(rhs)


def _solve_spd(mat, rhs, cfg: SolverConfig, shifts=(1e-14, 1e-12, 1e-10)):
    """Solve with the SPD Newton matrix.

    In degenerate regimes (non-unique minimizers) the matrix is singular to
    working precision; the direct solver then retries with small diagonal
    shifts relative to the largest diagonal entry.
    """
    try:
        if cfg.linear_solver == "cg":
            diag = mat.diagonal()
            prec = spla.LinearOperator(mat.shape, matvec=lambda x: x / diag)
            sol, info = spla.cg(mat, rhs, rtol=cfg.linear_tol, maxiter=10 * mat.shape[0], M=prec)
            if info != 0:
                raise SolverBreakdown(f"CG did not converge (info={info})")
            return sol
        try:
            return _factor_solve(mat, rhs)
        except RuntimeError as first:
            scale = float(np.max(np.abs(mat.diagonal())))
            ident = sp.identity(mat.shape[0], format="csr")
            for rel in shifts:
                try:
                    return _factor_solve(mat + rel * scale * ident, rhs)
                except RuntimeError:
                    continue
            raise first
    except RuntimeError as exc:
        if isinstance(exc, SolverBreakdown):
            raise
        raise SolverBreakdown(f"sparse factorization failed: {exc}") from exc


def solve_lower_level(
    f,
    params: FidelityParams,
    smoothing: SmoothingParams | None = None,
    cfg: SolverConfig | None = None,
    warm: SolverState | None = None,
    freeze_v: bool = False,
) -> SolverState:
    """Compute the joint minimizer ``(u, v)`` for data ``f``.

    Starts from ``warm`` when given (duals included), else from ``u = f``,
    ``v = 0``. Stops when the discrete L2 norm of the residual drops below
    ``cfg.tol`` or, after a full Newton step, when the change between
    consecutive iterates does; either rule counts as convergence. The
    residual of the stiff TV block scales like ``gamma / h**2`` times the
    error in ``u``, so the iterate rule is usually the one that fires.
    ``freeze_v=True`` pins ``v = 0``, giving the Huber-TV-L2 problem.
    """
    f = as_grid(f)
    smoothing = smoothing or SmoothingParams()
    cfg = cfg or SolverConfig()
    prob = _Problem(f, params, smoothing, freeze_v)
    g, h, n = prob.gamma, prob.h, prob.n
    step_tol = cfg.tol if cfg.step_tol is None else cfg.step_tol

    if warm is not None:
        check_same_grid(f, warm.u, warm.v)
        u, v = _flat(warm.u).copy(), _flat(warm.v).copy()
        if freeze_v:
            v[:] = 0.0
    else:
        u, v = prob.f.copy(), np.zeros(n)
    if warm is not None and warm.q is not None:
        qx, qy = warm.q.dx.ravel().copy(), warm.q.dy.ravel().copy()
        w = np.asarray(warm.w, dtype=float).ravel().copy()
    else:
        qx, qy = np.zeros(n), np.zeros(n)
        w = np.zeros(n)

    energy = prob.energy(u, v)
    energies = [energy]
    steps = []
    ru, rv = prob.residual(u, v)
    rnorm = prob.residual_norm(ru, rv)
    reason = "max_iter"
    it = 0
    for it in range(1, cfg.max_iter + 1):
        if rnorm <= cfg.tol:
            reason = "residual"
            it -= 1
            break
        gx, gy = prob.grad(u)
        r = np.hypot(gx, gy)
        m, dm = _m_profile(r, g)
        safe = np.where(r > 0, r, 1.0)
        nx, ny = gx / safe, gy / safe
        sc = _project(dm, np.hypot(qx, qy), 1.0 - cfg.curvature_floor)
        px, py = qx * sc, qy * sc
        cxx = (1.0 - dm * px * nx) / m
        cyy = (1.0 - dm * py * ny) / m
        cxy = -0.5 * dm * (px * ny + py * nx) / m
        S = prob.tv_block(cxx, cxy, cyy) + prob.eps * (sp.identity(n, format="csr") + prob.lap)
        if freeze_v:
            S = S + prob.l2 * sp.identity(n, format="csr")
            du = _solve_spd(S, -ru, cfg)
            dv = np.zeros(n)
            cw = np.zeros(n)
        else:
            mv, dmv = _m_profile(np.abs(v), g)
            ws = w * _project(dmv, np.abs(w), 1.0 - cfg.curvature_floor)
            cw = (1.0 - dmv * ws * np.sign(v)) / mv
            d = prob.vv_diag(cw)
            # l2 - l2**2 / d written without the cancellation
            S = S + sp.diags(prob.l2 * (d - prob.l2) / d)
            du = _solve_spd(S, -ru + prob.l2 * rv / d, cfg)
            dv = (-rv - prob.l2 * du) / d
        if not (np.all(np.isfinite(du)) and np.all(np.isfinite(dv))):
            raise SolverBreakdown(f"non-finite Newton step at iteration {it}")

        dgx, dgy = prob.grad(du)
        hx, hy = gx / m, gy / m
        dqx = cxx * dgx + cxy * dgy - (qx - hx)
        dqy = cxy * dgx + cyy * dgy - (qy - hy)
        dw = cw * dv - (w - v / _m_profile(np.abs(v), g)[0])

        slope = float((ru @ du + rv @ dv) * h * h)
        t = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks):
            un, vn = u + t * du, v + t * dv
            en = prob.energy(un, vn)
            if en <= energy + cfg.armijo_c * t * slope:
                accepted = True
                break
            # at roundoff level the energy can no longer rank iterates
            if t == 1.0 and en <= energy + 1e-13 * max(1.0, abs(energy)):
                run, rvn = prob.residual(un, vn)
                if prob.residual_norm(run, rvn) < rnorm:
                    accepted = True
                    break
            t *= cfg.armijo_shrink
        if not accepted:
            reason = "line_search"
            logger.debug("line search stalled at iteration %d (residual %.3e, slope %.3e, last rise %.3e)",
                         it, rnorm, slope, en - energy)
            it -= 1
            break
        if not np.isfinite(en):
            raise SolverBreakdown(f"non-finite energy at iteration {it}")
        u, v = un, vn
        qx, qy, w = qx + t * dqx, qy + t * dqy, w + t * dw
        energy = en
        energies.append(en)
        steps.append(t)
        ru, rv = prob.residual(u, v)
        rnorm = prob.residual_norm(ru, rv)
        logger.debug("iter %d energy %.12e residual %.3e step %.3g", it, en, rnorm, t)
        if rnorm <= cfg.tol:
            reason = "residual"
            break
        if t == 1.0 and h * np.sqrt(du @ du + dv @ dv) <= step_tol:
            reason = "step"
            break

    shape = prob.shape
    return SolverState(
        u=ImageGrid(u.reshape(shape), h),
        v=ImageGrid(v.reshape(shape), h),
        residual_norm=rnorm,
        iterations=it,
        converged=reason in ("residual", "step") or bool(rnorm <= cfg.tol),
        stop_reason=reason,
        q=VectorField(qx.reshape(shape), qy.reshape(shape), h),
        w=w.reshape(shape),
        energy_history=energies,
        step_sizes=steps,
    )


def _unpack(y):
    if isinstance(y, SolverState):
        return y.u, y.v
    u, v = y
    return as_grid(u), as_grid(v)


def residual(y, f, params: FidelityParams, smoothing: SmoothingParams | None = None):
    """Strong form of the first-order system, as a pair of grids.

    ``R_u = eps*(u - div grad u) - div h_gamma(grad u) + lam2*(u+v-f)`` and
    ``R_v = eps*v + lam1*h_gamma(v) + lam2*(u+v-f)``; pairing them with a
    direction gives the directional derivative of the energy.
    """
    u, v = _unpack(y)
    f = as_grid(f)
    check_same_grid(f, u, v)
    prob = _Problem(f, params, smoothing or SmoothingParams())
    ru, rv = prob.residual(_flat(u), _flat(v))
    return u.like(ru), u.like(rv)


def lower_level_energy(y, f, params: FidelityParams, smoothing: SmoothingParams | None = None) -> float:
    u, v = _unpack(y)
    f = as_grid(f)
    check_same_grid(f, u, v)
    prob = _Problem(f, params, smoothing or SmoothingParams())
    return prob.energy(_flat(u), _flat(v))


def newton_jacobian(y, f, params: FidelityParams, smoothing: SmoothingParams | None = None) -> sp.csr_matrix:
    """Exact Jacobian of :func:`residual` at ``y`` as a sparse ``2n x 2n`` block
    matrix ``[[A_uu, lam2 I], [lam2 I, A_vv]]`` (symmetric, SPD for eps > 0)."""
    u, v = _unpack(y)
    f = as_grid(f)
    check_same_grid(f, u, v)
    smoothing = smoothing or SmoothingParams()
    prob = _Problem(f, params, smoothing)
    juu, dvv = _exact_blocks(prob, _flat(u), _flat(v))
    off = prob.l2 * sp.identity(prob.n, format="csr")
    return sp.bmat([[juu, off], [off, sp.diags(dvv)]], format="csr")


def _exact_blocks(prob: _Problem, u, v):
    gx, gy = prob.grad(u)
    jac = h_gamma_jacobian(np.stack([gx, gy], axis=-1), prob.gamma, vector=True)
    juu = prob.tv_block(jac[:, 0, 0], jac[:, 0, 1], jac[:, 1, 1]) + prob.uu_base()
    dvv = prob.vv_diag(h_gamma_jacobian(v, prob.gamma))
    return juu.tocsr(), dvv
