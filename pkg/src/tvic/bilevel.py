"""Learning the fidelity weights ``(lambda1, lambda2)`` from a training pair.

The reduced cost ``lam -> F(u(lam))`` is differentiated with the adjoint
method: one extra linear solve with the (symmetric) Newton Jacobian at the
lower-level solution gives the whole gradient. Outer iterations are
projected BFGS with Armijo backtracking on the box ``[0, L1] x [0, L2]``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .denoise import (
    SolverBreakdown,
    SolverConfig,
    SolverState,
    _exact_blocks,
    _flat,
    _Problem,
    solve_lower_level,
)
from .fidelity import DEFAULT_BOX, FidelityParams, SmoothingParams, h_gamma, huber_gamma
from .grid import ImageGrid, as_grid, check_same_grid, difference_matrices

logger = logging.getLogger(__name__)

COST_KINDS = ("l2", "huber")


@dataclass(frozen=True)
class CostSpec:
    """Upper-level cost: ``|u - u_train|^2`` (``"l2"``) or the Huberized total
    variation of ``u - u_train`` (``"huber"``)."""

    kind: str
    training_image: ImageGrid
    gamma: float = 1e3

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in COST_KINDS:
            raise ValueError(f"cost kind must be one of {COST_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "training_image", as_grid(self.training_image))


@dataclass
class AdjointState:
    p1: ImageGrid
    p2: ImageGrid


@dataclass(frozen=True)
class BfgsConfig:
    eta_armijo: float = 1e-4
    tol_outer: float = 1e-6
    max_outer: int = 60
    initial_lambda: tuple = (1.0, 1.0)
    box: tuple = DEFAULT_BOX
    max_halvings: int = 30
    log_scale: bool = True
    log_floor: float = 1e-6
    max_log_step: float = 1.0

    def __post_init__(self):
        if not 0 < self.eta_armijo < 1:
            raise ValueError("eta_armijo must lie in (0, 1)")
        if not self.tol_outer > 0:
            raise ValueError("tol_outer must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")
        if len(self.box) != 2 or min(self.box) <= 0:
            raise ValueError("box must be two positive upper bounds")
        if self.log_scale and not 0 < self.log_floor < min(self.box):
            raise ValueError("log_floor must lie in (0, min(box))")


@dataclass
class LearnResult:
    lambda_opt: np.ndarray
    cost_history: list
    gradient_history: list
    multipliers: np.ndarray
    final_state: SolverState
    upper_multipliers: np.ndarray = None
    gradient: np.ndarray = None
    iterations: int = 0
    converged: bool = False
    line_search_failed: bool = False
    log: list = field(default_factory=list)
    armijo_log: list = field(default_factory=list)


# -- cost functionals -----------------------------------------------------------

def _check_cost_input(u, spec: CostSpec) -> ImageGrid:
    u = as_grid(u)
    check_same_grid(u, spec.training_image)
    return u


def cost(u, spec: CostSpec) -> float:
    u = _check_cost_input(u, spec)
    diff = u.data - spec.training_image.data
    h2 = u.mesh_h**2
    if spec.kind == "l2":
        return float(np.sum(diff * diff) * h2)
    dx, dy = difference_matrices(*u.shape, u.mesh_h)
    d = diff.ravel()
    mag = np.hypot(dx @ d, dy @ d)
    return float(np.sum(huber_gamma(mag, spec.gamma)) * h2)


def cost_derivative(u, spec: CostSpec) -> ImageGrid:
    """L2 Riesz representative of the cost derivative: ``2(u - u_train)``
    or ``-div h_gamma(grad(u - u_train))``."""
    u = _check_cost_input(u, spec)
    diff = u.data - spec.training_image.data
    if spec.kind == "l2":
        return u.like(2.0 * diff)
    dx, dy = difference_matrices(*u.shape, u.mesh_h)
    d = diff.ravel()
    hz = h_gamma(np.stack([dx @ d, dy @ d], axis=-1), spec.gamma, vector=True)
    return u.like(dx.T @ hz[:, 0] + dy.T @ hz[:, 1])


# -- sensitivities ------------------------------------------------------------

class SensitivitySystem:
    """Factorized Newton Jacobian at a lower-level solution.

    The Jacobian is the operator of both the linearized state equation and the
    adjoint equation, so one Schur-complement factorization serves both.
    """

    def __init__(self, y: SolverState, f, params: FidelityParams, smoothing: SmoothingParams | None = None):
        f = as_grid(f)
        check_same_grid(f, y.u, y.v)
        self.smoothing = smoothing or SmoothingParams()
        self.params = params
        self.grid = f
        self.prob = _Problem(f, params, self.smoothing)
        self.u, self.v = _flat(y.u), _flat(y.v)
        juu, self.dvv = _exact_blocks(self.prob, self.u, self.v)
        l2 = params.lambda2
        schur = (juu - sp.diags(l2 * l2 / self.dvv)).tocsc()
        try:
            self._lu = spla.splu(schur, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise SolverBreakdown(f"sensitivity system is singular: {exc}") from exc

    def solve(self, bu: np.ndarray, bv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        l2 = self.params.lambda2
        xu = self._lu.solve(bu - l2 * bv / self.dvv)
        xv = (bv - l2 * xu) / self.dvv
        return xu, xv

    def parameter_derivatives(self) -> tuple[np.ndarray, np.ndarray]:
        """Partial derivatives of the residual in ``lambda1`` and ``lambda2``
        as stacked ``(u, v)`` vectors."""
        r = self.u + self.v - self.prob.f
        hv = h_gamma(self.v, self.smoothing.gamma)
        return np.concatenate([np.zeros_like(hv), hv]), np.concatenate([r, r])

    def linearized(self, theta) -> tuple[ImageGrid, ImageGrid]:
        t1, t2 = float(theta[0]), float(theta[1])
        d1, d2 = self.parameter_derivatives()
        rhs = -(t1 * d1 + t2 * d2)
        n = self.u.size
        zu, zv = self.solve(rhs[:n], rhs[n:])
        return self.grid.like(zu), self.grid.like(zv)

    def adjoint(self, dcost: ImageGrid) -> AdjointState:
        p1, p2 = self.solve(-_flat(dcost), np.zeros(self.u.size))
        return AdjointState(self.grid.like(p1), self.grid.like(p2))


def solve_linearized(y: SolverState, f, params, smoothing=None, theta=(0.0, 0.0)):
    """Derivative of the solution map in direction ``theta``: returns ``(z1, z2)``."""
    return SensitivitySystem(y, f, params, smoothing).linearized(theta)


def solve_adjoint(y: SolverState, f, params, smoothing=None, spec: CostSpec | None = None) -> AdjointState:
    if spec is None:
        raise ValueError("solve_adjoint needs a CostSpec")
    return SensitivitySystem(y, f, params, smoothing).adjoint(cost_derivative(y.u, spec))


def reduced_gradient(y: SolverState, adj: AdjointState, f, params: FidelityParams, smoothing=None) -> np.ndarray:
    """``(<h_gamma(v), p2>, <u + v - f, p1 + p2>)``."""
    smoothing = smoothing or SmoothingParams()
    f = as_grid(f)
    h2 = f.mesh_h**2
    v = y.v.data
    r = y.u.data + v - f.data
    g1 = np.sum(h_gamma(v, smoothing.gamma) * adj.p2.data) * h2
    g2 = np.sum(r * (adj.p1.data + adj.p2.data)) * h2
    return np.array([g1, g2])


# -- outer loop -----------------------------------------------------------------

class ReducedCost:
    """``lam -> F(u(lam))`` with warm-started lower-level solves."""

    def __init__(self, f, spec: CostSpec, smoothing=None, solver_cfg: SolverConfig | None = None, box=DEFAULT_BOX):
        self.f = as_grid(f)
        check_same_grid(self.f, spec.training_image)
        self.spec = spec
        self.smoothing = smoothing or SmoothingParams()
        self.solver_cfg = solver_cfg or SolverConfig()
        self.box = tuple(float(b) for b in box)
        self.evaluations = 0

    def params(self, lam) -> FidelityParams:
        return FidelityParams(lam[0], lam[1], *self.box)

    def value(self, lam, warm: SolverState | None = None) -> tuple[float, SolverState]:
        state = solve_lower_level(self.f, self.params(lam), self.smoothing, self.solver_cfg, warm=warm)
        self.evaluations += 1
        return cost(state.u, self.spec), state

    def gradient(self, lam, state: SolverState) -> np.ndarray:
        params = self.params(lam)
        system = SensitivitySystem(state, self.f, params, self.smoothing)
        adj = system.adjoint(cost_derivative(state.u, self.spec))
        return reduced_gradient(state, adj, self.f, params, self.smoothing)


def _active(x, g, lower, upper, tiny=1e-12):
    span = upper - lower
    at_lower = (x <= lower + tiny * span) & (g > 0)
    at_upper = (x >= upper - tiny * span) & (g < 0)
    return at_lower | at_upper


def learn_parameters(
    f,
    spec: CostSpec,
    smoothing: SmoothingParams | None = None,
    cfg: BfgsConfig | None = None,
    solver_cfg: SolverConfig | None = None,
    callback=None,
) -> LearnResult:
    """Projected BFGS on the reduced cost.

    Each outer step solves the lower level (warm-started), the adjoint system,
    and forms the gradient; the quasi-Newton direction is restricted to the
    free parameters, backtracked until the Armijo inequality holds for the
    projected step, and the inverse-Hessian update is skipped whenever the
    curvature ``s^T y`` is not positive. Stops once both the projected
    gradient norm and the last parameter change are below ``tol_outer``.

    With ``cfg.log_scale`` the iteration runs in ``x = log(lambda)`` on
    ``[log(log_floor), log(L)]`` (gradient by the chain rule); the two
    weights routinely differ by orders of magnitude and the cost is sigmoidal
    in them, which stalls BFGS in linear coordinates. Norms, steps and the
    Armijo test then refer to ``x``.
    """
    cfg = cfg or BfgsConfig()
    box = np.asarray(cfg.box, dtype=float)
    problem = ReducedCost(f, spec, smoothing, solver_cfg, cfg.box)
    if cfg.log_scale:
        lower, upper = np.full(2, np.log(cfg.log_floor)), np.log(box)
        to_lam, to_x = np.exp, np.log
    else:
        lower, upper = np.zeros(2), box
        to_lam = to_x = np.asarray

    def evaluate(x, warm=None):
        lam = np.clip(to_lam(x), 0.0, box)
        val, st = problem.value(lam, warm)
        return lam, val, st

    def grad_x(lam, st):
        g = problem.gradient(lam, st)
        return g * lam if cfg.log_scale else g, g

    x = np.clip(to_x(np.clip(np.asarray(cfg.initial_lambda, dtype=float), 1e-300, None)), lower, upper)
    lam, val, state = evaluate(x)
    grad, glam = grad_x(lam, state)
    hinv = np.eye(2) / max(np.linalg.norm(grad), 1e-300)
    costs, grads = [val], [glam.copy()]
    rows = [dict(k=0, lambda1=lam[0], lambda2=lam[1], cost=val, grad_norm=float(np.linalg.norm(grad)),
                 alpha=0.0, lower_iterations=state.iterations)]
    armijo = []
    converged = failed = False
    k = 0
    step_norm = np.inf
    for k in range(1, cfg.max_outer + 1):
        act = _active(x, grad, lower, upper)
        pgrad = np.where(act, 0.0, grad)
        if np.linalg.norm(pgrad) <= cfg.tol_outer and (k == 1 or step_norm <= cfg.tol_outer):
            converged = True
            k -= 1
            break
        free = ~act
        d = np.zeros(2)
        d[free] = -hinv[np.ix_(free, free)] @ grad[free]
        if grad @ d >= 0:
            hinv = np.eye(2) / max(np.linalg.norm(pgrad), 1e-300)
            d = -hinv @ pgrad
        accepted = False
        for attempt in range(2):
            if cfg.log_scale and np.linalg.norm(d) > cfg.max_log_step:
                d *= cfg.max_log_step / np.linalg.norm(d)
            alpha = 1.0
            for _ in range(cfg.max_halvings + 1):
                xt = np.clip(x + alpha * d, lower, upper)
                step = xt - x
                slope = float(grad @ step)
                if not np.any(step):
                    break
                tlam, tval, tstate = evaluate(xt, warm=state)
                if tval - val <= cfg.eta_armijo * slope:
                    accepted = True
                    break
                alpha *= 0.5
            if accepted or attempt:
                break
            # retry once along the scaled projected gradient
            hinv = np.eye(2) / max(np.linalg.norm(pgrad), 1e-300)
            d = -hinv @ pgrad
        if not accepted:
            failed = True
            # stationary up to roundoff: the cost cannot decrease further
            converged = bool(np.linalg.norm(pgrad) <= cfg.tol_outer)
            logger.info("line search failed at outer iteration %d", k)
            k -= 1
            break
        armijo.append(dict(k=k, alpha=alpha, cost_old=val, cost_new=tval, slope=slope, eta=cfg.eta_armijo))
        tgrad, tglam = grad_x(tlam, tstate)
        yv = tgrad - grad
        sy = float(step @ yv)
        if sy > 0:
            rho = 1.0 / sy
            left = np.eye(2) - rho * np.outer(step, yv)
            hinv = left @ hinv @ left.T + rho * np.outer(step, step)
        step_norm = float(np.linalg.norm(step))
        x, lam, val, state, grad, glam = xt, tlam, tval, tstate, tgrad, tglam
        costs.append(val)
        grads.append(glam.copy())
        rows.append(dict(k=k, lambda1=lam[0], lambda2=lam[1], cost=val, grad_norm=float(np.linalg.norm(grad)),
                         alpha=alpha, lower_iterations=state.iterations))
        logger.info("outer %d lambda=(%.6g, %.6g) cost=%.6e |g|=%.3e alpha=%.3g", k, lam[0], lam[1], val,
                    np.linalg.norm(grad), alpha)
        if callback is not None:
            callback(rows[-1])
        pgrad = np.where(_active(x, grad, lower, upper), 0.0, grad)
        if max(np.linalg.norm(pgrad), step_norm) <= cfg.tol_outer:
            converged = True
            break

    span = upper - lower
    at_lower = x <= lower + 1e-12 * span
    at_upper = x >= upper - 1e-12 * span
    return LearnResult(
        lambda_opt=lam,
        cost_history=costs,
        gradient_history=grads,
        multipliers=np.where(at_lower, glam, 0.0),
        final_state=state,
        upper_multipliers=np.where(at_upper, -glam, 0.0),
        gradient=glam,
        iterations=k,
        converged=converged,
        line_search_failed=failed,
        log=rows,
        armijo_log=armijo,
    )


ITERATION_CSV_HEADER = ["k", "lambda1", "lambda2", "cost", "grad_norm", "alpha", "lower_iterations"]


def write_iteration_csv(result: LearnResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ITERATION_CSV_HEADER)
        writer.writeheader()
        for row in result.log:
            writer.writerow({key: row[key] for key in ITERATION_CSV_HEADER})
