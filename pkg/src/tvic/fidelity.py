"""Fidelity-side formulas of the TV-IC model.

Two families live here. The exact infimal-convolution fidelity
``min_v lam1*|v| + lam2/2*(f-u-v)**2`` collapses pointwise to the Huber
function :func:`huber_phi`, with the optimal split given by soft shrinkage
(:func:`v_optimal`). The smoothed model replaces ``|.|`` by the C^2 Huber-type
function ``|.|_gamma`` whose derivative is :func:`h_gamma`; this is what the
Newton solver and the bilevel machinery differentiate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import ImageGrid, VectorField, as_grid, check_same_grid

DEFAULT_BOX = (1.0e3, 1.0e5)


@dataclass(frozen=True)
class FidelityParams:
    lambda1: float
    lambda2: float
    box_l1: float = DEFAULT_BOX[0]
    box_l2: float = DEFAULT_BOX[1]

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "box_l1", "box_l2"):
            val = float(getattr(self, name))
            if not np.isfinite(val):
                raise ValueError(f"{name} must be finite, got {val}")
            object.__setattr__(self, name, val)
        if self.box_l1 <= 0 or self.box_l2 <= 0:
            raise ValueError("box bounds must be positive")
        if not 0 <= self.lambda1 <= self.box_l1:
            raise ValueError(f"lambda1={self.lambda1} outside [0, {self.box_l1}]")
        if not 0 <= self.lambda2 <= self.box_l2:
            raise ValueError(f"lambda2={self.lambda2} outside [0, {self.box_l2}]")

    @property
    def threshold(self) -> float:
        """Huber breakpoint ``lambda1 / lambda2``."""
        return self.lambda1 / self.lambda2

    def with_lambdas(self, lambda1: float, lambda2: float) -> "FidelityParams":
        return FidelityParams(lambda1, lambda2, self.box_l1, self.box_l2)


@dataclass(frozen=True)
class SmoothingParams:
    epsilon: float = 1e-10
    gamma: float = 1e3

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        _check_gamma(self.gamma)


def _check_gamma(gamma: float) -> None:
    # below 1/2 the linear branch is empty and h_gamma jumps at the origin
    if not gamma > 0.5:
        raise ValueError(f"gamma must exceed 1/2, got {gamma}")


def _check_positive(params: FidelityParams) -> None:
    if params.lambda1 <= 0 or params.lambda2 <= 0:
        raise ValueError("huber_phi needs lambda1 > 0 and lambda2 > 0; the breakpoint lambda1/lambda2 is degenerate")


# -- exact (nonsmooth) fidelity ------------------------------------------------

def huber_phi(t, params: FidelityParams):
    """Pointwise IC fidelity: ``lam1*|t| - lam1**2/(2*lam2)`` beyond the
    breakpoint ``lam1/lam2``, ``lam2/2 * t**2`` inside it."""
    _check_positive(params)
    t = np.asarray(t, dtype=float)
    a = np.abs(t)
    l1, l2 = params.lambda1, params.lambda2
    out = np.where(a >= l1 / l2, l1 * a - l1 * l1 / (2 * l2), 0.5 * l2 * t * t)
    return float(out) if out.ndim == 0 else out


def v_optimal(residual, params: FidelityParams) -> ImageGrid:
    """Optimal split variable for ``residual = f - u``: soft shrinkage with
    threshold ``lam1/lam2``.

    ``lambda1 == 0`` returns the residual itself, ``lambda2 == 0`` returns
    zero; in both cases the fidelity vanishes.
    """
    r = as_grid(residual)
    if params.lambda1 == 0:
        return r
    if params.lambda2 == 0:
        return r.like(np.zeros(r.shape))
    thr = params.threshold
    x = r.data
    return r.like(np.sign(x) * np.maximum(np.abs(x) - thr, 0.0))


def phi_ic(u, f, params: FidelityParams) -> float:
    u, f = as_grid(u), as_grid(f)
    check_same_grid(u, f)
    if params.lambda1 == 0 or params.lambda2 == 0:
        return 0.0
    return float(np.sum(huber_phi(f.data - u.data, params)) * u.mesh_h**2)


# -- smoothed Huber-type regularization ------------------------------------------

def _radial(r: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude profile ``rho`` of ``h_gamma(z) = rho(|z|) z/|z|`` and ``rho'``."""
    lo = (1.0 - 0.5 / gamma) / gamma
    hi = (1.0 + 0.5 / gamma) / gamma
    s = 1.0 + 0.5 / gamma - gamma * r
    rho = np.where(r <= lo, gamma * r, np.where(r >= hi, 1.0, 1.0 - 0.5 * gamma * s * s))
    drho = np.where(r <= lo, gamma, np.where(r >= hi, 0.0, gamma * gamma * s))
    return rho, drho


def _radial_antiderivative(r: np.ndarray, gamma: float) -> np.ndarray:
    """``|z|_gamma`` as a function of ``r = |z|``, normalized to vanish at 0."""
    lo = (1.0 - 0.5 / gamma) / gamma
    hi = (1.0 + 0.5 / gamma) / gamma
    at_lo = 0.5 * gamma * lo * lo

    def middle(x):
        return at_lo + (x - lo) + ((1.0 + 0.5 / gamma - gamma * x) ** 3 - gamma**-3) / 6.0

    at_hi = middle(hi)
    rm = np.clip(r, lo, hi)
    return np.where(r <= lo, 0.5 * gamma * r * r, np.where(r >= hi, at_hi + (r - hi), middle(rm)))


def _unit(z: np.ndarray, r: np.ndarray) -> np.ndarray:
    safe = np.where(r > 0, r, 1.0)
    return z / safe[..., None]


def h_gamma(z, gamma: float, vector: bool = False):
    """Derivative of ``|.|_gamma``.

    Saturates to ``z/|z|`` once ``gamma*|z| - 1 >= 1/(2*gamma)``, equals
    ``gamma*z`` once ``gamma*|z| - 1 <= -1/(2*gamma)``, and blends the two
    with a quadratic in between. ``z`` is treated elementwise unless
    ``vector=True`` (last axis holds the components) or it is a
    :class:`VectorField`.
    """
    _check_gamma(gamma)
    if isinstance(z, VectorField):
        stacked = np.stack([z.dx, z.dy], axis=-1)
        out = h_gamma(stacked, gamma, vector=True)
        return VectorField(out[..., 0], out[..., 1], z.mesh_h)
    z = np.asarray(z, dtype=float)
    if not vector:
        rho, _ = _radial(np.abs(z), gamma)
        out = np.sign(z) * rho
        return float(out) if out.ndim == 0 else out
    r = np.linalg.norm(z, axis=-1)
    rho, _ = _radial(r, gamma)
    lin = r <= (1.0 - 0.5 / gamma) / gamma
    return np.where(lin[..., None], gamma * z, rho[..., None] * _unit(z, r))


def h_gamma_jacobian(z, gamma: float, vector: bool = False):
    """Analytic Jacobian of :func:`h_gamma`.

    Elementwise input returns ``rho'(|z|)``; vector input returns a
    ``(..., 2, 2)`` array ``rho/r (I - n n^T) + rho' n n^T`` (``gamma*I`` on
    the linear branch, including the origin).
    """
    _check_gamma(gamma)
    z = np.asarray(z, dtype=float)
    if not vector:
        _, drho = _radial(np.abs(z), gamma)
        return float(drho) if drho.ndim == 0 else drho
    dim = z.shape[-1]
    r = np.linalg.norm(z, axis=-1)
    rho, drho = _radial(r, gamma)
    n = _unit(z, r)
    lin = r <= (1.0 - 0.5 / gamma) / gamma
    ratio = np.where(lin, gamma, rho / np.where(lin, 1.0, r))
    nn = n[..., :, None] * n[..., None, :]
    eye = np.eye(dim)
    return ratio[..., None, None] * (eye - nn) + drho[..., None, None] * nn


def huber_gamma(z, gamma: float, vector: bool = False):
    """The smoothed absolute value ``|z|_gamma`` (antiderivative of
    :func:`h_gamma`, zero at the origin)."""
    _check_gamma(gamma)
    z = np.asarray(z, dtype=float)
    r = np.linalg.norm(z, axis=-1) if vector else np.abs(z)
    out = _radial_antiderivative(r, gamma)
    return float(out) if out.ndim == 0 else out


def prox_huber_l1(z, tau: float, gamma: float, tol: float = 1e-12, max_iter: int = 100):
    """Pointwise proximal map of ``tau * |.|_gamma``.

    Solves ``h_gamma(w) + (w - z)/tau = 0`` by Newton steps safeguarded with
    bisection on the bracket ``[0, |z|]``; the equation is strictly monotone
    in ``w`` so the root is unique.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    _check_gamma(gamma)
    grid = z if isinstance(z, ImageGrid) else None
    zz = np.asarray(grid.data if grid is not None else z, dtype=float)
    a = np.abs(zz)
    lo = np.zeros_like(a)
    hi = a.copy()
    # the linear-branch root is exact whenever it lands on that branch
    w = a / (1.0 + gamma * tau)
    for _ in range(max_iter):
        rho, drho = _radial(w, gamma)
        g = rho + (w - a) / tau
        lo = np.where(g < 0, w, lo)
        hi = np.where(g > 0, w, hi)
        step = g / (drho + 1.0 / tau)
        nxt = w - step
        outside = (nxt <= lo) | (nxt >= hi)
        nxt = np.where(outside, 0.5 * (lo + hi), nxt)
        done = np.max(np.abs(nxt - w), initial=0.0) <= tol * (1.0 + np.max(a, initial=0.0))
        w = nxt
        if done:
            break
    out = np.sign(zz) * w
    if grid is not None:
        return grid.like(out)
    return float(out) if out.ndim == 0 else out


def v_of_u(u, f, params: FidelityParams, smoothing: SmoothingParams) -> ImageGrid:
    """Minimizer in ``v`` of the regularized fidelity for fixed ``u``."""
    u, f = as_grid(u), as_grid(f)
    check_same_grid(u, f)
    if params.lambda1 == 0:
        denom = smoothing.epsilon + params.lambda2
        return u.like(params.lambda2 * (f.data - u.data) / denom)
    denom = smoothing.epsilon + params.lambda2
    z = params.lambda2 * (f.data - u.data) / denom
    return u.like(prox_huber_l1(z, params.lambda1 / denom, smoothing.gamma))


def phi_ic_regularized(u, v, f, params: FidelityParams, smoothing: SmoothingParams) -> float:
    u, v, f = as_grid(u), as_grid(v), as_grid(f)
    check_same_grid(u, v, f)
    vv = v.data
    res = f.data - u.data - vv
    total = (
        0.5 * smoothing.epsilon * np.sum(vv * vv)
        + params.lambda1 * np.sum(huber_gamma(vv, smoothing.gamma))
        + 0.5 * params.lambda2 * np.sum(res * res)
    )
    return float(total * u.mesh_h**2)
