"""Closed-form TV-IC solutions for one-dimensional step data.

The data is ``f = h`` on ``[-L, L]`` and ``0`` on the rest of ``(-2L, 2L)``.
Depending on ``(lambda1, lambda2)`` the minimizer is the mean ``h/2``, a
family of constants, a family of piecewise constants with jumps at ``+-L``,
or a unique clipped step. :func:`verify_optimality` checks any sampled
candidate against the primal-dual optimality system.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fidelity import FidelityParams
from .grid import ImageGrid

__all__ = [
    "StepSignal",
    "Regime",
    "ExactSolution",
    "OptimalityReport",
    "classify_regime",
    "exact_solution",
    "verify_optimality",
    "regime_diagram",
    "write_regime_csv",
]

_REL = 1e-12


@dataclass(frozen=True)
class StepSignal:
    """Step of height ``height_h`` on ``[-L, L]`` inside ``(-2L, 2L)``."""

    half_width_l: float = 1.0
    height_h: float = 1.0
    samples: int = 1024

    def __post_init__(self):
        if not (self.half_width_l > 0 and math.isfinite(self.half_width_l)):
            raise ValueError("half_width_l must be positive")
        if not (self.height_h > 0 and math.isfinite(self.height_h)):
            raise ValueError("height_h must be positive")
        if int(self.samples) != self.samples or self.samples < 4:
            raise ValueError("samples must be an integer >= 4")

    @property
    def mesh(self) -> float:
        return 4.0 * self.half_width_l / self.samples

    @property
    def centers(self) -> np.ndarray:
        return -2.0 * self.half_width_l + (np.arange(self.samples) + 0.5) * self.mesh

    @property
    def edges(self) -> np.ndarray:
        return -2.0 * self.half_width_l + np.arange(self.samples + 1) * self.mesh

    @property
    def inside(self) -> np.ndarray:
        return np.abs(self.centers) <= self.half_width_l

    def values(self) -> np.ndarray:
        return np.where(self.inside, self.height_h, 0.0)

    def grid(self) -> ImageGrid:
        """Sampled data as a 1 x N grid whose mesh is the cell width 4L/N."""
        return ImageGrid(self.values()[None, :], mesh_h=self.mesh)

    def piecewise(self, outer_left: float, middle: float, outer_right: float | None = None) -> np.ndarray:
        if outer_right is None:
            outer_right = outer_left
        x = self.centers
        out = np.full(self.samples, float(middle))
        out[x < -self.half_width_l] = outer_left
        out[x > self.half_width_l] = outer_right
        return out


class Regime(enum.IntEnum):
    AMBIGUOUS = 0
    MEAN_HALF = 1
    CONSTANT_FAMILY = 2
    DISCONTINUOUS_FAMILY = 3
    UNIQUE_CLIPPED = 4

    @property
    def unique(self) -> bool:
        return self in (Regime.MEAN_HALF, Regime.UNIQUE_CLIPPED)


def _lambdas(params: FidelityParams) -> tuple[float, float]:
    l1, l2 = float(params.lambda1), float(params.lambda2)
    if not (l1 > 0 and l2 > 0):
        raise ValueError("both weights must be positive for the step solutions")
    return l1, l2


def classify_regime(step: StepSignal, params: FidelityParams) -> Regime:
    """Which closed-form case applies. Tests run clipped, jump family, constant family, mean."""
    l1, l2 = _lambdas(params)
    L, h = step.half_width_l, step.height_h
    ratio = l1 / l2
    crit1, crit2 = 1.0 / L, 2.0 / (h * L)
    on_crit1 = math.isclose(l1, crit1, rel_tol=_REL)
    half_ge = h / 2 >= ratio or math.isclose(h / 2, ratio, rel_tol=_REL)
    if l2 > crit2 and l1 > crit1 and not on_crit1:
        return Regime.UNIQUE_CLIPPED
    if half_ge and on_crit1:
        return Regime.DISCONTINUOUS_FAMILY
    if half_ge and l1 < crit1:
        return Regime.CONSTANT_FAMILY
    if h / 2 < ratio and (l2 <= crit2 or math.isclose(l2, crit2, rel_tol=_REL)):
        return Regime.MEAN_HALF
    return Regime.AMBIGUOUS


@dataclass(frozen=True)
class ExactSolution:
    """A minimizer plus, for the non-unique cases, the admissible ranges.

    ``family_params`` maps a name to a closed interval ``(lo, hi)``:
    ``c`` for constant solutions, ``c1``/``c2`` for the outer plateaus and
    ``d`` for the drop of the middle plateau below ``h``.
    """

    regime: Regime
    representative: np.ndarray
    step: StepSignal
    family_params: dict = field(default_factory=dict)

    def grid(self) -> ImageGrid:
        return ImageGrid(self.representative[None, :], mesh_h=self.step.mesh)

    def contains(self, u, tol: float = 1e-8) -> tuple[bool, bool]:
        """(member, on_boundary) for a sampled candidate; bounds are non-strict."""
        u = np.asarray(u, dtype=float).ravel()
        st = self.step
        x = st.centers
        left, mid, right = u[x < -st.half_width_l], u[st.inside], u[x > st.half_width_l]
        pieces = [left, mid, right]
        if any(np.ptp(p) > tol for p in pieces):
            return False, False
        c1, m, c2 = (float(p.mean()) for p in pieces)
        fp = self.family_params
        if self.regime.unique:
            ok = np.max(np.abs(u - self.representative)) <= tol
            return bool(ok), False
        if self.regime is Regime.CONSTANT_FAMILY:
            if max(abs(c1 - m), abs(c2 - m)) > tol:
                return False, False
            lo, hi = fp["c"]
            ok = lo - tol <= m <= hi + tol
            edge = min(abs(m - lo), abs(m - hi)) <= tol
            return bool(ok), bool(ok and edge)
        d = st.height_h - m
        dlo, dhi = fp["d"]
        checks = [(d, dlo, dhi)] + [(c, fp["c1"][0], m) for c in (c1, c2)]
        ok = all(lo - tol <= val <= hi + tol for val, lo, hi in checks)
        edge = any(min(abs(val - lo), abs(val - hi)) <= tol for val, lo, hi in checks)
        return bool(ok), bool(ok and edge)


def exact_solution(step: StepSignal, params: FidelityParams) -> ExactSolution:
    regime = classify_regime(step, params)
    l1, l2 = _lambdas(params)
    L, h = step.half_width_l, step.height_h
    ratio = l1 / l2
    if regime is Regime.AMBIGUOUS:
        raise ValueError(f"no closed-form case covers lambda=({l1}, {l2})")
    if regime is Regime.MEAN_HALF:
        return ExactSolution(regime, np.full(step.samples, h / 2), step)
    if regime is Regime.UNIQUE_CLIPPED:
        drop = 1.0 / (L * l2)
        return ExactSolution(regime, step.piecewise(drop, h - drop), step)
    lo, hi = ratio, h - ratio
    if regime is Regime.CONSTANT_FAMILY:
        return ExactSolution(regime, np.full(step.samples, 0.5 * (lo + hi)), step, {"c": (lo, hi)})
    fam = {"c1": (lo, hi), "c2": (lo, hi), "d": (ratio, hi)}
    return ExactSolution(regime, step.piecewise(ratio, h - ratio), step, fam)


@dataclass
class OptimalityReport:
    passed: bool
    worst_violation: float
    endpoint_violation: float
    bound_violation: float
    jump_violation: float
    dual: np.ndarray
    jump_edges: np.ndarray
    tol: float

    def __bool__(self) -> bool:
        return self.passed


def _fidelity_slope(r: np.ndarray, l1: float, l2: float) -> np.ndarray:
    # derivative of the Huber fidelity
    return np.where(np.abs(r) >= l1 / l2, l1 * np.sign(r), l2 * r)


def verify_optimality(
    u,
    step: StepSignal,
    params: FidelityParams,
    tol: float | None = None,
    jump_tol: float | None = None,
) -> OptimalityReport:
    """Build the dual certificate for ``u`` and test it.

    The dual ``v`` lives on cell edges with ``v(-2L) = 0`` and slope
    ``-phi'(f - u)`` on each cell (with this sign ``v`` takes the value +1
    where ``u`` jumps up). The candidate passes when ``v(2L)`` vanishes,
    ``|v| <= 1`` and ``v`` equals the jump orientation at every jump of ``u``,
    all within ``tol`` (default ``2 * mesh``).
    """
    l1, l2 = _lambdas(params)
    u = np.asarray(u, dtype=float).ravel()
    if u.size != step.samples:
        raise ValueError(f"expected {step.samples} samples, got {u.size}")
    tol = 2.0 * step.mesh if tol is None else float(tol)
    jump_tol = 1e-3 * step.height_h if jump_tol is None else float(jump_tol)

    slope = -_fidelity_slope(step.values() - u, l1, l2)
    dual = np.concatenate([[0.0], np.cumsum(slope) * step.mesh])

    endpoint = abs(dual[-1])
    bound = max(0.0, float(np.max(np.abs(dual))) - 1.0)
    jumps = np.diff(u)
    idx = np.flatnonzero(np.abs(jumps) > jump_tol)
    jump_err = float(np.max(np.abs(dual[idx + 1] - np.sign(jumps[idx])))) if idx.size else 0.0
    worst = max(endpoint, bound, jump_err)
    return OptimalityReport(
        passed=worst <= tol,
        worst_violation=worst,
        endpoint_violation=endpoint,
        bound_violation=bound,
        jump_violation=jump_err,
        dual=dual,
        jump_edges=idx + 1,
        tol=tol,
    )


def regime_diagram(step: StepSignal, lambda1_values, lambda2_values) -> np.ndarray:
    """Regime codes on a lattice; rows follow lambda1, columns lambda2."""
    l1s = np.asarray(lambda1_values, dtype=float)
    l2s = np.asarray(lambda2_values, dtype=float)
    out = np.empty((l1s.size, l2s.size), dtype=int)
    box1, box2 = max(1.0, l1s.max(initial=0)), max(1.0, l2s.max(initial=0))
    for i, a in enumerate(l1s):
        for j, b in enumerate(l2s):
            out[i, j] = classify_regime(step, FidelityParams(a, b, box_l1=box1, box_l2=box2))
    return out


def write_regime_csv(path, step: StepSignal, lambda1_values, lambda2_values) -> Path:
    codes = regime_diagram(step, lambda1_values, lambda2_values)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda1", "lambda2", "regime"])
        for i, a in enumerate(np.asarray(lambda1_values, dtype=float)):
            for j, b in enumerate(np.asarray(lambda2_values, dtype=float)):
                w.writerow([repr(float(a)), repr(float(b)), int(codes[i, j])])
    return path
