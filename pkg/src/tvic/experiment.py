"""Noise synthesis, image quality metrics and the two experiment drivers.

``asymptotic_sweep`` walks the lower-level solver along a parameter
schedule and records how far the minimizer sits from the limiting models
(median, mean, ``v = 0``). ``theta_sweep`` learns the weights for a family
of Gaussian / salt-and-pepper mixtures controlled by ``theta``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed
from skimage.metrics import structural_similarity

from .bilevel import BfgsConfig, CostSpec, learn_parameters
from .denoise import SolverConfig, SolverState, solve_lower_level
from .fidelity import DEFAULT_BOX, FidelityParams, SmoothingParams
from .grid import ImageGrid, as_grid, check_same_grid, l1_norm, l2_norm

PSNR_CAP = 200.0
ASYMPTOTIC_CSV_HEADER = ["step_index", "param1", "param2", "v_l1", "residual_l2", "dist_median", "dist_mean"]
THETA_CSV_HEADER = ["theta", "lambda1", "lambda2", "psnr_noisy", "psnr_denoised", "ssim_noisy", "ssim_denoised"]


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian variance and impulse density, optionally mixed by ``theta``.

    With ``theta`` set the effective variance is ``theta * sigma2`` and the
    effective density ``(1 - theta) * d``.
    """

    gaussian_variance: float = 0.0
    sp_density: float = 0.0
    theta: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not (self.gaussian_variance >= 0 and math.isfinite(self.gaussian_variance)):
            raise ValueError("gaussian_variance must be a finite non-negative number")
        if not 0.0 <= self.sp_density <= 1.0:
            raise ValueError("sp_density must lie in [0, 1]")
        if self.theta is not None and not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")

    @property
    def variance(self) -> float:
        return self.gaussian_variance if self.theta is None else self.theta * self.gaussian_variance

    @property
    def density(self) -> float:
        return self.sp_density if self.theta is None else (1.0 - self.theta) * self.sp_density


def add_noise(clean, spec: NoiseSpec) -> ImageGrid:
    """Gaussian noise, then ``round(d * n)`` pixels set to 0 or 1, clamped to [0, 1]."""
    clean = as_grid(clean)
    rng = np.random.default_rng(spec.seed)
    out = np.array(clean.data, dtype=float)
    if spec.variance > 0:
        out += rng.normal(0.0, math.sqrt(spec.variance), out.shape)
    count = int(round(spec.density * out.size))
    if count:
        idx = rng.choice(out.size, size=count, replace=False)
        out.flat[idx] = rng.integers(0, 2, size=count)
    return clean.like(np.clip(out, 0.0, 1.0))


def psnr(u, ref) -> float:
    """PSNR for intensities in [0, 1], capped at ``PSNR_CAP`` when the images agree."""
    u, ref = as_grid(u), as_grid(ref)
    check_same_grid(u, ref)
    mse = float(np.mean((u.data - ref.data) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(u, ref) -> float:
    """Mean SSIM, Gaussian 11x11 window (sigma 1.5), K1=0.01, K2=0.03, range 1."""
    u, ref = as_grid(u), as_grid(ref)
    check_same_grid(u, ref)
    return float(
        structural_similarity(
            u.data,
            ref.data,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
    )


def median_of(f) -> float:
    """Lower median of the pixel values."""
    vals = np.sort(as_grid(f).data, axis=None)
    return float(vals[(vals.size - 1) // 2])


def mean_of(f) -> float:
    f = as_grid(f)
    return float(np.sum(f.data) * f.mesh_h**2 / f.area)


def camera_image(size: int = 128) -> ImageGrid:
    """The standard cameraman test image, downsampled to ``size`` x ``size``."""
    from skimage import data, transform

    img = data.camera().astype(float) / 255.0
    if img.shape != (size, size):
        img = transform.resize(img, (size, size), anti_aliasing=True)
    return ImageGrid(np.clip(img, 0.0, 1.0))


def blocks_image(size: int = 64) -> ImageGrid:
    """Piecewise-constant image: two rectangles and a disc on a dark background."""
    y, x = np.mgrid[0:size, 0:size] / size
    img = np.full((size, size), 0.1)
    img[(x > 0.1) & (x < 0.45) & (y > 0.15) & (y < 0.7)] = 0.8
    img[(x > 0.55) & (x < 0.9) & (y > 0.5) & (y < 0.9)] = 0.5
    img[(x - 0.7) ** 2 + (y - 0.25) ** 2 < 0.15**2] = 0.95
    return ImageGrid(img)


@dataclass
class SweepRow:
    step_index: int
    param1: float
    param2: float
    v_l1: float
    residual_l2: float
    dist_median: float
    dist_mean: float
    dist_data: float
    dist_reference: float | None
    iterations: int
    converged: bool


def asymptotic_sweep(
    f,
    path: Sequence[tuple[float, float]],
    smoothing: SmoothingParams | None = None,
    cfg: SolverConfig | None = None,
    reference=None,
) -> list[SweepRow]:
    """Solve along ``path`` (warm-started) and record limit diagnostics.

    Distances are discrete L1 norms; ``residual_l2`` is ``|f - u - v|``.
    ``reference`` is an optional limit solution (for example a TV-L1 proxy).
    """
    f = as_grid(f)
    if len(path) == 0:
        raise ValueError("schedule is empty")
    if reference is not None:
        reference = as_grid(reference, f.mesh_h)
        check_same_grid(f, reference)
    med, avg = median_of(f), mean_of(f)
    box1 = max(DEFAULT_BOX[0], max(p[0] for p in path))
    box2 = max(DEFAULT_BOX[1], max(p[1] for p in path))
    rows = []
    state: SolverState | None = None
    for k, (l1, l2) in enumerate(path):
        params = FidelityParams(l1, l2, box_l1=box1, box_l2=box2)
        state = solve_lower_level(f, params, smoothing, cfg, warm=state)
        u, v = state.u, state.v
        rows.append(
            SweepRow(
                step_index=k,
                param1=float(l1),
                param2=float(l2),
                v_l1=l1_norm(v),
                residual_l2=l2_norm(f.like(f.data - u.data - v.data)),
                dist_median=l1_norm(u.like(u.data - med)),
                dist_mean=l1_norm(u.like(u.data - avg)),
                dist_data=l1_norm(u.like(u.data - f.data)),
                dist_reference=None if reference is None else l1_norm(u.like(u.data - reference.data)),
                iterations=state.iterations,
                converged=state.converged,
            )
        )
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ASYMPTOTIC_CSV_HEADER)
        for r in rows:
            w.writerow([getattr(r, key) for key in ASYMPTOTIC_CSV_HEADER])
    return path


@dataclass
class ThetaRow:
    theta: float
    lambda1: float
    lambda2: float
    psnr_noisy: float
    psnr_denoised: float
    ssim_noisy: float
    ssim_denoised: float
    outer_iterations: int
    converged: bool
    line_search_failed: bool


def _learn_one(clean, theta, sigma2, d, kind, smoothing, cfg, solver_cfg, seed):
    noisy = add_noise(clean, NoiseSpec(sigma2, d, theta=theta, seed=seed))
    res = learn_parameters(noisy, CostSpec(kind, clean), smoothing, cfg, solver_cfg)
    u = res.final_state.u
    return ThetaRow(
        theta=float(theta),
        lambda1=float(res.lambda_opt[0]),
        lambda2=float(res.lambda_opt[1]),
        psnr_noisy=psnr(noisy, clean),
        psnr_denoised=psnr(u, clean),
        ssim_noisy=ssim(noisy, clean),
        ssim_denoised=ssim(u, clean),
        outer_iterations=res.iterations,
        converged=res.converged,
        line_search_failed=res.line_search_failed,
    )


def theta_sweep(
    clean,
    sigma2: float = 0.005,
    d: float = 0.1,
    thetas: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    kind: str = "l2",
    cfg: BfgsConfig | None = None,
    smoothing: SmoothingParams | None = None,
    solver_cfg: SolverConfig | None = None,
    seed: int = 0,
    n_jobs: int = 1,
) -> list[ThetaRow]:
    """Learn ``(lambda1, lambda2)`` for each noise mixture ``theta``.

    Runs are independent; ``n_jobs`` spreads them over processes.
    """
    clean = as_grid(clean)
    jobs = (delayed(_learn_one)(clean, t, sigma2, d, kind, smoothing, cfg, solver_cfg, seed) for t in thetas)
    return list(Parallel(n_jobs=n_jobs)(jobs))


def write_theta_csv(rows: Sequence[ThetaRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(THETA_CSV_HEADER)
        for r in rows:
            rec = asdict(r)
            w.writerow([rec[key] for key in THETA_CSV_HEADER])
    return path
