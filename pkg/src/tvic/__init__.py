"""TV denoising with an L1-L2 infimal-convolution fidelity, its 1D exact
solutions, and bilevel learning of the two fidelity weights."""

from .bilevel import BfgsConfig, CostSpec, LearnResult, learn_parameters, reduced_gradient, solve_adjoint, solve_linearized
from .denoise import SolverBreakdown, SolverConfig, SolverState, solve_lower_level
from .estimators import BilevelTVIC, TVICDenoiser
from .exact1d import Regime, StepSignal, classify_regime, exact_solution, verify_optimality
from .experiment import NoiseSpec, add_noise, asymptotic_sweep, psnr, ssim, theta_sweep
from .fidelity import FidelityParams, SmoothingParams, huber_phi, phi_ic, v_optimal
from .grid import ImageGrid, VectorField, divergence, gradient, inner_product

__all__ = [
    "BfgsConfig", "CostSpec", "LearnResult", "learn_parameters", "reduced_gradient", "solve_adjoint",
    "solve_linearized", "SolverBreakdown", "SolverConfig", "SolverState", "solve_lower_level",
    "BilevelTVIC", "TVICDenoiser", "Regime", "StepSignal", "classify_regime", "exact_solution",
    "verify_optimality", "NoiseSpec", "add_noise", "asymptotic_sweep", "psnr", "ssim", "theta_sweep",
    "FidelityParams", "SmoothingParams", "huber_phi", "phi_ic", "v_optimal", "ImageGrid", "VectorField",
    "divergence", "gradient", "inner_product",
]
__version__ = "0.1.0"
