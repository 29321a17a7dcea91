"""scikit-learn style wrappers.

``TVICDenoiser`` is a stateless transformer for fixed weights.
``BilevelTVIC`` learns the weights from one (noisy, clean) pair in ``fit``
and then denoises like ``TVICDenoiser``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_count, check_image_stack, check_pair, check_scalar
from .bilevel import BfgsConfig, CostSpec, LearnResult, learn_parameters
from .denoise import SolverConfig, SolverState, solve_lower_level
from .experiment import psnr
from .fidelity import DEFAULT_BOX, FidelityParams, SmoothingParams
from .grid import ImageGrid


class _TVICBase(BaseEstimator, TransformerMixin):
    def _smoothing(self) -> SmoothingParams:
        check_scalar(self.epsilon, "epsilon", lo=0.0)
        check_scalar(self.gamma, "gamma", lo=0.5, lo_open=True)
        return SmoothingParams(float(self.epsilon), float(self.gamma))

    def _solver_cfg(self) -> SolverConfig:
        check_scalar(self.tol, "tol", lo=0.0, lo_open=True)
        return SolverConfig(tol=float(self.tol), max_iter=check_count(self.max_iter, "max_iter"))

    def _weights(self) -> FidelityParams:
        raise NotImplementedError

    def denoise(self, X) -> list[SolverState]:
        """Full solver states (u, v, diagnostics) for each image in ``X``."""
        images, _ = check_image_stack(X)
        params, smoothing, cfg = self._weights(), self._smoothing(), self._solver_cfg()
        return [solve_lower_level(ImageGrid(img, self.mesh_h), params, smoothing, cfg) for img in images]

    def transform(self, X):
        """Denoised image, or a stack of them for 3D / list input."""
        _, single = check_image_stack(X)
        out = [np.array(s.u.data) for s in self.denoise(X)]
        return out[0] if single else np.stack(out)

    def predict(self, X):
        return self.transform(X)

    def score(self, X, y) -> float:
        """Mean PSNR (dB) of the denoised ``X`` against the clean ``y``."""
        pred, _ = check_image_stack(self.transform(X))
        ref, _ = check_image_stack(y, "y")
        if len(pred) != len(ref):
            raise ValueError("X and y hold different numbers of images")
        return float(np.mean([psnr(p, r) for p, r in zip(pred, ref)]))


class TVICDenoiser(_TVICBase):
    """TV denoising with the L1-L2 infimal-convolution fidelity at fixed weights.

    ``fit`` only validates the hyperparameters; all work happens in
    ``transform``.
    """

    def __init__(self, lambda1=1.0, lambda2=1.0, epsilon=1e-10, gamma=1e3, tol=1e-6, max_iter=35,
                 box_l1=DEFAULT_BOX[0], box_l2=DEFAULT_BOX[1], mesh_h=None):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.epsilon = epsilon
        self.gamma = gamma
        self.tol = tol
        self.max_iter = max_iter
        self.box_l1 = box_l1
        self.box_l2 = box_l2
        self.mesh_h = mesh_h

    def _weights(self) -> FidelityParams:
        return FidelityParams(self.lambda1, self.lambda2, self.box_l1, self.box_l2)

    def fit(self, X=None, y=None):
        self._weights()
        self._smoothing()
        self._solver_cfg()
        self.is_fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self)
        return super().transform(X)


class BilevelTVIC(_TVICBase):
    """Learns ``(lambda1, lambda2)`` from a noisy/clean pair by projected BFGS.

    After ``fit``: ``lambda1_``, ``lambda2_``, and ``result_`` (the full
    :class:`~tvic.bilevel.LearnResult`).
    """

    def __init__(self, cost="l2", initial_lambda=(1.0, 1.0), epsilon=1e-10, gamma=1e3, tol=1e-6, max_iter=35,
                 eta=1e-4, tol_outer=1e-6, max_outer=60, box_l1=DEFAULT_BOX[0], box_l2=DEFAULT_BOX[1],
                 cost_gamma=1e3, log_scale=True, mesh_h=None):
        self.cost = cost
        self.initial_lambda = initial_lambda
        self.epsilon = epsilon
        self.gamma = gamma
        self.tol = tol
        self.max_iter = max_iter
        self.eta = eta
        self.tol_outer = tol_outer
        self.max_outer = max_outer
        self.box_l1 = box_l1
        self.box_l2 = box_l2
        self.cost_gamma = cost_gamma
        self.log_scale = log_scale
        self.mesh_h = mesh_h

    def _bfgs_cfg(self) -> BfgsConfig:
        lam = tuple(float(v) for v in self.initial_lambda)
        if len(lam) != 2:
            raise ValueError("initial_lambda must be a pair")
        return BfgsConfig(eta_armijo=float(self.eta), tol_outer=float(self.tol_outer),
                          max_outer=check_count(self.max_outer, "max_outer"), initial_lambda=lam,
                          box=(float(self.box_l1), float(self.box_l2)), log_scale=bool(self.log_scale))

    def fit(self, X, y):
        noisy, clean = check_pair(X, y)
        f = ImageGrid(noisy, self.mesh_h)
        spec = CostSpec(self.cost, ImageGrid(clean, f.mesh_h), gamma=float(self.cost_gamma))
        res: LearnResult = learn_parameters(f, spec, self._smoothing(), self._bfgs_cfg(), self._solver_cfg())
        self.result_ = res
        self.lambda1_, self.lambda2_ = (float(v) for v in res.lambda_opt)
        return self

    def _weights(self) -> FidelityParams:
        check_is_fitted(self, "result_")
        return FidelityParams(self.lambda1_, self.lambda2_, self.box_l1, self.box_l2)
