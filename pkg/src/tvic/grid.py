"""Uniform-mesh scalar fields and finite-difference operators.

Gradients use forward differences with a homogeneous Neumann closure (the
difference across the last row/column is zero); the divergence is defined as
the exact negative transpose, so ``<grad u, p> = -<u, div p>`` holds to
machine precision. Every pairing carries the area weight ``mesh_h**2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class ImageGrid:
    """A 2D (or single-row 1D) scalar field on a uniform mesh.

    ``mesh_h`` defaults to ``1 / max(rows, cols)`` so the domain has unit
    extent along its longest side.
    """

    data: np.ndarray
    mesh_h: float = field(default=None)

    def __post_init__(self):
        arr = np.array(self.data, dtype=float)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"expected a non-empty 1D or 2D array, got shape {np.shape(self.data)}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("grid data must be finite")
        h = 1.0 / max(arr.shape) if self.mesh_h is None else float(self.mesh_h)
        if not h > 0:
            raise ValueError(f"mesh_h must be positive, got {self.mesh_h}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "mesh_h", h)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def area(self) -> float:
        """Measure of the discrete domain, ``rows * cols * h**2``."""
        return self.size * self.mesh_h**2

    def like(self, data) -> "ImageGrid":
        """A new grid on the same mesh holding ``data``."""
        return ImageGrid(np.reshape(data, self.shape), self.mesh_h)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True)
class VectorField:
    dx: np.ndarray
    dy: np.ndarray
    mesh_h: float

    def __post_init__(self):
        dx = np.asarray(self.dx, dtype=float)
        dy = np.asarray(self.dy, dtype=float)
        if dx.shape != dy.shape:
            raise ValueError(f"component shapes differ: {dx.shape} vs {dy.shape}")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @property
    def shape(self):
        return self.dx.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)


def as_grid(x, mesh_h: float | None = None) -> ImageGrid:
    """Coerce arrays to :class:`ImageGrid`; grids pass through unchanged."""
    if isinstance(x, ImageGrid):
        if mesh_h is not None and not np.isclose(mesh_h, x.mesh_h):
            raise ValueError(f"mesh_h mismatch: {mesh_h} vs {x.mesh_h}")
        return x
    return ImageGrid(x, mesh_h)


def check_same_grid(*grids: ImageGrid) -> None:
    first = grids[0]
    for g in grids[1:]:
        if g.shape != first.shape:
            raise ValueError(f"shape mismatch: {first.shape} vs {g.shape}")
        if not np.isclose(g.mesh_h, first.mesh_h, rtol=1e-12, atol=0):
            raise ValueError(f"mesh_h mismatch: {first.mesh_h} vs {g.mesh_h}")


def _forward_diff_1d(n: int) -> sp.csr_matrix:
    if n == 1:
        return sp.csr_matrix((1, 1))
    main = -np.ones(n)
    main[-1] = 0.0
    return sp.diags([main, np.ones(n - 1)], [0, 1], shape=(n, n), format="csr")


@lru_cache(maxsize=32)
def difference_matrices(rows: int, cols: int, mesh_h: float) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse forward-difference matrices ``(Dx, Dy)`` acting on row-major vectors.

    ``Dx`` differences along columns (x), ``Dy`` along rows (y); both are
    scaled by ``1/mesh_h``.
    """
    dx = sp.kron(sp.identity(rows), _forward_diff_1d(cols), format="csr") / mesh_h
    dy = sp.kron(_forward_diff_1d(rows), sp.identity(cols), format="csr") / mesh_h
    return dx.tocsr(), dy.tocsr()


def _grad_arrays(u: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = (u[:, 1:] - u[:, :-1]) / h
    gy[:-1, :] = (u[1:, :] - u[:-1, :]) / h
    return gx, gy


def _div_arrays(px: np.ndarray, py: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(px)
    # backward differences, transpose of the forward ones above
    out[:, :-1] += px[:, :-1]
    out[:, 1:] -= px[:, :-1]
    out[:-1, :] += py[:-1, :]
    out[1:, :] -= py[:-1, :]
    return out / h


def gradient(u) -> VectorField:
    u = as_grid(u)
    gx, gy = _grad_arrays(u.data, u.mesh_h)
    return VectorField(gx, gy, u.mesh_h)


def divergence(p: VectorField) -> ImageGrid:
    return ImageGrid(_div_arrays(p.dx, p.dy, p.mesh_h), p.mesh_h)


def inner_product(a, b) -> float:
    """Discrete L2 pairing ``sum(a*b) * h**2``; also accepts two vector fields."""
    if isinstance(a, VectorField) and isinstance(b, VectorField):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        return float((np.sum(a.dx * b.dx) + np.sum(a.dy * b.dy)) * a.mesh_h**2)
    a, b = as_grid(a), as_grid(b)
    check_same_grid(a, b)
    return float(np.sum(a.data * b.data) * a.mesh_h**2)


def l2_norm(a) -> float:
    return float(np.sqrt(inner_product(a, a)))


def l1_norm(a) -> float:
    a = as_grid(a)
    return float(np.sum(np.abs(a.data)) * a.mesh_h**2)
