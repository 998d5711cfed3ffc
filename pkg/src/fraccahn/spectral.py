"""Neumann cosine eigenbasis on D = [0, pi] and the Green's function of d/dt + d^4/dx^4.

Basis: a_0 = 1/sqrt(pi), a_k = sqrt(2/pi) cos(kx). Fields are stored as truncated
coefficient vectors. The collocation grid is the midpoint-cosine (DCT-II) grid
x_j = pi (j + 1/2) / M, on which the midpoint rule integrates cos(kx)cos(lx) exactly
for k + l < 2M. With M = 2K this also makes the cubic nonlinearity alias-free.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

DOMAIN_LENGTH = math.pi
DEFAULT_MODES = 64
DEFAULT_GRID = 128

_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class TruncationWarning(UserWarning):
    """Series truncation is not resolved at the requested time."""


def _check_point(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0) or np.any(x > DOMAIN_LENGTH) or np.any(~np.isfinite(x)):
        raise ValueError(f"point outside D=[0, pi]: {x}")
    return x


def _check_time(t, strict: bool = True) -> float:
    t = float(t)
    if (strict and not t > 0.0) or (not strict and not t >= 0.0):
        raise ValueError(f"time must be {'>' if strict else '>='} 0, got {t}")
    return t


def wavenumbers(n_modes: int) -> np.ndarray:
    return np.arange(n_modes, dtype=float)


def eigenvalues(n_modes: int) -> np.ndarray:
    """lambda_k = k^4."""
    return wavenumbers(n_modes) ** 4


def basis_eval(k, x):
    """a_k(x); broadcasts over k and x."""
    x = _check_point(x)
    k = np.asarray(k)
    if np.any(k < 0):
        raise ValueError("mode index must be >= 0")
    out = np.where(k == 0, _INV_SQRT_PI, _SQRT_2_OVER_PI * np.cos(k * x))
    return float(out) if out.ndim == 0 else out


def basis_matrix(x, n_modes: int) -> np.ndarray:
    """Matrix A[i, k] = a_k(x_i)."""
    x = _check_point(np.atleast_1d(x))
    A = _SQRT_2_OVER_PI * np.cos(np.outer(x, wavenumbers(n_modes)))
    A[:, 0] = _INV_SQRT_PI
    return A


def basis_primitive(x, n_modes: int) -> np.ndarray:
    """P[i, k] = integral_0^{x_i} a_k(y) dy."""
    x = _check_point(np.atleast_1d(x))
    k = wavenumbers(n_modes)
    P = np.empty((x.size, n_modes))
    P[:, 0] = _INV_SQRT_PI * x
    P[:, 1:] = _SQRT_2_OVER_PI * np.sin(np.outer(x, k[1:])) / k[1:]
    return P


def collocation_grid(n_grid: int = DEFAULT_GRID) -> np.ndarray:
    return DOMAIN_LENGTH * (np.arange(n_grid) + 0.5) / n_grid


@lru_cache(maxsize=32)
def _transform_pair(n_grid: int, n_modes: int):
    A = basis_matrix(collocation_grid(n_grid), n_modes)
    A.setflags(write=False)
    At = np.ascontiguousarray(A.T * (DOMAIN_LENGTH / n_grid))
    At.setflags(write=False)
    return A, At


def synthesis_matrix(n_grid: int, n_modes: int) -> np.ndarray:
    """Coefficients -> grid values, shape (M, K)."""
    if n_grid < n_modes:
        raise ValueError(f"grid size {n_grid} < n_modes {n_modes} (aliasing-unsafe)")
    return _transform_pair(n_grid, n_modes)[0]


def analysis_matrix(n_grid: int, n_modes: int) -> np.ndarray:
    """Grid values -> coefficients, shape (K, M): exact midpoint quadrature."""
    if n_grid < n_modes:
        raise ValueError(f"grid size {n_grid} < n_modes {n_modes} (aliasing-unsafe)")
    return _transform_pair(n_grid, n_modes)[1]


def quadrature_weights(n_grid: int = DEFAULT_GRID) -> np.ndarray:
    return np.full(n_grid, DOMAIN_LENGTH / n_grid)


@dataclass(frozen=True)
class SpectralField:
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim != 1 or c.size == 0:
            raise ValueError("coeffs must be a non-empty 1-D vector")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def n_modes(self) -> int:
        return self.coeffs.size

    @property
    def domain_length(self) -> float:
        return DOMAIN_LENGTH

    def __call__(self, x):
        return basis_matrix(x, self.n_modes) @ self.coeffs

    def grid_values(self, n_grid: int = DEFAULT_GRID) -> np.ndarray:
        return transform(self, "to_grid", n_grid)

    @classmethod
    def from_grid(cls, values, n_modes: int = DEFAULT_MODES) -> "SpectralField":
        return transform(np.asarray(values, dtype=float), "to_coeffs", n_modes=n_modes)

    @classmethod
    def zeros(cls, n_modes: int = DEFAULT_MODES) -> "SpectralField":
        return cls(np.zeros(n_modes))


def transform(data, direction: str, n_grid: int | None = None, n_modes: int | None = None):
    """Exact discrete cosine analysis/synthesis on the collocation grid.

    direction "to_coeffs": grid values (length M) -> SpectralField with n_modes (default M).
    direction "to_grid": SpectralField or coefficient vector -> grid values (default M = 2K).
    """
    if direction == "to_coeffs":
        values = np.asarray(data, dtype=float)
        M = values.shape[-1]
        K = M if n_modes is None else int(n_modes)
        return SpectralField(analysis_matrix(M, K) @ values)
    if direction == "to_grid":
        c = data.coeffs if isinstance(data, SpectralField) else np.asarray(data, dtype=float)
        K = c.shape[-1]
        M = 2 * K if n_grid is None else int(n_grid)
        return synthesis_matrix(M, K) @ c
    raise ValueError(f"unknown direction {direction!r}")


def truncation_bound(t: float, n_modes: int, extra: int = 200) -> float:
    """(2/pi) * sum_{k >= K} exp(-k^4 t), summed until negligible."""
    k = np.arange(n_modes, n_modes + extra, dtype=float)
    return float((2.0 / math.pi) * np.exp(-(k ** 4) * t).sum())


def _warn_truncation(t: float, n_modes: int) -> None:
    if t < 1e-4 and math.exp(-(n_modes ** 4) * t) >= 1e-14:
        warnings.warn(
            f"K={n_modes} does not resolve the kernel at t={t:g}: exp(-K^4 t) >= 1e-14",
            TruncationWarning,
            stacklevel=3,
        )


def green_eval(x, y, t: float, n_modes: int = DEFAULT_MODES):
    """Partial sum sum_{k<K} exp(-k^4 t) a_k(x) a_k(y)."""
    t = _check_time(t)
    _warn_truncation(t, n_modes)
    e = np.exp(-eigenvalues(n_modes) * t)
    out = np.einsum("...k,k,...k->...", _bm(x, n_modes), e, _bm(y, n_modes))
    return float(out) if np.ndim(out) == 0 else out


def green_yy_eval(x, y, t: float, n_modes: int = DEFAULT_MODES):
    """Term-wise second y-derivative: sum_{k<K} (-k^2) exp(-k^4 t) a_k(x) a_k(y)."""
    t = _check_time(t)
    _warn_truncation(t, n_modes)
    k = wavenumbers(n_modes)
    e = -(k ** 2) * np.exp(-(k ** 4) * t)
    out = np.einsum("...k,k,...k->...", _bm(x, n_modes), e, _bm(y, n_modes))
    return float(out) if np.ndim(out) == 0 else out


def _bm(x, n_modes):
    x = np.asarray(x, dtype=float)
    return basis_matrix(x.ravel(), n_modes).reshape(x.shape + (n_modes,))


def semigroup_apply(field: SpectralField, t: float) -> SpectralField:
    t = _check_time(t, strict=False)
    if t == 0.0:
        return field
    return SpectralField(field.coeffs * np.exp(-eigenvalues(field.n_modes) * t))
