"""Fractional noise: per-mode fBm paths, bundles, field values, stochastic convolution.

Space-white noise projected on the orthonormal cosine basis gives independent
scalar fBm paths beta_k, one per mode. Each bundle draws from its own Philox
stream keyed by (seed, trajectory index), and mode k reads a fixed contiguous
block of that stream. Bundles are therefore reproducible one at a time, and a
K-mode bundle's first rows equal the rows of any smaller bundle.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .config import ModelConfig
from .kernel import HurstParams, covariance_R, kernel_K_fast
from .spectral import SpectralField, basis_primitive, eigenvalues

MAGIC = b"FCNB"
VERSION = 1
_HEADER = struct.Struct("<4sIdIIQ")
_SAMPLER_CODE = {"volterra": 0.0, "cholesky": 1.0}


class CholeskyError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class NoiseBundle:
    H: float
    time_grid: np.ndarray
    n_modes: int
    fbm_paths: np.ndarray  # (K, N_t + 1)
    white_cells: np.ndarray | None  # (K, N_t * substeps), sqrt(dt_sub)-scaled; volterra only
    seed: int
    index: int
    sampler_tag: str
    substeps: int = 1

    @property
    def n_time(self) -> int:
        return self.time_grid.size - 1

    @property
    def identity(self) -> str:
        return f"{self.sampler_tag}:{self.seed}:{self.index}"


def rng_for(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def _uniform_check(time_grid):
    d = np.diff(time_grid)
    if time_grid[0] != 0.0 or not np.allclose(d, d[0], rtol=1e-12, atol=0):
        raise ValueError("time grid must be uniform and start at 0")
    return float(d[0])


def _grid_key(time_grid) -> tuple:
    return float(time_grid[-1]), int(time_grid.size - 1)


@lru_cache(maxsize=16)
def volterra_matrix(T: float, n_time: int, H: float, substeps: int) -> np.ndarray:
    """V[i, l] = K_H(t_i, s_l) at substep midpoints s_l, zero where s_l >= t_i."""
    p = HurstParams(H)
    t = np.linspace(0.0, T, n_time + 1)
    L = n_time * substeps
    s = (np.arange(L) + 0.5) * (T / L)
    V = np.zeros((n_time + 1, L))
    for i in range(1, n_time + 1):
        m = i * substeps
        V[i, :m] = kernel_K_fast(np.full(m, t[i]), s[:m], p)
    V.setflags(write=False)
    return V


@lru_cache(maxsize=16)
def cholesky_factor(T: float, n_time: int, H: float, max_tries: int = 6) -> np.ndarray:
    p = HurstParams(H)
    t = np.linspace(0.0, T, n_time + 1)[1:]
    R = covariance_R(t[:, None], t[None, :], p)
    jitter = 0.0
    for _ in range(max_tries):
        try:
            Lf = np.linalg.cholesky(R + jitter * np.eye(t.size))
            Lf.setflags(write=False)
            return Lf
        except np.linalg.LinAlgError:
            jitter = 1e-14 * np.trace(R) / t.size if jitter == 0 else jitter * 10
    raise CholeskyError(f"covariance not positive definite after jitter {jitter:g}")


def sample_fbm(time_grid, H: float, rng: np.random.Generator, method: str = "volterra",
               substeps: int = 8, n_paths: int = 1):
    """fBm path(s) on a uniform grid. Returns (paths, white_cells or None)."""
    time_grid = np.asarray(time_grid, dtype=float)
    HurstParams(H)
    _uniform_check(time_grid)
    T, n = _grid_key(time_grid)
    if method == "volterra":
        L = n * substeps
        cells = rng.standard_normal((n_paths, L)) * np.sqrt((T / n) / substeps)
        return cells @ volterra_matrix(T, n, H, substeps).T, cells
    if method == "cholesky":
        z = rng.standard_normal((n_paths, n))
        paths = np.zeros((n_paths, n + 1))
        paths[:, 1:] = z @ cholesky_factor(T, n, H).T
        return paths, None
    raise ValueError(f"unknown sampler {method!r}")


def _horizon(config: ModelConfig, n_steps):
    if n_steps is None:
        return config.n_time, config.T
    n = int(n_steps)
    return n, config.T if n == config.n_time else config.dt * n


def sample_bundle(config: ModelConfig, seed: int, trajectory_index: int,
                  n_steps: int | None = None, sampler: str | None = None) -> NoiseBundle:
    """Deterministic bundle for (seed, index, config).

    n_steps truncates the horizon to the first n_steps steps of size config.dt;
    sampler overrides config.sampler.
    """
    n, T = _horizon(config, n_steps)
    method = config.sampler if sampler is None else sampler
    grid = np.linspace(0.0, T, n + 1)
    paths, cells = sample_fbm(grid, config.H, rng_for(seed, trajectory_index), method,
                              config.substeps, n_paths=config.n_modes)
    return NoiseBundle(config.H, grid, config.n_modes, paths, cells, int(seed),
                       int(trajectory_index), method, config.substeps if method == "volterra" else 1)


def sample_paths_batch(config: ModelConfig, seed: int, indices, n_steps: int | None = None,
                       sampler: str | None = None) -> np.ndarray:
    """fBm paths for many bundles, shape (B, K, N+1); row b matches sample_bundle(.., indices[b])."""
    n, T = _horizon(config, n_steps)
    method = config.sampler if sampler is None else sampler
    K = config.n_modes
    if method == "volterra":
        L = n * config.substeps
        z = np.empty((len(indices), K, L))
        for b, idx in enumerate(indices):
            z[b] = rng_for(seed, idx).standard_normal((K, L))
        z *= np.sqrt((T / n) / config.substeps)
        V = volterra_matrix(T, n, config.H, config.substeps)
        return (z.reshape(-1, L) @ V.T).reshape(len(indices), K, n + 1)
    if method == "cholesky":
        z = np.empty((len(indices), K, n))
        for b, idx in enumerate(indices):
            z[b] = rng_for(seed, idx).standard_normal((K, n))
        out = np.zeros((len(indices), K, n + 1))
        out[:, :, 1:] = (z.reshape(-1, n) @ cholesky_factor(T, n, config.H).T).reshape(len(indices), K, n)
        return out
    raise ValueError(f"unknown sampler {method!r}")


def perturb_cell(bundle: NoiseBundle, mode: int, cell: int, eps: float) -> NoiseBundle:
    """Bundle with white cell (mode, cell) shifted by eps and the fBm path recomputed."""
    if bundle.white_cells is None:
        raise ValueError("cell perturbation needs a volterra bundle")
    cells = bundle.white_cells.copy()
    cells[mode, cell] += eps
    T, n = _grid_key(bundle.time_grid)
    V = volterra_matrix(T, n, bundle.H, bundle.substeps)
    paths = bundle.fbm_paths.copy()
    paths[mode] = cells[mode] @ V.T
    return NoiseBundle(bundle.H, bundle.time_grid, bundle.n_modes, paths, cells, bundle.seed,
                       bundle.index, bundle.sampler_tag, bundle.substeps)


def cell_midpoints(bundle: NoiseBundle) -> np.ndarray:
    T, n = _grid_key(bundle.time_grid)
    L = n * bundle.substeps
    return (np.arange(L) + 0.5) * (T / L)


def _grid_index(time_grid, t: float) -> int:
    i = int(np.argmin(np.abs(time_grid - t)))
    if abs(time_grid[i] - t) > 1e-12 * max(1.0, abs(t)):
        raise ValueError(f"t={t} is not a grid time (no interpolation)")
    return i


def field_value(bundle: NoiseBundle, x, t: float):
    """W_H([0,x] x [0,t]) = sum_k beta_k(t) int_0^x a_k."""
    i = _grid_index(bundle.time_grid, t)
    out = basis_primitive(np.atleast_1d(x), bundle.n_modes) @ bundle.fbm_paths[:, i]
    return float(out[0]) if np.ndim(x) == 0 else out


def noise_increments(paths: np.ndarray, dt: float) -> np.ndarray:
    """Per-step stochastic increments exp(-lambda dt/2) (beta(t_{m+1}) - beta(t_m)), shape (..., N, K)."""
    K = paths.shape[-2]
    d = np.diff(paths, axis=-1)
    return np.swapaxes(d, -1, -2) * np.exp(-eigenvalues(K) * dt / 2.0)


def convolution_path(paths: np.ndarray, dt: float) -> np.ndarray:
    """Stochastic convolution at every grid time, shape (..., N+1, K).

    Recurrence C_{m+1} = exp(-lambda dt) C_m + exp(-lambda dt/2) (beta_{m+1} - beta_m), i.e.
    the midpoint-exponent sum. The solvers use the identical recurrence.
    """
    inc = noise_increments(paths, dt)
    K = paths.shape[-2]
    E = np.exp(-eigenvalues(K) * dt)
    out = np.zeros(inc.shape[:-2] + (inc.shape[-2] + 1, K))
    for m in range(inc.shape[-2]):
        out[..., m + 1, :] = E * out[..., m, :] + inc[..., m, :]
    return out


def stochastic_convolution(bundle: NoiseBundle, t: float) -> SpectralField:
    i = _grid_index(bundle.time_grid, t)
    dt = float(bundle.time_grid[1] - bundle.time_grid[0])
    return SpectralField(convolution_path(bundle.fbm_paths[:, : i + 1], dt)[i])


def dump_bundle(bundle: NoiseBundle, path) -> None:
    cells = bundle.white_cells if bundle.white_cells is not None else np.zeros((bundle.n_modes, 0))
    extra = np.array([bundle.time_grid[-1], bundle.index, _SAMPLER_CODE[bundle.sampler_tag],
                      bundle.substeps, cells.shape[1]], dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, bundle.H, bundle.n_modes, bundle.n_time, bundle.seed))
        fh.write(extra.tobytes())
        fh.write(np.ascontiguousarray(bundle.fbm_paths, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(cells, dtype="<f8").tobytes())


def load_bundle(path) -> NoiseBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, H, K, n, seed = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC or version != VERSION:
        raise ValueError("not a noise bundle file (bad magic/version)")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    T, index, code, substeps, n_cells = body[:5]
    n_cells = int(n_cells)
    paths = body[5 : 5 + K * (n + 1)].reshape(K, n + 1).copy()
    cells = body[5 + K * (n + 1) : 5 + K * (n + 1) + K * n_cells].reshape(K, n_cells).copy()
    tag = "volterra" if code == 0.0 else "cholesky"
    return NoiseBundle(H, np.linspace(0.0, T, n + 1), K, paths, cells if tag == "volterra" else None,
                       int(seed), int(index), tag, int(substeps))
