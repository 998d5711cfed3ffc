"""Mild-form solvers for du = -(u_xxxx) dt + (f_n(u))_xx dt + sigma dW_H.

Per mode k with lambda = k^4:
    du_k = (-lambda u_k - k^2 [f_n(u)]_k) dt + sigma d beta_k.

Exponential integrator (one step of size dt, z = lambda dt):
    u_k <- e^{-z} u_k - k^2 dt phi1(-z) [f_n(u)]_k + sigma e^{-z/2} (beta_k(t+dt) - beta_k(t)).

The Picard solver iterates the mild map on the whole space-time grid, with the
deterministic convolution done by product trapezoid and exact exponential weights.
Both solvers share the stochastic-convolution recurrence from noise.py.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .config import ModelConfig
from .noise import NoiseBundle, convolution_path, noise_increments
from .spectral import SpectralField, analysis_matrix, eigenvalues, synthesis_matrix, wavenumbers

__all__ = [
    "ModelConfig", "TrajectoryRecord", "BlowUpError", "PicardDivergenceError",
    "cutoff_eval", "nonlinearity_eval", "step", "solve_trajectory", "solve_batch", "picard_solve",
]


class BlowUpError(FloatingPointError):
    def __init__(self, step: int, row: int | None = None):
        where = f" (trajectory row {row})" if row is not None else ""
        super().__init__(f"solution blew up at step {step}{where}")
        self.step = step


class PicardDivergenceError(ArithmeticError):
    pass


def cutoff_eval(n: float, r):
    """C^1 ramp H_n and its derivative: 1 on [0,n], 1-3p^2+2p^3 on (n,n+1), 0 beyond."""
    r = np.asarray(r, dtype=float)
    rho = np.clip(r - n, 0.0, 1.0)
    h = 1.0 - rho * rho * (3.0 - 2.0 * rho)
    dh = -6.0 * rho * (1.0 - rho)
    h = np.where(r <= n, 1.0, h)
    dh = np.where(r <= n, 0.0, dh)
    if h.ndim == 0:
        return float(h), float(dh)
    return h, dh


def nonlinearity_eval(config: ModelConfig, u):
    """(f_n(u), f_n'(u)); raw (f, f') when cutoff_n is None.

    On the plateau |u| <= n the cutoff branch returns the raw arithmetic result
    unchanged, which is what makes cutoff and raw solves bit-identical on Omega_n.
    """
    c3, c2, c1, c0 = config.f_coeffs
    u = np.asarray(u, dtype=float)
    f = ((c3 * u + c2) * u + c1) * u + c0
    df = (3.0 * c3 * u + 2.0 * c2) * u + c1
    n = config.cutoff_n
    if n is not None:
        a = np.abs(u)
        outside = a > n
        if np.any(outside):
            h, dh = cutoff_eval(n, a)
            fn = np.where(outside, h * f, f)
            dfn = np.where(outside, h * df + dh * np.sign(u) * f, df)
            f, df = fn, dfn
    if f.ndim == 0:
        return float(f), float(df)
    return f, df


def phi1_neg(z):
    """phi1(-z) = (1 - e^{-z}) / z, stable at z -> 0."""
    z = np.asarray(z, dtype=float)
    out = np.ones_like(z)
    nz = z != 0
    out[nz] = -np.expm1(-z[nz]) / z[nz]
    return out


@lru_cache(maxsize=32)
def _exp_coeffs(n_modes: int, dt: float):
    lam = eigenvalues(n_modes)
    E = np.exp(-lam * dt)
    B = -(wavenumbers(n_modes) ** 2) * dt * phi1_neg(lam * dt)
    return E, B


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    coeffs: np.ndarray  # (N+1, K)
    sup_norm: float
    omega_n_flag: bool
    noise_ref: str
    provenance: dict = field(default_factory=dict)

    @property
    def states(self) -> list[SpectralField]:
        return [SpectralField(c) for c in self.coeffs]

    def grid_values(self, n_grid: int) -> np.ndarray:
        return self.coeffs @ synthesis_matrix(n_grid, self.coeffs.shape[1]).T


def _omega_flag(config: ModelConfig, sup: float) -> bool:
    n = config.cutoff_n
    return bool(np.isfinite(sup) and (n is None or sup < n))


@dataclass
class BatchResult:
    final: np.ndarray  # (B, K)
    sup_norm: np.ndarray  # (B,)
    blown: np.ndarray  # (B,) step index of blow-up or -1
    path: np.ndarray | None = None  # (B, N+1, K)
    probe: np.ndarray | None = None  # (B, N+1) values at probe point


def solve_batch(config: ModelConfig, u0: np.ndarray, paths: np.ndarray, *, keep_path: bool = False,
                probe_x: float | None = None) -> BatchResult:
    """March the exponential integrator for B trajectories at once.

    u0: (K,) or (B, K) coefficients; paths: (B, K, N+1) fBm paths. Rows are
    independent; a row that overflows is frozen at NaN and reported in `blown`.
    """
    B, K, n1 = paths.shape
    n = n1 - 1
    M = config.n_grid
    S = synthesis_matrix(M, K)
    A = analysis_matrix(M, K)
    E, Bc = _exp_coeffs(K, config.dt)
    inc = noise_increments(paths, config.dt) * config.sigma  # (B, N, K)
    u = np.broadcast_to(np.asarray(u0, dtype=float), (B, K)).copy()
    path = np.empty((B, n1, K)) if keep_path else None
    probe = None
    if probe_x is not None:
        from .spectral import basis_matrix

        pvec = basis_matrix(probe_x, K)[0]
        probe = np.empty((B, n1))
    blown = np.full(B, -1)
    ug = u @ S.T
    sup = np.max(np.abs(ug), axis=1)
    for m in range(n):
        if keep_path:
            path[:, m] = u
        if probe is not None:
            probe[:, m] = u @ pvec
        fval, _ = nonlinearity_eval(config, ug)
        u = E * u + Bc * (fval @ A.T) + inc[:, m]
        ug = u @ S.T
        with np.errstate(invalid="ignore"):
            rowmax = np.max(np.abs(ug), axis=1)
        bad = ~np.isfinite(rowmax) | (rowmax > 1e150)
        if bad.any():
            newly = bad & (blown < 0)
            blown[newly] = m
            u[bad] = np.nan
            ug[bad] = np.nan
        sup = np.fmax(sup, rowmax)
    if keep_path:
        path[:, n] = u
    if probe is not None:
        probe[:, n] = u @ pvec
    sup[blown >= 0] = np.inf
    return BatchResult(u, sup, blown, path, probe)


def step(state: SpectralField, bundle: NoiseBundle, m: int, config: ModelConfig) -> SpectralField:
    if not 0 <= m < bundle.n_time:
        raise IndexError(f"step index {m} outside [0, {bundle.n_time})")
    res = solve_batch(config, state.coeffs, bundle.fbm_paths[None, :, m : m + 2])
    if res.blown[0] >= 0:
        raise BlowUpError(m)
    return SpectralField(res.final[0])


def solve_trajectory(config: ModelConfig, bundle: NoiseBundle) -> TrajectoryRecord:
    if config.n_modes != bundle.n_modes:
        raise ValueError("bundle and config disagree on n_modes")
    if abs(bundle.time_grid[1] - config.dt) > 1e-12 * config.dt:
        raise ValueError("bundle and config disagree on the time step")
    if config.solver == "picard":
        return picard_solve(config, bundle)[0]
    res = solve_batch(config, config.u0_field().coeffs, bundle.fbm_paths[None], keep_path=True)
    if res.blown[0] >= 0:
        raise BlowUpError(int(res.blown[0]))
    sup = float(res.sup_norm[0])
    return TrajectoryRecord(bundle.time_grid.copy(), res.path[0], sup, _omega_flag(config, sup),
                            bundle.identity,
                            {"method": "exponential", "steps": bundle.n_time, "n_modes": config.n_modes,
                             "n_grid": config.n_grid, "cutoff_n": config.cutoff_n})


# ---------------------------------------------------------------------------
# Picard


def _psi(z):
    """psi(z) = (1 - e^{-z}(1+z)) / z^2, series for small z."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z < 1e-2
    zs = z[small]
    # sum_{n>=0} (-z)^n / (n! (n+2))
    term = np.ones_like(zs)
    acc = term / 2.0
    for k in range(1, 12):
        term = term * (-zs) / k
        acc = acc + term / (k + 2)
    out[small] = acc
    zb = z[~small]
    out[~small] = (1.0 - np.exp(-zb) * (1.0 + zb)) / zb ** 2
    return out


@lru_cache(maxsize=32)
def _trap_weights(n_modes: int, dt: float):
    lam = eigenvalues(n_modes)
    z = lam * dt
    E = np.exp(-z)
    e1 = phi1_neg(z)
    ps = _psi(z)
    return E, dt * ps, dt * (e1 - ps)


def _picard_map(config, base, u, S, A):
    """base + per-mode -k^2 int_0^t e^{-lambda(t-s)} [f_n(u(s))]_k ds (product trapezoid)."""
    K = u.shape[1]
    g = nonlinearity_eval(config, u @ S.T)[0] @ A.T  # (N+1, K)
    E, wa, wb = _trap_weights(K, config.dt)
    k2 = wavenumbers(K) ** 2
    out = np.empty_like(u)
    acc = np.zeros(K)
    out[0] = base[0]
    for i in range(u.shape[0] - 1):
        acc = E * acc + wa * g[i] + wb * g[i + 1]
        out[i + 1] = base[i + 1] - k2 * acc
    return out


def picard_solve(config: ModelConfig, bundle: NoiseBundle):
    """Returns (TrajectoryRecord, distances d_k = sup|u_{k+1} - u_k|)."""
    if config.cutoff_n is None:
        raise ValueError("picard_solve needs a cutoff n (Lipschitz f_n)")
    K = config.n_modes
    S = synthesis_matrix(config.n_grid, K)
    A = analysis_matrix(config.n_grid, K)
    t = bundle.time_grid
    lam = eigenvalues(K)
    u0 = config.u0_field().coeffs
    deterministic = np.exp(-np.outer(t, lam)) * u0  # u_{n,0}
    base = deterministic + config.sigma * convolution_path(bundle.fbm_paths, config.dt)
    u = deterministic
    dists = []
    rising = 0
    for _ in range(config.picard_kmax):
        new = _picard_map(config, base, u, S, A)
        d = float(np.max(np.abs((new - u) @ S.T)))
        if not np.isfinite(d):
            raise PicardDivergenceError("non-finite Picard iterate")
        rising = rising + 1 if dists and d >= dists[-1] else 0
        dists.append(d)
        u = new
        if rising >= 3:
            raise PicardDivergenceError(f"distances non-decreasing for 3 iterations: {dists[-4:]}")
        if d < config.picard_tol:
            break
    residual = float(np.max(np.abs((_picard_map(config, base, u, S, A) - u) @ S.T)))
    sup = float(np.max(np.abs(u @ S.T)))
    rec = TrajectoryRecord(t.copy(), u, sup, _omega_flag(config, sup), bundle.identity,
                           {"method": "picard", "iterations": len(dists), "residual": residual,
                            "steps": bundle.n_time, "n_modes": K, "cutoff_n": config.cutoff_n})
    return rec, np.asarray(dists)
