"""Malliavin derivative of the cutoff solution, propagated through the discrete solver.

Writing D_{y,s} u(x,t) = sum_j a_j(y) Psi_j(x,t;s), each Psi_j solves the linearized
equation with 'G = f_n'(u_n) frozen per step and a source sigma * dK_H/dt(t,s) in mode j.
On the solver grid the homogeneous part is the exact Jacobian of one exponential step,

    J_m = diag(e^{-lambda dt}) + diag(-k^2 dt phi1) . Analysis . diag('G_m) . Synthesis,

and the source enters per step through one of two forcings:

    exact:    F_{j,m}(s) = int_{max(s,t_m)}^{t_{m+1}} e^{-lambda_j (t_{m+1}-tau)} dK_H/dtau(tau,s) dtau
    discrete: F_{j,m}(s) = e^{-lambda_j dt/2} (K_H(t_{m+1},s) - K_H(t_m,s))

The discrete forcing is the derivative of the solver with respect to a white-noise
cell centred at s, so it matches finite differences to O(eps).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import quadrature as qd
from .config import ModelConfig
from .kernel import kernel_K_fast, mode_integrals
from .solver import TrajectoryRecord, _exp_coeffs, nonlinearity_eval
from .spectral import analysis_matrix, basis_matrix, collocation_grid, eigenvalues, synthesis_matrix

FORCINGS = ("exact", "discrete")


def gcal_eval(trajectory: TrajectoryRecord, config: ModelConfig) -> np.ndarray:
    """'G_n = f_n'(u_n) on the collocation grid, shape (N+1, M)."""
    if config.cutoff_n is None:
        raise ValueError("the Malliavin derivative is defined for the cutoff solution only")
    ug = trajectory.grid_values(config.n_grid)
    return nonlinearity_eval(config, ug)[1]


def _target_index(trajectory: TrajectoryRecord, t_star: float) -> int:
    t = trajectory.times
    i = int(np.argmin(np.abs(t - t_star)))
    if abs(t[i] - t_star) > 1e-12 * max(1.0, t_star):
        raise ValueError(f"t*={t_star} is not a grid time")
    return i


def _apply_jacobian(phi, g, E, Bc, S, A):
    """J_m applied to each row of phi (rows = source modes)."""
    return E * phi + Bc * (((phi @ S.T) * g) @ A.T)


def _apply_jacobian_T(w, g, E, Bc, S, A):
    """J_m^T applied to each row of w."""
    return E * w + (((Bc * w) @ A) * g) @ S


def forcing_row(s: float, m: int, t: np.ndarray, config: ModelConfig, forcing: str) -> np.ndarray:
    """F_{., m}(s) for all modes."""
    K = config.n_modes
    if forcing == "exact":
        return mode_integrals(t[m + 1], s, t[m], config.params, K)
    if forcing == "discrete":
        k1 = kernel_K_fast(t[m + 1], s, config.params) if s < t[m + 1] else 0.0
        k0 = kernel_K_fast(t[m], s, config.params) if s < t[m] else 0.0
        return np.exp(-eigenvalues(K) * config.dt / 2.0) * (k1 - k0)
    raise ValueError(f"forcing must be one of {FORCINGS}")


def _first_panel(s: float, dt: float) -> int:
    return int(np.floor(s / dt + 1e-12))


@dataclass
class MalliavinSolution:
    """Psi for source time s: coeffs[m, j, k] = mode-k coefficient of Psi_j at times[m]."""

    s: float
    times: np.ndarray
    coeffs: np.ndarray

    def value(self, x: float, y, m: int = -1) -> np.ndarray:
        """D_{y,s} u(x, times[m])."""
        ax = basis_matrix(x, self.coeffs.shape[2])[0]
        ay = basis_matrix(np.atleast_1d(y), self.coeffs.shape[1])
        return ay @ (self.coeffs[m] @ ax)

    def mode_values(self, x: float, m: int = -1) -> np.ndarray:
        """D_j(s) = sum_k Psi_{j,k} a_k(x) per source mode j."""
        return self.coeffs[m] @ basis_matrix(x, self.coeffs.shape[2])[0]


def malliavin_solve(trajectory: TrajectoryRecord, s: float, config: ModelConfig,
                    t_star: float | None = None, forcing: str = "exact") -> MalliavinSolution:
    """Forward march of all K source modes from s to t* (default: end of trajectory)."""
    t = trajectory.times
    m_star = t.size - 1 if t_star is None else _target_index(trajectory, t_star)
    K = config.n_modes
    if s >= t[m_star]:
        return MalliavinSolution(s, t[:0], np.zeros((0, K, K)))
    if s <= 0:
        raise ValueError("source time must be > 0")
    g = gcal_eval(trajectory, config)
    E, Bc = _exp_coeffs(K, config.dt)
    S = synthesis_matrix(config.n_grid, K)
    A = analysis_matrix(config.n_grid, K)
    m0 = _first_panel(s, config.dt)
    out = np.zeros((m_star - m0 + 1, K, K))
    phi = np.zeros((K, K))
    for i, m in enumerate(range(m0, m_star)):
        phi = _apply_jacobian(phi, g[m], E, Bc, S, A)
        phi[np.diag_indices(K)] += config.sigma * forcing_row(s, m, t, config, forcing)
        out[i + 1] = phi
    return MalliavinSolution(s, t[m0 : m_star + 1], out)


# ---------------------------------------------------------------------------
# adjoint route for norms


def adjoint_weights(trajectory: TrajectoryRecord, x_star, m_star: int, config: ModelConfig) -> np.ndarray:
    """w[m] = (J_{m_star-1} ... J_m)^T a(x*), for m = 0..m_star; shape (m_star+1, P, K)."""
    K = config.n_modes
    g = gcal_eval(trajectory, config)
    E, Bc = _exp_coeffs(K, config.dt)
    S = synthesis_matrix(config.n_grid, K)
    A = analysis_matrix(config.n_grid, K)
    w = np.empty((m_star + 1, np.size(x_star), K))
    w[m_star] = basis_matrix(np.atleast_1d(x_star), K)
    for m in range(m_star - 1, -1, -1):
        w[m] = _apply_jacobian_T(w[m + 1], g[m], E, Bc, S, A)
    return w


@lru_cache(maxsize=8)
def _forcing_table_cached(s_nodes: tuple, m_star: int, dt: float, H: float, K: int, forcing: str,
                          T: float, n_time: int) -> np.ndarray:
    cfg = ModelConfig(H=H, T=T, n_time=n_time, n_modes=K, n_grid=max(2 * K, 2))
    t = cfg.time_grid
    table = np.zeros((len(s_nodes), m_star, K))
    for q, s in enumerate(s_nodes):
        for m in range(_first_panel(s, dt), m_star):
            table[q, m] = forcing_row(s, m, t, cfg, forcing)
    table.setflags(write=False)
    return table


def forcing_table(s_nodes, m_star: int, config: ModelConfig, forcing: str = "exact") -> np.ndarray:
    """F[q, m, j] for source nodes s_q and panels m < m_star (trajectory independent, cached)."""
    return _forcing_table_cached(tuple(float(s) for s in s_nodes), int(m_star), config.dt, config.H,
                                 config.n_modes, forcing, config.T, config.n_time)


def source_rule(a: float, b: float, config: ModelConfig, order: int = 12):
    """s-quadrature on [a, b] for sum_j D_j(s)^2 (s^{1-2H} singular at 0, layer at b)."""
    hl = 0.1 / float(max(config.n_modes - 1, 1)) ** 4
    if a == 0.0:
        p = 1.0 - 2.0 * config.H
        s, w = qd.graded_rule(0.0, b, [(0.0, b * 2.0 ** -30), (b, hl)], left_power=p, order=order)
        # plain weights: the rule integrates s^p g, and g = D^2 / s^p here
        return s, w / s ** p
    return qd.graded_rule(a, b, [(b, hl)], order=order)


def mode_derivatives(trajectory, x_star, t_star, s_nodes, config, forcing="exact", weights=None):
    """D_j(s_q) at targets x_star: shape (P, Q, K), via the adjoint sweep."""
    m_star = _target_index(trajectory, t_star)
    w = adjoint_weights(trajectory, x_star, m_star, config) if weights is None else weights
    F = forcing_table(s_nodes, m_star, config, forcing)
    # D[p, q, j] = sigma * sum_m w[m+1, p, j] F[q, m, j]
    return config.sigma * np.einsum("mpj,qmj->pqj", w[1 : m_star + 1], F)


@dataclass
class MalliavinGrid:
    target: tuple
    s_grid: np.ndarray
    y_grid: np.ndarray
    values: np.ndarray  # (len(s_grid), len(y_grid))
    squared_norm: float
    restricted: dict = field(default_factory=dict)  # eps -> restricted squared norm
    gcal_ref: np.ndarray | None = None

    def to_csv(self, path) -> None:
        from .io import write_csv

        S, Y = np.meshgrid(np.arange(self.s_grid.size), np.arange(self.y_grid.size), indexing="ij")
        rows = np.column_stack([self.s_grid[S.ravel()], Y.ravel(), self.values.ravel()])
        summary = {"squared_norm": self.squared_norm, **{f"restricted_{e!r}": v for e, v in self.restricted.items()}}
        write_csv(path, ["s", "y_index", "value"], rows, summary=summary)


def restricted_norm(trajectory, x_star, t_star, eps, config, forcing="exact", order=12):
    """int_{t*-eps}^{t*} sum_j D_j(s)^2 ds for each x in x_star (array)."""
    a = max(t_star - eps, 0.0)
    s, w = source_rule(a, t_star, config, order)
    D = mode_derivatives(trajectory, np.atleast_1d(x_star), t_star, s, config, forcing)
    return np.einsum("q,pqj->p", w, D * D)


def malliavin_norm_at(trajectory: TrajectoryRecord, x_star: float, t_star: float, config: ModelConfig,
                      eps_grid=(), forcing: str = "exact", with_values: bool = True) -> MalliavinGrid:
    """Squared Malliavin norm at (x*, t*), optional restricted norms and (s, y) values."""
    m_star = _target_index(trajectory, t_star)
    if config.sigma == 0.0 or m_star == 0:
        sq = 0.0
        restricted = {float(e): 0.0 for e in eps_grid}
    else:
        w = adjoint_weights(trajectory, x_star, m_star, config)
        s, wq = source_rule(0.0, t_star, config)
        D = mode_derivatives(trajectory, x_star, t_star, s, config, forcing, weights=w)[0]
        sq = float(wq @ np.sum(D * D, axis=1))
        restricted = {}
        for e in eps_grid:
            if e >= t_star:
                restricted[float(e)] = sq
                continue
            se, we = source_rule(t_star - e, t_star, config)
            De = mode_derivatives(trajectory, x_star, t_star, se, config, forcing, weights=w)[0]
            restricted[float(e)] = float(we @ np.sum(De * De, axis=1))
    y = collocation_grid(config.n_grid)
    s_grid = trajectory.times[1:m_star]
    if with_values and s_grid.size and config.sigma != 0.0:
        Dg = mode_derivatives(trajectory, x_star, t_star, s_grid, config, forcing)[0]
        values = Dg @ basis_matrix(y, config.n_modes).T
    else:
        values = np.zeros((s_grid.size, y.size))
    return MalliavinGrid((float(x_star), float(t_star)), s_grid, y, values, sq, restricted,
                         gcal_eval(trajectory, config))
