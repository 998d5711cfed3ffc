"""Fractional kernel machinery for H in (1/2, 1).

Notation: alpha = H - 1/2, lambda_k = k^4.

K_H(t,s)    = c1 s^{-alpha} int_s^t (u-s)^{alpha-1} u^alpha du
dK_H/dt     = c1 (t/s)^alpha (t-s)^{alpha-1}
I_k(t,s;z)  = int_{max(s,z)}^t exp(-lambda_k (t-r)) dK_H/dr(r,s) dr

The per-mode integrals I_k are the building block of the K_H* image of the Green
integrand: [K_H*(G(x,.,t-.)1_[z,t])](y,s) = sum_k a_k(x) a_k(y) I_k(t,s;z).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import quadrature as qd
from .spectral import basis_matrix, eigenvalues

DEFAULT_TOL = 1e-10


def gamma_fn(z: float) -> float:
    z = float(z)
    if not z > 0.0:
        raise ValueError(f"gamma_fn requires z > 0, got {z}")
    return math.gamma(z)


def beta_fn(a: float, b: float) -> float:
    if not (a > 0 and b > 0):
        raise ValueError("beta_fn requires positive arguments")
    return math.exp(math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))


@dataclass(frozen=True)
class HurstParams:
    H: float
    c1: float = field(init=False)
    c2: float = field(init=False)

    def __post_init__(self):
        H = float(self.H)
        if not (0.5 < H < 1.0):
            raise ValueError(f"Hurst exponent must satisfy 1/2 < H < 1, got H={H}")
        object.__setattr__(self, "H", H)
        c1 = math.sqrt(H * (2 * H - 1) / beta_fn(2 - 2 * H, H - 0.5))
        c2 = math.sqrt(2 * H * gamma_fn(1.5 - H) / (gamma_fn(H + 0.5) * gamma_fn(2 - 2 * H)))
        object.__setattr__(self, "c1", c1)
        object.__setattr__(self, "c2", c2)

    @property
    def alpha(self) -> float:
        return self.H - 0.5


def covariance_R(t, s, params: HurstParams):
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(t < 0) or np.any(s < 0):
        raise ValueError("covariance_R requires t, s >= 0")
    h2 = 2.0 * params.H
    out = 0.5 * (t ** h2 + s ** h2 - np.abs(t - s) ** h2)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# K_H: batched evaluation on a dyadic mesh in v = (u-s)/(t-s)


@lru_cache(maxsize=16)
def _dyadic_rule(depth: int, beta: float, order: int):
    """Rule on [0,1] for v^beta g(v): panels [2^-j-1, 2^-j], Jacobi on [0, 2^-depth]."""
    br = np.concatenate(([0.0], 2.0 ** -np.arange(depth, -1, -1, dtype=float)))
    v, w = qd.composite_rule(br, order)
    w = w * v ** beta
    xj, wj = qd.jacobi01(order, beta)
    h = br[1]
    v[:order] = h * xj
    w[:order] = wj * h ** (1.0 + beta)
    return v, w


def _depth_for(s, t) -> int:
    rho = np.min(s / (t - s)) if np.size(s) else 1.0
    return int(min(60, max(4, math.ceil(math.log2(1.0 / max(rho, 1e-18))) + 6)))


def _kernel_c1_batch(t, s, params: HurstParams, order: int = 16, depth: int | None = None):
    a = params.alpha
    d = t - s
    depth = _depth_for(s, t) if depth is None else depth
    v, w = _dyadic_rule(depth, a - 1.0, order)
    # (u/s)^alpha with u = s + d v, written as (1 + (d/s) v)^alpha
    r = (d / s)[..., None] * v
    integ = np.exp(a * np.log1p(r)) @ w
    return params.c1 * d ** a * integ


def _kernel_c2_batch(t, s, params: HurstParams, order: int = 16, depth: int | None = None):
    a = params.alpha
    d = t - s
    depth = _depth_for(s, t) if depth is None else depth
    v, w = _dyadic_rule(depth, a - 1.0, order)
    r = (d / s)[..., None] * v
    integ = np.expm1(a * np.log1p(r)) @ w
    return params.c2 * (d ** a + a * d ** a * integ)


def _check_ts(t, s):
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0) or np.any(s >= t):
        raise ValueError("kernel requires 0 < s < t")
    return np.broadcast_arrays(t, s)


def kernel_K(t, s, params: HurstParams, tol: float = DEFAULT_TOL, form: str = "c1"):
    """K_H(t,s) by singular quadrature; raises QuadratureError if unconverged."""
    t, s = _check_ts(t, s)
    fn = _kernel_c1_batch if form == "c1" else _kernel_c2_batch
    if form not in ("c1", "c2"):
        raise ValueError(f"unknown form {form!r}")
    depth = _depth_for(s, t)
    fine = fn(t, s, params, order=20, depth=depth + 4)
    coarse = fn(t, s, params, order=14, depth=depth)
    qd.check_converged(coarse, fine, rtol=tol, atol=tol * 1e-3, what="kernel_K")
    return float(fine) if fine.ndim == 0 else fine


def kernel_K_fast(t, s, params: HurstParams):
    """Unchecked batched K_H(t,s) for 0 < s < t (table construction)."""
    t, s = np.broadcast_arrays(np.asarray(t, float), np.asarray(s, float))
    return _kernel_c1_batch(t, s, params)


def kernel_dK_dt(t, s, params: HurstParams):
    t, s = _check_ts(t, s)
    a = params.alpha
    out = params.c1 * (t / s) ** a * (t - s) ** (a - 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class KernelTable:
    """K_H(t_i, s_j) and dK_H/dt(t_i, s_j) with zeros where s_j >= t_i."""

    H: float
    time_grid: np.ndarray
    source_grid: np.ndarray
    K_values: np.ndarray
    dK_values: np.ndarray
    quad_tol: float

    def to_csv(self, path) -> None:
        from .io import write_csv

        ti, sj = np.nonzero(self.source_grid[None, :] < self.time_grid[:, None])
        rows = np.column_stack(
            [self.time_grid[ti], self.source_grid[sj], self.K_values[ti, sj], self.dK_values[ti, sj]]
        )
        write_csv(path, ["t", "s", "K", "dKdt"], rows)

    @classmethod
    def from_csv(cls, path, H: float, quad_tol: float = DEFAULT_TOL) -> "KernelTable":
        from .io import read_csv

        _, data = read_csv(path)
        t_vals = np.unique(data[:, 0])
        s_vals = np.unique(data[:, 1])
        K = np.zeros((t_vals.size, s_vals.size))
        dK = np.zeros_like(K)
        i = np.searchsorted(t_vals, data[:, 0])
        j = np.searchsorted(s_vals, data[:, 1])
        K[i, j] = data[:, 2]
        dK[i, j] = data[:, 3]
        return cls(H, t_vals, s_vals, K, dK, quad_tol)


def build_kernel_table(time_grid, source_grid, params: HurstParams, tol: float = DEFAULT_TOL) -> KernelTable:
    time_grid = np.asarray(time_grid, dtype=float)
    source_grid = np.asarray(source_grid, dtype=float)
    T, S = np.meshgrid(time_grid, source_grid, indexing="ij")
    mask = (S < T) & (S > 0)
    K = np.zeros(T.shape)
    dK = np.zeros(T.shape)
    if mask.any():
        K[mask] = kernel_K(T[mask], S[mask], params, tol)
        dK[mask] = kernel_dK_dt(T[mask], S[mask], params)
    return KernelTable(params.H, time_grid, source_grid, K, dK, tol)


# ---------------------------------------------------------------------------
# per-mode K_H* integrals


def _layer_scale(n_modes: int) -> float:
    lam = float(max(n_modes - 1, 1)) ** 4
    return 0.1 / lam


def _mode_rule(t: float, s: float, zeta: float, params: HurstParams, n_modes: int, order: int):
    """Rule (nodes, weights) for int_{max(s,zeta)}^t g(r) dK/dr(r,s) dr with dK folded in."""
    a = params.alpha
    lo = max(s, zeta)
    hl = _layer_scale(n_modes)
    if lo <= s:
        attract = [(t, hl)]
        if s < t - s:
            attract.append((s, s))
        r, w = qd.graded_rule(s, t, attract, left_power=a - 1.0, order=order)
        w = w * params.c1 * (r / s) ** a
    else:
        gap = lo - s
        r, w = qd.graded_rule(lo, t, [(lo, gap), (t, hl)], order=order)
        w = w * params.c1 * (r / s) ** a * (r - s) ** (a - 1.0)
    return r, w


def mode_integrals(t: float, s: float, zeta: float, params: HurstParams, n_modes: int,
                   order: int = qd.DEFAULT_ORDER) -> np.ndarray:
    """I_k(t, s; zeta) for k < n_modes. Any s in (0, t) is allowed, including s < zeta."""
    if s >= t or zeta >= t:
        return np.zeros(n_modes)
    if not s > 0:
        raise ValueError("source time must be > 0")
    r, w = _mode_rule(t, s, zeta, params, n_modes, order)
    lam = eigenvalues(n_modes)
    return np.exp(-np.outer(t - r, lam)).T @ w


def mode_integrals_checked(t, s, zeta, params, n_modes, tol=DEFAULT_TOL):
    fine = mode_integrals(t, s, zeta, params, n_modes, order=24)
    coarse = mode_integrals(t, s, zeta, params, n_modes, order=16)
    qd.check_converged(coarse, fine, rtol=tol, atol=tol * 1e-3, what="K_H* mode integral")
    return fine


def khstar_source(x, t, zeta, y, s, params: HurstParams, n_modes: int, tol: float = DEFAULT_TOL):
    """[K_H*(G(x,.,t-.) 1_[zeta,t])](y,s) for zeta <= s; zero for s >= t."""
    if s >= t:
        return 0.0
    if s < zeta:
        raise ValueError(f"khstar_source requires zeta <= s (zeta={zeta}, s={s})")
    I = mode_integrals_checked(t, s, zeta, params, n_modes, tol)
    ax = basis_matrix(x, n_modes)[0]
    ay = basis_matrix(y, n_modes)[0]
    return float(np.sum(ax * ay * I))


# ---------------------------------------------------------------------------
# H-norm of the Green integrand


def hnorm_modes(delta: float, params: HurstParams, n_modes: int, order: int = qd.DEFAULT_ORDER):
    """M_k(delta) = H(2H-1) int int_[0,delta]^2 |a-b|^{2H-2} exp(-lambda_k (a+b)) da db.

    Reduced to one dimension through c = |a-b|:
    M_k = H(2H-1)/lambda int_0^delta c^{2H-2} (exp(-lambda c) - exp(-lambda(2 delta - c))) dc,
    with the lambda -> 0 limit delta^{2H}.
    """
    H = params.H
    lam = eigenvalues(n_modes)
    hl = _layer_scale(n_modes)
    c, w = qd.graded_rule(0.0, delta, [(0.0, hl), (delta, hl)], left_power=2 * H - 2, order=order)
    lam_c = np.outer(c, lam)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.exp(-lam_c) * (-np.expm1(-2.0 * np.outer(delta - c, lam))) / lam
    g[:, 0] = 2.0 * (delta - c)
    return H * (2 * H - 1) * (w @ g)


def hnorm_green(x, t: float, zeta: float, params: HurstParams, n_modes: int, tol: float = DEFAULT_TOL):
    """sigma-free H-norm squared of G(x,.,t-.) 1_[zeta,t]."""
    if not (0.0 <= zeta < t):
        raise ValueError("hnorm_green requires 0 <= zeta < t")
    delta = t - zeta
    fine = hnorm_modes(delta, params, n_modes, order=24)
    coarse = hnorm_modes(delta, params, n_modes, order=16)
    qd.check_converged(coarse, fine, rtol=tol, atol=0.0, what="hnorm_green")
    A = basis_matrix(np.atleast_1d(x), n_modes)
    out = (A ** 2) @ fine
    return float(out[0]) if np.ndim(x) == 0 else out


# ---------------------------------------------------------------------------
# explicit lower-bound function


def _binom_series(c: float, n_terms: int) -> np.ndarray:
    """Coefficients b_n = binom(c, n) (-1)^n of (1-u)^c."""
    b = np.empty(n_terms)
    b[0] = 1.0
    for n in range(1, n_terms):
        b[n] = b[n - 1] * (c - n + 1) / n * -1.0
    return b


def _lambda_bracket_series(u: float, H: float, n_terms: int = 60) -> float:
    """Bracket / t^{4-2H} as a power series in u = eps/t (orders u, u^2 cancel exactly)."""
    c2, c3, c4 = 2 - 2 * H, 3 - 2 * H, 4 - 2 * H
    b2, b3, b4 = _binom_series(c2, n_terms), _binom_series(c3, n_terms), _binom_series(c4, n_terms)
    total = 0.0
    for N in range(3, n_terms):
        coef = -b4[N] / (c4 * c3) - b2[N - 1] + 0.5 * b2[N - 2] + (c2 / c3) * b3[N - 1]
        total += coef * u ** N
    return total


def lambda_lower(t: float, eps: float, params: HurstParams) -> float:
    """Explicit lower-bound function Lambda(H, t, eps)."""
    if not (0.0 < eps <= t):
        raise ValueError(f"lambda_lower requires 0 < eps <= t (eps={eps}, t={t})")
    H = params.H
    c2, c3, c4 = 2 - 2 * H, 3 - 2 * H, 4 - 2 * H
    te = t - eps
    pref = te ** (2 * H - 1) / eps ** c3
    u = eps / t
    if u <= 0.1:
        bracket = t ** c4 * _lambda_bracket_series(u, H)
    else:
        bracket = (
            (t ** c4 - te ** c4) / (c4 * c3)
            - te ** c2 * (t * t - te * te) / 2.0
            + c2 * te ** c3 * eps / c3
        )
    return pref * bracket
