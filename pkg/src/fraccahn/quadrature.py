"""Composite Gauss rules on geometrically graded meshes.

Endpoint singularities of power type are absorbed into Gauss-Jacobi weights on the
panel touching the singular point. Near-singular points and exponential boundary
layers are resolved by halving panel lengths toward them, which keeps every panel's
length comparable to its distance from the trouble spot. Gauss-Legendre then
converges geometrically on each panel.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

DEFAULT_ORDER = 16


class QuadratureError(ArithmeticError):
    """Quadrature failed to reach the requested tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (achieved residual {residual:.3e})")
        self.residual = residual


@lru_cache(maxsize=64)
def legendre01(order: int):
    x, w = roots_legendre(order)
    return (x + 1.0) / 2.0, w / 2.0


@lru_cache(maxsize=256)
def jacobi01(order: int, beta: float):
    """Nodes/weights on [0, 1] for weight v**beta."""
    x, w = roots_jacobi(order, 0.0, beta)
    return (x + 1.0) / 2.0, w / 2.0 ** (1.0 + beta)


def graded_breaks(a: float, b: float, attract: Iterable[tuple[float, float]] = ()) -> np.ndarray:
    """Breakpoints of [a, b] halving toward each attractor (p, hmin)."""
    pts = [a, b]
    L = b - a
    for p, hmin in attract:
        if not (a <= p <= b) or hmin <= 0:
            continue
        pts.append(p)
        h = max(hmin, L * 1e-300)
        while h < L:
            if p - h > a:
                pts.append(p - h)
            if p + h < b:
                pts.append(p + h)
            h *= 2.0
    br = np.unique(np.asarray(pts, dtype=float))
    # drop slivers created by floating coincidences
    keep = np.concatenate(([True], np.diff(br) > 1e-15 * max(abs(a), abs(b), L)))
    br = br[keep]
    br[-1] = b
    return br


def composite_rule(breaks: np.ndarray, order: int = DEFAULT_ORDER):
    x, w = legendre01(order)
    h = np.diff(breaks)
    nodes = (breaks[:-1, None] + h[:, None] * x[None, :]).ravel()
    weights = (h[:, None] * w[None, :]).ravel()
    return nodes, weights


def graded_rule(
    a: float,
    b: float,
    attract: Sequence[tuple[float, float]] = (),
    *,
    left_power: float | None = None,
    order: int = DEFAULT_ORDER,
):
    """Nodes and weights for integral_a^b (x - a)^left_power g(x) dx.

    The weight is folded into the returned weights: Gauss-Jacobi on the panel
    touching a, pointwise elsewhere. Attractors (p, hmin) grade the mesh toward p
    with smallest panel hmin.
    """
    if not b > a:
        return np.empty(0), np.empty(0)
    br = graded_breaks(a, b, attract)
    nodes, weights = composite_rule(br, order)
    if left_power is not None:
        weights = weights * (nodes - a) ** left_power
        h = br[1] - br[0]
        xj, wj = jacobi01(order, float(left_power))
        nodes[:order] = a + h * xj
        weights[:order] = wj * h ** (1.0 + left_power)
    return nodes, weights


def check_converged(coarse, fine, rtol: float, atol: float, what: str):
    coarse = np.asarray(coarse)
    fine = np.asarray(fine)
    resid = float(np.max(np.abs(fine - coarse))) if fine.size else 0.0
    scale = float(np.max(np.abs(fine))) if fine.size else 0.0
    if resid > atol + rtol * scale:
        raise QuadratureError(f"{what} did not converge", resid)
    return resid
