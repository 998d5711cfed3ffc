import math

import numpy as np
import pytest

from fraccahn import quadrature as qd


def test_legendre01_exact_for_polynomials():
    x, w = qd.legendre01(8)
    for p in range(16):
        assert w @ x ** p == pytest.approx(1.0 / (p + 1), rel=1e-14)


def test_jacobi01_weight():
    beta = -0.75
    x, w = qd.jacobi01(10, beta)
    for p in range(6):
        assert w @ x ** p == pytest.approx(1.0 / (p + 1 + beta), rel=1e-13)


def test_graded_breaks_refine_toward_attractor():
    b = qd.graded_breaks(0.0, 1.0, [(0.0, 1e-6)])
    assert b[0] == 0.0 and b[-1] == 1.0
    assert np.all(np.diff(b) > 0)
    assert b[1] - b[0] <= 1e-6


def test_graded_rule_singular_integral():
    # int_0^1 x^{-0.7} e^{-x} dx = gamma(0.3) * P(0.3, 1)
    from scipy.special import gamma, gammainc

    x, w = qd.graded_rule(0.0, 1.0, [(0.0, 1e-8)], left_power=-0.7)
    ref = gamma(0.3) * gammainc(0.3, 1.0)
    assert w @ np.exp(-x) == pytest.approx(ref, rel=1e-13)


def test_graded_rule_boundary_layer():
    lam = 1e6
    x, w = qd.graded_rule(0.0, 1.0, [(1.0, 1e-7)])
    assert w @ np.exp(-lam * (1 - x)) == pytest.approx(-math.expm1(-lam) / lam, rel=1e-12)


def test_check_converged_raises():
    with pytest.raises(qd.QuadratureError) as e:
        qd.check_converged(np.array([1.0]), np.array([1.1]), 1e-10, 0.0, "demo")
    assert e.value.residual > 0
    qd.check_converged(np.array([1.0]), np.array([1.0 + 1e-14]), 1e-10, 0.0, "demo")
