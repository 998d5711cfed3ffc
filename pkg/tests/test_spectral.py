import math

import numpy as np
import pytest

from fraccahn import spectral as sp
from fraccahn.spectral import SpectralField


def test_basis_values():
    assert sp.basis_eval(0, 1.234) == pytest.approx(1 / math.sqrt(math.pi), abs=1e-15)
    assert sp.basis_eval(0, 0.0) == pytest.approx(0.5641896, abs=1e-7)
    assert sp.basis_eval(1, 0.0) == pytest.approx(0.7978846, abs=1e-7)
    assert sp.basis_eval(2, math.pi / 2) == pytest.approx(-math.sqrt(2 / math.pi), abs=1e-15)


def test_basis_domain():
    with pytest.raises(ValueError):
        sp.basis_eval(1, -0.1)
    with pytest.raises(ValueError):
        sp.basis_eval(1, math.pi + 0.1)


def test_basis_orthonormal_on_grid():
    M, K = 128, 64
    S = sp.synthesis_matrix(M, K)
    G = (math.pi / M) * S.T @ S
    assert np.max(np.abs(G - np.eye(K))) < 1e-13


def test_primitive_matches_quadrature():
    x = np.array([0.3, 1.7, math.pi])
    P = sp.basis_primitive(x, 6)
    from scipy.integrate import quad

    for i, xi in enumerate(x):
        for k in range(6):
            ref = quad(lambda z: sp.basis_eval(k, z), 0, xi, epsabs=1e-13, limit=200)[0]
            assert P[i, k] == pytest.approx(ref, abs=1e-12)


def test_green_mass_and_symmetry():
    M = 128
    y = sp.collocation_grid(M)
    for x in (0.0, 1.0, math.pi):
        for t in (1e-2, 0.3, 2.0):
            g = sp.green_eval(x, y, t, 64)
            assert abs(g.sum() * math.pi / M - 1.0) < 1e-12
    assert sp.green_eval(0.4, 2.2, 0.1, 64) == pytest.approx(sp.green_eval(2.2, 0.4, 0.1, 64), abs=1e-12)


def test_green_diagonal_lower_bound():
    for x in np.linspace(0, math.pi, 9):
        for t in (1e-3, 0.1, 1.0, 50.0):
            assert sp.green_eval(x, x, t, 64) >= 1 / math.pi - 1e-15


def test_green_semigroup_identity():
    M, K = 128, 64
    z = sp.collocation_grid(M)
    x, y, t1, t2 = 0.7, 2.1, 0.01, 0.02
    lhs = np.sum(sp.green_eval(x, z, t1, K) * sp.green_eval(z, y, t2, K)) * math.pi / M
    assert lhs == pytest.approx(sp.green_eval(x, y, t1 + t2, K), abs=1e-12)


def test_green_truncation_bound():
    x, y, t = 0.5, 1.0, 0.01
    for K in (4, 8, 16):
        diff = abs(sp.green_eval(x, y, t, K) - sp.green_eval(x, y, t, 2 * K))
        assert diff <= sp.truncation_bound(t, K) + 1e-15


def test_green_time_checks():
    with pytest.raises(ValueError):
        sp.green_eval(0.1, 0.2, 0.0, 8)
    with pytest.warns(sp.TruncationWarning):
        sp.green_eval(0.1, 0.2, 1e-6, 8)


def test_green_yy():
    M = 128
    y = sp.collocation_grid(M)
    assert abs(sp.green_yy_eval(0.3, y, 0.05, 64).sum() * math.pi / M) < 1e-10
    assert sp.green_yy_eval(0.3, 1.1, 0.2, 1) == 0.0
    x, yy, t = 0.3, 1.1, 0.2
    assert sp.green_yy_eval(x, yy, t, 2) == pytest.approx(-math.exp(-t) * (2 / math.pi) * math.cos(x) * math.cos(yy),
                                                         abs=1e-15)


def test_semigroup_apply():
    f = SpectralField(np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(sp.semigroup_apply(f, 0.0).coeffs, f.coeffs)
    const = SpectralField(np.array([2.5, 0.0, 0.0]))
    assert np.array_equal(sp.semigroup_apply(const, 7.0).coeffs, const.coeffs)
    a1 = SpectralField(np.array([0.0, 1.0, 0.0, 0.0]))
    out = sp.semigroup_apply(a1, 1.0).coeffs
    assert np.allclose(out, [0, math.exp(-1), 0, 0], atol=1e-16)
    with pytest.raises(ValueError):
        sp.semigroup_apply(f, -1.0)


def test_transform_examples():
    M, K = 128, 64
    c = sp.transform(np.ones(M), "to_coeffs", n_modes=K).coeffs
    assert c[0] == pytest.approx(math.sqrt(math.pi), abs=1e-13)
    assert np.max(np.abs(c[1:])) < 1e-13
    c = sp.transform(np.cos(sp.collocation_grid(M)), "to_coeffs", n_modes=K).coeffs
    assert c[1] == pytest.approx(math.sqrt(math.pi / 2), abs=1e-13)
    assert np.max(np.abs(np.delete(c, 1))) < 1e-13


def test_transform_roundtrip():
    rng = np.random.default_rng(3)
    coeffs = rng.standard_normal(64)
    back = sp.transform(sp.transform(coeffs, "to_grid", n_grid=128), "to_coeffs", n_modes=64).coeffs
    assert np.max(np.abs(back - coeffs)) <= 1e-12
    with pytest.raises(ValueError):
        sp.transform(coeffs, "sideways")


def test_field_eval_matches_synthesis():
    rng = np.random.default_rng(1)
    f = SpectralField(rng.standard_normal(8))
    x = sp.collocation_grid(16)
    assert np.allclose(f(x), f.grid_values(16), atol=1e-14)
