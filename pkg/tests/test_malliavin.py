import math

import numpy as np
import pytest

from fraccahn import kernel as kn
from fraccahn import malliavin as ml
from fraccahn import noise
from fraccahn.config import ModelConfig
from fraccahn.solver import TrajectoryRecord, solve_trajectory

CFG = ModelConfig(n_modes=32, n_grid=64, n_time=128)


@pytest.fixture(scope="module")
def traj():
    b = noise.sample_bundle(CFG, 101, 0)
    return b, solve_trajectory(CFG, b)


def _record(coeffs, cfg):
    t = cfg.time_grid
    return TrajectoryRecord(t, coeffs, 0.0, True, "synthetic")


def test_gcal_examples():
    cfg = ModelConfig(n_modes=8, n_grid=16, n_time=4, cutoff_n=2)
    zero = _record(np.zeros((5, 8)), cfg)
    assert np.all(ml.gcal_eval(zero, cfg) == -1.0)
    big = np.zeros((5, 8))
    big[:, 0] = 4.0 * math.sqrt(math.pi)  # u = 4 > n + 1
    assert np.all(ml.gcal_eval(_record(big, cfg), cfg) == 0.0)
    rng = np.random.default_rng(0)
    g = ml.gcal_eval(_record(rng.standard_normal((5, 8)) * 3, cfg), cfg)
    from fraccahn.solver import nonlinearity_eval

    bound = np.max(np.abs(nonlinearity_eval(cfg, np.linspace(-10, 10, 200_001))[1]))
    assert np.max(np.abs(g)) <= bound + 1e-12
    with pytest.raises(ValueError):
        ml.gcal_eval(zero, cfg.with_(cutoff_n=None))


def test_sigma_zero_is_zero(traj):
    _, tr = traj
    cfg = CFG.with_(sigma=0.0)
    sol = ml.malliavin_solve(tr, 0.2, cfg)
    assert not np.any(sol.coeffs)
    g = ml.malliavin_norm_at(tr, 1.0, 0.5, cfg, eps_grid=(0.1, 0.2))
    assert g.squared_norm == 0.0 and not np.any(g.values)


def test_linearity_in_sigma(traj):
    _, tr = traj
    a = ml.malliavin_norm_at(tr, 1.0, 0.5, CFG)
    b = ml.malliavin_norm_at(tr, 1.0, 0.5, CFG.with_(sigma=2 * CFG.sigma))
    assert np.max(np.abs(b.values - 2 * a.values)) <= 1e-12 * np.max(np.abs(a.values))
    assert abs(b.squared_norm - 4 * a.squared_norm) <= 1e-12 * a.squared_norm


def test_closed_form_when_gcal_vanishes(traj):
    b, _ = traj
    cfg = CFG.with_(f_coeffs=(0, 0, 0, 0), allow_nonconforming=True)
    tr0 = solve_trajectory(cfg, b)
    for s, x, y in [(0.1, 0.0, 0.0), (0.33, 1.0, 2.5), (0.49, math.pi, 0.7)]:
        v = ml.malliavin_solve(tr0, s, cfg, t_star=0.5).value(x, y)[0]
        ref = cfg.sigma * kn.khstar_source(x, 0.5, 0.0, y, s, cfg.params, cfg.n_modes)
        assert abs(v - ref) <= 1e-8


def test_norm_matches_hnorm_when_gcal_vanishes(traj):
    b, _ = traj
    cfg = CFG.with_(f_coeffs=(0, 0, 0, 0), allow_nonconforming=True)
    tr0 = solve_trajectory(cfg, b)
    g = ml.malliavin_norm_at(tr0, math.pi / 2, 0.5, cfg, with_values=False)
    ref = cfg.sigma ** 2 * kn.hnorm_green(math.pi / 2, 0.5, 0.0, cfg.params, cfg.n_modes)
    assert g.squared_norm == pytest.approx(ref, rel=1e-3)


def test_forward_and_adjoint_routes_agree(traj):
    _, tr = traj
    s, x = 0.237, 0.8
    fwd = ml.malliavin_solve(tr, s, CFG, t_star=0.5).mode_values(x)
    adj = ml.mode_derivatives(tr, np.array([x]), 0.5, [s], CFG)[0, 0]
    assert np.max(np.abs(fwd - adj)) <= 1e-12 * np.max(np.abs(fwd))


def test_restricted_norm_monotone(traj):
    _, tr = traj
    g = ml.malliavin_norm_at(tr, 1.0, 0.5, CFG, eps_grid=(0.01, 0.05, 0.1, 0.3, 0.5), with_values=False)
    vals = [g.restricted[e] for e in sorted(g.restricted)]
    assert np.all(np.diff(vals) >= 0)
    assert vals[-1] == pytest.approx(g.squared_norm, rel=1e-10)


@pytest.mark.parametrize("j,ell,x,m", [(0, 100, 1.3, 96), (1, 301, 0.2, 128), (2, 17, 2.9, 64), (3, 250, 1.0, 100)])
def test_finite_difference_oracle(traj, j, ell, x, m):
    b, tr = traj
    eps = 1e-4
    trp = solve_trajectory(CFG, noise.perturb_cell(b, j, ell, eps))
    from fraccahn.spectral import basis_matrix

    a = basis_matrix(x, CFG.n_modes)[0]
    fd = float((trp.coeffs[m] - tr.coeffs[m]) @ a) / eps
    s = noise.cell_midpoints(b)[ell]
    t_star = tr.times[m]
    exact = ml.malliavin_solve(tr, s, CFG, t_star=t_star).mode_values(x)[j]
    disc = ml.malliavin_solve(tr, s, CFG, t_star=t_star, forcing="discrete").mode_values(x)[j]
    assert abs(fd - exact) <= 0.05 * abs(exact)
    assert abs(fd - disc) <= 1e-5 * abs(disc)


def test_fd_order_in_eps(traj):
    b, tr = traj
    j, ell, m, x = 1, 200, 100, 0.4
    from fraccahn.spectral import basis_matrix

    a = basis_matrix(x, CFG.n_modes)[0]
    s = noise.cell_midpoints(b)[ell]
    D = ml.malliavin_solve(tr, s, CFG, t_star=tr.times[m], forcing="discrete").mode_values(x)[j]
    eps = np.array([1e-1, 3e-2, 1e-2, 3e-3])
    err = [abs(float((solve_trajectory(CFG, noise.perturb_cell(b, j, ell, e)).coeffs[m] - tr.coeffs[m]) @ a) / e - D)
           for e in eps]
    assert np.polyfit(np.log(eps), np.log(err), 1)[0] >= 0.9


def test_resolve_is_deterministic(traj):
    _, tr = traj
    a = ml.malliavin_norm_at(tr, 1.0, 0.5, CFG)
    b = ml.malliavin_norm_at(tr, 1.0, 0.5, CFG)
    assert a.squared_norm == b.squared_norm and np.array_equal(a.values, b.values)


def test_grid_csv(traj, tmp_path):
    _, tr = traj
    g = ml.malliavin_norm_at(tr, 1.0, 0.25, CFG, eps_grid=(0.1,))
    g.to_csv(tmp_path / "g.csv")
    from fraccahn.io import read_csv

    header, data = read_csv(tmp_path / "g.csv")
    assert header == ["s", "y_index", "value"]
    assert data.shape[0] == g.values.size
    assert "# squared_norm=" in (tmp_path / "g.csv").read_text()


def test_source_time_validation(traj):
    _, tr = traj
    with pytest.raises(ValueError):
        ml.malliavin_solve(tr, 0.0, CFG)
    with pytest.raises(ValueError):
        ml.malliavin_solve(tr, 0.1, CFG, t_star=0.1234)
    assert ml.malliavin_solve(tr, 0.9, CFG, t_star=0.5).coeffs.size == 0
    with pytest.raises(ValueError):
        ml.forcing_row(0.1, 0, tr.times, CFG, "bogus")
