"""Monte-Carlo and quadrature checks of the quantitative estimates.

Every check returns a ScanReport: abscissae, measured values (with standard errors
when statistical), an optional log-log slope, reference exponents, and named
pass/fail checks with pre-registered tolerances. Reports flagged asserted=False are
informational and never affect the exit status.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import gammaln

from . import ensemble
from . import kernel as kn
from . import malliavin as ml
from . import noise
from . import quadrature as qd
from .config import ModelConfig, VerifySettings
from .solver import TrajectoryRecord, picard_solve, solve_batch, solve_trajectory
from .spectral import basis_matrix, basis_primitive, collocation_grid

# Lambda(0.75, 1, 0.5) from the closed form at 50 digits (mpmath), computed before the build.
LAMBDA_ORACLE = (0.75, 1.0, 0.5, 0.02657347348297427)

_STREAMS = {"covariance": 1, "isometry": 2, "first": 3, "picard": 4, "localization": 5,
            "malliavin": 6, "positivity": 7, "density": 8, "restricted": 9}


def stream_seed(master: int, name: str) -> int:
    ss = np.random.SeedSequence([int(master), _STREAMS[name]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class ScanReport:
    name: str
    abscissa: str
    xs: np.ndarray
    values: np.ndarray
    stderr: np.ndarray | None = None
    slope: float | None = None
    intercept: float | None = None
    half_width: float | None = None
    reference: dict = field(default_factory=dict)
    band: tuple | None = None
    checks: dict = field(default_factory=dict)
    asserted: bool = True
    extra: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    n_samples: int | None = None

    @property
    def passed(self) -> bool:
        return all(bool(v) for v in self.checks.values())

    def table(self):
        header = [self.abscissa, "value", "stderr"] + list(self.extra)
        se = self.stderr if self.stderr is not None else np.full(len(self.xs), np.nan)
        cols = [np.asarray(self.xs, float), np.asarray(self.values, float), np.asarray(se, float)]
        cols += [np.asarray(v, float) for v in self.extra.values()]
        return header, np.column_stack(cols) if len(self.xs) else np.zeros((0, len(header)))

    def summary(self) -> dict:
        return {"name": self.name, "slope": self.slope, "half_width": self.half_width,
                "band": list(self.band) if self.band else None, "pass": self.passed,
                "asserted": self.asserted, "checks": {k: bool(v) for k, v in self.checks.items()},
                "reference": self.reference, "n_samples": self.n_samples, "info": self.info}


def loglog_fit(xs, ys, weights=None):
    """Weighted least squares of log y on log x: (slope, intercept, 95% half-width of slope)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("loglog_fit needs positive data")
    lx, ly = np.log(xs), np.log(ys)
    w = np.ones_like(lx) if weights is None else np.asarray(weights, dtype=float)
    W = w / w.sum()
    mx, my = W @ lx, W @ ly
    sxx = W @ (lx - mx) ** 2
    slope = (W @ ((lx - mx) * (ly - my))) / sxx
    intercept = my - slope * mx
    n = lx.size
    if n <= 2:
        return float(slope), float(intercept), float("nan")
    resid = ly - (intercept + slope * lx)
    n_eff = w.sum() ** 2 / (w @ w)
    s2 = (W @ resid ** 2) * n_eff / (n_eff - 2)
    se = math.sqrt(max(s2, 0.0) / (sxx * n_eff))
    hw = stats.t.ppf(0.975, n - 2) * se
    return float(slope), float(intercept), float(hw)


def _grid_ok(xs) -> bool:
    xs = np.asarray(xs, dtype=float)
    return xs.size >= 5 and np.log10(xs.max() / xs.min()) >= 1.5


# ---------------------------------------------------------------------------
# noise covariance and isometry


def _cov_chunk(a, b, config, seed, xs, t_idx):
    P = noise.sample_paths_batch(config, seed, range(a, b))
    prim = basis_primitive(xs, config.n_modes)  # (nx, K)
    # W[b, point] with points ordered (x, t)
    W = np.einsum("xk,bkt->bxt", prim, P[:, :, t_idx]).reshape(b - a, -1)
    return {"sum": W.T @ W, "sq": (W * W).T @ (W * W), "n": b - a}


def verify_covariance(config: ModelConfig, n_samples: int, seed: int, workers: int = 1,
                      xs=(math.pi / 4, math.pi / 2, 3 * math.pi / 4, math.pi),
                      ts=(0.25, 0.5, 0.75, 1.0), n_time: int = 64) -> ScanReport:
    """E[W_H(x,t) W_H(y,s)] against min(x,y) R_H(t,s) over a grid of (x,t) points."""
    cfg = config.with_(n_time=n_time, sampler="volterra")
    t_idx = np.array([int(round(t / cfg.dt)) for t in ts])
    res = ensemble.run_chunks(_cov_chunk, n_samples, (cfg, seed, np.asarray(xs), t_idx), workers)
    S = sum(r["sum"] for r in res)
    Q = sum(r["sq"] for r in res)
    N = n_samples
    mean = S / N
    se = np.sqrt(np.maximum(Q / N - mean ** 2, 0.0) / N)
    X, T = np.meshgrid(np.asarray(xs), np.asarray(ts), indexing="ij")
    X, T = X.ravel(), T.ravel()
    target = np.minimum.outer(X, X) * kn.covariance_R(T[:, None], T[None, :], cfg.params)
    iu = np.triu_indices(X.size)
    rel = np.abs(mean - target)[iu] / np.abs(target[iu])
    z = np.abs(mean - target)[iu] / np.maximum(se[iu], 1e-300)
    ok = (rel <= 0.05) | (z <= 3.0)
    pairs = np.arange(iu[0].size)
    return ScanReport(
        name=f"covariance_H{cfg.H:g}", abscissa="pair", xs=pairs, values=mean[iu], stderr=se[iu],
        checks={"all_pairs_within_5pct_or_3se": bool(ok.all())},
        extra={"x1": X[iu[0]], "t1": T[iu[0]], "x2": X[iu[1]], "t2": T[iu[1]], "target": target[iu],
               "rel_err": rel},
        info={"max_rel_err": float(rel.max()), "n_fail": int((~ok).sum()), "sampler": "volterra",
              "substeps": cfg.substeps, "n_time": n_time},
        n_samples=N)


def _iso_chunk(a, b, config, seed, x_points, t_idx):
    P = noise.sample_paths_batch(config, seed, range(a, b), sampler="cholesky")
    C = noise.convolution_path(P, config.dt)  # (B, N+1, K)
    Ax = basis_matrix(x_points, config.n_modes)
    vals = np.stack([C[:, ti] @ Ax[i] for i, ti in enumerate(t_idx)], axis=1)  # (B, P)
    return {"s2": (vals ** 2).sum(0), "s4": (vals ** 4).sum(0)}


def verify_isometry(config: ModelConfig, n_samples: int, seed: int, workers: int = 1,
                    points=None) -> ScanReport:
    """Monte-Carlo variance of the stochastic convolution against the H-norm quadrature."""
    if points is None:
        points = [(x, t) for t in (0.5, 1.0) for x in (0.0, math.pi / 4, math.pi / 2)]
    xp = np.array([p[0] for p in points])
    tp = np.array([p[1] for p in points])
    t_idx = np.array([int(round(t / config.dt)) for t in tp])
    res = ensemble.run_chunks(_iso_chunk, n_samples, (config, seed, xp, t_idx), workers)
    s2 = sum(r["s2"] for r in res)
    s4 = sum(r["s4"] for r in res)
    N = n_samples
    var = config.sigma ** 2 * s2 / N
    se = config.sigma ** 2 * np.sqrt(np.maximum(s4 / N - (s2 / N) ** 2, 0.0) / N)
    quad = np.array([config.sigma ** 2 * kn.hnorm_green(x, t, 0.0, config.params, config.n_modes)
                     for x, t in points])
    within = np.abs(var - quad) <= 3.0 * se
    return ScanReport(
        name="isometry", abscissa="point", xs=np.arange(len(points)), values=var, stderr=se,
        checks={"within_3se_at_90pct": bool(within.mean() >= 0.9)},
        extra={"x": xp, "t": tp, "hnorm_quadrature": quad, "within_3se": within.astype(float)},
        info={"fraction_within": float(within.mean()), "sampler": "cholesky"}, n_samples=N)


# ---------------------------------------------------------------------------
# deterministic scans


def _layer(n_modes):
    return 0.1 / float(max(n_modes - 1, 1)) ** 4


def window_source_rules(t: float, zeta: float, H: float, n_modes: int, order: int = 12):
    """s-rules covering [0, zeta] (singular at 0) and [zeta, t], plain weights."""
    rules = []
    delta = t - zeta
    if zeta > 0:
        p = 1.0 - 2.0 * H
        s, w = qd.graded_rule(0.0, zeta, [(0.0, zeta * 2.0 ** -30), (zeta, delta * 1e-8)],
                              left_power=p, order=order)
        rules.append((s, w / s ** p))
    rules.append(qd.graded_rule(zeta, t, [(zeta, delta * 1e-8), (t, _layer(n_modes))], order=order))
    return rules


def second_estimate_Q(t: float, delta: float, params: kn.HurstParams, n_modes: int, n_grid: int,
                      order: int = 12) -> float:
    """int_0^t int_D sup_x |[K_H*(G(x,.,t-.) 1_[t-delta,t])](y,s)|^2 dy ds."""
    zeta = t - delta
    A = basis_matrix(collocation_grid(n_grid), n_modes)
    wy = math.pi / n_grid
    total = 0.0
    for s, w in window_source_rules(t, zeta, params.H, n_modes, order):
        for si, wi in zip(s, w):
            I = kn.mode_integrals(t, si, zeta, params, n_modes)
            F = (A * I) @ A.T  # F[x, y]
            total += wi * wy * np.sum(np.max(np.abs(F), axis=0) ** 2)
    return float(total)


def scan_second_estimate(config: ModelConfig, delta_grid, t: float = 1.0) -> ScanReport:
    p = config.params
    ds = np.asarray(delta_grid, dtype=float) * t
    q = np.array([second_estimate_Q(t, d, p, config.n_modes, config.n_grid) for d in ds])
    ref = (4 * p.H - 1) / 2
    slope, icpt, hw = loglog_fit(ds, q)
    band = (ref - 0.1, ref + 0.25)
    order = np.argsort(ds)
    return ScanReport(
        name=f"second_estimate_H{p.H:g}", abscissa="delta", xs=ds, values=q, slope=slope, intercept=icpt,
        half_width=hw, reference={"(4H-1)/2": ref}, band=band,
        checks={"slope_in_band": band[0] <= slope <= band[1], "increasing": bool(np.all(np.diff(q[order]) > 0)),
                "grid_spans_1.5_decades": _grid_ok(ds)})


def _lower_L(t, eps, x_points, params, n_modes, sigma, order=16):
    s, w = qd.graded_rule(t - eps, t, [(t, _layer(n_modes))], order=order)
    I = np.array([kn.mode_integrals(t, si, 0.0, params, n_modes) for si in s])  # (Q, K)
    A2 = basis_matrix(np.asarray(x_points), n_modes) ** 2  # (P, K)
    return sigma ** 2 * (A2 @ (w @ (I * I)))


def check_lower_bound(config: ModelConfig, t: float, eps_grid, x_points) -> ScanReport:
    """L(eps, x) >= c Lambda(H,t,eps) with one constant fitted at the largest eps."""
    p = config.params
    es = np.asarray(eps_grid, dtype=float) * t
    L = np.array([_lower_L(t, e, x_points, p, config.n_modes, config.sigma) for e in es])  # (E, P)
    lam = np.array([kn.lambda_lower(t, e, p) for e in es])
    imax = int(np.argmax(es))
    c = float(np.min(L[imax] / lam[imax]))
    bound_ok = bool(np.all(L >= c * lam[:, None] * (1 - 1e-12)))
    ratio = lambda e: e ** (2 * p.H + 0.25) / kn.lambda_lower(t, e, p)
    factor = ratio(0.1 * t) / ratio(1e-4 * t)
    H0, t0, e0, v0 = LAMBDA_ORACLE
    lam_oracle_err = abs(kn.lambda_lower(t0, e0, kn.HurstParams(H0)) - v0)
    slope, icpt, hw = loglog_fit(es, L.min(axis=1))
    extra = {f"L_x{x:.6g}": L[:, i] for i, x in enumerate(x_points)}
    extra["Lambda"] = lam
    return ScanReport(
        name=f"lower_bound_H{p.H:g}", abscissa="eps", xs=es, values=L.min(axis=1), slope=slope,
        intercept=icpt, half_width=hw,
        reference={"2H-1/2 (pointwise window scaling)": 2 * p.H - 0.5, "Lambda ~ eps^(2H)": 2 * p.H},
        checks={"L_positive": bool(np.all(L > 0)), "L_ge_c_Lambda": bound_ok,
                "Lambda_oracle_1e-9": lam_oracle_err <= 1e-9, "limit_ratio_drop_ge_10x": factor >= 10.0},
        extra=extra,
        info={"fitted_c": c, "ratio_drop_factor_1e-1_to_1e-4": factor, "lambda_oracle_abs_err": lam_oracle_err,
              "x_points": list(x_points), "t": t})


# ---------------------------------------------------------------------------
# first estimate (Monte Carlo over windows)


def _first_chunk(a, b, H, delta, n_w, K, seed, x_eval, p_exp):
    Lf = noise.cholesky_factor(delta, n_w, H)
    z = np.empty((b - a, K, n_w))
    for i, idx in enumerate(range(a, b)):
        z[i] = noise.rng_for(seed, idx).standard_normal((K, n_w))
    P = np.zeros((b - a, K, n_w + 1))
    P[:, :, 1:] = z @ Lf.T
    C = noise.convolution_path(P, delta / n_w)[:, -1]  # (B, K)
    X = C @ basis_matrix(x_eval, K).T  # (B, nx)
    sup = np.max(np.abs(X), axis=1) ** p_exp
    return {"s": sup.sum(), "s2": (sup ** 2).sum(), "var": (X ** 2).sum(0)}


def scan_first_estimate(config: ModelConfig, delta_grid, p: int, n_samples: int, seed: int,
                        t: float = 1.0, workers: int = 1, n_window: int = 128) -> ScanReport:
    """E sup_x |int_{t-d}^t int_D G dW_H|^p per window; slope vs the H-norm pointwise slope."""
    if p not in (2, 4):
        raise ValueError("p must be 2 or 4")
    ds = np.asarray(delta_grid, dtype=float) * t
    sig = config.sigma
    H = config.H
    x_eval = np.concatenate(([0.0], collocation_grid(config.n_grid), [math.pi]))
    if sig == 0.0:
        return ScanReport(name=f"first_estimate_p{p}_H{H:g}", abscissa="delta", xs=ds, values=np.zeros_like(ds),
                          checks={"refused_sigma_zero": True}, asserted=False,
                          info={"note": "sigma=0: all values zero, no fit"})
    means, ses, hmax = [], [], []
    abs_moment = 2 ** (p / 2) * math.exp(gammaln((p + 1) / 2)) / math.sqrt(math.pi)
    for j, d in enumerate(ds):
        res = ensemble.run_chunks(_first_chunk, n_samples,
                                  (H, d, n_window, config.n_modes, seed + j, x_eval, p), workers)
        s = sum(r["s"] for r in res)
        s2 = sum(r["s2"] for r in res)
        m = s / n_samples
        means.append(sig ** p * m)
        ses.append(sig ** p * math.sqrt(max(s2 / n_samples - m * m, 0.0) / n_samples))
        hn = kn.hnorm_green(x_eval, t, t - d, config.params, config.n_modes)
        hmax.append(abs_moment * (sig ** 2 * float(np.max(hn))) ** (p / 2))
    means, ses, hmax = np.array(means), np.array(ses), np.array(hmax)
    slope, icpt, hw = loglog_fit(ds, means)
    qslope = loglog_fit(ds, hmax)[0]
    bound_exp = p * (5 * H - 1) / 4
    return ScanReport(
        name=f"first_estimate_p{p}_H{H:g}", abscissa="delta", xs=ds, values=means, stderr=ses, slope=slope,
        intercept=icpt, half_width=hw,
        reference={"quadrature_pointwise_slope": qslope, "bound_exponent_p(5H-1)/4 (reported only)": bound_exp},
        band=(qslope - 0.15, qslope + 0.15),
        checks={"slope_matches_quadrature": abs(slope - qslope) <= 0.15,
                "sup_dominates_pointwise": bool(np.all(means + 3 * ses >= hmax))},
        extra={"pointwise_max_moment": hmax},
        info={"slope_minus_bound_exponent": slope - bound_exp, "n_window_steps": n_window, "sampler": "cholesky"},
        n_samples=n_samples)


# ---------------------------------------------------------------------------
# Picard, localization


def _two_model_fit(d):
    k = np.arange(d.size, dtype=float)
    y = np.log(d)
    out = {}
    for name, corr in (("geometric", np.zeros_like(k)), ("factorial", gammaln(k + 1))):
        X = np.column_stack([np.ones_like(k), k])
        coef, *_ = np.linalg.lstsq(X, y + corr, rcond=None)
        out[name] = (float(np.sum((X @ coef - y - corr) ** 2)), float(math.exp(coef[1])))
    return out


def check_picard_decay(config: ModelConfig, bundle) -> ScanReport:
    rec, d = picard_solve(config, bundle)
    ref = solve_trajectory(config.with_(solver="exponential"), bundle)
    agree = float(np.max(np.abs(rec.grid_values(config.n_grid) - ref.grid_values(config.n_grid))))
    pos = d[d > 0]
    fits = _two_model_fit(pos) if pos.size >= 3 else {"geometric": (0.0, 0.0), "factorial": (0.0, 0.0)}
    monotone = bool(np.all(np.diff(d[2:]) < 0)) if d.size > 3 else True
    trivial = d.size >= 2 and d[1] == 0.0
    fact_better = trivial or fits["factorial"][0] < fits["geometric"][0]
    return ScanReport(
        name="picard", abscissa="k", xs=np.arange(d.size), values=d,
        checks={"monotone_k_ge_2": monotone, "factorial_beats_geometric": fact_better,
                "agrees_with_exponential_5e-3": agree <= 5e-3,
                "residual_lt_10tol": rec.provenance["residual"] < 10 * config.picard_tol or trivial},
        info={"residual_geometric": fits["geometric"][0], "residual_factorial": fits["factorial"][0],
              "rho_geometric": fits["geometric"][1], "rho_factorial": fits["factorial"][1],
              "sup_diff_vs_exponential": agree, "iterations": int(d.size),
              "fixed_point_residual": rec.provenance["residual"], "n_modes": config.n_modes,
              "n_time": config.n_time})


def _loc_chunk(a, b, config, seed, n_values):
    P = noise.sample_paths_batch(config, seed, range(a, b))
    u0 = config.u0_field().coeffs
    with np.errstate(all="ignore"):
        raw = solve_batch(config.with_(cutoff_n=None), u0, P, keep_path=True)
        out = {"sup": raw.sup_norm, "equal": [], "blown_cut": []}
        for n in n_values:
            cut = solve_batch(config.with_(cutoff_n=int(n)), u0, P, keep_path=True)
            same = np.array([np.array_equal(raw.path[i], cut.path[i]) for i in range(b - a)])
            out["equal"].append(same)
            out["blown_cut"].append(cut.blown >= 0)
    out["equal"] = np.array(out["equal"]).T
    out["blown_cut"] = np.array(out["blown_cut"]).T
    return out


def check_localization(config: ModelConfig, n_traj: int, seed: int, n_values=(2, 4, 8, 16),
                       workers: int = 1) -> ScanReport:
    res = ensemble.run_chunks(_loc_chunk, n_traj, (config, seed, tuple(n_values)), workers)
    sup = ensemble.concat(res, "sup")
    eq = ensemble.concat(res, "equal")
    blown = ensemble.concat(res, "blown_cut")
    ns = np.asarray(n_values, dtype=float)
    flagged = sup[:, None] < ns[None, :]
    p_omega = flagged.mean(axis=0)
    eq_on_flagged = bool(np.all(eq[flagged]))
    equal_unflagged = int(np.sum(eq & ~flagged))
    return ScanReport(
        name="localization", abscissa="n", xs=ns, values=p_omega,
        checks={"bit_identical_on_omega_n": eq_on_flagged,
                "p_omega_nondecreasing": bool(np.all(np.diff(p_omega) >= 0))},
        extra={"n_flagged": flagged.sum(0).astype(float), "n_equal": eq.sum(0).astype(float),
               "cutoff_blowups": blown.sum(0).astype(float)},
        info={"equal_but_unflagged": equal_unflagged, "raw_blowups": int(np.sum(~np.isfinite(sup))),
              "sigma": config.sigma, "sup_norm_quantiles": np.quantile(sup[np.isfinite(sup)], [0.5, 0.9, 1.0])},
        n_samples=n_traj)


# ---------------------------------------------------------------------------
# Malliavin


def _records_from_batch(config, P, seed, a):
    res = solve_batch(config, config.u0_field().coeffs, P, keep_path=True)
    t = np.arange(P.shape[2]) * config.dt
    return [TrajectoryRecord(t, res.path[i], float(res.sup_norm[i]), bool(res.sup_norm[i] < config.cutoff_n),
                             f"{config.sampler}:{seed}:{a + i}") for i in range(P.shape[0])]


def malliavin_checks(config: ModelConfig, seed: int, n_pairs: int = 10, t_star_range=(0.25, 1.0),
                     eps: float = 1e-4) -> ScanReport:
    """Zero-source, linearity, closed form with 'G = 0, and finite-difference agreement."""
    cfg = config.with_(sampler="volterra")
    bundle = noise.sample_bundle(cfg, seed, 0)
    tr = solve_trajectory(cfg, bundle)
    rng = noise.rng_for(seed, 1)
    t = tr.times
    xs_star = math.pi / 2
    ts = t[int(round(0.5 / cfg.dt))]

    g0 = ml.malliavin_norm_at(tr, xs_star, ts, cfg.with_(sigma=0.0), eps_grid=(0.1,))
    zero_ok = g0.squared_norm == 0.0 and not np.any(g0.values) and all(v == 0 for v in g0.restricted.values())

    g1 = ml.malliavin_norm_at(tr, xs_star, ts, cfg)
    g2 = ml.malliavin_norm_at(tr, xs_star, ts, cfg.with_(sigma=2 * cfg.sigma))
    lin_err = max(float(np.max(np.abs(g2.values - 2 * g1.values))) / max(float(np.max(np.abs(g1.values))), 1e-300),
                  abs(g2.squared_norm - 4 * g1.squared_norm) / g1.squared_norm)

    czero = cfg.with_(f_coeffs=(0.0, 0.0, 0.0, 0.0), allow_nonconforming=True)
    tr0 = solve_trajectory(czero, bundle)
    cf_err = 0.0
    for s_, x_, y_ in [(0.1, 0.0, 0.0), (0.3, 1.0, 2.5), (0.45, math.pi, 0.7)]:
        sol = ml.malliavin_solve(tr0, s_, czero, t_star=ts)
        v = float(sol.value(x_, y_)[0])
        ref = czero.sigma * kn.khstar_source(x_, ts, 0.0, y_, s_, czero.params, czero.n_modes)
        cf_err = max(cf_err, abs(v - ref))

    mids = noise.cell_midpoints(bundle)
    rel_exact, rel_disc, pairs = [], [], []
    A = None
    for _ in range(n_pairs):
        m_star = int(rng.integers(int(t_star_range[0] / cfg.dt), int(t_star_range[1] / cfg.dt) + 1))
        t_star = t[m_star]
        j = int(rng.integers(0, 4))
        ell = int(rng.integers(0, m_star * cfg.substeps))
        x_star = float(rng.uniform(0.0, math.pi))
        A = basis_matrix(x_star, cfg.n_modes)[0]
        trp = solve_trajectory(cfg, noise.perturb_cell(bundle, j, ell, eps))
        fd = float((trp.coeffs[m_star] - tr.coeffs[m_star]) @ A) / eps
        De = ml.malliavin_solve(tr, mids[ell], cfg, t_star=t_star).mode_values(x_star)[j]
        Dd = ml.malliavin_solve(tr, mids[ell], cfg, t_star=t_star, forcing="discrete").mode_values(x_star)[j]
        rel_exact.append(abs(fd - De) / abs(De))
        rel_disc.append(abs(fd - Dd) / abs(Dd))
        pairs.append((j, mids[ell], x_star, t_star))

    # observed FD order in eps against the discrete derivative (first pair)
    j, s_bar, x_star, t_star = pairs[0]
    ell = int(np.argmin(np.abs(mids - s_bar)))
    m_star = int(round(t_star / cfg.dt))
    A = basis_matrix(x_star, cfg.n_modes)[0]
    Dd = ml.malliavin_solve(tr, s_bar, cfg, t_star=t_star, forcing="discrete").mode_values(x_star)[j]
    epss = np.array([1e-1, 3e-2, 1e-2, 3e-3, 1e-3])
    errs = []
    for e in epss:
        trp = solve_trajectory(cfg, noise.perturb_cell(bundle, j, ell, e))
        errs.append(abs(float((trp.coeffs[m_star] - tr.coeffs[m_star]) @ A) / e - Dd))
    errs = np.array(errs)
    fd_order = loglog_fit(epss, np.maximum(errs, 1e-300))[0] if np.all(errs > 0) else float("inf")

    rel_exact = np.array(rel_exact)
    return ScanReport(
        name="malliavin_engine", abscissa="pair", xs=np.arange(n_pairs), values=rel_exact,
        checks={"sigma0_identically_zero": zero_ok, "sigma_linearity_1e-12": lin_err <= 1e-12,
                "fd_rel_err_le_5pct": bool(np.all(rel_exact <= 0.05)), "closed_form_1e-8": cf_err <= 1e-8,
                "fd_order_ge_1": fd_order >= 0.9},
        extra={"rel_err_discrete_forcing": np.array(rel_disc), "source_mode": np.array([p[0] for p in pairs], float),
               "source_time": np.array([p[1] for p in pairs]), "x_star": np.array([p[2] for p in pairs]),
               "t_star": np.array([p[3] for p in pairs])},
        info={"linearity_err": lin_err, "closed_form_abs_err": cf_err, "fd_order": fd_order,
              "fd_eps": eps, "n_modes": cfg.n_modes, "n_time": cfg.n_time})


def _pos_chunk(a, b, config, seed, x_star, t_star, n_steps):
    P = noise.sample_paths_batch(config, seed, range(a, b), n_steps=n_steps)
    recs = _records_from_batch(config, P, seed, a)
    return np.array([ml.malliavin_norm_at(r, x_star, t_star, config, with_values=False).squared_norm
                     for r in recs])


def check_positivity(config: ModelConfig, x_star: float, t_star: float, n_traj: int, seed: int,
                     delta: float = 1e-12, workers: int = 1) -> ScanReport:
    n_steps = int(round(t_star / config.dt))
    norms = np.concatenate(ensemble.run_chunks(_pos_chunk, n_traj, (config, seed, x_star, t_star, n_steps), workers,
                                               size=100))
    deltas = np.array([1e-14, 1e-12, 1e-10, 1e-8])
    frac = np.array([(norms > d).mean() for d in deltas])
    main = float((norms > delta).mean())
    # sigma = 0 control on a handful of trajectories
    ctrl = _pos_chunk(0, 5, config.with_(sigma=0.0), seed, x_star, t_star, n_steps)
    return ScanReport(
        name="positivity", abscissa="delta", xs=deltas, values=frac,
        checks={"fraction_one": main == 1.0 and n_traj >= 500 if config.sigma != 0 else main == 0.0,
                "sigma0_control_zero": float((ctrl > delta).mean()) == 0.0},
        info={"fraction_at_delta": main, "delta": delta, "min_norm": float(norms.min()),
              "median_norm": float(np.median(norms)), "delta_insensitive": bool(np.all(frac == frac[0])),
              "x_star": x_star, "t_star": t_star},
        n_samples=n_traj)


def _restricted_chunk(a, b, config, seed, t_hat, eps_grid, n_steps):
    P = noise.sample_paths_batch(config, seed, range(a, b), n_steps=n_steps)
    recs = _records_from_batch(config, P, seed, a)
    x = collocation_grid(config.n_grid)
    out = np.empty((b - a, len(eps_grid)))
    for i, r in enumerate(recs):
        for k, e in enumerate(eps_grid):
            out[i, k] = ml.restricted_norm(r, x, t_hat, e, config).max()
    return out


def scan_restricted_malliavin(config: ModelConfig, eps_grid, t_hat: float, n_traj: int, seed: int,
                              workers: int = 1) -> ScanReport:
    es = np.asarray(eps_grid, dtype=float) * t_hat
    n_steps = int(round(t_hat / config.dt))
    vals = np.concatenate(ensemble.run_chunks(_restricted_chunk, n_traj, (config, seed, t_hat, tuple(es), n_steps),
                                              workers, size=50))
    mean = vals.mean(0)
    se = vals.std(0, ddof=1) / math.sqrt(n_traj) if n_traj > 1 else np.zeros_like(mean)
    H = config.H
    shape = es ** ((4 * H - 1) / 2) * np.exp(4.0 / 3.0 * es ** 0.75)
    imax = int(np.argmax(es))
    c = mean[imax] / shape[imax]
    bounded = bool(np.all(mean - 3 * se <= c * shape * (1 + 1e-12)))
    # 'G = 0 surrogate: deterministic, one trajectory suffices
    czero = config.with_(f_coeffs=(0.0, 0.0, 0.0, 0.0), allow_nonconforming=True)
    P0 = np.zeros((1, config.n_modes, n_steps + 1))
    r0 = _records_from_batch(czero, P0, seed, 0)[0]
    x = collocation_grid(config.n_grid)
    sur = np.array([ml.restricted_norm(r0, x, t_hat, e, czero).max() for e in es])
    slope, icpt, hw = loglog_fit(es, mean)
    s_sur = loglog_fit(es, sur)[0]
    ratio = slope / s_sur
    order = np.argsort(es)
    return ScanReport(
        name="restricted_malliavin", abscissa="eps", xs=es, values=mean, stderr=se, slope=slope, intercept=icpt,
        half_width=hw, reference={"(4H-1)/2": (4 * H - 1) / 2, "surrogate_slope": s_sur}, band=(0.9, 1.3),
        checks={"bounded_by_fitted_shape": bounded, "monotone_in_eps": bool(np.all(np.diff(mean[order]) >= 0)),
                "slope_ratio_to_surrogate_in_band": 0.9 <= ratio <= 1.3},
        extra={"gcal_zero_surrogate": sur, "fitted_bound": c * shape},
        info={"fitted_c": c, "slope_ratio": ratio, "t_hat": t_hat}, n_samples=n_traj)


# ---------------------------------------------------------------------------
# density


def _density_chunk(a, b, config, seed, x_star, n_steps):
    P = noise.sample_paths_batch(config, seed, range(a, b), n_steps=n_steps, sampler="cholesky")
    res = solve_batch(config, config.u0_field().coeffs, P)
    return res.final @ basis_matrix(x_star, config.n_modes)[0]


def silverman_bandwidth(v: np.ndarray) -> float:
    iqr = np.subtract(*np.percentile(v, [75, 25]))
    return 0.9 * min(np.std(v, ddof=1), iqr / 1.34) * v.size ** -0.2


def kde_curve(v: np.ndarray, n_points: int = 512):
    bw = silverman_bandwidth(v)
    if not bw > 0:
        return np.array([]), np.array([]), 0.0
    grid = np.linspace(v.min() - 5 * bw, v.max() + 5 * bw, n_points)
    dens = np.zeros_like(grid)
    for chunk in np.array_split(v, max(1, v.size // 5000)):
        dens += np.exp(-0.5 * ((grid[:, None] - chunk[None, :]) / bw) ** 2).sum(1)
    dens /= v.size * bw * math.sqrt(2 * math.pi)
    return grid, dens, bw


def atom_statistics(v: np.ndarray, resolution: float = 1e-9):
    keys = np.round(v / resolution)
    _, counts = np.unique(keys, return_counts=True)
    atom = counts.max() / v.size
    s = np.sort(v)
    _, c2 = np.unique(s, return_counts=True)
    jump = c2.max() / v.size
    return float(atom), float(jump)


def density_samples(config: ModelConfig, x_star: float, t_star: float, n_samples: int, seed: int,
                    workers: int = 1) -> np.ndarray:
    n_steps = int(round(t_star / config.dt))
    return np.concatenate(ensemble.run_chunks(_density_chunk, n_samples, (config, seed, x_star, n_steps), workers,
                                              size=500))


def density_report(config: ModelConfig, x_star: float, t_star: float, n_samples: int, seed: int,
                   workers: int = 1, name: str = "density") -> ScanReport:
    v = density_samples(config, x_star, t_star, n_samples, seed, workers)
    thr = 3.0 / math.sqrt(n_samples)
    atom, jump = atom_statistics(v)
    grid, dens, bw = kde_curve(v)
    integral = float(np.trapezoid(dens, grid)) if grid.size else float("nan")
    return ScanReport(
        name=name, abscissa="u", xs=grid, values=dens,
        checks={"atom_weight_le_3_over_sqrtN": atom <= thr, "cdf_jump_le_3_over_sqrtN": jump <= thr,
                "kde_integrates_to_1": abs(integral - 1.0) <= 1e-3},
        info={"atom_weight": atom, "max_cdf_jump": jump, "threshold": thr, "bandwidth": bw, "kde_integral": integral,
              "mean": float(v.mean()), "std": float(v.std()), "x_star": x_star, "t_star": t_star, "sampler": "cholesky"},
        n_samples=n_samples)


def density_control_report(config: ModelConfig, x_star: float, t_star: float, n_samples: int, seed: int,
                           workers: int = 1) -> ScanReport:
    """sigma = 0, u0 = 0: the law is a point mass, so the atom test must flag it."""
    ctrl = density_report(config.with_(sigma=0.0, u0=0.0), x_star, t_star, n_samples, seed, workers,
                          name="density_sigma0_control")
    inner = dict(ctrl.checks)
    ctrl.checks = {"control_fails_atom_test": not (inner["atom_weight_le_3_over_sqrtN"]
                                                   and inner["cdf_jump_le_3_over_sqrtN"])}
    ctrl.info["inner_checks"] = inner
    return ctrl


# ---------------------------------------------------------------------------


def picard_config(model: ModelConfig, settings: VerifySettings) -> ModelConfig:
    K = settings.picard_modes
    return model.with_(n_modes=K, n_grid=2 * K, solver="picard", cutoff_n=5)


def malliavin_config(model: ModelConfig, settings: VerifySettings) -> ModelConfig:
    K = settings.malliavin_modes
    return model.with_(n_modes=K, n_grid=2 * K, n_time=settings.malliavin_time, solver="exponential")


VERIFY_GROUPS = ("covariance", "isometry", "exponents", "lower-bound", "picard", "localization", "malliavin",
                 "positivity", "density", "restricted")


def run_group(group: str, model: ModelConfig, st: VerifySettings, workers: int = 1) -> list[ScanReport]:
    seed = st.seed
    if group == "covariance":
        return [verify_covariance(model.with_(H=h), st.samples_covariance, stream_seed(seed, "covariance") + i,
                                  workers) for i, h in enumerate(st.covariance_hurst)]
    if group == "isometry":
        return [verify_isometry(model.with_(sampler="cholesky"), st.samples_isometry,
                                stream_seed(seed, "isometry"), workers)]
    if group == "exponents":
        out = [scan_second_estimate(model.with_(H=h), st.delta_grid, st.scan_t) for h in st.hurst_scan]
        out.append(scan_first_estimate(model, st.delta_grid, 2, st.samples_first_estimate,
                                       stream_seed(seed, "first"), st.scan_t, workers))
        return out
    if group == "lower-bound":
        return [check_lower_bound(model.with_(H=h), st.scan_t, st.eps_grid, st.x_points) for h in st.hurst_scan]
    if group == "picard":
        pc = picard_config(model, st)
        return [check_picard_decay(pc, noise.sample_bundle(pc, stream_seed(seed, "picard"), 0))]
    if group == "localization":
        return [check_localization(model.with_(sigma=st.localization_sigma), st.traj_localization,
                                   stream_seed(seed, "localization"), st.localization_n, workers)]
    if group == "malliavin":
        return [malliavin_checks(malliavin_config(model, st), stream_seed(seed, "malliavin"), st.fd_pairs)]
    if group == "positivity":
        return [check_positivity(malliavin_config(model, st), st.x_star, st.t_star, st.traj_positivity,
                                 stream_seed(seed, "positivity"), st.positivity_delta, workers)]
    if group == "density":
        s = stream_seed(seed, "density")
        return [density_report(model, st.x_star, st.t_star, st.samples_density, s, workers),
                density_control_report(model, st.x_star, st.t_star, st.samples_density, s, workers)]
    if group == "restricted":
        return [scan_restricted_malliavin(malliavin_config(model, st), st.eps_grid, st.t_star, st.traj_restricted,
                                          stream_seed(seed, "restricted"), workers)]
    raise ValueError(f"unknown verification group {group!r}")


def verify_all(model: ModelConfig, st: VerifySettings, workers: int = 1, groups=VERIFY_GROUPS) -> list[ScanReport]:
    reports = []
    for g in groups:
        reports.extend(run_group(g, model, st, workers))
    return reports
