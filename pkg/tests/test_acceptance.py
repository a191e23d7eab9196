"""Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the report lines
inline; they are printed regardless of capture settings.
"""
import json
import math
import shutil
import time

import numpy as np
import pytest

from deepvol import bayes, cli, nn, reports
from deepvol import calibrate as cal
from deepvol.bs import OptionCoord, bs_price, call_price, implied_vol_array, implied_vol_log_otm, otm_log_price
from deepvol.heston import REFERENCE as HESTON_REF
from deepvol.heston import HestonParams, effective_vol, heston_ivs, heston_mc_prices, heston_price
from deepvol.quotes import ingest_quotes, quote_arrays, write_quotes
from deepvol.rbergomi import REFERENCE as RB_REF
from deepvol.rbergomi import MCConfig, RBergomiParams, Scheme, rbergomi_mc_price, rbergomi_surface_ivs
from deepvol.rbergomi import simulate_paths
from deepvol.sampling import HESTON_BOX, HESTON_PRIORS, RBERGOMI_PRIORS, fit_wkde, generate_dataset

# pinned tolerances
IV_ROUND_TRIP_TOL = 1e-8
N_SE = 3.0
ETA_ZERO_REL_TOL = 1e-5
RB_ETA_ZERO_IV_TOL = 2e-3
GRAD_REL_TOL = 1e-5
RE_MEDIAN_MAX = 0.01
RE_Q99_MAX = 0.05
SELF_RMSE_MAX = 1e-6
QUAD_RMSE_FACTOR = 2.0
ANGLE_MIN_DEG = 10.0
SKEW_SLOPE_RANGE = (-0.53, -0.33)
HESTON_SKEW_RATIO_MAX = 3.0
TIMING_BUDGET_S = 0.050

DESK = (64, 64, 64)
DESK_TRAIN = nn.TrainConfig(learning_rate=1e-3, batch_size=128, max_epochs=1500, patience=40,
                            lr_decay=0.5, decay_patience=25)


def report(capsys, n, title, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")


# ------------------------------------------------------------------ shared fixtures


@pytest.fixture(scope="session")
def heston_desk():
    """Heston dataset on the liquid box and the desk network trained on it."""
    t0 = time.perf_counter()
    ds = generate_dataset("heston", 50_000, seed=11, box=HESTON_BOX)
    net = nn.he_init(nn.NetworkSpec(7, DESK), np.random.default_rng(0))
    best, hist = nn.train(net, ds, DESK_TRAIN)
    x, y = ds.part("test")
    pred = nn.forward(best, x)
    return {"data": ds, "net": best, "hist": hist, "test_x": x, "test_y": y, "test_pred": pred,
            "test_rmse": float(np.sqrt(np.mean((pred - y) ** 2))), "seconds": time.perf_counter() - t0}


# ------------------------------------------------------------------ 1


def test_c01_iv_round_trip(capsys):
    sig, M, T = np.meshgrid(np.linspace(0.01, 3.0, 20), np.linspace(0.5, 2.0, 20), np.linspace(1 / 365, 3.0, 20),
                            indexing="ij")
    sig, M, T = sig.ravel(), M.ravel(), T.ravel()
    t0 = time.perf_counter()
    back = implied_vol_array(M, T, call_price(M, T, sig))
    secs = time.perf_counter() - t0
    err = np.abs(back - sig)
    n_lost = int(np.sum(~np.isfinite(err)))
    worst = float(np.nanmax(err)) if n_lost < err.size else math.nan
    ok = n_lost == 0 and worst < IV_ROUND_TRIP_TOL and secs < 5
    # companion: the same grid through the log out-of-the-money price keeps full information
    log_err = np.max(np.abs(implied_vol_log_otm(M, T, otm_log_price(np.log(M), sig * np.sqrt(T))) - sig))
    report(capsys, 1, "IV round trip (price space)", ok,
           f"max finite err {worst:.2e}, {n_lost} of {err.size} not invertible, {secs:.2f}s "
           f"(log-OTM route max err {log_err:.1e})")
    assert n_lost == 0 and worst < IV_ROUND_TRIP_TOL
    assert secs < 5


# ------------------------------------------------------------------ 2


def test_c02_heston_oracles(capsys):
    t0 = time.perf_counter()
    z = []
    for T in (0.1, 0.5, 1.0):
        M = np.array([0.9, 1.0, 1.1])
        mc, se = heston_mc_prices(HESTON_REF, T, M, 100_000, max(1, round(200 * T)), seed=21)
        quad = np.array([heston_price(HESTON_REF, OptionCoord(m, T)) for m in M])
        z.extend(np.abs(mc - quad) / se)
    flat = HestonParams(HESTON_REF.lam, HESTON_REF.v_bar, HESTON_REF.v0, HESTON_REF.rho, 1e-8)
    rel = []
    for M, T in ((0.8, 0.1), (1.0, 0.5), (1.2, 1.0), (1.0, 2.0)):
        c = OptionCoord(M, T)
        ref = bs_price(c, effective_vol(flat, T))
        rel.append(abs(heston_price(flat, c) / ref - 1))
    secs = time.perf_counter() - t0
    ok = max(z) < N_SE and max(rel) < ETA_ZERO_REL_TOL and secs < 120
    report(capsys, 2, "Heston quadrature vs MC and eta->0", ok,
           f"max |z| {max(z):.2f} over 9 points, eta->0 max rel err {max(rel):.1e}, {secs:.0f}s")
    assert max(z) < N_SE and max(rel) < ETA_ZERO_REL_TOL
    assert secs < 120


# ------------------------------------------------------------------ 3


def lognormal_vol_prices(H, eta, rho, v0, T, M, n, N, seed):
    # independent simulator: plain Brownian increments, no covariance factorization
    rng = np.random.default_rng(seed)
    dt = T / n
    dW = rng.standard_normal((N, n)) * math.sqrt(dt)
    dZ = rng.standard_normal((N, n)) * math.sqrt(dt)
    W = np.concatenate([np.zeros((N, 1)), np.cumsum(dW, axis=1)], axis=1)
    t = np.arange(n + 1) * dt
    v = v0 * np.exp(eta * W - 0.5 * eta**2 * t)
    logS = np.sum(np.sqrt(v[:, :-1]) * (rho * dW + math.sqrt(1 - rho**2) * dZ) - 0.5 * v[:, :-1] * dt, axis=1)
    pay = np.maximum(np.exp(logS)[:, None] - M[None, :], 0.0)
    return pay.mean(axis=0), pay.std(axis=0, ddof=1) / math.sqrt(N)


def test_c03_rbergomi_degeneracies(capsys):
    t0 = time.perf_counter()
    M = np.array([0.9, 1.0, 1.1, 0.9, 1.0, 1.1])
    T = np.array([0.1, 0.1, 0.1, 1.0, 1.0, 1.0])
    # the short-dated wing is 3 sd out of the money, so its IV noise needs the larger path count
    iv = rbergomi_surface_ivs(RBergomiParams(0.07, 1e-9, -0.9, 0.01), M, T, MCConfig(n_paths=200_000, seed=1))
    iv_err = float(np.max(np.abs(iv - 0.1)))

    Tv = 0.5
    res = simulate_paths(RB_REF, Tv, MCConfig(n_paths=100_000, n_steps=64, seed=2, antithetic=False))
    x = res["WH"][:, -1]
    var_z = abs(x.var(ddof=1) - Tv ** (2 * RB_REF.H)) / (math.sqrt(2 / (x.size - 1)) * Tv ** (2 * RB_REF.H))
    s = res["S"][:, -1]
    mart_z = abs(s.mean() - 1) / (s.std(ddof=1) / math.sqrt(s.size))

    H, eta, rho, v0, Tb, n, N = 0.5, 1.0, -0.7, 0.04, 0.5, 50, 100_000
    Mb = np.array([0.9, 1.0, 1.1])
    ref, ref_se = lognormal_vol_prices(H, eta, rho, v0, Tb, Mb, n, N, seed=123)
    bm_z = []
    for scheme in (Scheme.EXACT, Scheme.HYBRID):
        cfg = MCConfig(n_paths=N, n_steps=n, seed=6, scheme=scheme, conditional_mc=False, antithetic=False)
        for m, r, rs in zip(Mb, ref, ref_se):
            est, se = rbergomi_mc_price(RBergomiParams(H, eta, rho, v0), OptionCoord(m, Tb), cfg)
            bm_z.append(abs(est - r) / math.hypot(se, rs))
    secs = time.perf_counter() - t0
    ok = iv_err < RB_ETA_ZERO_IV_TOL and var_z < N_SE and mart_z < N_SE and max(bm_z) < N_SE and secs < 300
    report(capsys, 3, "rough Bergomi degeneracies", ok,
           f"eta->0 IV err {iv_err:.1e}, Var(W^H) z {var_z:.2f}, E[S_T] z {mart_z:.2f}, "
           f"H=1/2 max z {max(bm_z):.2f}, {secs:.0f}s")
    assert iv_err < RB_ETA_ZERO_IV_TOL
    assert var_z < N_SE and mart_z < N_SE and max(bm_z) < N_SE
    assert secs < 300


# ------------------------------------------------------------------ 4


def kink_free(net, rng, n, margin=1e-3):
    out = []
    while len(out) < n:
        x = net.mean + net.std * rng.standard_normal(net.spec.input_dim)
        a = net.standardize(x)[None]
        ok = True
        for W, b in zip(net.W[:-1], net.b[:-1]):
            pre = a @ W + b
            ok &= bool(np.all(np.abs(pre) > margin))
            a = np.maximum(pre, 0)
        if ok:
            out.append(x)
    return np.array(out)


def rel_err(a, b):
    # entries far below the gradient's own scale are compared against that scale
    floor = 1e-8 * max(np.max(np.abs(a)), np.max(np.abs(b)))
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def test_c04_gradients(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(40)
    net = nn.he_init(nn.NetworkSpec(7, DESK), rng, mean=rng.normal(size=7), std=rng.uniform(0.5, 2, 7))
    net.theta += 0.1 * rng.standard_normal(net.theta.size)
    x = kink_free(net, rng, 10)
    y = nn.forward(net, x) + 0.1 * rng.standard_normal(10)
    _, g = nn.loss_and_grads(net, x, y)
    h = 1e-5
    fd = np.empty_like(g)
    for k in range(net.theta.size):
        old = net.theta[k]
        net.theta[k] = old + h
        up = nn.mse(net, x, y)
        net.theta[k] = old - h
        dn = nn.mse(net, x, y)
        net.theta[k] = old
        fd[k] = (up - dn) / (2 * h)
    p_err = rel_err(g, fd)
    _, J = nn.forward_and_jacobian(net, x)
    j_err = 0.0
    for i in range(10):
        hs = h * net.std
        col = [(nn.forward(net, x[i] + hs[j] * e) - nn.forward(net, x[i] - hs[j] * e)) / (2 * hs[j])
               for j, e in enumerate(np.eye(7))]
        j_err = max(j_err, rel_err(J[i], np.array(col)))
    secs = time.perf_counter() - t0
    ok = p_err < GRAD_REL_TOL and j_err < GRAD_REL_TOL and secs < 10
    report(capsys, 4, "backprop and input-Jacobian vs central differences", ok,
           f"param rel err {p_err:.1e} ({g.size} params), Jacobian rel err {j_err:.1e}, {secs:.1f}s")
    assert p_err < GRAD_REL_TOL and j_err < GRAD_REL_TOL
    assert secs < 10


# ------------------------------------------------------------------ 5


def test_c05_desk_scale_learning(capsys, heston_desk):
    d = heston_desk
    re = np.abs(d["test_pred"] - d["test_y"]) / d["test_y"]
    med, q99 = np.quantile(re, [0.5, 0.99])
    ok = med < RE_MEDIAN_MAX and q99 < RE_Q99_MAX and d["seconds"] < 1800
    report(capsys, 5, "Heston desk-scale learning", ok,
           f"test RE median {med:.2%}, q99 {q99:.2%} over {re.size} rows, best epoch {d['hist'].best_epoch}, "
           f"{d['seconds']:.0f}s")
    assert med < RE_MEDIAN_MAX
    assert q99 < RE_Q99_MAX
    assert d["seconds"] < 1800


# ------------------------------------------------------------------ 6


def heston_lm_config():
    sup = [s.support for s in HESTON_PRIORS.values()]
    return cal.LMConfig(lower=tuple(a for a, _ in sup), upper=tuple(b for _, b in sup))


def liquid_grid():
    m, T = np.meshgrid(np.linspace(-0.1, 0.28, 8), np.linspace(0.02, 0.2, 6))
    return np.exp(m.ravel()), T.ravel()


def test_c06_deep_calibration(capsys, heston_desk):
    net = heston_desk["net"]
    cfg = heston_lm_config()
    mu = HESTON_REF.as_array()
    M, T = liquid_grid()
    t0 = time.perf_counter()
    Q = nn.forward(net, np.column_stack([np.tile(mu, (M.size, 1)), M, T]))
    self_res = cal.calibrate(cal.CalibrationProblem.from_arrays(M, T, Q, net, mu * 1.1), cfg)
    t_self = time.perf_counter() - t0
    cal.check_trace(self_res, cfg)

    t0 = time.perf_counter()
    quad = heston_ivs(HESTON_REF, M, T)
    quad_res = cal.calibrate(cal.CalibrationProblem.from_arrays(M, T, quad, net, mu * 1.1), cfg)
    t_quad = time.perf_counter() - t0
    cal.check_trace(quad_res, cfg)
    bound = QUAD_RMSE_FACTOR * heston_desk["test_rmse"]
    ok = (self_res.converged and self_res.rmse < SELF_RMSE_MAX and quad_res.rmse <= bound
          and max(t_self, t_quad) < 60)
    report(capsys, 6, "deep calibration self-consistency", ok,
           f"self RMSE {self_res.rmse:.1e} in {self_res.iterations} it; quadrature quotes RMSE "
           f"{quad_res.rmse:.2e} vs bound {bound:.2e}; {t_self:.1f}s / {t_quad:.1f}s")
    assert self_res.converged and self_res.rmse < SELF_RMSE_MAX
    assert quad_res.rmse <= bound
    assert max(t_self, t_quad) < 60


# ------------------------------------------------------------------ 7


def small_self_problem(seed, perturb):
    rng = np.random.default_rng(seed)
    net = nn.he_init(nn.NetworkSpec(6, (32, 32)), rng)
    net.theta += 0.05 * rng.standard_normal(net.theta.size)
    net.b[-1][0] += 3.0  # keeps the synthetic vols positive
    mu = np.array([0.5, -0.3, 0.8, 0.2])
    M, T = rng.uniform(0.8, 1.3, 30), rng.uniform(0.05, 1.0, 30)
    iv = nn.forward(net, np.column_stack([np.tile(mu, (30, 1)), M, T]))
    return cal.CalibrationProblem.from_arrays(M, T, iv, net, mu * (1 + perturb), weights=rng.uniform(0.5, 2, 30))


def test_c07_lm_semantics(capsys):
    rng = np.random.default_rng(70)
    A, b, w, mu0 = rng.normal(size=(12, 3)), rng.normal(size=12), rng.uniform(0.1, 3, 12), rng.normal(size=3)
    step = cal.solve_normal_equations(A, w, A @ mu0 - b, 0.0)
    sw = np.sqrt(w)
    oracle = np.linalg.lstsq(A * sw[:, None], b * sw, rcond=None)[0]
    lin_err = float(np.max(np.abs(mu0 + step - oracle)))
    gain = cal.gain_ratio([1.0, 0.0], [0.6, 0.0], np.eye(2), np.array([-0.5, 0.0]))
    cfg = cal.LMConfig()
    runs = 0
    for seed in range(6):
        for perturb in (0.1, 0.3, -0.2):
            cal.check_trace(cal.calibrate(small_self_problem(seed, perturb), cfg), cfg)
            runs += 1
    ok = lin_err < 1e-10 and gain == pytest.approx(0.8, abs=1e-15)
    report(capsys, 7, "LM unit semantics", ok,
           f"linear one-step err {lin_err:.1e}, hand gain ratio {gain!r}, damping rules held on {runs} traces")
    assert lin_err < 1e-10
    assert gain == pytest.approx(0.8, abs=1e-15)


# ------------------------------------------------------------------ 8

C8_ROWS, C8_GROUP, C8_PATHS, C8_STEPS = 40_000, 8, 5000, 100


def c8_surface():
    T = np.repeat([0.05, 0.1, 0.25, 0.5, 1.0], 8)
    k = np.tile(np.linspace(-1.2, 0.4, 8), 5)
    return np.exp(k * np.sqrt(T)), T, k


def test_c08_bayesian_coverage(capsys, tmp_path):
    t0 = time.perf_counter()
    M, T, k = c8_surface()
    ref = rbergomi_surface_ivs(RB_REF, M, T, MCConfig(n_paths=200_000, n_steps=256, seed=99))
    spread = 0.002 + 0.004 * np.abs(k)
    write_quotes(tmp_path / "q.csv", M, T, ref - spread / 2, ref + spread / 2)
    Mq, Tq, iv, w, _ = quote_arrays(ingest_quotes(tmp_path / "q.csv").quotes)
    kde = fit_wkde(np.column_stack([np.log(Mq), Tq]), w)
    ds = generate_dataset("rbergomi", C8_ROWS, kde=kde, seed=1, rows_per_group=C8_GROUP,
                          pricing_cfg=MCConfig(n_paths=C8_PATHS, n_steps=C8_STEPS, seed=1))
    net = nn.he_init(nn.NetworkSpec(6, DESK), np.random.default_rng(0))
    best, hist = nn.train(net, ds, DESK_TRAIN)
    sigma = math.sqrt(min(hist.valid_mse))
    like = bayes.LikelihoodSpec(Mq, Tq, iv, sigma)
    chain = bayes.run_mcmc(bayes.PriorSpec(dict(RBERGOMI_PRIORS)), like, best, 32, 4000, seed=7)
    s = bayes.summarize(chain)["summary"]
    inside = {n: s[n]["q2.5"] <= v <= s[n]["q97.5"] for n, v in zip(chain.names, RB_REF.as_array())}
    flat = chain.flat()
    angle = bayes.principal_angle(flat[:, [1, 2]])
    corr = np.corrcoef(flat[:, 1], flat[:, 2])[0, 1]
    secs = time.perf_counter() - t0
    ok = all(inside.values()) and angle > ANGLE_MIN_DEG and secs < 1800
    intervals = ", ".join(f"{n} [{s[n]['q2.5']:.4g}, {s[n]['q97.5']:.4g}]" for n in chain.names)
    report(capsys, 8, "Bayesian coverage", ok,
           f"{intervals}; (eta, rho) angle {angle:.1f} deg, corr {corr:+.2f}; sigma {sigma:.2e}; {secs:.0f}s")
    assert all(inside.values()), inside
    assert angle > ANGLE_MIN_DEG
    assert secs < 1800


# ------------------------------------------------------------------ 9


def test_c09_atm_skew(capsys):
    t0 = time.perf_counter()
    T = np.array([0.01, 0.02, 0.05, 0.1, 0.25])
    cfg = MCConfig(n_paths=100_000, steps_per_year=1000, seed=3)
    rep = reports.skew_report(lambda m, TT: rbergomi_surface_ivs(RB_REF, np.exp(m), TT, cfg), T)
    hest = reports.skew_report(lambda m, TT: heston_ivs(HESTON_REF, np.exp(m), TT), [0.01, 0.1])
    ratio = hest["fd"][0] / hest["fd"][1]
    secs = time.perf_counter() - t0
    lo, hi = SKEW_SLOPE_RANGE
    ok = lo <= rep["slope_fd"] <= hi and ratio < HESTON_SKEW_RATIO_MAX and secs < 600
    report(capsys, 9, "ATM skew exponent", ok,
           f"rough Bergomi slope {rep['slope_fd']:.3f}, Heston skew ratio T=0.01/0.1 {ratio:.2f}, {secs:.0f}s")
    assert lo <= rep["slope_fd"] <= hi
    assert ratio < HESTON_SKEW_RATIO_MAX
    assert secs < 600


# ------------------------------------------------------------------ 10


def test_c10_conjugate_oracle(capsys):
    from deepvol.sampling import trunc_normal
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    A = rng.normal(size=(8, 2))
    mu0, sd0 = np.array([0.3, -0.2]), np.array([0.5, 0.8])
    sigma = rng.uniform(0.2, 0.6, 8)
    y = A @ np.array([0.1, 0.4]) + sigma * rng.normal(size=8)
    like = bayes.LikelihoodSpec(np.ones(8), np.ones(8), y, sigma, rng.uniform(0.5, 2, 8))
    # truncation at 12 sd is invisible in double precision
    prior = bayes.PriorSpec({f"p{j}": trunc_normal(m - 12 * s, m + 12 * s, m, s) for j, (m, s) in
                             enumerate(zip(mu0, sd0))})
    P = np.diag(1 / sd0**2) + A.T @ np.diag(like.weights / sigma**2) @ A
    cov = np.linalg.inv(P)
    mean = cov @ (mu0 / sd0**2 + A.T @ (like.weights / sigma**2 * y))
    chain = bayes.run_mcmc(prior, like, lambda m: np.atleast_2d(m) @ A.T, 32, 3000, seed=1)
    # walkers act as near-independent replicas for the standard errors
    d = chain.draws[chain.burn_in:]
    means = d.mean(axis=0)
    covs = np.array([np.cov(d[:, k].T) for k in range(d.shape[1])])
    z_mean = np.abs(means.mean(axis=0) - mean) / (means.std(axis=0, ddof=1) / math.sqrt(len(means)))
    z_cov = np.abs(covs.mean(axis=0) - cov) / (covs.std(axis=0, ddof=1) / math.sqrt(len(covs)))
    secs = time.perf_counter() - t0
    ok = z_mean.max() < N_SE and z_cov.max() < N_SE and secs < 60
    report(capsys, 10, "MCMC conjugate oracle", ok,
           f"max |z| mean {z_mean.max():.2f}, cov {z_cov.max():.2f}, {secs:.1f}s")
    assert z_mean.max() < N_SE and z_cov.max() < N_SE
    assert secs < 60


# ------------------------------------------------------------------ 11


def test_c11_surface_timing(capsys, heston_desk):
    net = heston_desk["net"]
    rng = np.random.default_rng(110)
    rows = np.column_stack([np.tile(HESTON_REF.as_array(), (100, 1)), np.exp(rng.uniform(-0.1, 0.28, 100)),
                            rng.uniform(1 / 365, 0.2, 100)])
    nn.forward_and_jacobian(net, rows)
    times = []
    for _ in range(20):
        t0 = time.perf_counter()
        nn.forward_and_jacobian(net, rows)
        times.append(time.perf_counter() - t0)
    t = float(np.median(times))
    # reported only: wall time depends on the host
    report(capsys, 11, "forward + Jacobian over 100 quotes", t < TIMING_BUDGET_S,
           f"median {t * 1e3:.2f} ms (budget {TIMING_BUDGET_S * 1e3:.0f} ms, not hard-failed)")


# ------------------------------------------------------------------ 12


def run_pipeline(d, quotes):
    mu_h = json.dumps(HESTON_REF.as_array().tolist())
    mu_r = json.dumps(RB_REF.as_array().tolist())
    cmds = [
        ["gen-data", "--model", "heston", "--n", "300", "--seed", "4", "--out", f"{d}/hdata"],
        ["gen-data", "--model", "rbergomi", "--n", "48", "--seed", "4", "--group", "8", "--paths", "400",
         "--steps", "16", "--kde", quotes, "--out", f"{d}/rdata"],
        ["train", "--data", f"{d}/hdata", "--widths", "8,8", "--max-epochs", "4", "--seed", "4",
         "--history", f"{d}/hist.csv", "--out", f"{d}/net.dvnn"],
        ["eval-surface", "--net", f"{d}/net.dvnn", "--params", mu_h, "--out", f"{d}/surface.csv"],
        ["calibrate", "--net", f"{d}/net.dvnn", "--quotes", quotes, "--mu0", mu_h, "--trace", f"{d}/trace.csv",
         "--out", f"{d}/cal.json"],
        ["bayes", "--net", f"{d}/net.dvnn", "--quotes", quotes, "--walkers", "10", "--steps", "60", "--seed", "4",
         "--summary", f"{d}/post", "--out", f"{d}/chain.csv"],
        ["skew", "--net", f"{d}/net.dvnn", "--params", mu_h, "--out", f"{d}/skew_net.csv"],
        ["skew", "--model", "rbergomi", "--params", mu_r, "--paths", "400", "--steps", "16",
         "--maturities", "0.05,0.1", "--seed", "4", "--out", f"{d}/skew_rb.csv"],
        ["re-report", "--net", f"{d}/net.dvnn", "--params", mu_h, "--m-grid=-0.1:0.28:5", "--t-grid",
         "0.02:0.2:4", "--out", f"{d}/re.csv"],
        ["hyperopt", "--data", f"{d}/hdata", "--archs", "8;8,8", "--budget", "2", "--max-epochs", "2",
         "--seed", "4", "--out", f"{d}/hyper.csv"],
    ]
    codes = [(c[0], cli.main(c)) for c in cmds]
    files = {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}
    return codes, files


def test_c12_cli_determinism(capsys, tmp_path):
    m, T = np.meshgrid(np.linspace(-0.1, 0.25, 4), np.linspace(0.02, 0.2, 3))
    M, T = np.exp(m.ravel()), T.ravel()
    iv = heston_ivs(HESTON_REF, M, T)
    quotes = tmp_path / "q.csv"
    write_quotes(quotes, M, T, iv - 0.001, iv + 0.001)
    d = tmp_path / "run"
    runs = []
    for _ in range(2):
        if d.exists():
            shutil.rmtree(d)
        d.mkdir()
        runs.append(run_pipeline(d, str(quotes)))
    (codes_a, files_a), (codes_b, files_b) = runs
    differing = sorted(k for k in files_a.keys() | files_b.keys() if files_a.get(k) != files_b.get(k))
    # exit 4 (LM hit its cap) still writes outputs, so it counts as a completed run here
    completed = all(c in (0, 4) for _, c in codes_a)
    ok = completed and codes_a == codes_b and not differing
    report(capsys, 12, "CLI determinism", ok,
           f"{len(codes_a)} invocations over {len({k for k, _ in codes_a})} subcommands, "
           f"{len(files_a)} files compared, differing: {differing or 'none'}")
    assert completed, codes_a
    assert codes_a == codes_b
    assert not differing
