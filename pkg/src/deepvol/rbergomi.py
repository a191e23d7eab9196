"""Rough Bergomi Monte Carlo with a flat forward variance curve.

Paths are simulated on the unit interval and mapped to maturity ``T`` by
self-similarity (``W_{Tt} ~ sqrt(T) W_t`` and ``W^H_{Tt} ~ T^H W^H_t``), so one
Cholesky factor per ``(H, n)`` serves every maturity.
"""
from __future__ import annotations

import enum
import functools
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, linalg, signal, special

from .bs import OptionCoord, implied_vol_log_otm, log_call_put
from .errors import CovarianceNotPD, InputError, PriceOutOfBounds

MAX_EXACT_STEPS = 2048
BLOCK_PATHS = 4096


@dataclass(frozen=True)
class RBergomiParams:
    H: float
    eta: float
    rho: float
    v0: float

    def __post_init__(self):
        vals = (self.H, self.eta, self.rho, self.v0)
        if not all(math.isfinite(v) for v in vals):
            raise InputError(f"non-finite rough Bergomi parameters {vals}")
        if not 0 < self.H < 1:
            raise InputError(f"H must lie in (0, 1), got {self.H}")
        if self.eta <= 0 or self.v0 <= 0:
            raise InputError(f"eta and v0 must be positive, got {self.eta}, {self.v0}")
        if not -1 < self.rho < 1:
            raise InputError(f"rho must lie in (-1, 1), got {self.rho}")

    def as_array(self) -> np.ndarray:
        return np.array([self.H, self.eta, self.rho, self.v0])


#: Reference parameters (Bayer, Friz, Gatheral 2016).
REFERENCE = RBergomiParams(H=0.07, eta=1.9, rho=-0.9, v0=0.01)
PARAM_NAMES = ("H", "eta", "rho", "v0")


class Scheme(str, enum.Enum):
    EXACT = "exact_cholesky"
    HYBRID = "hybrid"


@dataclass(frozen=True)
class MCConfig:
    """Monte Carlo settings.

    ``n_steps`` fixes the number of grid points regardless of maturity; when
    ``None`` the grid has ``ceil(T * steps_per_year)`` points.
    """

    n_paths: int = 40_000
    steps_per_year: int = 500
    scheme: Scheme = Scheme.EXACT
    antithetic: bool = True
    conditional_mc: bool = True
    seed: int = 0
    n_steps: int | None = None

    def __post_init__(self):
        if self.n_paths < 2:
            raise InputError("n_paths must be at least 2")
        if self.steps_per_year < 4:
            raise InputError("steps_per_year must be at least 4")
        if self.antithetic and self.n_paths % 2:
            raise InputError("antithetic sampling needs an even number of paths")
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    def grid_size(self, T: float) -> int:
        n = self.n_steps if self.n_steps is not None else max(1, math.ceil(T * self.steps_per_year - 1e-9))
        if self.scheme is Scheme.EXACT and n > MAX_EXACT_STEPS:
            raise InputError(f"exact scheme limited to {MAX_EXACT_STEPS} steps, grid needs {n}")
        return n


def rl_fbm_cov(H: float, s: float, t: float) -> float:
    """``Cov(W^H_s, W^H_t)`` for the Riemann-Liouville fBM, by adaptive quadrature.

    The kernel ``(s - u)^(H - 1/2)`` is handed to QUADPACK as an algebraic
    end-point weight, so the integrable singularity at ``u = s`` is exact.
    """
    s, t = min(s, t), max(s, t)
    if s < 0:
        raise InputError("times must be nonnegative")
    if s == 0:
        return 0.0
    if s == t:
        return t ** (2 * H)
    a = H - 0.5
    if t - s > 0.1 * s:
        val, _ = integrate.quad(lambda u: (t - u) ** a, 0.0, s, weight="alg", wvar=(0.0, a),
                                epsabs=0.0, epsrel=1e-12, limit=200)
        return 2 * H * val
    # (t - u)^a is nearly singular too: substitute v = s - u and split at the gap
    gap = t - s

    def f(v):
        return (gap + v) ** a

    near, _ = integrate.quad(f, 0.0, min(gap, s), weight="alg", wvar=(a, 0.0),
                             epsabs=0.0, epsrel=1e-12, limit=200)
    far = 0.0
    if s > gap:
        far, _ = integrate.quad(lambda v: (gap + v) ** a * v**a, gap, s, epsabs=0.0, epsrel=1e-12, limit=200)
    return 2 * H * (near + far)


def rl_fbm_cov_matrix(H: float, s, t):
    """Closed form of :func:`rl_fbm_cov` via the Gauss hypergeometric function."""
    s, t = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
    lo, hi = np.minimum(s, t), np.maximum(s, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = (2 * H / (H + 0.5) * lo ** (H + 0.5) * hi ** (H - 0.5)
               * special.hyp2f1(1.0, 0.5 - H, 1.5 + H, lo / hi))
    val = np.where(lo == hi, hi ** (2 * H), val)
    return np.where(lo > 0, val, 0.0)


def cross_cov(H: float, s, t):
    """``Cov(W^H_t, W_s)``."""
    s, t = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
    out = math.sqrt(2 * H) / (H + 0.5) * (t ** (H + 0.5) - (t - np.minimum(s, t)) ** (H + 0.5))
    return out[()] if out.ndim == 0 else out


def joint_covariance(H: float, times) -> np.ndarray:
    """Covariance of ``(W_{t_1..t_n}, W^H_{t_1..t_n})``."""
    t = np.asarray(times, dtype=float)
    S, Tm = np.meshgrid(t, t, indexing="ij")
    ww = np.minimum(S, Tm)
    # block [i, j] = Cov(W_{t_i}, W^H_{t_j})
    wh = cross_cov(H, S, Tm)
    hh = rl_fbm_cov_matrix(H, S, Tm)
    return np.block([[ww, wh], [wh.T, hh]])


@functools.lru_cache(maxsize=64)
def _unit_cholesky(H: float, n: int) -> np.ndarray:
    cov = joint_covariance(H, np.arange(1, n + 1) / n)
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        pass
    warnings.warn(f"joint covariance not numerically PD for H={H}, n={n}; adding 1e-12 jitter")
    try:
        return linalg.cholesky(cov + 1e-12 * np.eye(len(cov)), lower=True)
    except linalg.LinAlgError as exc:
        raise CovarianceNotPD(f"covariance for H={H}, n={n} is not positive definite") from exc


@functools.lru_cache(maxsize=64)
def _hybrid_weights(H: float, n: int):
    a = H - 0.5
    dt = 1.0 / n
    if a == 0:
        # Brownian kernel: g = 1, the near term is the increment itself
        r = math.sqrt(dt)
        return np.concatenate(([0.0, 0.0], np.ones(n - 1))), np.array([[r, 0.0], [r, 0.0]])
    k = np.arange(2, n + 1, dtype=float)
    b = ((k ** (a + 1) - (k - 1) ** (a + 1)) / (a + 1)) ** (1 / a)
    kernel = np.concatenate(([0.0, 0.0], (b * dt) ** a))
    cov = np.array([[dt, dt ** (a + 1) / (a + 1)],
                    [dt ** (a + 1) / (a + 1), dt ** (2 * a + 1) / (2 * a + 1)]])
    return kernel, np.linalg.cholesky(cov)


def _unit_block(H: float, n: int, n_paths: int, scheme: Scheme, rng, antithetic: bool):
    """``(W, W^H)`` on the grid ``i/n``, ``i = 1..n``; each of shape ``(n_paths, n)``."""
    half = n_paths // 2 if antithetic else n_paths
    if scheme is Scheme.EXACT:
        L = _unit_cholesky(H, n)
        z = rng.standard_normal((half, 2 * n))
        if antithetic:
            z = np.concatenate([z, -z])
        x = z @ L.T
        return x[:, :n], x[:, n:]
    kernel, L = _hybrid_weights(H, n)
    z = rng.standard_normal((half, n, 2))
    if antithetic:
        z = np.concatenate([z, -z])
    pair = z @ L.T
    dw, near = pair[..., 0], pair[..., 1]
    # Riemann-sum part: sum_{k>=2} g(b_k dt) dW_{i-k+1}, a causal convolution
    far = signal.fftconvolve(dw, kernel[None, 1:], axes=1)[:, :n]
    wh = math.sqrt(2 * H) * (near + far)
    return np.cumsum(dw, axis=1), wh


def _paths_blocks(params: RBergomiParams, n: int, cfg: MCConfig):
    """Yield unit-interval ``(W, W^H)`` blocks keyed by ``(seed, block)``."""
    block = BLOCK_PATHS - (BLOCK_PATHS % 2)
    for b, start in enumerate(range(0, cfg.n_paths, block)):
        size = min(block, cfg.n_paths - start)
        rng = np.random.default_rng([cfg.seed, b])
        yield _unit_block(params.H, n, size, cfg.scheme, rng, cfg.antithetic and size % 2 == 0)


def simulate_paths(params: RBergomiParams, T: float, cfg: MCConfig):
    """Full path ensemble on ``[0, T]``.

    Returns a dict with ``t`` (grid including 0), ``S``, ``v``, ``W`` and ``WH``,
    each of shape ``(n_paths, n + 1)`` except ``t``.
    """
    n = cfg.grid_size(T)
    t = np.arange(n + 1) / n * T
    dt = T / n
    out = {k: [] for k in ("S", "v", "W", "WH")}
    rho_c = math.sqrt(1 - params.rho**2)
    for b, (W, WH) in enumerate(_paths_blocks(params, n, cfg)):
        rng_perp = np.random.default_rng([cfg.seed, b, 1])
        Wt = np.concatenate([np.zeros((W.shape[0], 1)), math.sqrt(T) * W], axis=1)
        WHt = np.concatenate([np.zeros((W.shape[0], 1)), T**params.H * WH], axis=1)
        v = params.v0 * np.exp(params.eta * WHt - 0.5 * params.eta**2 * t[None, :] ** (2 * params.H))
        dperp = rng_perp.standard_normal((W.shape[0], n)) * math.sqrt(dt)
        dB = params.rho * np.diff(Wt, axis=1) + rho_c * dperp
        logS = np.cumsum(np.sqrt(v[:, :-1]) * dB - 0.5 * v[:, :-1] * dt, axis=1)
        out["S"].append(np.exp(np.concatenate([np.zeros((W.shape[0], 1)), logS], axis=1)))
        out["v"].append(v)
        out["W"].append(Wt)
        out["WH"].append(WHt)
    res = {k: np.concatenate(v) for k, v in out.items()}
    res["t"] = t
    return res


def _log_pair_average(lv, antithetic: bool):
    """Collapse antithetic pairs (first and second half of a block) in log space."""
    if not antithetic:
        return lv
    k = lv.shape[0] // 2
    return np.logaddexp(lv[:k], lv[k:2 * k]) - math.log(2.0)


def _stats_from_unit(params: RBergomiParams, T: float, dW, WH_left):
    """``(I_w, I_v)`` on ``[0, T]`` from unit-grid increments.

    ``I_w = sum sqrt(v_i) dW_i`` and ``I_v = sum v_i dt`` with left-point
    variance; ``WH_left`` holds ``W^H`` at the left end of each step.  The
    variance path depends on ``T`` only through ``eta T^H``.
    """
    n = dW.shape[1]
    c = params.eta * T**params.H
    drift = 0.5 * math.log(params.v0) - 0.25 * c * c * (np.arange(n) / n) ** (2 * params.H)
    sv = WH_left * (0.5 * c)
    sv += drift
    np.exp(sv, out=sv)
    I_w = math.sqrt(T) * np.einsum("ij,ij->i", sv, dW)
    I_v = np.einsum("ij,ij->i", sv, sv) * (T / n)
    return I_w, I_v


def _log_otm_samples(params: RBergomiParams, M, T, cfg: MCConfig):
    """Per-sample log OTM values for row pairs ``(M_i, T_i)``.

    One unit-interval path set serves every row.  Antithetic pairs are averaged
    so rows of the result are independent.  Shape ``(n_samples, n_rows)``;
    ``-inf`` marks zero payoffs of the plain estimator.
    """
    M = np.atleast_1d(np.asarray(M, dtype=float))
    T = np.broadcast_to(np.asarray(T, dtype=float), M.shape)
    if np.any(M <= 0) or np.any(T <= 0) or not (np.all(np.isfinite(M)) and np.all(np.isfinite(T))):
        raise InputError("moneyness and maturity must be positive and finite")
    n = cfg.grid_size(float(T.max()))
    k_all = np.log(M)
    call_side = k_all >= 0
    T_unique, T_idx = np.unique(T, return_inverse=True)
    rho, rho_c = params.rho, math.sqrt(1 - params.rho**2)
    out = []
    for b, (W, WH) in enumerate(_paths_blocks(params, n, cfg)):
        anti = cfg.antithetic and W.shape[0] % 2 == 0
        lv = np.empty((W.shape[0], M.size))
        if not cfg.conditional_mc:
            half = W.shape[0] // 2 if anti else W.shape[0]
            z = np.random.default_rng([cfg.seed, b, 1]).standard_normal(half)
            if anti:
                z = np.concatenate([z, -z])
        dW = np.diff(W, axis=1, prepend=0.0)
        WH_left = np.concatenate([np.zeros((WH.shape[0], 1)), WH[:, :-1]], axis=1)
        for j, Tj in enumerate(T_unique):
            cols = np.flatnonzero(T_idx == j)
            I_w, I_v = _stats_from_unit(params, float(Tj), dW, WH_left)
            if cfg.conditional_mc:
                x = (rho * I_w - 0.5 * rho**2 * I_v)[:, None]
                s = np.sqrt(rho_c**2 * I_v)[:, None]
                lc, lp = log_call_put(k_all[None, cols] - x, s)
                lv[:, cols] = x + np.where(call_side[None, cols], lc, lp)
            else:
                logS = (rho * I_w + rho_c * np.sqrt(I_v) * z - 0.5 * I_v)[:, None]
                kk = k_all[None, cols]
                with np.errstate(divide="ignore", invalid="ignore"):
                    # log(S - K) = log S + log(1 - K/S) for S > K, etc.
                    lcall = np.where(logS > kk, logS + np.log(-np.expm1(kk - logS)), -np.inf)
                    lput = np.where(kk > logS, kk + np.log(-np.expm1(logS - kk)), -np.inf)
                lv[:, cols] = np.where(call_side[None, cols], lcall, lput)
        out.append(_log_pair_average(lv, anti))
    return np.concatenate(out)


def rbergomi_mc_log_otm(params: RBergomiParams, M, T, cfg: MCConfig):
    """Log OTM prices and relative standard errors for ``(M_i, T_i)`` rows.

    The put is priced for ``M < 1`` and the call otherwise.  Averaging in log
    space keeps far-wing prices meaningful below the float64 underflow.
    """
    lv = _log_otm_samples(params, M, T, cfg)
    n = lv.shape[0]
    top = lv.max(axis=0)
    top = np.where(np.isfinite(top), top, 0.0)
    scaled = np.exp(lv - top)
    mean = scaled.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_price = top + np.log(mean)
        rel_se = scaled.std(axis=0, ddof=1) / math.sqrt(n) / mean
    return log_price, rel_se


def rbergomi_mc_otm(params: RBergomiParams, T: float, moneyness, cfg: MCConfig):
    """OTM prices and standard errors for several strikes at one maturity."""
    lp, rel = rbergomi_mc_log_otm(params, moneyness, T, cfg)
    price = np.exp(lp)
    return price, rel * price


def rbergomi_mc_price(params: RBergomiParams, coord: OptionCoord, cfg: MCConfig):
    """Call price ``(price, std_error)``.

    The OTM leg is simulated; in-the-money calls add the intrinsic value
    (put-call parity), which leaves the standard error unchanged.
    """
    p, se = rbergomi_mc_otm(params, coord.T, [coord.M], cfg)
    return float(p[0]) + max(1.0 - coord.M, 0.0), float(se[0])


def rbergomi_surface_ivs(params: RBergomiParams, M, T, cfg: MCConfig):
    """Implied vols for arbitrary ``(M_i, T_i)`` rows from one path set.

    Failed inversions are NaN.
    """
    M = np.atleast_1d(np.asarray(M, dtype=float))
    T = np.broadcast_to(np.asarray(T, dtype=float), M.shape)
    lp, _ = rbergomi_mc_log_otm(params, M, T, cfg)
    return implied_vol_log_otm(M, T, lp)


def rbergomi_ivs(params: RBergomiParams, T: float, moneyness, cfg: MCConfig):
    """Implied vols for several strikes at one maturity (common random numbers)."""
    return rbergomi_surface_ivs(params, moneyness, T, cfg)


def rbergomi_iv(params: RBergomiParams, coord: OptionCoord, cfg: MCConfig) -> float:
    """Implied volatility of the MC price.

    Raises
    ------
    PriceOutOfBounds
        If the estimated OTM price is zero or outside the no-arbitrage band.
    """
    lp, _ = rbergomi_mc_log_otm(params, [coord.M], coord.T, cfg)
    iv = float(implied_vol_log_otm(coord.M, coord.T, lp[0]))
    if not math.isfinite(iv):
        raise PriceOutOfBounds(f"MC price at M={coord.M}, T={coord.T} cannot be inverted (log price {lp[0]})")
    return iv
