"""Heston model: characteristic-function pricer and Monte Carlo oracle.

The Fourier pricer integrates the damped call transform with a damping
exponent chosen by minimizing the integrand at the origin (optimal damping),
pricing the out-of-the-money leg directly: calls for ``M >= 1`` and puts
(damping below -1) for ``M < 1``.  This keeps relative accuracy for prices
many orders of magnitude below one, which the implied-vol labels need.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

from .bs import OptionCoord, implied_vol_log_otm
from .errors import InputError, NoConvergence, QuadratureNotConverged

QUAD_EPSREL = 1e-10
QUAD_LIMIT = 400


@dataclass(frozen=True)
class HestonParams:
    """Heston parameters ``(lambda, v_bar, v0, rho, eta)``.

    ``lam`` is the mean-reversion speed, ``v_bar`` the long-run variance,
    ``v0`` the spot variance, ``rho`` the spot/vol correlation and ``eta``
    the vol-of-vol.  The Feller condition is reported but never enforced.
    """

    lam: float
    v_bar: float
    v0: float
    rho: float
    eta: float

    def __post_init__(self):
        vals = (self.lam, self.v_bar, self.v0, self.rho, self.eta)
        if not all(math.isfinite(v) for v in vals):
            raise InputError(f"non-finite Heston parameters {vals}")
        if self.lam <= 0 or self.v_bar <= 0 or self.v0 <= 0 or self.eta <= 0:
            raise InputError(f"lam, v_bar, v0, eta must be positive: {vals}")
        if not -1 < self.rho < 1:
            raise InputError(f"rho must lie in (-1, 1), got {self.rho}")

    def feller_satisfied(self) -> bool:
        return 2 * self.lam * self.v_bar > self.eta**2

    def as_array(self) -> np.ndarray:
        return np.array([self.lam, self.v_bar, self.v0, self.rho, self.eta])


#: Reference parameters (Gatheral 2011).
REFERENCE = HestonParams(lam=1.3253, v_bar=0.0354, v0=0.0174, rho=-0.7165, eta=0.3877)
PARAM_NAMES = ("lam", "v_bar", "v0", "rho", "eta")


def _log1p_over(z):
    """log(1 + z) / z for complex z, accurate near zero."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < 1e-5
    zs = np.where(small, 0.0, z)
    with np.errstate(divide="ignore", invalid="ignore"):
        big = np.log1p(zs) / zs
    series = 1 - z / 2 + z * z / 3
    return np.where(small, series, big)


def _log_cf(lam, v_bar, v0, rho, eta, u, T):
    """Broadcasting core of :func:`heston_log_cf`."""
    u = np.asarray(u, dtype=complex)
    a = u * u + 1j * u
    xi = lam - rho * eta * 1j * u
    d = np.sqrt(xi * xi + eta * eta * a)
    d = np.where(d.real < 0, -d, d)
    s = xi + d
    # (xi - d) / eta^2 and g / eta^2 without cancellation
    A = -a / s
    g_over = -a / (s * s)
    g = eta * eta * g_over
    one_m_e = -np.expm1(-d * T)
    e = 1 - one_m_e
    D = A * one_m_e / (1 - g * e)
    z_over = g_over * one_m_e / (1 - g)
    log_term = _log1p_over(eta * eta * z_over) * z_over
    return lam * v_bar * (A * T - 2 * log_term) + D * v0


def heston_log_cf(params: HestonParams, u, T: float):
    """Log of ``E[exp(i u ln S_T)]`` in the "little trap" form.

    Accepts complex ``u`` (scalar or array).  All divisions by ``eta**2`` are
    carried out analytically so the vanishing vol-of-vol limit is exact.
    """
    if T <= 0:
        raise InputError(f"maturity must be positive, got {T}")
    out = _log_cf(params.lam, params.v_bar, params.v0, params.rho, params.eta, u, T)
    return out[()] if out.ndim == 0 else out


def heston_cf(params: HestonParams, u, T: float):
    """Characteristic function of ``ln S_T`` (spot 1, zero rate)."""
    return np.exp(heston_log_cf(params, u, T))


def explosion_time(params: HestonParams, omega: float) -> float:
    """Time at which ``E[S_t^omega]`` becomes infinite (inf if never)."""
    lam, rho, eta = params.lam, params.rho, params.eta
    k = rho * eta * omega - lam
    D = k * k - eta * eta * (omega * omega - omega)
    if D >= 0:
        if k < 0:
            return math.inf
        sd = math.sqrt(D)
        if sd < 1e-12 * max(k, 1e-300):
            return 2.0 / k
        if k - sd <= 0:
            return math.inf
        return math.log((k + sd) / (k - sd)) / sd
    sd = math.sqrt(-D)
    return 2.0 * math.atan2(sd, k) / sd


def moment_strip(params: HestonParams, T: float, upper: bool, cap: float = 1e4) -> float:
    """Largest (``upper``) or smallest finite moment order at maturity ``T``."""
    start = 1.0 if upper else 0.0
    step = 1.0 if upper else -1.0
    a, b = start, start + step
    while explosion_time(params, b) > T:
        a, b = b, start + 2 * (b - start)
        if abs(b) > cap:
            return start + math.copysign(cap, step)
    for _ in range(80):
        mid = 0.5 * (a + b)
        if explosion_time(params, mid) > T:
            a = mid
        else:
            b = mid
    return a


def _damping(params: HestonParams, k: float, T: float, call: bool):
    """Optimal damping exponent for log-strike ``k``."""

    def psi0(alpha):
        with np.errstate(all="ignore"):
            lphi = heston_log_cf(params, -(alpha + 1) * 1j, T)
        val = -alpha * k + lphi.real - math.log(alpha * alpha + alpha)
        return val if math.isfinite(val) and abs(lphi.imag) < 1e-6 else math.inf

    if call:
        hi = moment_strip(params, T, upper=True) - 1.0
        lo, hi = 1e-6 * hi, hi * (1 - 1e-6)
    else:
        lo = moment_strip(params, T, upper=False) - 1.0
        lo, hi = -1.0 + (lo + 1.0) * (1 - 1e-6), -1.0 + (lo + 1.0) * 1e-6
    res = optimize.minimize_scalar(psi0, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-6 * (abs(lo) + abs(hi))})
    alpha = float(res.x)
    if not math.isfinite(psi0(alpha)):
        alpha = 0.5 * (lo + hi) if call else -1.0 + 0.5 * (lo + 1.0)
    return alpha


def heston_log_otm_price_quad(params: HestonParams, coord: OptionCoord) -> float:
    """Scalar adaptive-quadrature (QUADPACK) route to :func:`heston_log_otm_price`.

    Slower than the batched panel rule; kept as an independent check of it.
    """
    k = coord.m
    T = coord.T
    call = k >= 0
    alpha = _damping(params, k, T, call)
    p = alpha + 1.0

    def logf(u):
        with np.errstate(all="ignore"):
            return (-1j * u * k + heston_log_cf(params, u - p * 1j, T)
                    - np.log(alpha * alpha + alpha - u * u + 1j * (2 * alpha + 1) * u))

    l0 = float(logf(0.0).real)
    # a natural length scale for the integrand so quad sees O(1) widths
    w = max(params.v0 * T + params.v_bar * T, 1e-12)
    scale = 1.0 / math.sqrt(w)

    def integrand(t):
        return float(np.exp(logf(t * scale) - l0).real)

    with np.errstate(all="ignore"):
        val, err, *rest = integrate.quad(integrand, 0.0, np.inf, epsabs=1e-13, epsrel=QUAD_EPSREL,
                                         limit=QUAD_LIMIT, full_output=1)
    if len(rest) > 1 or not math.isfinite(val) or val <= 0:
        # refine with a wider limit before giving up
        with np.errstate(all="ignore"):
            val, err, *rest = integrate.quad(integrand, 0.0, np.inf, epsabs=1e-13, epsrel=1e-8,
                                             limit=4 * QUAD_LIMIT, full_output=1)
        if not math.isfinite(val) or val <= 0 or err > 1e-6 * abs(val):
            raise QuadratureNotConverged(
                f"Heston quadrature failed at M={coord.M}, T={T}: value {val}, error {err}")
    return -alpha * k + l0 + math.log(val * scale / math.pi)


def _explosion_time_v(lam, rho, eta, omega):
    k = rho * eta * omega - lam
    D = k * k - eta * eta * (omega * omega - omega)
    sdp = np.sqrt(np.maximum(D, 0.0))
    sdn = np.sqrt(np.maximum(-D, 0.0))
    with np.errstate(all="ignore"):
        t_pos = np.where(k - sdp > 0, np.log1p(2 * sdp / (k - sdp)) / sdp, np.inf)
        t_pos = np.where(sdp < 1e-12 * np.abs(k), 2.0 / k, t_pos)
        t_pos = np.where(k < 0, np.inf, t_pos)
        t_neg = 2.0 * np.arctan2(sdn, k) / sdn
    return np.where(D >= 0, t_pos, t_neg)


def _strip_v(lam, rho, eta, T, upper, cap=1e4):
    start = 1.0 if upper else 0.0
    step = 1.0 if upper else -1.0
    a = np.full(lam.shape, start)
    b = a + step
    for _ in range(int(math.log2(cap)) + 1):
        grow = _explosion_time_v(lam, rho, eta, b) > T
        if not grow.any():
            break
        a = np.where(grow, b, a)
        b = np.where(grow, start + 2 * (b - start), b)
    capped = _explosion_time_v(lam, rho, eta, b) > T
    for _ in range(60):
        mid = 0.5 * (a + b)
        ok = _explosion_time_v(lam, rho, eta, mid) > T
        a = np.where(ok, mid, a)
        b = np.where(ok, b, mid)
    return np.where(capped, b, a)


def _damping_v(lam, v_bar, v0, rho, eta, k, T, call):
    """Vectorized golden-section search for the optimal damping exponent."""

    def psi0(alpha):
        with np.errstate(all="ignore"):
            lphi = _log_cf(lam, v_bar, v0, rho, eta, -(alpha + 1) * 1j, T)
            val = -alpha * k + lphi.real - np.log(alpha * alpha + alpha)
        good = np.isfinite(val) & (np.abs(lphi.imag) < 1e-6)
        return np.where(good, val, np.inf)

    up = _strip_v(lam, rho, eta, T, upper=True) - 1.0
    dn = _strip_v(lam, rho, eta, T, upper=False) - 1.0
    lo = np.where(call, 1e-6 * up, -1.0 + (dn + 1.0) * (1 - 1e-6))
    hi = np.where(call, up * (1 - 1e-6), -1.0 + (dn + 1.0) * 1e-6)
    g = (math.sqrt(5) - 1) / 2
    c = hi - g * (hi - lo)
    d = lo + g * (hi - lo)
    fc, fd = psi0(c), psi0(d)
    for _ in range(60):
        left = fc < fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        nc = np.where(left, hi - g * (hi - lo), d)
        nd = np.where(left, c, lo + g * (hi - lo))
        fx = psi0(np.where(left, nc, nd))
        fc, fd = np.where(left, fx, fd), np.where(left, fc, fx)
        c, d = nc, nd
    alpha = 0.5 * (lo + hi)
    bad = ~np.isfinite(psi0(alpha))
    return np.where(bad, np.where(call, 0.5 * up, -1.0 + 0.5 * (dn + 1.0)), alpha)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


def heston_log_otm_prices(lam, v_bar, v0, rho, eta, M, T, chunk=256):
    """Batched log prices of the out-of-the-money legs.

    All arguments broadcast to a common 1-d shape.  Each row is integrated
    with a composite 16-point Gauss-Legendre rule on a truncated interval,
    doubling the number of panels until successive estimates agree to a
    relative 1e-10; rows that do not settle fall back to adaptive QUADPACK.
    Failures are NaN.
    """
    arrs = np.broadcast_arrays(*(np.atleast_1d(np.asarray(a, dtype=float))
                                 for a in (lam, v_bar, v0, rho, eta, M, T)))
    lam, v_bar, v0, rho, eta, M, T = (a.ravel() for a in arrs)
    out = np.full(lam.shape, np.nan)
    for s0 in range(0, lam.size, chunk):
        sl = slice(s0, s0 + chunk)
        out[sl] = _log_otm_chunk(lam[sl], v_bar[sl], v0[sl], rho[sl], eta[sl], M[sl], T[sl])
    return out


def _log_otm_chunk(lam, v_bar, v0, rho, eta, M, T):
    k = np.log(M)
    call = k >= 0
    alpha = _damping_v(lam, v_bar, v0, rho, eta, k, T, call)
    p = alpha + 1.0

    def logf(u, rows=slice(None)):
        kk, aa, pp = k[rows, None], alpha[rows, None], p[rows, None]
        with np.errstate(all="ignore"):
            return (-1j * u * kk
                    + _log_cf(lam[rows, None], v_bar[rows, None], v0[rows, None], rho[rows, None],
                              eta[rows, None], u - pp * 1j, T[rows, None])
                    - np.log(aa * aa + aa - u * u + 1j * (2 * aa + 1) * u))

    l0 = logf(np.zeros((1, 1))).real[:, 0]
    w = np.maximum((v0 + v_bar) * T, 1e-12)
    probe = (1.0 / np.sqrt(w))[:, None] * 2.0 ** (np.arange(-4, 61) / 2.0)[None, :]
    decay = logf(probe).real - l0[:, None]
    below = np.nan_to_num(decay, nan=0.0) < -42.0
    first = np.where(below.any(axis=1), below.argmax(axis=1), probe.shape[1] - 1)
    U = probe[np.arange(len(k)), first]

    # geometric panels from the integrand's natural width out to the cut-off,
    # refined by bisection
    n_geo = first + 1
    result = np.full(len(k), np.nan)
    todo = np.arange(len(k))
    prev = None
    for level in range(6):
        n_sub = 2**level
        est = np.empty(todo.size)
        for j, i in enumerate(todo):
            base = np.concatenate(([0.0], probe[i, : n_geo[i]]))
            frac = np.arange(n_sub) / n_sub
            fine = np.append((base[:-1, None] + np.diff(base)[:, None] * frac).ravel(), base[-1])
            est[j] = _panel_sum(logf, i, fine, l0[i])
        if prev is not None:
            ok = np.isfinite(est) & (np.abs(est - prev) <= 1e-10 * np.abs(est)) & (est > 0)
            result[todo[ok]] = est[ok]
            todo, est = todo[~ok], est[~ok]
            if todo.size == 0:
                break
        prev = est
    logp = -alpha * k + l0 + np.log(result / math.pi)
    for i in todo:
        try:
            params = HestonParams(lam[i], v_bar[i], v0[i], rho[i], eta[i])
            logp[i] = heston_log_otm_price_quad(params, OptionCoord(M[i], T[i]))
        except (QuadratureNotConverged, InputError, ValueError, OverflowError):
            logp[i] = np.nan
    return logp


def _panel_sum(logf, row, edges, l0):
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    u = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
    w = (half[:, None] * _GL_W[None, :]).ravel()
    with np.errstate(all="ignore"):
        vals = np.exp(logf(u[None, :], [row])[0] - l0).real
    return float(vals @ w)


def heston_log_otm_price(params: HestonParams, coord: OptionCoord) -> float:
    """Log price of the out-of-the-money leg (call if ``M >= 1``, else put)."""
    out = heston_log_otm_prices(*params.as_array(), coord.M, coord.T)[0]
    if not math.isfinite(out):
        raise QuadratureNotConverged(f"Heston quadrature failed at M={coord.M}, T={coord.T}")
    return float(out)


def heston_price(params: HestonParams, coord: OptionCoord) -> float:
    """European call price under Heston by Fourier quadrature."""
    otm = math.exp(heston_log_otm_price(params, coord))
    if coord.M >= 1:
        return min(otm, 1.0)
    return (1.0 - coord.M) + min(otm, coord.M)


def heston_iv(params: HestonParams, coord: OptionCoord) -> float:
    """Implied volatility of the Heston call, inverted from the OTM leg."""
    iv = float(implied_vol_log_otm(coord.M, coord.T, heston_log_otm_price(params, coord)))
    if not math.isfinite(iv):
        raise NoConvergence(f"implied vol inversion failed at M={coord.M}, T={coord.T}")
    return iv


def heston_ivs(params, M, T):
    """Vectorized implied vols; ``params`` rows may be a ``HestonParams`` or an ``(n, 5)`` array.

    Failures are NaN.
    """
    if isinstance(params, HestonParams):
        p = params.as_array()[None, :]
    else:
        p = np.atleast_2d(np.asarray(params, dtype=float))
    M, T = np.broadcast_arrays(np.asarray(M, dtype=float), np.asarray(T, dtype=float))
    p = np.broadcast_to(p, M.shape + (5,)) if p.shape[0] == 1 else p.reshape(M.shape + (5,))
    lp = heston_log_otm_prices(*(p[..., i].ravel() for i in range(5)), M.ravel(), T.ravel())
    return implied_vol_log_otm(M.ravel(), T.ravel(), lp).reshape(M.shape)


def effective_vol(params: HestonParams, T: float) -> float:
    """Volatility of the deterministic-variance limit ``eta -> 0``."""
    lt = params.lam * T
    return math.sqrt(params.v_bar + (params.v0 - params.v_bar) * (-math.expm1(-lt)) / lt)


def simulate_terminal_log_spot(params: HestonParams, T: float, n_paths: int, n_steps: int,
                               seed: int, block_size: int = 20000, antithetic: bool = False):
    """Full-truncation Euler paths of ``ln S_T``; also returns terminal variance.

    Paths are generated in blocks with RNG substreams keyed by ``(seed, block)``
    so the output does not depend on how blocks are scheduled.
    """
    if n_paths < 1000:
        raise InputError("n_paths must be at least 1000")
    if n_steps < 1:
        raise InputError("n_steps must be positive")
    dt = T / n_steps
    sq = math.sqrt(dt)
    rho_c = math.sqrt(1 - params.rho**2)
    out_x = np.empty(n_paths)
    out_v = np.empty(n_paths)
    for b, start in enumerate(range(0, n_paths, block_size)):
        n = min(block_size, n_paths - start)
        rng = np.random.default_rng([seed, b])
        x = np.zeros(n)
        v = np.full(n, params.v0)
        for _ in range(n_steps):
            z = rng.standard_normal((2, n))
            if antithetic:
                z[:, 1::2] = -z[:, 0::2][:, : n // 2]
            vp = np.maximum(v, 0.0)
            sv = np.sqrt(vp) * sq
            x += -0.5 * vp * dt + sv * (params.rho * z[0] + rho_c * z[1])
            v += params.lam * (params.v_bar - vp) * dt + params.eta * sv * z[0]
        out_x[start:start + n] = x
        out_v[start:start + n] = v
    return out_x, out_v


def heston_mc_prices(params: HestonParams, T: float, moneyness, n_paths: int, n_steps: int, seed: int):
    """MC call prices and standard errors for several strikes on shared paths."""
    x, _ = simulate_terminal_log_spot(params, T, n_paths, n_steps, seed)
    s = np.exp(x)
    M = np.atleast_1d(np.asarray(moneyness, dtype=float))
    pay = np.maximum(s[:, None] - M[None, :], 0.0)
    return pay.mean(axis=0), pay.std(axis=0, ddof=1) / math.sqrt(len(s))


def heston_mc_price(params: HestonParams, coord: OptionCoord, n_paths: int, n_steps: int, seed: int):
    """Monte Carlo call price ``(price, std_error)`` by full-truncation Euler."""
    p, se = heston_mc_prices(params, coord.T, [coord.M], n_paths, n_steps, seed)
    return float(p[0]), float(se[0])
