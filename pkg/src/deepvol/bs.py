"""Black-Scholes pricing and implied-volatility inversion.

Spot is normalized to 1 and the rate to 0, so a call is fully described by
its moneyness ``M = K/S0`` and maturity ``T``.  Prices of out-of-the-money
options are evaluated in log space through ``scipy.special.log_ndtr`` so that
tiny wing prices keep their relative accuracy; in-the-money calls are obtained
from the out-of-the-money put via put-call parity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr

from .errors import InputError, NoConvergence, PriceOutOfBounds

#: Prices of the out-of-the-money leg below this are treated as numerically zero.
MIN_PRICE = 1e-300
MAX_ITER = 100
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_S_MAX = 50.0


@dataclass(frozen=True)
class OptionCoord:
    """A (moneyness, maturity) point with spot normalized to 1."""

    M: float
    T: float
    m: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (math.isfinite(self.M) and math.isfinite(self.T)):
            raise InputError(f"non-finite option coordinate ({self.M}, {self.T})")
        if self.M <= 0 or self.T <= 0:
            raise InputError(f"moneyness and maturity must be positive, got ({self.M}, {self.T})")
        object.__setattr__(self, "m", math.log(self.M))

    @classmethod
    def from_log_moneyness(cls, m: float, T: float) -> "OptionCoord":
        return cls(math.exp(m), T)


@dataclass(frozen=True)
class IVQuote:
    """An implied-volatility observation with a liquidity weight.

    ``bid_iv``/``ask_iv`` are optional; when both are present ``iv`` must be
    their midpoint.  ``noise`` is the per-quote error scale used by the Bayesian
    likelihood (``None`` when unknown).
    """

    coord: OptionCoord
    iv: float
    weight: float = 1.0
    bid_iv: float | None = None
    ask_iv: float | None = None
    noise: float | None = None

    def __post_init__(self):
        if not (self.iv > 0 and math.isfinite(self.iv)):
            raise InputError(f"implied volatility must be positive, got {self.iv}")
        if not (self.weight >= 0 and math.isfinite(self.weight)):
            raise InputError(f"weight must be nonnegative, got {self.weight}")
        if (self.bid_iv is None) != (self.ask_iv is None):
            raise InputError("bid_iv and ask_iv must be given together")
        if self.bid_iv is not None:
            if not (0 < self.bid_iv <= self.ask_iv):
                raise InputError(f"need 0 < bid_iv <= ask_iv, got {self.bid_iv}, {self.ask_iv}")
            if abs(self.iv - 0.5 * (self.bid_iv + self.ask_iv)) > 1e-12:
                raise InputError("iv must be the bid/ask midpoint")


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InputError("non-finite input")


def _log_sub_exp(a, b):
    """log(exp(a) - exp(b)) for a >= b, elementwise.

    Rounding can leave ``b`` a hair above ``a`` when the difference is far
    below ``exp(a)``; those entries come out NaN without a warning.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        return a + np.log(-np.expm1(b - a))


def otm_log_price(x, s):
    """Log price of the out-of-the-money option.

    Parameters
    ----------
    x : array_like
        Log-moneyness ``ln M``.  For ``x >= 0`` the call is priced, otherwise the put.
    s : array_like
        Total volatility ``sigma * sqrt(T)``, positive.
    """
    x, s = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(s, dtype=float))
    d1 = -x / s + 0.5 * s
    d2 = d1 - s
    call = _log_sub_exp(log_ndtr(d1), x + log_ndtr(d2))
    put = _log_sub_exp(x + log_ndtr(-d2), log_ndtr(-d1))
    out = np.where(x >= 0, call, put)
    return out[()] if out.ndim == 0 else out


def log_call_put(k, s):
    """Log call and log put prices at log-moneyness ``k``, total vol ``s > 0``.

    Both legs keep full relative accuracy: the out-of-the-money one directly,
    the in-the-money one as intrinsic plus time value added in log space.
    """
    k, s = np.broadcast_arrays(np.asarray(k, dtype=float), np.asarray(s, dtype=float))
    otm = otm_log_price(k, s)
    with np.errstate(divide="ignore"):
        itm_call = np.logaddexp(np.log1p(-np.exp(np.minimum(k, 0.0))), otm)
        itm_put = np.logaddexp(np.maximum(k, 0.0) + np.log1p(-np.exp(-np.maximum(k, 0.0))), otm)
    call = np.where(k >= 0, otm, itm_call)
    put = np.where(k < 0, otm, itm_put)
    return call, put


def call_price(M, T, sigma):
    """Vectorized Black-Scholes call price, spot 1, zero rate."""
    M, T, sigma = (np.asarray(a, dtype=float) for a in (M, T, sigma))
    _check_finite(M, T, sigma)
    x = np.log(M)
    s = sigma * np.sqrt(T)
    with np.errstate(divide="ignore", invalid="ignore"):
        otm = np.exp(otm_log_price(x, np.where(s > 0, s, 1.0)))
    otm = np.where(s > 0, otm, 0.0)
    out = np.maximum(1.0 - M, 0.0) + otm
    return out[()] if out.ndim == 0 else out


def put_price(M, T, sigma):
    """Vectorized Black-Scholes put price via put-call parity."""
    M = np.asarray(M, dtype=float)
    return call_price(M, T, sigma) - (1.0 - M)


def vega(M, T, sigma):
    """Vectorized dC/dsigma = phi(d1) sqrt(T)."""
    M, T, sigma = (np.asarray(a, dtype=float) for a in (M, T, sigma))
    _check_finite(M, T, sigma)
    sqrt_t = np.sqrt(T)
    s = sigma * sqrt_t
    d1 = -np.log(M) / s + 0.5 * s
    out = np.exp(-0.5 * d1 * d1 - _LOG_SQRT_2PI) * sqrt_t
    return out[()] if out.ndim == 0 else out


def bs_price(coord: OptionCoord, sigma: float) -> float:
    """European call value for ``coord`` at volatility ``sigma``."""
    if not (math.isfinite(sigma) and sigma > 0):
        raise InputError(f"sigma must be positive and finite, got {sigma}")
    return float(call_price(coord.M, coord.T, sigma))


def bs_vega(coord: OptionCoord, sigma: float) -> float:
    if not (math.isfinite(sigma) and sigma > 0):
        raise InputError(f"sigma must be positive and finite, got {sigma}")
    return float(vega(coord.M, coord.T, sigma))


def _solve_total_vol(x, log_target):
    """Safeguarded Newton on ``otm_log_price(x, s) = log_target`` in ``s``.

    Returns ``(s, converged)``.  ``log_target`` must lie strictly below the
    log upper bound of the out-of-the-money leg.
    """
    n = x.size
    lo = np.zeros(n)
    hi = np.full(n, _S_MAX)
    s = np.maximum(np.sqrt(2.0 * np.abs(x)), np.exp(log_target) * math.sqrt(2 * math.pi))
    s = np.clip(s, 1e-8, _S_MAX / 2)
    done = np.zeros(n, dtype=bool)
    for _ in range(MAX_ITER):
        act = ~done
        if not act.any():
            break
        xa, sa = x[act], s[act]
        f = otm_log_price(xa, sa) - log_target[act]
        d1 = -xa / sa + 0.5 * sa
        # d ln(price) / ds = phi(d1) / price
        dlog = np.exp(-0.5 * d1 * d1 - _LOG_SQRT_2PI - otm_log_price(xa, sa))
        lo_a = np.where(f < 0, sa, lo[act])
        hi_a = np.where(f > 0, sa, hi[act])
        with np.errstate(divide="ignore", invalid="ignore"):
            step = f / dlog
        s_new = sa - step
        bad = ~np.isfinite(s_new) | (s_new <= lo_a) | (s_new >= hi_a)
        s_new = np.where(bad, 0.5 * (lo_a + hi_a), s_new)
        conv = (np.abs(s_new - sa) <= 4e-16 * sa) | (f == 0) | (hi_a - lo_a <= 4e-16 * hi_a)
        lo[act], hi[act], s[act] = lo_a, hi_a, s_new
        done[act] = conv
    return s, done


def implied_vol_array(M, T, price, otm=False):
    """Vectorized implied volatility; failures are reported as NaN.

    With ``otm=True`` the price is that of the out-of-the-money option (put for
    ``M < 1``, call otherwise), which avoids the loss of precision inherent in
    deep in-the-money call prices.
    """
    M, T, price = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (M, T, price)))
    shape = M.shape
    M, T, price = M.ravel(), T.ravel(), price.ravel()
    x = np.log(M)
    if otm:
        p = price.copy()
    else:
        p = price - np.maximum(1.0 - M, 0.0)
    upper = np.where(x >= 0, 1.0, M)
    ok = np.isfinite(p) & (p > MIN_PRICE) & (p < upper) & (T > 0)
    out = np.full(M.shape, np.nan)
    if ok.any():
        with np.errstate(divide="ignore"):
            log_p = np.log(p[ok])
        s, conv = _solve_total_vol(x[ok], log_p)
        sig = s / np.sqrt(T[ok])
        out[np.flatnonzero(ok)[conv]] = sig[conv]
    return out.reshape(shape)


def implied_vol_log_otm(M, T, log_price):
    """Implied volatility from the log of the out-of-the-money price.

    Used when the price itself is known accurately in log form (Fourier
    pricing), so far-wing values below ``MIN_PRICE`` remain invertible.
    Failures are NaN.
    """
    M, T, lp = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (M, T, log_price)))
    shape = M.shape
    M, T, lp = M.ravel(), T.ravel(), lp.ravel()
    x = np.log(M)
    log_upper = np.minimum(x, 0.0)
    ok = np.isfinite(lp) & (lp < log_upper) & (T > 0)
    out = np.full(M.shape, np.nan)
    if ok.any():
        s, conv = _solve_total_vol(x[ok], lp[ok])
        sig = s / np.sqrt(T[ok])
        out[np.flatnonzero(ok)[conv]] = sig[conv]
    out = out.reshape(shape)
    return out[()] if out.ndim == 0 else out


def implied_vol(coord: OptionCoord, price: float, otm: bool = False) -> float:
    """Black-Scholes implied volatility of a call price (or OTM price if ``otm``).

    Raises
    ------
    PriceOutOfBounds
        If the price is outside the no-arbitrage band, or the out-of-the-money
        time value is below ``MIN_PRICE``.
    NoConvergence
        If the safeguarded Newton iteration does not converge.
    """
    if not math.isfinite(price):
        raise InputError(f"non-finite price {price}")
    M = coord.M
    if otm:
        p, upper = price, (1.0 if M >= 1 else M)
    else:
        if not (max(1.0 - M, 0.0) < price < 1.0):
            raise PriceOutOfBounds(f"call price {price} outside ({max(1 - M, 0)}, 1) for M={M}")
        p, upper = price - max(1.0 - M, 0.0), 1.0 if M >= 1 else M
    if not (MIN_PRICE < p < upper):
        raise PriceOutOfBounds(f"out-of-the-money value {p} outside ({MIN_PRICE}, {upper})")
    s, conv = _solve_total_vol(np.array([coord.m]), np.array([math.log(p)]))
    if not conv[0]:
        raise NoConvergence(f"implied vol did not converge for M={M}, T={coord.T}, price={price}")
    return float(s[0] / math.sqrt(coord.T))
