import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from deepvol.bs import (MIN_PRICE, IVQuote, OptionCoord, bs_price, bs_vega, call_price, implied_vol,
                        implied_vol_array, implied_vol_log_otm, otm_log_price)
from deepvol.errors import InputError, PriceOutOfBounds


def atm_price_mp(sigma, T):
    # 2 Phi(sigma sqrt(T) / 2) - 1 at 50 digits
    mpmath.mp.dps = 50
    return float(mpmath.erf(mpmath.mpf(sigma) * mpmath.sqrt(T) / 2 / mpmath.sqrt(2)))


def test_atm_price_matches_high_precision_identity():
    ref = atm_price_mp(0.2, 1.0)
    assert abs(ref - 0.0796557) < 1e-6
    assert abs(bs_price(OptionCoord(1.0, 1.0), 0.2) - ref) < 1e-15


@pytest.mark.parametrize("M, intrinsic", [(2.0, 0.0), (0.5, 0.5)])
def test_zero_vol_limit_is_intrinsic(M, intrinsic):
    assert bs_price(OptionCoord(M, 1.0), 1e-12) == pytest.approx(intrinsic, abs=1e-15)


def test_vega_matches_atm_closed_form_and_differences():
    c = OptionCoord(1.0, 1.0)
    closed = math.exp(-0.5 * 0.1**2) / math.sqrt(2 * math.pi)
    assert bs_vega(c, 0.2) == pytest.approx(closed, rel=1e-14)
    h = 1e-5
    fd = (bs_price(c, 0.2 + h) - bs_price(c, 0.2 - h)) / (2 * h)
    assert abs(fd / bs_vega(c, 0.2) - 1) < 1e-7


def test_vega_vanishes_with_maturity():
    assert bs_vega(OptionCoord(1.0, 1e-14), 0.2) < 1e-6


def test_implied_vol_examples():
    assert implied_vol(OptionCoord(1.0, 1.0), 0.0796557) == pytest.approx(0.2, abs=1e-6)
    c = OptionCoord(1.1, 0.25)
    assert implied_vol(c, bs_price(c, 0.35)) == pytest.approx(0.35, abs=1e-8)


@pytest.mark.parametrize("price", [1.5, 1.0, -0.1, 0.4])
def test_price_outside_band_rejected(price):
    # 0.4 is below the intrinsic value 0.5 of the M=0.5 call
    with pytest.raises(PriceOutOfBounds):
        implied_vol(OptionCoord(0.5 if price == 0.4 else 1.0, 1.0), price)


def test_tiny_otm_price_is_clamped():
    with pytest.raises(PriceOutOfBounds):
        implied_vol(OptionCoord(3.0, 0.01), MIN_PRICE / 10)


def test_non_finite_inputs_rejected():
    with pytest.raises(InputError):
        bs_price(OptionCoord(1.0, 1.0), float("nan"))
    with pytest.raises(InputError):
        OptionCoord(-1.0, 1.0)
    with pytest.raises(InputError):
        OptionCoord(1.0, 0.0)


def test_log_moneyness_is_consistent():
    c = OptionCoord.from_log_moneyness(0.1, 0.5)
    assert c.M == pytest.approx(math.exp(0.1))
    assert c.m == pytest.approx(0.1, abs=1e-15)


def test_quote_invariants():
    c = OptionCoord(1.0, 0.5)
    IVQuote(c, 0.2, 1.0, 0.19, 0.21)
    with pytest.raises(InputError):
        IVQuote(c, 0.2, 1.0, 0.21, 0.19)
    with pytest.raises(InputError):
        IVQuote(c, 0.25, 1.0, 0.19, 0.21)
    with pytest.raises(InputError):
        IVQuote(c, -0.2)
    with pytest.raises(InputError):
        IVQuote(c, 0.2, -1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 3.0), st.floats(0.5, 2.0), st.floats(1 / 365, 3.0), st.floats(0.01, 3.0))
def test_monotone_and_bounded(s1, M, T, s2):
    c = OptionCoord(M, T)
    lo, hi = sorted((s1, s2))
    p_lo, p_hi = bs_price(c, lo), bs_price(c, hi)
    assert max(1 - M, 0) <= p_lo <= p_hi <= 1
    if hi - lo > 1e-3 and p_hi - max(1 - M, 0) > 1e-10:
        assert p_lo < p_hi


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 3.0), st.floats(0.5, 2.0), st.floats(1 / 365, 3.0))
def test_log_otm_round_trip(sigma, M, T):
    lp = otm_log_price(math.log(M), sigma * math.sqrt(T))
    assert abs(float(implied_vol_log_otm(M, T, lp)) - sigma) < 1e-8


@settings(max_examples=100, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(0.8, 1.25), st.floats(0.05, 2.0))
def test_price_space_round_trip_where_time_value_is_resolvable(sigma, M, T):
    c = OptionCoord(M, T)
    p = bs_price(c, sigma)
    # a relative time value near machine epsilon carries no volatility information
    assume(p - max(1 - M, 0) > 1e-6)
    assert abs(implied_vol(c, p) - sigma) < 1e-8
    assert abs(bs_price(c, implied_vol(c, p)) - p) < 1e-12


def test_array_inversion_matches_scalar():
    M = np.array([0.9, 1.0, 1.2])
    T = np.array([0.1, 0.5, 2.0])
    s = np.array([0.15, 0.3, 0.6])
    p = call_price(M, T, s)
    out = implied_vol_array(M, T, p)
    for i in range(3):
        assert out[i] == implied_vol(OptionCoord(M[i], T[i]), p[i])
