"""Relative-error and ATM-skew reports over implied-vol surfaces."""
from __future__ import annotations

import csv
import math

import numpy as np

from . import nn
from .errors import InputError

QUANTILES = (0.5, 0.9, 0.99)


def _net_surface(net: nn.Network, mu, M, T):
    mu = np.asarray(mu, dtype=float)
    rows = np.column_stack([np.broadcast_to(mu, (M.size, mu.size)), M, T])
    return nn.forward(net, rows)


def relative_error_report(net, reference_pricer, mu, grid) -> dict:
    """Pointwise ``|phi_NN - phi_ref| / phi_ref`` at fixed ``mu``.

    Parameters
    ----------
    net : Network or callable
        A network over ``(mu, M, T)`` rows, or any ``f(M, T) -> iv`` callable
        already bound to ``mu``.
    reference_pricer : callable
        ``f(M, T) -> iv`` arrays.
    grid : tuple of array_like
        ``(M, T)`` coordinates, flattened together.

    Returns
    -------
    dict
        ``rows`` as ``(M, T, approx, reference, re)`` tuples and ``quantiles``
        (median, q90, q99) plus ``max``.
    """
    M, T = (np.asarray(a, dtype=float).ravel() for a in np.broadcast_arrays(*grid))
    if M.size == 0:
        raise InputError("empty grid")
    approx = _net_surface(net, mu, M, T) if isinstance(net, nn.Network) else np.asarray(net(M, T), dtype=float)
    ref = np.asarray(reference_pricer(M, T), dtype=float)
    ok = np.isfinite(ref) & (ref > 0)
    if not ok.any():
        raise InputError("reference surface has no positive finite values")
    re = np.full(M.size, np.nan)
    re[ok] = np.abs(approx[ok] - ref[ok]) / ref[ok]
    q = np.quantile(re[ok], QUANTILES)
    return {"rows": list(zip(M, T, approx, ref, re)),
            "quantiles": {"median": float(q[0]), "q90": float(q[1]), "q99": float(q[2]),
                          "max": float(re[ok].max())},
            "n": int(ok.sum()), "n_skipped": int((~ok).sum())}


def loglog_slope(T, skew) -> float:
    """Least-squares slope of ``ln skew`` against ``ln T``; NaN if any skew is zero."""
    T, skew = np.asarray(T, dtype=float), np.asarray(skew, dtype=float)
    if T.size < 2 or np.any(skew <= 0) or not np.all(np.isfinite(skew)):
        return math.nan
    return float(np.polyfit(np.log(T), np.log(skew), 1)[0])


def skew_report(surface_source, T_list, h: float = 1e-3, mu=None) -> dict:
    """ATM skew ``|d sigma_iv / dm|`` at ``m = 0`` for each maturity.

    ``surface_source`` is either a callable ``f(m, T) -> iv`` in log-moneyness
    or a network over ``(mu, M, T)`` rows (then ``mu`` is required).  Central
    differences with step ``h`` are always reported; a network additionally
    gets the exact skew from its input Jacobian (``d/dm = M d/dM`` and
    ``M = 1`` at the money).
    """
    T = np.asarray(T_list, dtype=float).ravel()
    if T.size == 0 or np.any(T <= 0) or not h > 0:
        raise InputError("need positive maturities and h > 0")
    exact = None
    if isinstance(surface_source, nn.Network):
        if mu is None:
            raise InputError("a network source needs parameters mu")
        mu = np.asarray(mu, dtype=float)

        def f(m, TT):
            return _net_surface(surface_source, mu, np.exp(m), TT)

        rows = np.column_stack([np.broadcast_to(mu, (T.size, mu.size)), np.ones(T.size), T])
        _, J = nn.forward_and_jacobian(surface_source, rows)
        exact = np.abs(J[:, mu.size])
    elif callable(surface_source):
        f = surface_source
    else:
        raise InputError("surface source must be a Network or a callable")
    up = np.asarray(f(np.full(T.size, h), T), dtype=float)
    dn = np.asarray(f(np.full(T.size, -h), T), dtype=float)
    fd = np.abs(up - dn) / (2 * h)
    out = {"T": T, "fd": fd, "slope_fd": loglog_slope(T, fd), "h": h}
    if exact is not None:
        out["exact"] = exact
        out["slope_exact"] = loglog_slope(T, exact)
    return out


def write_re_csv(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["M", "T", "approx", "reference", "re"])
        for row in report["rows"]:
            w.writerow([repr(float(v)) for v in row])


def write_skew_csv(report: dict, path) -> None:
    has_exact = "exact" in report
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["T", "skew_fd"] + (["skew_exact"] if has_exact else []))
        for i, t in enumerate(report["T"]):
            row = [t, report["fd"][i]] + ([report["exact"][i]] if has_exact else [])
            w.writerow([repr(float(v)) for v in row])
