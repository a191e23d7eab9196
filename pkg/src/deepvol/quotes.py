"""Market quote files: parsing, the liquidity filter and weights."""
from __future__ import annotations

import csv
import decimal
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bs import IVQuote, OptionCoord, implied_vol
from .errors import DeepVolError, EmptyAfterFilter, InputError, ParseError

MAX_REL_SPREAD = 0.05


@dataclass
class IngestResult:
    """Kept quotes plus the number of rows removed by the spread filter."""

    quotes: list
    dropped: int = 0
    dropped_lines: list = field(default_factory=list)


def _num(row, key, line):
    raw = row.get(key)
    if raw is None or raw.strip() == "":
        raise ParseError(f"missing value for '{key}'", line)
    try:
        v = float(raw)
    except ValueError:
        raise ParseError(f"cannot parse '{raw}' in column '{key}'", line) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value in column '{key}'", line)
    return v


def _moneyness(row, cols, line):
    if "moneyness" in cols:
        M = _num(row, "moneyness", line)
    else:
        spot = _num(row, "spot", line)
        if spot <= 0:
            raise ParseError("spot must be positive", line)
        M = _num(row, "strike", line) / spot
    if M <= 0:
        raise ParseError(f"moneyness must be positive, got {M}", line)
    return M


def _vols_from_prices(row, M, T, line):
    # prices are call prices per unit spot
    spot = _num(row, "spot", line) if "spot" in row and row["spot"].strip() else 1.0
    out = []
    for key in ("bid_price", "ask_price"):
        try:
            out.append(implied_vol(OptionCoord(M, T), _num(row, key, line) / spot))
        except DeepVolError as exc:
            raise ParseError(f"{key}: {exc}", line) from None
    return out


def _too_wide(b, a) -> bool:
    """``(a - b) / mid >= MAX_REL_SPREAD`` decided exactly.

    ``b`` and ``a`` are the CSV strings (or floats); decimal arithmetic keeps a
    quote such as 0.195/0.205, whose relative spread is exactly 5%, on the
    dropped side where binary rounding would put it just below.
    """
    with decimal.localcontext() as ctx:
        ctx.prec = 120
        a, b = decimal.Decimal(a), decimal.Decimal(b)
        return 2 * (a - b) >= decimal.Decimal(repr(MAX_REL_SPREAD)) * (a + b)


def ingest_quotes(path, from_prices: bool = False) -> IngestResult:
    """Read a quote CSV and apply the liquidity filter.

    Columns are ``moneyness`` (or ``strike`` and ``spot``), ``maturity_years``
    and ``bid_iv``/``ask_iv``.  With ``from_prices`` the vols are inverted
    from ``bid_price``/``ask_price`` call prices first.

    Each kept quote has mid ``m = (a + b)/2`` as its IV, weight
    ``m / (a - m)`` and noise scale ``(a - b)/2``.  Rows with relative spread
    ``(a - b)/m >= 0.05`` are dropped.

    Raises
    ------
    ParseError
        Malformed rows, with the 1-based line number (header is line 1).
    EmptyAfterFilter
        If no quote survives the filter.
    """
    p = Path(path)
    try:
        fh = open(p, encoding="utf-8", newline="")
    except OSError as exc:
        raise InputError(f"cannot open quotes file {p}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames:
            raise ParseError("missing header row", 1)
        cols = {c.strip() for c in reader.fieldnames}
        reader.fieldnames = [c.strip() for c in reader.fieldnames]
        need = {"maturity_years"} | ({"bid_price", "ask_price"} if from_prices else {"bid_iv", "ask_iv"})
        if not need <= cols:
            raise ParseError(f"missing columns {sorted(need - cols)}", 1)
        if "moneyness" not in cols and not {"strike", "spot"} <= cols:
            raise ParseError("need a 'moneyness' column or 'strike' and 'spot'", 1)
        kept, dropped = [], []
        for row in reader:
            line = reader.line_num
            if None in row:
                raise ParseError("too many fields", line)
            M = _moneyness(row, cols, line)
            T = _num(row, "maturity_years", line)
            if T <= 0:
                raise ParseError(f"maturity must be positive, got {T}", line)
            if from_prices:
                b, a = _vols_from_prices(row, M, T, line)
                exact = (b, a)
            else:
                b, a = _num(row, "bid_iv", line), _num(row, "ask_iv", line)
                exact = (row["bid_iv"].strip(), row["ask_iv"].strip())
            if not 0 < b <= a:
                raise ParseError(f"need 0 < bid_iv <= ask_iv, got {b}, {a}", line)
            mid = 0.5 * (a + b)
            spread = a - b
            if _too_wide(*exact):
                dropped.append(line)
                continue
            if spread == 0:
                raise ParseError("zero spread gives an unbounded weight", line)
            kept.append(IVQuote(OptionCoord(M, T), mid, mid / (a - mid), b, a, 0.5 * spread))
    if not kept:
        raise EmptyAfterFilter(f"all {len(dropped)} quotes removed by the spread filter")
    return IngestResult(kept, len(dropped), dropped)


def write_quotes(path, M, T, bid_iv, ask_iv) -> None:
    """Write an IV quote CSV in the format read by ``ingest_quotes``."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["moneyness", "maturity_years", "bid_iv", "ask_iv"])
        for row in zip(M, T, bid_iv, ask_iv):
            w.writerow([repr(float(v)) for v in row])


def quote_arrays(quotes):
    """``(M, T, iv, weight, noise)`` arrays from a quote list."""
    M = np.array([q.coord.M for q in quotes])
    T = np.array([q.coord.T for q in quotes])
    iv = np.array([q.iv for q in quotes])
    w = np.array([q.weight for q in quotes])
    s = np.array([np.nan if q.noise is None else q.noise for q in quotes])
    return M, T, iv, w, s
