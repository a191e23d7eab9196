"""Synthetic training data: parameter priors, liquidity KDE and dataset assembly."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import heston, rbergomi
from .errors import DegenerateSample, FormatError, InputError, NumericalError, RejectionStall

log = logging.getLogger(__name__)

KINDS = ("uniform", "trunc_normal", "trunc_normal_squared")
MAX_REJECTIONS = 10_000

#: Liquid (log-moneyness, maturity) boxes.
HESTON_BOX = ((-0.1, 0.28), (1 / 365, 0.2))
RBERGOMI_BOX = ((-3.163, 0.391), (0.008, 2.589))


@dataclass(frozen=True)
class MarginalSpec:
    """One-dimensional prior marginal.

    ``trunc_normal_squared`` draws ``x`` from the normal truncated to
    ``[a, b]`` and returns ``x**2``.
    """

    kind: str
    a: float
    b: float
    loc: float | None = None
    scale: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown marginal kind {self.kind!r}")
        if not self.a < self.b:
            raise InputError(f"need a < b, got [{self.a}, {self.b}]")
        if self.kind != "uniform":
            if self.loc is None or self.scale is None or not self.scale > 0:
                raise InputError("truncated normal needs loc and a positive scale")
        if self.kind == "trunc_normal_squared" and self.a < 0:
            raise InputError("squared marginal needs a >= 0 so that the support is monotone")

    def _trunc(self):
        lo, hi = (self.a - self.loc) / self.scale, (self.b - self.loc) / self.scale
        return stats.truncnorm(lo, hi, loc=self.loc, scale=self.scale)

    @property
    def support(self) -> tuple[float, float]:
        if self.kind == "trunc_normal_squared":
            return self.a**2, self.b**2
        return self.a, self.b

    def ppf(self, u):
        """Quantile function; maps uniforms on (0, 1) into the support."""
        u = np.asarray(u, dtype=float)
        if self.kind == "uniform":
            x = self.a + (self.b - self.a) * u
        else:
            x = np.clip(self._trunc().ppf(u), self.a, self.b)
            if self.kind == "trunc_normal_squared":
                x = x * x
        return x[()] if x.ndim == 0 else x

    def sample(self, rng: np.random.Generator, size=None):
        return self.ppf(rng.random(size))

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.support
        inside = (x >= lo) & (x <= hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "uniform":
                val = np.full(x.shape, -math.log(self.b - self.a))
            elif self.kind == "trunc_normal":
                val = self._trunc().logpdf(x)
            else:
                r = np.sqrt(np.where(inside, x, 1.0))
                val = self._trunc().logpdf(r) - np.log(2 * r)
        out = np.where(inside, val, -np.inf)
        return out[()] if out.ndim == 0 else out

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b, "loc": self.loc, "scale": self.scale}


def uniform(a, b) -> MarginalSpec:
    return MarginalSpec("uniform", a, b)


def trunc_normal(a, b, loc, scale) -> MarginalSpec:
    return MarginalSpec("trunc_normal", a, b, loc, scale)


def trunc_normal_squared(a, b, loc, scale) -> MarginalSpec:
    return MarginalSpec("trunc_normal_squared", a, b, loc, scale)


def sample_marginal(spec: MarginalSpec, rng: np.random.Generator) -> float:
    return float(spec.sample(rng))


#: Priors keyed by parameter name, in model parameter order.
HESTON_PRIORS = {
    "lam": uniform(0.0, 10.0),
    "v_bar": uniform(0.0, 1.0),
    "v0": uniform(0.0, 1.0),
    "rho": uniform(-1.0, 0.0),
    "eta": uniform(0.0, 5.0),
}
RBERGOMI_PRIORS = {
    "H": trunc_normal(0.01, 0.5, 0.07, 0.05),
    "eta": trunc_normal(1.0, 4.0, 2.5, 0.5),
    "rho": trunc_normal(-1.0, -0.5, -0.95, 0.2),
    "v0": trunc_normal_squared(0.05, 1.0, 0.3, 0.1),
}

MODELS = {
    "heston": (heston.PARAM_NAMES, HESTON_PRIORS, HESTON_BOX),
    "rbergomi": (rbergomi.PARAM_NAMES, RBERGOMI_PRIORS, RBERGOMI_BOX),
}


def model_info(model: str):
    """``(param_names, priors, box)`` for a model name."""
    try:
        return MODELS[model]
    except KeyError:
        raise InputError(f"unknown model {model!r}; expected one of {sorted(MODELS)}") from None


def log_prior(priors: dict, mu) -> float:
    """Log density of the product prior at ``mu`` (ordered like ``priors``)."""
    mu = np.asarray(mu, dtype=float)
    return float(sum(spec.logpdf(x) for spec, x in zip(priors.values(), mu)))


# --------------------------------------------------------------------- KDE


@dataclass(frozen=True)
class WeightedKDE:
    """Gaussian mixture over ``(m, T)`` with per-point weights and a shared bandwidth."""

    points: np.ndarray
    weights: np.ndarray
    bandwidth: np.ndarray
    _chol: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float)
        H = np.asarray(self.bandwidth, dtype=float)
        if p.ndim != 2 or p.shape[1] != 2 or w.shape != (p.shape[0],):
            raise InputError("points must be (n, 2) with one weight per point")
        if np.any(w < 0) or not w.sum() > 0 or not np.all(np.isfinite(w)):
            raise InputError("weights must be nonnegative with a positive sum")
        try:
            L = np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            raise InputError("bandwidth must be positive definite") from None
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "weights", w / w.sum())
        object.__setattr__(self, "bandwidth", H)
        object.__setattr__(self, "_chol", L)

    def logpdf(self, x):
        """Log density at rows of ``x`` (shape ``(k, 2)`` or ``(2,)``)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        diff = x[:, None, :] - self.points[None, :, :]
        z = np.linalg.solve(self._chol, diff.reshape(-1, 2).T).T.reshape(diff.shape)
        log_norm = -math.log(2 * math.pi) - np.log(np.diag(self._chol)).sum()
        with np.errstate(divide="ignore"):
            comp = np.log(self.weights)[None, :] - 0.5 * (z * z).sum(axis=2)
        out = log_norm + np.logaddexp.reduce(comp, axis=1)
        return float(out[0]) if single else out

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "weights": self.weights.tolist(),
                "bandwidth": self.bandwidth.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "WeightedKDE":
        return cls(np.array(d["points"]), np.array(d["weights"]), np.array(d["bandwidth"]))


def effective_sample_size(weights) -> float:
    """Kish effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=float)
    return float(w.sum() ** 2 / (w * w).sum())


def fit_wkde(points, weights, bandwidth_rule="scott") -> WeightedKDE:
    """Weighted Gaussian KDE with a bandwidth from the weighted sample covariance.

    Parameters
    ----------
    points : array_like, shape (n, 2)
        ``(m, T)`` pairs.
    weights : array_like, shape (n,)
        Liquidity proxies, nonnegative and not all zero.
    bandwidth_rule : {"scott", "silverman"} or float
        Scale factor applied to the weighted covariance; a float is used as is.
        Scott's rule uses ``n_eff ** (-1/6)`` with the Kish effective size.

    Notes
    -----
    A singular weighted covariance (a single point, collinear points) is
    regularized with a small ridge and reported with a ``RuntimeWarning``;
    ``DegenerateSample`` is raised only if the ridge does not help.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    w = np.asarray(weights, dtype=float)
    if p.shape[0] < 1 or p.shape[1] != 2 or w.shape != (p.shape[0],):
        raise InputError("need at least one (m, T) point with a matching weight")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(w))):
        raise InputError("non-finite points or weights")
    if np.any(w < 0) or not w.sum() > 0:
        raise InputError("weights must be nonnegative and not all zero")
    n_eff = effective_sample_size(w)
    if bandwidth_rule == "scott":
        factor = n_eff ** (-1.0 / 6.0)
    elif bandwidth_rule == "silverman":
        factor = (n_eff * 4.0 / 4.0) ** (-1.0 / 6.0)
    elif isinstance(bandwidth_rule, (int, float)) and bandwidth_rule > 0:
        factor = float(bandwidth_rule)
    else:
        raise InputError(f"unknown bandwidth rule {bandwidth_rule!r}")
    wn = w / w.sum()
    mean = wn @ p
    d = p - mean
    denom = 1.0 - (wn * wn).sum()
    cov = (wn[:, None] * d).T @ d / denom if denom > 0 else np.zeros((2, 2))
    H = cov * factor**2
    ridge = 1e-10 * max(1.0, float(np.trace(H)))
    if np.linalg.matrix_rank(H, tol=ridge) < 2:
        warnings.warn("weighted covariance is singular; adding a ridge to the bandwidth", RuntimeWarning)
        H = H + ridge * np.eye(2)
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            raise DegenerateSample("bandwidth not positive definite after regularization") from None
    return WeightedKDE(p, w, H)


def _check_box(bounds):
    (m_lo, m_hi), (t_lo, t_hi) = bounds
    if not (m_lo < m_hi and 0 < t_lo < t_hi):
        raise InputError(f"invalid (m, T) box {bounds}")
    return np.array([m_lo, t_lo]), np.array([m_hi, t_hi])


def sample_wkde(kde: WeightedKDE, domain_bounds, rng: np.random.Generator, size=None):
    """Draw ``(m, T)`` from the KDE restricted to a box by rejection.

    Raises
    ------
    RejectionStall
        After ``MAX_REJECTIONS`` consecutive draws outside the box.
    """
    lo, hi = _check_box(domain_bounds)
    k = 1 if size is None else int(size)
    out = np.empty((k, 2))
    filled = 0
    streak = 0
    while filled < k:
        need = k - filled
        idx = rng.choice(kde.points.shape[0], size=need, p=kde.weights)
        cand = kde.points[idx] + rng.standard_normal((need, 2)) @ kde._chol.T
        ok = np.all((cand >= lo) & (cand <= hi), axis=1)
        acc = cand[ok]
        out[filled:filled + acc.shape[0]] = acc
        filled += acc.shape[0]
        streak = 0 if acc.shape[0] else streak + need
        if streak >= MAX_REJECTIONS:
            raise RejectionStall(f"{streak} consecutive KDE draws fell outside {domain_bounds}")
    return out[0] if size is None else out


def sample_box_uniform(domain_bounds, rng: np.random.Generator, size=None):
    """Uniform ``(m, T)`` draws on a box, used when no liquidity data is supplied."""
    lo, hi = _check_box(domain_bounds)
    u = rng.random((1 if size is None else int(size), 2))
    out = lo + (hi - lo) * u
    return out[0] if size is None else out


# ----------------------------------------------------------------- datasets


@dataclass
class Dataset:
    """Labeled rows ``(mu, M, T) -> iv`` with splits and training-set statistics."""

    columns: list
    inputs: np.ndarray
    outputs: np.ndarray
    splits: dict
    mean: np.ndarray
    std: np.ndarray
    config: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.outputs = np.asarray(self.outputs, dtype=float)
        n = self.inputs.shape[0]
        if self.inputs.ndim != 2 or self.inputs.shape[1] != len(self.columns) or self.outputs.shape != (n,):
            raise InputError("inconsistent dataset shapes")
        idx = np.concatenate([np.asarray(self.splits[k], dtype=int) for k in ("train", "valid", "test")])
        if idx.size != n or not np.array_equal(np.sort(idx), np.arange(n)):
            raise InputError("splits must be disjoint and exhaustive")
        self.splits = {k: np.asarray(self.splits[k], dtype=np.int64) for k in ("train", "valid", "test")}

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def part(self, name: str):
        i = self.splits[name]
        return self.inputs[i], self.outputs[i]

    def standardize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def save(self, directory) -> None:
        """Write ``data.csv`` and the ``data.json`` sidecar."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "data.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(list(self.columns) + ["iv"]) + "\n")
            for row, y in zip(self.inputs, self.outputs):
                fh.write(",".join(repr(float(v)) for v in row) + "," + repr(float(y)) + "\n")
        side = {
            "format": "deepvol-dataset",
            "version": 1,
            "columns": list(self.columns),
            "splits": {k: v.tolist() for k, v in self.splits.items()},
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "config": self.config,
            "seed": self.seed,
        }
        (d / "data.json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        try:
            side = json.loads((d / "data.json").read_text(encoding="utf-8"))
            raw = np.loadtxt(d / "data.csv", delimiter=",", skiprows=1, ndmin=2)
            header = (d / "data.csv").open(encoding="utf-8").readline().strip().split(",")
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot read dataset in {d}: {exc}") from exc
        if side.get("format") != "deepvol-dataset" or header[:-1] != side["columns"]:
            raise FormatError(f"{d} is not a deepvol dataset")
        return cls(side["columns"], raw[:, :-1], raw[:, -1], side["splits"],
                   np.array(side["mean"]), np.array(side["std"]), side["config"], side["seed"])


def split_indices(n: int, fractions=(0.9, 0.05, 0.05), rng=None) -> dict:
    """Shuffle ``range(n)`` and cut it into train/valid/test by ``fractions``."""
    f = np.asarray(fractions, dtype=float)
    if f.shape != (3,) or np.any(f < 0) or abs(f.sum() - 1) > 1e-9:
        raise InputError("split fractions must be three nonnegative numbers summing to 1")
    perm = rng.permutation(n) if rng is not None else np.arange(n)
    n_train = int(round(f[0] * n))
    n_valid = int(round(f[1] * n))
    return {"train": perm[:n_train], "valid": perm[n_train:n_train + n_valid], "test": perm[n_train + n_valid:]}


def train_stats(inputs, train_idx):
    """Column means and standard deviations of the training rows.

    Constant columns get a unit scale so standardization stays finite.
    """
    x = np.asarray(inputs, dtype=float)[train_idx]
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def make_dataset(columns, inputs, outputs, fractions=(0.9, 0.05, 0.05), seed=0, config=None) -> Dataset:
    """Shuffle, split and standardize already labeled rows."""
    inputs = np.asarray(inputs, dtype=float)
    splits = split_indices(inputs.shape[0], fractions, np.random.default_rng([seed, 3]))
    mean, std = train_stats(inputs, splits["train"])
    return Dataset(list(columns), inputs, np.asarray(outputs, dtype=float), splits, mean, std,
                   dict(config or {}), seed)


class GenerationAborted(NumericalError):
    """Too many rows failed to produce a label."""


def _substream(*key) -> np.random.Generator:
    return np.random.default_rng(list(key))


def _derived_seed(*key) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1, np.uint64)[0] >> 1)


def draw_inputs(model: str, n: int, seed: int, priors=None, kde=None, box=None, rows_per_group=1):
    """Model parameters and ``(M, T)`` for ``n`` rows.

    Parameters for group ``g`` come from substream ``(seed, 1, g)`` and the
    coordinates of row ``i`` from ``(seed, 0, i)``, so every row is reproducible
    on its own.  Rows in one group share model parameters.
    """
    names, default_priors, default_box = model_info(model)
    priors = priors or default_priors
    box = box or default_box
    if list(priors) != list(names):
        raise InputError(f"priors must be keyed {names}")
    if n < 1 or rows_per_group < 1:
        raise InputError("n and rows_per_group must be positive")
    n_groups = -(-n // rows_per_group)
    u = np.array([_substream(seed, 1, g).random(len(names)) for g in range(n_groups)])
    mu = np.column_stack([spec.ppf(u[:, j]) for j, spec in enumerate(priors.values())])
    mu = np.repeat(mu, rows_per_group, axis=0)[:n]
    coords = np.empty((n, 2))
    for i in range(n):
        rng = _substream(seed, 0, i)
        coords[i] = sample_wkde(kde, box, rng) if kde is not None else sample_box_uniform(box, rng)
    M = np.exp(coords[:, 0])
    return mu, M, coords[:, 1]


def _label_rbergomi(mu, M, T, cfg: rbergomi.MCConfig, seed: int, rows_per_group: int):
    out = np.full(M.shape, np.nan)
    for g, start in enumerate(range(0, M.size, rows_per_group)):
        sl = slice(start, start + rows_per_group)
        try:
            p = rbergomi.RBergomiParams(*mu[start])
            gcfg = rbergomi.MCConfig(**{**cfg.__dict__, "seed": _derived_seed(seed, 2, g)})
            out[sl] = rbergomi.rbergomi_surface_ivs(p, M[sl], T[sl], gcfg)
        except (InputError, NumericalError) as exc:
            log.warning("group %d failed: %s", g, exc)
    return out


def label_rows(model: str, mu, M, T, pricing_cfg=None, seed=0, rows_per_group=1):
    """Reference implied vols for already drawn inputs; failures are NaN."""
    if model == "heston":
        return heston.heston_ivs(mu, M, T)
    if model == "rbergomi":
        cfg = pricing_cfg or rbergomi.MCConfig()
        return _label_rbergomi(mu, M, T, cfg, seed, rows_per_group)
    model_info(model)


def generate_dataset(model: str, n: int, priors=None, kde=None, pricing_cfg=None, seed: int = 0,
                     box=None, rows_per_group: int = 1, fractions=(0.9, 0.05, 0.05),
                     max_drop_fraction: float = 0.01) -> Dataset:
    """Draw inputs, label them with the reference pricer and split.

    Rows whose implied vol cannot be computed are dropped and counted; if more
    than ``max_drop_fraction`` of the rows fail, generation aborts.

    ``rows_per_group > 1`` lets several rough Bergomi rows share one set of
    model parameters (and hence one Monte Carlo path set).
    """
    names, _, default_box = model_info(model)
    box = box or default_box
    mu, M, T = draw_inputs(model, n, seed, priors, kde, box, rows_per_group)
    iv = label_rows(model, mu, M, T, pricing_cfg, seed, rows_per_group)
    ok = np.isfinite(iv) & (iv > 0)
    dropped = int((~ok).sum())
    if dropped:
        log.info("dropped %d of %d rows with failed implied-vol labels", dropped, n)
    if dropped > max_drop_fraction * n:
        bad = np.flatnonzero(~ok)[:5]
        raise GenerationAborted(
            f"{dropped} of {n} rows failed (limit {max_drop_fraction:.1%}); first failures at "
            + "; ".join(f"mu={mu[i].tolist()} M={M[i]:.6g} T={T[i]:.6g}" for i in bad))
    inputs = np.column_stack([mu, M, T])[ok]
    cfg = {
        "model": model,
        "n_requested": n,
        "dropped": dropped,
        "box": [list(b) for b in box],
        "rows_per_group": rows_per_group,
        "priors": {k: v.to_dict() for k, v in (priors or MODELS[model][1]).items()},
        "kde": None if kde is None else kde.to_dict(),
        "fractions": list(fractions),
    }
    if model == "rbergomi":
        c = pricing_cfg or rbergomi.MCConfig()
        cfg["pricing"] = {**c.__dict__, "scheme": c.scheme.value}
    return make_dataset(list(names) + ["M", "T"], inputs, iv[ok], fractions, seed, cfg)
