"""Bayesian calibration: Gaussian likelihood around network IVs, ensemble MCMC."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import AllWalkersStuck, InputError
from .sampling import MarginalSpec

STRETCH_A = 2.0
BURN_FRACTION = 0.25
STUCK_WINDOW = 100
STUCK_RATE = 0.01


@dataclass(frozen=True)
class PriorSpec:
    """Product prior; ``marginals`` maps parameter names to ``MarginalSpec``."""

    marginals: dict

    def __post_init__(self):
        if not self.marginals or not all(isinstance(v, MarginalSpec) for v in self.marginals.values()):
            raise InputError("prior needs at least one MarginalSpec")

    @property
    def names(self) -> list:
        return list(self.marginals)

    @property
    def dim(self) -> int:
        return len(self.marginals)

    def logpdf(self, mus):
        """Log prior density for rows of ``mus`` (``-inf`` outside the support)."""
        mus = np.atleast_2d(np.asarray(mus, dtype=float))
        out = np.zeros(mus.shape[0])
        for j, spec in enumerate(self.marginals.values()):
            out += spec.logpdf(mus[:, j])
        return out

    def sample(self, rng: np.random.Generator, size: int):
        return np.column_stack([spec.sample(rng, size) for spec in self.marginals.values()])


@dataclass
class LikelihoodSpec:
    """Observed IVs at ``(M_i, T_i)`` with noise scales and liquidity weights.

    Weights are normalized to mean one and act as precision multipliers: the
    weighted residual ``sqrt(w_i) (y_i - phi_i)`` has variance ``sigma_i^2``.
    """

    M: np.ndarray
    T: np.ndarray
    y: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.M, self.T, self.y = (np.asarray(a, dtype=float).ravel() for a in (self.M, self.T, self.y))
        n = self.y.size
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), (n,)).copy()
        if n < 1 or self.M.size != n or self.T.size != n:
            raise InputError("likelihood needs matching, nonempty M, T and y")
        if np.any(self.sigma <= 0) or not np.all(np.isfinite(self.sigma)):
            raise InputError("noise scales must be positive")
        w = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float).ravel()
        if w.size != n or np.any(w < 0) or not w.sum() > 0:
            raise InputError("weights must be nonnegative, not all zero, one per quote")
        self.weights = w / w.mean()

    @classmethod
    def from_quotes(cls, quotes, sigma=None, weighted=True):
        """Build from ``IVQuote`` objects; ``sigma`` defaults to each quote's ``noise``."""
        M = [q.coord.M for q in quotes]
        T = [q.coord.T for q in quotes]
        y = [q.iv for q in quotes]
        if sigma is None:
            if any(q.noise is None for q in quotes):
                raise InputError("quotes without a noise scale need an explicit sigma")
            sigma = [q.noise for q in quotes]
        w = [q.weight for q in quotes] if weighted else None
        return cls(M, T, y, sigma, w)

    def log_norm(self) -> float:
        """Log normalizing constant: ``sum log N(0; 0, sigma_i^2 / w_i)``."""
        with np.errstate(divide="ignore"):
            return float(np.sum(0.5 * np.log(self.weights) - 0.5 * np.log(2 * np.pi * self.sigma**2)))

    def loglik(self, pred):
        """Log likelihood for prediction rows ``pred`` of shape ``(k, N)``."""
        r = (np.atleast_2d(pred) - self.y) / self.sigma
        return self.log_norm() - 0.5 * (r * r) @ self.weights


def network_predictor(net: nn.Network, M, T):
    """Map parameter rows ``(k, m)`` to network IVs ``(k, N)`` at fixed coordinates."""
    coords = np.column_stack([np.asarray(M, dtype=float), np.asarray(T, dtype=float)])
    N = coords.shape[0]

    def predict(mus):
        mus = np.atleast_2d(mus)
        k = mus.shape[0]
        rows = np.concatenate([np.repeat(mus, N, axis=0), np.tile(coords, (k, 1))], axis=1)
        return nn.forward(net, rows).reshape(k, N)

    return predict


def _predictor(model, like: LikelihoodSpec):
    if isinstance(model, nn.Network):
        return network_predictor(model, like.M, like.T)
    if callable(model):
        return model
    raise InputError("model must be a Network or a callable mapping (k, m) parameters to (k, N) IVs")


def log_posterior_batch(mus, prior: PriorSpec, like: LikelihoodSpec, model):
    """Unnormalized log posterior for parameter rows; ``-inf`` outside the prior support."""
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    lp = prior.logpdf(mus)
    ok = np.isfinite(lp)
    if ok.any():
        lp[ok] += like.loglik(_predictor(model, like)(mus[ok]))
    return lp


def log_posterior(mu, prior: PriorSpec, like: LikelihoodSpec, model) -> float:
    return float(log_posterior_batch(np.asarray(mu, dtype=float)[None, :], prior, like, model)[0])


@dataclass
class PosteriorChain:
    """Walker positions for every step plus bookkeeping."""

    draws: np.ndarray
    log_prob: np.ndarray
    acceptance_rate: np.ndarray
    burn_in: int
    names: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.draws.shape[0]

    @property
    def n_walkers(self) -> int:
        return self.draws.shape[1]

    def flat(self, burn: bool = True):
        """Pooled post-burn-in draws, shape ``(n, m)``."""
        d = self.draws[self.burn_in:] if burn else self.draws
        return d.reshape(-1, d.shape[-1])

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "walker", *self.names, "log_prob"])
            for s in range(self.n_steps):
                for k in range(self.n_walkers):
                    w.writerow([s, k, *(repr(float(v)) for v in self.draws[s, k]), repr(float(self.log_prob[s, k]))])


def run_ensemble(log_prob_fn, p0, n_steps: int, rng: np.random.Generator, a: float = STRETCH_A,
                 burn_fraction: float = BURN_FRACTION, names=None) -> PosteriorChain:
    """Affine-invariant ensemble sampler with stretch moves.

    Walkers are updated in two halves, each proposing along the line to a
    random walker of the other half; ``log_prob_fn`` maps ``(k, m)`` rows to
    ``k`` log densities and is called once per half-step.

    Raises
    ------
    AllWalkersStuck
        If fewer than 1% of proposals are accepted over any window of 100 steps.
    """
    x = np.array(p0, dtype=float)
    K, m = x.shape
    if K < 2 * m or K % 2:
        raise InputError(f"need an even number of walkers, at least {2 * m}; got {K}")
    if n_steps < 1:
        raise InputError("n_steps must be positive")
    lp = np.asarray(log_prob_fn(x), dtype=float)
    if not np.all(np.isfinite(lp)):
        raise InputError("initial walkers must have finite log density")
    draws = np.empty((n_steps, K, m))
    lps = np.empty((n_steps, K))
    accepted = np.zeros(K)
    window = 0
    halves = (np.arange(0, K // 2), np.arange(K // 2, K))
    for step in range(n_steps):
        for h in (0, 1):
            act, other = halves[h], halves[1 - h]
            n = act.size
            z = ((a - 1.0) * rng.random(n) + 1.0) ** 2 / a
            partner = x[other[rng.integers(0, other.size, n)]]
            prop = partner + z[:, None] * (x[act] - partner)
            lp_prop = np.asarray(log_prob_fn(prop), dtype=float)
            with np.errstate(invalid="ignore"):
                log_ratio = (m - 1) * np.log(z) + lp_prop - lp[act]
            acc = np.log(rng.random(n)) < log_ratio
            idx = act[acc]
            x[idx] = prop[acc]
            lp[idx] = lp_prop[acc]
            accepted[idx] += 1
            window += int(acc.sum())
        draws[step] = x
        lps[step] = lp
        if (step + 1) % STUCK_WINDOW == 0:
            if window < STUCK_RATE * STUCK_WINDOW * K:
                raise AllWalkersStuck(f"acceptance {window / (STUCK_WINDOW * K):.4f} over steps "
                                      f"{step + 2 - STUCK_WINDOW}..{step + 1}")
            window = 0
    burn = int(math.floor(burn_fraction * n_steps))
    return PosteriorChain(draws, lps, accepted / n_steps, burn, list(names or [f"p{j}" for j in range(m)]))


def run_mcmc(prior: PriorSpec, like: LikelihoodSpec, net, n_walkers: int, n_steps: int, seed: int) -> PosteriorChain:
    """Posterior sampling with walkers started from prior draws."""
    if n_walkers < 2 * prior.dim:
        raise InputError(f"need at least {2 * prior.dim} walkers")
    rng = np.random.default_rng(seed)
    p0 = prior.sample(rng, n_walkers)
    return run_ensemble(lambda mus: log_posterior_batch(mus, prior, like, net), p0, n_steps, rng,
                        names=prior.names)


def summarize(chain: PosteriorChain, bins: int = 30) -> dict:
    """Median and 2.5%/97.5% quantiles per parameter plus pairwise 2-d histograms."""
    flat = chain.flat()
    summary = {}
    for j, name in enumerate(chain.names):
        q = np.quantile(flat[:, j], [0.5, 0.025, 0.975])
        summary[name] = {"median": float(q[0]), "q2.5": float(q[1]), "q97.5": float(q[2])}
    hists = {}
    m = flat.shape[1]
    for i in range(m):
        for j in range(i + 1, m):
            H, xe, ye = np.histogram2d(flat[:, i], flat[:, j], bins=bins)
            hists[(chain.names[i], chain.names[j])] = {"counts": H, "x_edges": xe, "y_edges": ye}
    return {"summary": summary, "histograms": hists,
            "acceptance_mean": float(chain.acceptance_rate.mean()),
            "burn_in": chain.burn_in, "n_draws": int(flat.shape[0])}


def write_summary(result: dict, directory, stem: str = "posterior") -> list:
    """Summary JSON plus one CSV matrix per parameter pair; returns written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    js = {k: v for k, v in result.items() if k != "histograms"}
    p = d / f"{stem}_summary.json"
    p.write_text(json.dumps(js, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths.append(p)
    for (a, b), h in result["histograms"].items():
        p = d / f"{stem}_hist_{a}_{b}.csv"
        with open(p, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x_lo\\y_lo", *(repr(float(v)) for v in h["y_edges"][:-1])])
            for lo, row in zip(h["x_edges"][:-1], h["counts"]):
                w.writerow([repr(float(lo)), *(int(c) for c in row)])
        paths.append(p)
    return paths


def principal_angle(draws2d) -> float:
    """Angle in degrees between the leading covariance eigenvector and the nearest axis."""
    c = np.cov(np.asarray(draws2d, dtype=float).T)
    w, v = np.linalg.eigh(c)
    lead = v[:, np.argmax(w)]
    ang = math.degrees(math.atan2(abs(lead[1]), abs(lead[0])))
    return min(ang, 90.0 - ang)
