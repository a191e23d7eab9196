"""Gaussian-process search over learning rate and batch size.

The surrogate works in ``(log10 lr, log2 batch)`` with a Matern 5/2 kernel
(separate lengthscale per dimension) and proposes points by minimizing the
lower confidence bound ``mean - kappa * std``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg, optimize

from . import nn
from .errors import DeepVolError, InputError

SEARCH_BOUNDS = ((-5.0, -1.0), (4.0, 10.0))
NOISE_FLOOR = 1e-8
KAPPA = 2.0
MAX_DEPTH = 4


def matern52(X1, X2, signal_var: float, lengthscales):
    """Matern 5/2 covariance between rows of ``X1`` and ``X2``."""
    d = (np.asarray(X1)[:, None, :] - np.asarray(X2)[None, :, :]) / np.asarray(lengthscales)
    r = np.sqrt(np.sum(d * d, axis=-1))
    s = math.sqrt(5.0) * r
    return signal_var * (1.0 + s + s * s / 3.0) * np.exp(-s)


@dataclass
class GPSurrogate:
    """Fitted GP; targets are centred and scaled internally."""

    X: np.ndarray
    y: np.ndarray
    signal_var: float
    lengthscales: np.ndarray
    noise_var: float
    y_mean: float
    y_scale: float
    chol: np.ndarray
    alpha: np.ndarray

    def predict(self, Xs, return_var: bool = True):
        """Posterior mean and variance (of the latent function) in original units."""
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        Ks = matern52(Xs, self.X, self.signal_var, self.lengthscales)
        mean = Ks @ self.alpha
        if not return_var:
            return self.y_mean + self.y_scale * mean
        v = linalg.solve_triangular(self.chol, Ks.T, lower=True)
        var = np.maximum(self.signal_var - np.sum(v * v, axis=0), 0.0)
        return self.y_mean + self.y_scale * mean, var * self.y_scale**2


def _assemble(X, z, signal_var, ls, noise):
    K = matern52(X, X, signal_var, ls) + noise * np.eye(X.shape[0])
    L = linalg.cholesky(K, lower=True)
    alpha = linalg.cho_solve((L, True), z)
    return L, alpha


def _neg_log_ml(theta, X, z, floor=NOISE_FLOOR):
    sv, noise = math.exp(theta[0]), math.exp(theta[-1]) + floor
    ls = np.exp(theta[1:-1])
    try:
        L, alpha = _assemble(X, z, sv, ls, noise)
    except (linalg.LinAlgError, ValueError):
        return 1e25
    return float(0.5 * z @ alpha + np.log(np.diag(L)).sum() + 0.5 * z.size * math.log(2 * math.pi))


def gp_fit(points, values, noise: float | None = None, seed: int = 0, n_starts: int = 8) -> GPSurrogate:
    """Fit kernel hyperparameters by maximizing the log marginal likelihood.

    Parameters
    ----------
    points : array_like, shape (n, d)
    values : array_like, shape (n,)
    noise : float, optional
        Fixed noise variance in standardized target units, used as given.
        When omitted it is fitted along with the kernel, never below
        ``NOISE_FLOOR``.
    seed : int
        Seeds the random restarts of the Nelder-Mead search.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    y = np.asarray(values, dtype=float).ravel()
    if X.shape[0] != y.size or y.size < 1 or not np.all(np.isfinite(y)):
        raise InputError("need finite values, one per point")
    y_mean = float(y.mean())
    y_scale = float(y.std()) or 1.0
    z = (y - y_mean) / y_scale
    d = X.shape[1]
    span = np.ptp(X, axis=0)
    span = np.where(span > 0, span, 1.0)
    rng = np.random.default_rng(seed)
    fixed = noise is not None

    def objective(t):
        full = np.append(t, math.log(noise)) if fixed else t
        # keep the search in a sane box
        if np.any(np.abs(full[:-1]) > 25):
            return 1e25
        return _neg_log_ml(full, X, z, 0.0 if fixed else NOISE_FLOOR)

    best = None
    for k in range(n_starts):
        ls0 = np.log(span * (0.5 if k == 0 else rng.uniform(0.1, 2.0, d)))
        t0 = np.concatenate([[0.0 if k == 0 else rng.normal(0, 1)], ls0])
        if not fixed:
            t0 = np.append(t0, math.log(1e-2) if k == 0 else rng.uniform(-12, -1))
        res = optimize.minimize(objective, t0, method="Nelder-Mead",
                                options={"maxiter": 400 * t0.size, "xatol": 1e-6, "fatol": 1e-9})
        if best is None or res.fun < best.fun:
            best = res
    t = best.x
    sv = math.exp(t[0])
    ls = np.exp(t[1:1 + d])
    nv = noise if fixed else math.exp(t[-1]) + NOISE_FLOOR
    L, alpha = _assemble(X, z, sv, ls, nv)
    return GPSurrogate(X, y, sv, ls, nv, y_mean, y_scale, L, alpha)


def lcb(gp: GPSurrogate, x, kappa: float = KAPPA):
    mean, var = gp.predict(x)
    return mean - kappa * np.sqrt(var)


def propose_next(gp: GPSurrogate, bounds=SEARCH_BOUNDS, kappa: float = KAPPA, seed: int = 0,
                 n_starts: int = 20):
    """Minimize the lower confidence bound over the box by multi-start L-BFGS-B."""
    b = np.asarray(bounds, dtype=float)
    rng = np.random.default_rng(seed)
    starts = np.vstack([gp.X, b[:, 0] + (b[:, 1] - b[:, 0]) * rng.random((n_starts, b.shape[0]))])
    starts = np.clip(starts, b[:, 0], b[:, 1])
    # seed with the best of a coarse scan so the local searches start in the right basin
    scan = starts[np.argsort(lcb(gp, starts, kappa))[:max(4, n_starts // 4)]]
    best_x, best_f = None, math.inf
    for s in scan:
        res = optimize.minimize(lambda x: float(lcb(gp, x[None, :], kappa)[0]), s, method="L-BFGS-B",
                                bounds=b)
        if res.fun < best_f:
            best_x, best_f = res.x, float(res.fun)
    return np.clip(best_x, b[:, 0], b[:, 1])


def decode(x) -> tuple[float, int]:
    """``(log10 lr, log2 batch)`` to ``(lr, batch)``; batch rounded to a power of two."""
    return float(10.0 ** x[0]), int(2 ** int(round(x[1])))


@dataclass
class Evaluation:
    hidden: tuple
    learning_rate: float
    batch_size: int
    valid_mse: float
    seconds: float
    x: np.ndarray


def _evaluate(dataset, hidden, x, base: nn.TrainConfig, seed: int) -> Evaluation:
    lr, batch = decode(x)
    t0 = time.perf_counter()
    try:
        net = nn.he_init(nn.NetworkSpec(dataset.inputs.shape[1], hidden), np.random.default_rng(seed))
        _, hist = nn.train(net, dataset, replace(base, learning_rate=lr, batch_size=batch, seed=seed))
        val = min(hist.valid_mse)
    except DeepVolError:
        val = math.inf
    return Evaluation(tuple(hidden), lr, batch, val, time.perf_counter() - t0, np.asarray(x, dtype=float))


def _gp_targets(evals):
    v = np.array([e.valid_mse for e in evals])
    finite = np.isfinite(v) & (v > 0)
    worst = np.log10(v[finite]).max() + 1.0 if finite.any() else 0.0
    return np.where(finite, np.log10(np.where(finite, v, 1.0)), worst)


def gp_search(dataset, hidden, budget: int, base: nn.TrainConfig, bounds=SEARCH_BOUNDS,
              kappa: float = KAPPA, seed: int = 0, n_init: int = 3):
    """Inner loop over ``h_opt`` for one architecture; returns all evaluations.

    The first evaluation is the box centre; up to ``n_init - 1`` uniform draws
    follow, then GP/LCB proposals on ``log10`` validation MSE.
    """
    if budget < 1:
        raise InputError("budget must be at least 1")
    b = np.asarray(bounds, dtype=float)
    rng = np.random.default_rng(seed)
    evals = [_evaluate(dataset, hidden, b.mean(axis=1), base, seed)]
    while len(evals) < min(budget, n_init):
        evals.append(_evaluate(dataset, hidden, b[:, 0] + (b[:, 1] - b[:, 0]) * rng.random(2), base, seed))
    while len(evals) < budget:
        X = np.array([e.x for e in evals])
        gp = gp_fit(X, _gp_targets(evals), seed=seed + len(evals))
        x = propose_next(gp, bounds, kappa, seed=seed + len(evals))
        evals.append(_evaluate(dataset, hidden, x, base, seed))
    return evals


def random_search(dataset, hidden, budget: int, base: nn.TrainConfig, bounds=SEARCH_BOUNDS, seed: int = 0):
    """Baseline: ``budget`` uniform draws over the box."""
    b = np.asarray(bounds, dtype=float)
    rng = np.random.default_rng([seed, 7])
    return [_evaluate(dataset, hidden, b[:, 0] + (b[:, 1] - b[:, 0]) * rng.random(2), base, seed)
            for _ in range(budget)]


def optimize_hyperparams(dataset, spec_grid, budget: int, base: nn.TrainConfig = nn.TrainConfig(max_epochs=20),
                         bounds=SEARCH_BOUNDS, kappa: float = KAPPA, seed: int = 0):
    """Outer loop over architectures, inner GP search over ``(lr, batch)``.

    Returns ``(best, table)`` where ``table`` lists every evaluation and
    ``best`` is the one with the smallest validation MSE.
    """
    table = []
    for hidden in spec_grid:
        hidden = tuple(int(h) for h in hidden)
        if not 1 <= len(hidden) <= MAX_DEPTH:
            raise InputError(f"depth must lie in 1..{MAX_DEPTH}, got {hidden}")
        table.extend(gp_search(dataset, hidden, budget, base, bounds, kappa, seed))
    best = min(table, key=lambda e: e.valid_mse)
    return best, table
