"""Levenberg-Marquardt calibration against a trained implied-vol network.

Residuals are ``R(mu) = phi_NN(mu, M_i, T_i) - Q_i`` and the step solves
``(J^T W J + lam I) d = -J^T W R``: the minus sign makes ``d`` a descent
direction for ``|W^(1/2) R|``, which the gain-ratio test relies on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import nn
from .bs import IVQuote
from .errors import InputError, MaxIterations, NonFiniteResidual, SingularSystem


@dataclass(frozen=True)
class LMConfig:
    lambda0: float = 1e-2
    n_max: int = 200
    eps_min: float = 1e-8
    beta0: float = 0.25
    beta1: float = 0.75
    lower: tuple | None = None
    upper: tuple | None = None

    def __post_init__(self):
        if not (self.lambda0 > 0 and self.n_max >= 1 and self.eps_min > 0):
            raise InputError("need lambda0 > 0, n_max >= 1, eps_min > 0")
        if not 0 < self.beta0 < self.beta1 < 1:
            raise InputError(f"need 0 < beta0 < beta1 < 1, got {self.beta0}, {self.beta1}")
        if (self.lower is None) != (self.upper is None):
            raise InputError("lower and upper bounds must be given together")
        if self.lower is not None and np.any(np.asarray(self.lower) >= np.asarray(self.upper)):
            raise InputError("each lower bound must be below its upper bound")


@dataclass
class CalibrationProblem:
    """Quotes, a network taking ``(mu, M, T)`` rows and a starting point."""

    quotes: list
    network: nn.Network
    mu0: np.ndarray
    model: str = ""

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=float)
        m = self.mu0.size
        if self.network.spec.input_dim != m + 2:
            raise InputError(f"network expects {self.network.spec.input_dim - 2} model parameters, mu0 has {m}")
        if len(self.quotes) <= m:
            raise InputError(f"need more quotes than parameters ({len(self.quotes)} <= {m})")
        self.coords = np.array([[q.coord.M, q.coord.T] for q in self.quotes])
        self.Q = np.array([q.iv for q in self.quotes])
        w = np.array([q.weight for q in self.quotes])
        if not w.sum() > 0:
            raise InputError("quote weights must not all be zero")
        self.weights = w / w.mean()

    @classmethod
    def from_arrays(cls, M, T, iv, network, mu0, weights=None, model=""):
        from .bs import OptionCoord
        w = np.ones(len(iv)) if weights is None else weights
        quotes = [IVQuote(OptionCoord(float(a), float(b)), float(c), float(d)) for a, b, c, d in zip(M, T, iv, w)]
        return cls(quotes, network, mu0, model)


def _rows(problem: CalibrationProblem, mu):
    mu = np.asarray(mu, dtype=float)
    return np.column_stack([np.broadcast_to(mu, (problem.coords.shape[0], mu.size)), problem.coords])


def residuals(problem: CalibrationProblem, mu):
    return nn.forward(problem.network, _rows(problem, mu)) - problem.Q


def residuals_and_jacobian(problem: CalibrationProblem, mu):
    """``R = phi_NN(mu) - Q`` and ``J = dR/dmu`` (coordinate columns dropped)."""
    y, J = nn.forward_and_jacobian(problem.network, _rows(problem, mu))
    return y - problem.Q, J[:, :np.size(mu)]


def solve_normal_equations(J, W, R, lam: float):
    """Descent step ``-(J^T W J + lam I)^-1 J^T W R`` by Cholesky.

    ``W`` is the diagonal of the weight matrix (a vector) or ``None`` for unit
    weights.

    Raises
    ------
    SingularSystem
        If the system matrix is not positive definite (only possible for
        ``lam == 0`` up to rounding).
    """
    J = np.atleast_2d(np.asarray(J, dtype=float))
    R = np.asarray(R, dtype=float).ravel()
    w = np.ones(R.size) if W is None else np.asarray(W, dtype=float).ravel()
    if lam < 0:
        raise InputError("lambda must be nonnegative")
    JW = J.T * w
    A = JW @ J + lam * np.eye(J.shape[1])
    g = JW @ R
    try:
        c = linalg.cho_factor(A, check_finite=True)
    except linalg.LinAlgError:
        raise SingularSystem(f"normal equations singular at lambda={lam}") from None
    if lam == 0 and np.linalg.matrix_rank(J * np.sqrt(w)[:, None]) < J.shape[1]:
        raise SingularSystem("J^T W J is rank deficient and lambda is 0")
    return -linalg.cho_solve(c, g)


def gain_ratio(R_old, R_new, J, delta, W=None) -> float:
    """Actual over predicted decrease of the (unsquared) residual norm.

    Norms are taken of ``W^(1/2) R``; with unit weights this is the plain
    Euclidean norm.  Returns ``-inf`` when the predicted decrease is below
    ``1e-15``.
    """
    R_old = np.asarray(R_old, dtype=float)
    R_new = np.asarray(R_new, dtype=float)
    pred = R_old + np.atleast_2d(J) @ np.asarray(delta, dtype=float)
    s = np.ones(R_old.size) if W is None else np.sqrt(np.asarray(W, dtype=float))
    n_old = np.linalg.norm(s * R_old)
    denom = n_old - np.linalg.norm(s * pred)
    if denom < 1e-15:
        return -math.inf
    return float((n_old - np.linalg.norm(s * R_new)) / denom)


@dataclass
class TraceRow:
    iteration: int
    mu: np.ndarray
    lam: float
    norm: float
    gain: float
    accepted: bool
    step_norm: float


@dataclass
class CalibrationResult:
    mu: np.ndarray
    converged: bool
    iterations: int
    rmse: float
    trace: list = field(default_factory=list)
    norm0: float = math.nan

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "converged": self.converged, "iterations": self.iterations,
                "rmse": self.rmse}


def weighted_rmse(R, W) -> float:
    R = np.asarray(R, dtype=float)
    w = np.asarray(W, dtype=float)
    return float(math.sqrt(np.sum(w * R * R) / np.sum(w)))


def _project(mu, cfg: LMConfig):
    if cfg.lower is None:
        return mu
    return np.clip(mu, cfg.lower, cfg.upper)


def calibrate(problem: CalibrationProblem, cfg: LMConfig = LMConfig(), strict: bool = False) -> CalibrationResult:
    """Levenberg-Marquardt with gain-ratio damping control.

    ``c <= beta0`` rejects the step and doubles ``lam``; ``c >= beta1``
    accepts and halves it; in between the step is accepted with ``lam``
    unchanged.  Trial points are projected onto the parameter box and the
    projected step is what gets tested and measured.  On rejection the
    residual and Jacobian at the current point are reused.

    Raises
    ------
    NonFiniteResidual
        If the network produces a non-finite residual.
    MaxIterations
        Only with ``strict=True`` when ``n_max`` is reached first.
    """
    W = problem.weights
    mu = _project(problem.mu0.copy(), cfg)
    lam = cfg.lambda0
    R, J = residuals_and_jacobian(problem, mu)
    if not np.all(np.isfinite(R)):
        raise NonFiniteResidual(f"non-finite residual at mu0={mu.tolist()}")
    sW = np.sqrt(W)
    norm0 = float(np.linalg.norm(sW * R))
    trace = []
    step = _project(mu + solve_normal_equations(J, W, R, lam), cfg) - mu
    n = 0
    while n < cfg.n_max and np.linalg.norm(step) > cfg.eps_min:
        trial = mu + step
        R_new = residuals(problem, trial)
        if not np.all(np.isfinite(R_new)):
            raise NonFiniteResidual(f"non-finite residual at mu={trial.tolist()}")
        c = gain_ratio(R, R_new, J, step, W)
        accepted = c > cfg.beta0
        if accepted:
            mu = trial
            R, J = residuals_and_jacobian(problem, mu)
            if c >= cfg.beta1:
                lam /= 2.0
        else:
            lam *= 2.0
        n += 1
        trace.append(TraceRow(n, mu.copy(), lam, float(np.linalg.norm(sW * R)), c, accepted,
                              float(np.linalg.norm(step))))
        step = _project(mu + solve_normal_equations(J, W, R, lam), cfg) - mu
    converged = np.linalg.norm(step) <= cfg.eps_min
    if not converged and strict:
        raise MaxIterations(f"no convergence within {cfg.n_max} iterations; best mu={mu.tolist()}")
    return CalibrationResult(mu, bool(converged), n, weighted_rmse(R, W), trace, norm0)


def check_trace(result: CalibrationResult, cfg: LMConfig) -> None:
    """Assert the damping rules on a trace; raises ``AssertionError`` on violation."""
    lam_prev = cfg.lambda0
    norm_prev = result.norm0
    for row in result.trace:
        assert 0 < row.lam <= cfg.lambda0 * 2.0 ** cfg.n_max, row
        if not row.accepted:
            assert row.gain <= cfg.beta0 and row.lam == lam_prev * 2.0, row
        elif row.gain >= cfg.beta1:
            assert row.lam == lam_prev / 2.0, row
        else:
            assert cfg.beta0 < row.gain < cfg.beta1 and row.lam == lam_prev, row
        if row.accepted:
            assert row.norm <= norm_prev * (1 + 1e-12), row
            norm_prev = row.norm
        lam_prev = row.lam
