"""Fully connected ReLU network in plain numpy.

All weights and biases live in one flat float64 vector laid out layer by
layer as ``W`` (shape ``(fan_in, fan_out)``, row-major) followed by ``b``.
Layers are views into it, which keeps Adam updates and serialization to a
single array operation.
"""
from __future__ import annotations

import json
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError, NonFiniteLoss, UnsupportedVersion

log = logging.getLogger(__name__)

MAGIC = b"DVNN"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden: tuple
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or len(self.hidden) < 1 or min(self.hidden) < 1:
            raise InputError(f"invalid network spec {self}")
        if self.output_dim != 1:
            raise InputError("only a scalar output head is supported")

    @property
    def sizes(self) -> tuple:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_params(self) -> int:
        s = self.sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))


def _views(spec: NetworkSpec, flat):
    """Per-layer ``(W, b)`` views into a flat parameter-shaped vector."""
    Ws, bs = [], []
    off = 0
    s = spec.sizes
    for a, c in zip(s[:-1], s[1:]):
        Ws.append(flat[off:off + a * c].reshape(a, c))
        off += a * c
        bs.append(flat[off:off + c])
        off += c
    return Ws, bs


class Network:
    """Network parameters plus the input standardization of its training data."""

    def __init__(self, spec: NetworkSpec, theta=None, mean=None, std=None, meta=None):
        self.spec = spec
        self.theta = np.zeros(spec.n_params) if theta is None else np.array(theta, dtype=float)
        if self.theta.shape != (spec.n_params,):
            raise InputError(f"expected {spec.n_params} parameters, got {self.theta.shape}")
        d = spec.input_dim
        self.mean = np.zeros(d) if mean is None else np.array(mean, dtype=float)
        self.std = np.ones(d) if std is None else np.array(std, dtype=float)
        if self.mean.shape != (d,) or self.std.shape != (d,) or np.any(self.std <= 0):
            raise InputError("standardization stats must match the input dimension with positive std")
        self.meta = dict(meta or {})
        self._bind()

    def _bind(self):
        self.W, self.b = _views(self.spec, self.theta)

    def copy(self) -> "Network":
        return Network(self.spec, self.theta.copy(), self.mean, self.std, self.meta)

    def standardize(self, x):
        return (x - self.mean) / self.std


@dataclass(frozen=True)
class TrainConfig:
    """Adam and early-stopping settings.

    ``lr_decay < 1`` multiplies the learning rate by that factor whenever the
    validation error has not improved for ``decay_patience`` evaluations
    (reduce on plateau); the default keeps the rate constant.
    """

    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 20
    eval_every: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 1.0
    decay_patience: int = 10

    def __post_init__(self):
        if not 0 < self.lr_decay <= 1 or self.decay_patience < 1:
            raise InputError("need 0 < lr_decay <= 1 and decay_patience >= 1")
        if not self.learning_rate > 0 or self.batch_size < 1 or self.patience < 1:
            raise InputError("need learning_rate > 0, batch_size >= 1, patience >= 1")
        if self.max_epochs < 1 or self.eval_every < 1:
            raise InputError("max_epochs and eval_every must be positive")


def he_init(spec: NetworkSpec, rng: np.random.Generator, mean=None, std=None) -> Network:
    """Weights ``N(0, 2 / fan_in)``, biases exactly zero."""
    net = Network(spec, mean=mean, std=std)
    for W in net.W:
        W[...] = rng.standard_normal(W.shape) * math.sqrt(2.0 / W.shape[0])
    return net


def _check_x(net: Network, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != net.spec.input_dim:
        raise InputError(f"expected inputs of dimension {net.spec.input_dim}, got {x.shape[1]}")
    return x, single


def _forward_std(net: Network, z):
    """Forward pass on standardized inputs; returns output and cached activations."""
    if z.shape[0] == 1:
        # a lone row would go through BLAS gemv, whose rounding differs from the
        # gemm path; evaluating it as two rows keeps batched and single calls bit-identical
        y, acts = _forward_std(net, np.vstack([z, z]))
        return y[:1], [a[:1] for a in acts]
    acts = [z]
    a = z
    last = len(net.W) - 1
    for i, (W, b) in enumerate(zip(net.W, net.b)):
        if i < last:
            a = np.maximum(a @ W + b, 0.0)
        else:
            # the scalar head as a row-wise reduction: BLAS gemv rounding depends on the row count
            a = (a * W[:, 0]).sum(axis=1, keepdims=True) + b
        acts.append(a)
    return a[:, 0], acts


def forward(net: Network, x):
    """Network output for raw (unstandardized) inputs; rows are independent."""
    x, single = _check_x(net, x)
    y, _ = _forward_std(net, net.standardize(x))
    return float(y[0]) if single else y


def _backward(net: Network, acts, dy):
    """Gradient of ``sum(dy * y)`` w.r.t. the flat parameter vector."""
    g = np.empty_like(net.theta)
    views_W, views_b = _views(net.spec, g)
    delta = dy[:, None]
    for i in range(len(net.W) - 1, -1, -1):
        views_W[i][...] = acts[i].T @ delta
        views_b[i][...] = delta.sum(axis=0)
        if i:
            # ReLU derivative, 0 at exactly 0
            delta = (delta @ net.W[i].T) * (acts[i] > 0)
    return g


def loss_and_grads(net: Network, x_batch, y_batch):
    """Mean squared error and its gradient w.r.t. the flat parameter vector.

    Returns
    -------
    mse : float
    grad : ndarray, same layout as ``net.theta``
    """
    x, _ = _check_x(net, x_batch)
    y = np.asarray(y_batch, dtype=float).ravel()
    if y.shape[0] != x.shape[0]:
        raise InputError("batch size mismatch between inputs and targets")
    return _loss_grad_std(net, net.standardize(x), y)


def _loss_grad_std(net: Network, z, y):
    out, acts = _forward_std(net, z)
    r = out - y
    n = y.shape[0]
    mse = float(r @ r / n)
    return mse, _backward(net, acts, 2.0 * r / n)


def split_grads(net: Network, grad):
    """Per-layer ``(dW, db)`` views of a flat gradient."""
    return list(zip(*_views(net.spec, np.asarray(grad))))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta, grad, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One bias-corrected Adam update of ``theta`` in place."""
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1**state.t)
    v_hat = state.v / (1 - beta2**state.t)
    theta -= lr * m_hat / (np.sqrt(v_hat) + eps)


def mse(net: Network, x, y) -> float:
    r = forward(net, x) - np.asarray(y, dtype=float)
    return float(np.mean(r * r))


@dataclass
class History:
    epochs: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    valid_mse: list = field(default_factory=list)
    best_valid: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    seconds: float = 0.0

    def rows(self):
        return list(zip(self.epochs, self.train_mse, self.valid_mse, self.best_valid))


def train(net: Network, dataset, cfg: TrainConfig):
    """Mini-batch Adam with early stopping on the validation split.

    The network's standardization stats are taken from the dataset.  Returns
    a copy holding the best validation snapshot and the training history; the
    input network is left untouched.
    """
    x_tr, y_tr = dataset.part("train")
    x_va, y_va = dataset.part("valid")
    if x_tr.shape[0] == 0 or x_va.shape[0] == 0:
        raise InputError("training needs nonempty train and valid splits")
    work = net.copy()
    work.mean, work.std = np.array(dataset.mean, dtype=float), np.array(dataset.std, dtype=float)
    z_tr, z_va = work.standardize(x_tr), work.standardize(x_va)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros(work.theta.size)
    best = work.copy()
    best_val = math.inf
    hist = History()
    stale = plateau = 0
    lr = cfg.learning_rate
    n = z_tr.shape[0]
    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, g = _loss_grad_std(work, z_tr[idx], y_tr[idx])
            if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                raise NonFiniteLoss(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}; "
                                    f"lr={cfg.learning_rate}, batch_size={cfg.batch_size}")
            total += loss * idx.size
            adam_step(work.theta, g, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
        if epoch % cfg.eval_every and epoch != cfg.max_epochs:
            continue
        val = float(np.mean((_forward_std(work, z_va)[0] - y_va) ** 2))
        if not math.isfinite(val):
            raise NonFiniteLoss(f"non-finite validation loss at epoch {epoch}")
        if val < best_val:
            best_val, best, stale, plateau = val, work.copy(), 0, 0
            hist.best_epoch = epoch
        else:
            stale += 1
            plateau += 1
            if cfg.lr_decay < 1 and plateau >= cfg.decay_patience:
                lr *= cfg.lr_decay
                plateau = 0
        hist.epochs.append(epoch)
        hist.train_mse.append(total / n)
        hist.valid_mse.append(val)
        hist.best_valid.append(best_val)
        log.debug("epoch %d train %.3e valid %.3e", epoch, total / n, val)
        if stale >= cfg.patience:
            hist.stopped_early = True
            break
    hist.seconds = time.perf_counter() - t0
    best.meta = {**best.meta, "best_epoch": hist.best_epoch, "valid_mse": best_val}
    return best, hist


def input_jacobians(net: Network, x):
    """Gradients of the output w.r.t. raw inputs, one row per input row.

    The activation pattern is frozen at ``x``; the chain rule through the
    standardization divides by the training std column-wise.
    """
    x, single = _check_x(net, x)
    _, J = forward_and_jacobian(net, x)
    return J[0] if single else J


def input_jacobian(net: Network, x):
    """Gradient of the output w.r.t. one raw input vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputError("input_jacobian takes a single input vector")
    return input_jacobians(net, x)


def forward_and_jacobian(net: Network, x):
    """Outputs and raw-input Jacobians for a batch, sharing one forward pass."""
    x, _ = _check_x(net, x)
    y, acts = _forward_std(net, net.standardize(x))
    # backpropagate d(out)/d(activation), shape (n, width), layer by layer
    G = np.broadcast_to(net.W[-1][:, 0], (x.shape[0], net.W[-1].shape[0]))
    for i in range(len(net.W) - 1, 0, -1):
        G = (G * (acts[i] > 0)) @ net.W[i - 1].T
    return y, G / net.std


# ------------------------------------------------------------ serialization


def _header(net: Network) -> bytes:
    h = {
        "input_dim": net.spec.input_dim,
        "hidden": list(net.spec.hidden),
        "output_dim": net.spec.output_dim,
        "activation": "relu",
        "weight_layout": "fan_in x fan_out, row-major; W then b per layer",
        "mean": [float(v) for v in net.mean],
        "std": [float(v) for v in net.std],
        "meta": net.meta,
    }
    return json.dumps(h, sort_keys=True).encode("utf-8")


def dumps(net: Network) -> bytes:
    """Serialize to bytes: magic, u32 version, u32 header length, JSON, float64 blob, CRC32."""
    head = _header(net)
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + net.theta.astype("<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes) -> Network:
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError("not a deepvol network file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"network format version {version} not supported (expected {FORMAT_VERSION})")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise FormatError("network file checksum mismatch")
    try:
        h = json.loads(data[12:12 + hlen].decode("utf-8"))
        spec = NetworkSpec(h["input_dim"], tuple(h["hidden"]), h["output_dim"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"bad network header: {exc}") from exc
    blob = data[12 + hlen:-4]
    if len(blob) != 8 * spec.n_params:
        raise FormatError("parameter blob size does not match the header")
    theta = np.frombuffer(blob, dtype="<f8").astype(float)
    return Network(spec, theta, h["mean"], h["std"], h.get("meta"))


def save(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(net))


def load(path) -> Network:
    try:
        with open(path, "rb") as fh:
            return loads(fh.read())
    except OSError as exc:
        raise FormatError(f"cannot read network file {path}: {exc}") from exc
