"""Flat parameter vectors, small differentiable models and the local SGD trainer.

Parameter vectors are plain 1-d ``float64`` numpy arrays. Layer ``i`` is stored
as its weight matrix ``(n_in, n_out)`` flattened row-major, followed by its
bias vector when the model has biases.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, DivergenceError

KINDS = ("logistic_regression", "mlp")
LOSSES = ("cross_entropy", "squared_error")


def as_vector(values) -> np.ndarray:
    w = np.asarray(values, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ConfigError("parameter vector must be a nonempty 1-d sequence")
    return w


def vec_mean(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Coordinatewise arithmetic mean of equally sized vectors."""
    if len(vectors) == 0:
        raise ConfigError("vec_mean of an empty list")
    dim = len(vectors[0])
    if any(len(v) != dim for v in vectors):
        raise ConfigError("vec_mean: dimension mismatch")
    acc = np.array(vectors[0], dtype=np.float64)
    for v in vectors[1:]:
        acc += v
    return acc / len(vectors)


def vec_axpy(w: np.ndarray, d: np.ndarray, scale: float) -> np.ndarray:
    """Return ``w + scale * d``."""
    if len(w) != len(d):
        raise ConfigError(f"vec_axpy: dimension mismatch {len(w)} vs {len(d)}")
    return np.asarray(w, dtype=np.float64) + scale * np.asarray(d, dtype=np.float64)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and loss.

    ``logistic_regression`` takes exactly two layer sizes ``[n_in, n_out]``;
    with ``n_out == 1`` and cross-entropy it is the binary sigmoid model.
    ``mlp`` uses tanh hidden layers. Squared error is ``0.5 * ||yhat - y||^2``
    per sample with one-hot targets (or the raw label when ``n_out == 1``).
    """

    kind: str = "logistic_regression"
    layer_sizes: tuple[int, ...] = (2, 2)
    loss: str = "cross_entropy"
    l2_reg: float = 0.0
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if any(s < 1 for s in self.layer_sizes):
            raise ConfigError("layer sizes must be positive")
        if self.kind == "logistic_regression" and len(self.layer_sizes) != 2:
            raise ConfigError("logistic_regression needs layer_sizes [n_in, n_out]")
        if self.kind == "mlp" and len(self.layer_sizes) < 3:
            raise ConfigError("mlp needs at least one hidden layer")
        if self.l2_reg < 0:
            raise ConfigError("l2_reg must be non-negative")

    @property
    def n_params(self) -> int:
        return sum(a * b + (b if self.bias else 0) for a, b in self._pairs())

    def _pairs(self):
        return zip(self.layer_sizes[:-1], self.layer_sizes[1:])

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """Zeros for logistic regression; scaled Gaussian weights for MLPs."""
        if self.kind == "logistic_regression" or rng is None:
            return np.zeros(self.n_params)
        chunks = []
        for a, b in self._pairs():
            chunks.append(rng.normal(0.0, 1.0 / np.sqrt(a), size=a * b))
            if self.bias:
                chunks.append(np.zeros(b))
        return np.concatenate(chunks)

    def unpack(self, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray | None]]:
        if w.ndim != 1 or len(w) != self.n_params:
            raise ConfigError(f"parameter vector has dim {len(w)}, model expects {self.n_params}")
        layers, pos = [], 0
        for a, b in self._pairs():
            W = w[pos:pos + a * b].reshape(a, b)
            pos += a * b
            bvec = None
            if self.bias:
                bvec = w[pos:pos + b]
                pos += b
            layers.append((W, bvec))
        return layers


def _check_batch(model: ModelSpec, batch: Dataset) -> None:
    if len(batch) == 0:
        raise ConfigError("empty batch")
    if batch.n_features != model.layer_sizes[0]:
        raise ConfigError(
            f"batch has {batch.n_features} features, model expects {model.layer_sizes[0]}"
        )


def _forward(layers, X):
    acts = [X]
    h = X
    for i, (W, b) in enumerate(layers):
        z = h @ W
        if b is not None:
            z = z + b
        if i < len(layers) - 1:
            h = np.tanh(z)
            acts.append(h)
        else:
            h = z
    return acts, h


def _targets(model: ModelSpec, y: np.ndarray, n_out: int) -> np.ndarray:
    if n_out == 1:
        return y.astype(np.float64).reshape(-1, 1)
    if y.max() >= n_out:
        raise ConfigError(f"label {int(y.max())} exceeds model output size {n_out}")
    T = np.zeros((len(y), n_out))
    T[np.arange(len(y)), y] = 1.0
    return T


def _output_loss(model: ModelSpec, out: np.ndarray, y: np.ndarray, need_grad: bool):
    """Mean loss over the batch and its gradient with respect to ``out``."""
    n, n_out = out.shape
    if model.loss == "squared_error":
        diff = out - _targets(model, y, n_out)
        loss = 0.5 * float(np.sum(diff * diff)) / n
        return loss, (diff / n if need_grad else None)
    if n_out == 1:
        z = out[:, 0]
        t = y.astype(np.float64)
        # -[t log s(z) + (1-t) log(1-s(z))] written stably
        loss = float(np.mean(np.logaddexp(0.0, z) - t * z))
        if not need_grad:
            return loss, None
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        return loss, ((s - t) / n).reshape(-1, 1)
    if y.max() >= n_out:
        raise ConfigError(f"label {int(y.max())} exceeds model output size {n_out}")
    shifted = out - out.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - shifted[rows, y]))
    if not need_grad:
        return loss, None
    p = np.exp(shifted - logsum[:, None])
    p[rows, y] -= 1.0
    return loss, p / n


def loss_and_gradient(model: ModelSpec, w: np.ndarray, X: np.ndarray, y: np.ndarray,
                      need_grad: bool = True) -> tuple[float, np.ndarray | None]:
    layers = model.unpack(w)
    acts, out = _forward(layers, X)
    loss, g_out = _output_loss(model, out, y, need_grad)
    if model.l2_reg:
        loss += 0.5 * model.l2_reg * float(w @ w)
    if not need_grad:
        return loss, None
    grads = []
    delta = g_out
    for i in range(len(layers) - 1, -1, -1):
        W, b = layers[i]
        gb = delta.sum(axis=0) if b is not None else None
        grads.append((acts[i].T @ delta, gb))
        if i > 0:
            delta = (delta @ W.T) * (1.0 - acts[i] ** 2)
    flat = []
    for gW, gb in reversed(grads):
        flat.append(gW.ravel())
        if gb is not None:
            flat.append(gb)
    g = np.concatenate(flat)
    if model.l2_reg:
        g += model.l2_reg * w
    return loss, g


def evaluate_loss(model: ModelSpec, w: np.ndarray, batch: Dataset) -> float:
    """Mean loss of ``w`` over ``batch``."""
    _check_batch(model, batch)
    loss, _ = loss_and_gradient(model, as_vector(w), batch.features, batch.labels, need_grad=False)
    return loss


def evaluate_gradient(model: ModelSpec, w: np.ndarray, batch: Dataset,
                      rng: np.random.Generator | None = None,
                      batch_size: int | None = None) -> np.ndarray:
    """Gradient of the mean batch loss.

    With ``rng`` and a ``batch_size`` smaller than the batch, a minibatch is
    drawn without replacement and the stochastic gradient returned instead.
    """
    _check_batch(model, batch)
    X, y = batch.features, batch.labels
    if rng is not None and batch_size is not None and batch_size < len(batch):
        idx = rng.choice(len(batch), size=batch_size, replace=False)
        X, y = X[idx], y[idx]
    _, g = loss_and_gradient(model, as_vector(w), X, y)
    return g


def _labels_from_output(model: ModelSpec, out: np.ndarray) -> np.ndarray:
    if out.shape[1] > 1:
        return out.argmax(axis=1)
    if model.loss == "cross_entropy":
        return (out[:, 0] > 0).astype(np.int64)
    return np.rint(out[:, 0]).astype(np.int64)


def predict(model: ModelSpec, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    _, out = _forward(model.unpack(w), X)
    return _labels_from_output(model, out)


def evaluate(model: ModelSpec, w: np.ndarray, ds: Dataset) -> tuple[float, float]:
    """``(mean loss, accuracy)`` on a dataset."""
    _check_batch(model, ds)
    layers = model.unpack(w)
    # a diverged model reports an infinite loss rather than warning
    with np.errstate(over="ignore", invalid="ignore"):
        _, out = _forward(layers, ds.features)
        loss, _ = _output_loss(model, out, ds.labels, need_grad=False)
        if model.l2_reg:
            loss += 0.5 * model.l2_reg * float(w @ w)
    return loss, float(np.mean(_labels_from_output(model, out) == ds.labels))


@dataclass(frozen=True)
class LocalTrainConfig:
    """Client-side SGD settings.

    ``eta_l`` is a constant step size or one entry per local step. Epoch based
    configurations map to ``Q = epochs * ceil(n_k / batch_size)``, see
    :func:`steps_for_epochs`.
    """

    Q: int = 1
    eta_l: float | tuple[float, ...] = 0.01
    batch_size: int = 32
    prox_mu: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.Q < 1:
            raise ConfigError("Q must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.prox_mu < 0:
            raise ConfigError("prox_mu must be non-negative")
        sched = self.schedule()
        if np.any(sched < 0):
            raise ConfigError("local learning rates must be non-negative")

    def schedule(self) -> np.ndarray:
        """Per-step learning rates, length Q."""
        if np.isscalar(self.eta_l):
            return np.full(self.Q, float(self.eta_l))
        sched = np.asarray(self.eta_l, dtype=np.float64)
        if sched.shape != (self.Q,):
            raise ConfigError(f"eta_l schedule has {sched.size} entries, Q={self.Q}")
        return sched


def steps_for_epochs(epochs: int, n_samples: int, batch_size: int) -> int:
    return epochs * -(-n_samples // batch_size)


def local_train(model: ModelSpec, w_g: np.ndarray, shard: Dataset,
                cfg: LocalTrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Run ``Q`` minibatch SGD steps from ``w_g``; return ``(w_l, w_l - w_g)``.

    Minibatches walk a per-epoch permutation of the shard (the last batch of an
    epoch may be short) and the permutation is redrawn every epoch.
    """
    if len(shard) == 0:
        raise ConfigError("local_train on an empty shard")
    _check_batch(model, shard)
    w_g = as_vector(w_g)
    if len(w_g) != model.n_params:
        raise ConfigError(f"parameter vector has dim {len(w_g)}, model expects {model.n_params}")
    rng = np.random.default_rng(cfg.rng_seed)
    sched = cfg.schedule()
    n = len(shard)
    bs = min(cfg.batch_size, n)
    X, Y = shard.features, shard.labels
    y = w_g.copy()
    perm, pos = None, n
    # overflow is detected explicitly below, so numpy's warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for q in range(cfg.Q):
            if bs == n:
                xb, yb = X, Y
            else:
                if pos >= n:
                    perm, pos = rng.permutation(n), 0
                idx = perm[pos:pos + bs]
                pos += bs
                xb, yb = X[idx], Y[idx]
            _, g = loss_and_gradient(model, y, xb, yb)
            if cfg.prox_mu:
                g = g + cfg.prox_mu * (y - w_g)
            y = y - sched[q] * g
            if not np.all(np.isfinite(y)):
                raise DivergenceError(f"local parameters became non-finite at step {q + 1}",
                                      step=q + 1)
    return y, y - w_g
