"""Convergence-bound diagnostics for sliding-window asynchronous aggregation.

The global objective is ``f(w) = (1/m) * sum_k F_k(w)`` over client shards.
Assumption constants are estimated empirically and plugged into the
non-convex rate bound

    2 (f(w0) - f*) / (eta_g * A * T)
    + 3 L^2 Q B (eta_g^2 tau_max^2 + 1) (s_l^2 + s_g^2 + G)
    + (L / 2) * eta_g * B / A * s_l^2

with ``A = sum_q eta_l^(q)`` and ``B = sum_q (eta_l^(q))^2``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .params import ModelSpec, evaluate_loss, loss_and_gradient
from .runlog import RunLog


@dataclass(frozen=True)
class BoundInputs:
    """Estimated constants and optimiser settings for the bound.

    ``L`` is the plain Lipschitz constant of the client gradients;
    ``sigma_l2``, ``sigma_g2`` and ``G`` are already squared quantities
    (local variance, global dissimilarity, squared gradient-norm bound).
    """

    L: float
    sigma_l2: float
    sigma_g2: float
    G: float
    tau_max: float
    eta_g: float = 1.0
    eta_l: tuple[float, ...] = (0.01,)
    Q: int = 1
    K: int = 1
    T: int = 1

    def __post_init__(self):
        vals = (self.L, self.sigma_l2, self.sigma_g2, self.G, self.tau_max, self.eta_g)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ConfigError("bound inputs must be finite and non-negative")
        if self.T < 1 or self.Q < 1 or self.K < 1:
            raise ConfigError("T, Q and K must be >= 1")
        eta = tuple(float(e) for e in np.broadcast_to(np.asarray(self.eta_l, float), (self.Q,)))
        object.__setattr__(self, "eta_l", eta)


def _full_gradient(model: ModelSpec, w: np.ndarray, shard: Dataset) -> np.ndarray:
    return loss_and_gradient(model, w, shard.features, shard.labels)[1]


def global_gradient(model: ModelSpec, w: np.ndarray, shards: Sequence[Dataset]) -> np.ndarray:
    """Gradient of the client-averaged objective."""
    if isinstance(shards, Dataset):
        shards = [shards]
    acc = _full_gradient(model, w, shards[0]).copy()
    for s in shards[1:]:
        acc += _full_gradient(model, w, s)
    return acc / len(shards)


def global_loss(model: ModelSpec, w: np.ndarray, shards: Sequence[Dataset]) -> float:
    if isinstance(shards, Dataset):
        shards = [shards]
    return float(np.mean([evaluate_loss(model, w, s) for s in shards]))


def estimate_bound_inputs(
    model: ModelSpec,
    data_partitions: Sequence[Dataset],
    w_samples: Sequence[np.ndarray],
    rng: np.random.Generator,
    *,
    batch_size: int = 32,
    n_draws: int = 64,
    tau_max: float = 0.0,
    eta_g: float = 1.0,
    eta_l=0.01,
    Q: int = 1,
    K: int = 1,
    T: int = 1,
) -> BoundInputs:
    """Empirical smoothness, variance and gradient-norm constants.

    * ``L``: largest ``||grad F_k(w) - grad F_k(w')|| / ||w - w'||`` over
      clients and probe pairs. The assumption is stated with squared norms on
      both sides; we estimate the usual un-squared constant and square it
      where the bound has ``L^2``.
    * ``sigma_l2``: largest mean ``||g_k - grad F_k||^2`` over ``n_draws``
      minibatches, across clients and probes.
    * ``sigma_g2``: largest ``||grad F_k - grad f||^2``.
    * ``G``: largest ``||grad F_k||^2``.

    Identical probe pairs are skipped.
    """
    ws = [np.asarray(w, dtype=np.float64) for w in w_samples]
    if len(ws) < 2:
        raise ConfigError("need at least two probe points")
    shards = list(data_partitions)
    grads = [[_full_gradient(model, w, s) for s in shards] for w in ws]
    L = 0.0
    for i in range(len(ws)):
        for j in range(i + 1, len(ws)):
            dist = float(np.linalg.norm(ws[i] - ws[j]))
            if dist == 0.0:
                continue
            for k in range(len(shards)):
                L = max(L, float(np.linalg.norm(grads[i][k] - grads[j][k])) / dist)
    sigma_l2 = sigma_g2 = G = 0.0
    for w, gk in zip(ws, grads):
        gbar = np.mean(gk, axis=0)
        for shard, g in zip(shards, gk):
            G = max(G, float(g @ g))
            diff = g - gbar
            sigma_g2 = max(sigma_g2, float(diff @ diff))
            n = len(shard)
            if batch_size >= n:
                continue
            acc = 0.0
            for _ in range(n_draws):
                idx = rng.choice(n, size=batch_size, replace=False)
                gs = loss_and_gradient(model, w, shard.features[idx], shard.labels[idx])[1]
                e = gs - g
                acc += float(e @ e)
            sigma_l2 = max(sigma_l2, acc / n_draws)
    return BoundInputs(L=L, sigma_l2=sigma_l2, sigma_g2=sigma_g2, G=G, tau_max=float(tau_max),
                       eta_g=eta_g, eta_l=eta_l, Q=Q, K=K, T=T)


def probe_points(w0: np.ndarray, rng: np.random.Generator, n: int = 8,
                 scale: float = 1.0, extra: Sequence[np.ndarray] = ()) -> list[np.ndarray]:
    """``n`` Gaussian perturbations of ``w0`` plus any extra points (e.g. checkpoints)."""
    pts = [w0 + scale * rng.standard_normal(len(w0)) for _ in range(n)]
    return pts + [np.asarray(w, dtype=np.float64) for w in extra]


def step_size_ok(b: BoundInputs) -> bool:
    """``eta_g * eta_l^(q) * Q <= 1 / L`` for every local step."""
    if b.L == 0:
        return True
    return b.eta_g * max(b.eta_l) * b.Q <= 1.0 / b.L


def theorem1_terms(b: BoundInputs, f_w0: float, f_star_lower: float) -> tuple[float, float, float]:
    """The three additive terms of the bound (optimisation gap, drift/staleness, noise)."""
    A = float(sum(b.eta_l))
    B = float(sum(e * e for e in b.eta_l))
    if A == 0.0:
        raise ConfigError("local learning rates sum to zero")
    if b.eta_g == 0.0:
        raise ConfigError("global learning rate is zero")
    if not step_size_ok(b):
        warnings.warn("step sizes violate eta_g * eta_l * Q <= 1/L; bound may not hold",
                      RuntimeWarning, stacklevel=3)
    sigma2 = b.sigma_l2 + b.sigma_g2 + b.G
    t1 = 2.0 * (f_w0 - f_star_lower) / (b.eta_g * A * b.T)
    t2 = 3.0 * b.L ** 2 * b.Q * B * (b.eta_g ** 2 * b.tau_max ** 2 + 1.0) * sigma2
    t3 = 0.5 * b.L * b.eta_g * B / A * b.sigma_l2
    return t1, t2, t3


def theorem1_bound(b: BoundInputs, f_w0: float, f_star_lower: float) -> float:
    """Upper bound on the average squared gradient norm over ``T`` versions."""
    return float(sum(theorem1_terms(b, f_w0, f_star_lower)))


def corollary_rates(K: int, T: int, Q: int, c_l: float = 1.0, c_g: float = 1.0,
                    eta_g_power: float = 1.0) -> tuple[float, float]:
    """``eta_l = c_l / (K sqrt(T Q))`` and ``eta_g = c_g * K ** eta_g_power``."""
    return c_l / (K * np.sqrt(T * Q)), c_g * K ** eta_g_power


def corollary_scaling_check(b: BoundInputs, T_grid: Sequence[int], f_gap: float,
                            c_l: float = 1.0, c_g: float = 1.0,
                            eta_g_power: float = 1.0) -> dict:
    """Tabulate the bound along ``T_grid`` with the corollary's step sizes.

    Returns the table plus log-log slopes: ``leading_slope`` is fitted to the
    ``1/sqrt(TQ)`` terms (optimisation gap and noise), ``total_slope`` to the
    whole bound.
    """
    rows = []
    for T in T_grid:
        eta_l, eta_g = corollary_rates(b.K, int(T), b.Q, c_l, c_g, eta_g_power)
        bt = replace(b, T=int(T), eta_l=(eta_l,) * b.Q, eta_g=eta_g)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            t1, t2, t3 = theorem1_terms(bt, f_gap, 0.0)
        sigma2 = b.sigma_l2 + b.sigma_g2 + b.G
        B = b.Q * eta_l ** 2
        stale = 3.0 * b.L ** 2 * b.Q * B * eta_g ** 2 * b.tau_max ** 2 * sigma2
        rows.append({"T": int(T), "eta_l": eta_l, "eta_g": eta_g, "term_gap": t1,
                     "term_drift": t2, "term_staleness": stale, "term_noise": t3,
                     "leading": t1 + t3, "total": t1 + t2 + t3})
    logT = np.log([r["T"] for r in rows])

    def slope(key):
        vals = np.array([r[key] for r in rows])
        if len(rows) < 2 or np.any(vals <= 0):
            return float("nan")
        return float(np.polyfit(logT, np.log(vals), 1)[0])

    return {"rows": rows, "leading_slope": slope("leading"), "total_slope": slope("total")}


def gradient_norm_series(log: RunLog, model: ModelSpec, data) -> np.ndarray:
    """Running mean of ``||grad f(w)||^2`` over the checkpoints stored in ``log``.

    ``data`` is a dataset or a list of client shards (the objective is then
    the client average).
    """
    ckpts = [r.get("w") for r in log.records]
    if not ckpts or any(w is None for w in ckpts):
        raise ValueError("run log has no stored checkpoints (enable store_checkpoints)")
    sq = np.array([float(np.sum(global_gradient(model, np.asarray(w), data) ** 2)) for w in ckpts])
    return np.cumsum(sq) / np.arange(1, len(sq) + 1)


def estimate_f_star(model: ModelSpec, shards, w0: np.ndarray, steps: int = 2000,
                    lr: float | None = None) -> float:
    """Lower estimate of ``min f`` by long full-batch gradient descent.

    Only meaningful for convex models; returns the smallest loss seen.
    """
    w = np.asarray(w0, dtype=np.float64).copy()
    if lr is None:
        lr = 0.5
    best = global_loss(model, w, shards)
    for _ in range(steps):
        w = w - lr * global_gradient(model, w, shards)
        best = min(best, global_loss(model, w, shards))
    return best
