"""Deterministic discrete-event simulation of federated training.

Clients draw a delay (local compute plus communication, merged) when they are
dispatched; their update is committed to the server when the virtual clock
reaches ``dispatch_time + delay``. Asynchronous strategies keep ``concurrency``
clients in flight and replace each one as it reports. FedAvg runs rounds with
a barrier: a cohort of ``concurrency`` clients trains from the same model and
the round ends when its slowest member reports.
"""

from __future__ import annotations

import heapq
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, PartitionPlan
from .errors import ConfigError, DivergenceError
from .params import LocalTrainConfig, ModelSpec, evaluate, local_train, steps_for_epochs
from .runlog import RunLog
from .strategies import (
    ClientUpdate,
    ServerState,
    StalenessFn,
    STRATEGIES,
    apply_update,
    fedavg_aggregate,
    staleness_of,
)

log = logging.getLogger(__name__)

DELAY_KINDS = ("lognormal", "pareto", "fixed")


@dataclass(frozen=True)
class DelayModel:
    """Long-tailed client delays in virtual seconds.

    Every client gets a persistent speed multiplier (mean 1) drawn once from
    the chosen distribution, so a few clients are slow for the whole run. Each
    dispatch then multiplies ``mean * multiplier`` by mean-one lognormal noise
    of width ``noise_sigma``.

    ``fixed`` gives deterministic delays: one number for everyone, one number
    per client, or one list per client that is cycled through on successive
    dispatches of that client.
    """

    kind: str = "lognormal"
    mean: float = 10.0
    sigma: float = 1.0
    shape: float = 2.0
    noise_sigma: float = 0.1
    fixed: float | tuple | None = None
    per_client_rate: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in DELAY_KINDS:
            raise ConfigError(f"unknown delay kind {self.kind!r}")
        if not self.mean > 0 or self.sigma < 0 or self.noise_sigma < 0:
            raise ConfigError("delay mean must be positive and widths non-negative")
        if self.kind == "pareto" and not self.shape > 1:
            raise ConfigError("pareto shape must exceed 1 for a finite mean")
        if self.kind == "fixed" and self.fixed is None:
            raise ConfigError("fixed delay model needs 'fixed' values")

    def client_multipliers(self, m: int, rng: np.random.Generator) -> np.ndarray:
        if self.per_client_rate is not None:
            rates = np.asarray(self.per_client_rate, dtype=np.float64)
            if rates.shape != (m,) or np.any(rates <= 0):
                raise ConfigError("per_client_rate needs one positive entry per client")
            return rates
        if self.kind == "lognormal":
            return np.exp(rng.normal(0.0, self.sigma, size=m) - 0.5 * self.sigma ** 2)
        if self.kind == "pareto":
            a = self.shape
            return (1.0 + rng.pareto(a, size=m)) * (a - 1.0) / a
        return np.ones(m)

    def sample(self, client: int, multiplier: float, nth: int, rng: np.random.Generator) -> float:
        """Delay for the ``nth`` dispatch (0-based) of ``client``."""
        if self.kind == "fixed":
            f = self.fixed
            if np.isscalar(f):
                d = float(f)
            else:
                entry = f[client]
                d = float(entry) if np.isscalar(entry) else float(entry[nth % len(entry)])
            d *= multiplier
        else:
            noise = 1.0
            if self.noise_sigma:
                noise = math.exp(rng.normal(0.0, self.noise_sigma) - 0.5 * self.noise_sigma ** 2)
            d = self.mean * multiplier * noise
        if not (d > 0 and math.isfinite(d)):
            raise ConfigError(f"non-positive delay {d} for client {client}")
        return d


@dataclass(frozen=True)
class SimConfig:
    n_clients: int
    concurrency: int
    partition: PartitionPlan
    strategy: str = "fedfa_delta"
    K: int = 5
    eta_g: float = 1.0
    fedasync_beta: float = 0.5
    staleness: StalenessFn = field(default_factory=StalenessFn)
    delta_mode: str = "window"
    fedavg_payload: str = "delta"
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    local_epochs: int | None = None
    delay: DelayModel = field(default_factory=DelayModel)
    eval_every: int = 5
    max_virtual_time: float | None = None
    max_versions: int | None = None
    seed: int = 0
    store_checkpoints: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not 1 <= self.concurrency <= self.n_clients:
            raise ConfigError(
                f"concurrency must lie in [1, n_clients]; got {self.concurrency} of {self.n_clients}"
            )
        if self.partition.n_clients != self.n_clients:
            raise ConfigError(
                f"partition has {self.partition.n_clients} clients, config says {self.n_clients}"
            )
        if self.max_virtual_time is None and self.max_versions is None:
            raise ConfigError("need max_virtual_time and/or max_versions")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.fedavg_payload not in ("delta", "params"):
            raise ConfigError("fedavg_payload must be 'delta' or 'params'")
        if self.strategy in ("fedbuff", "fedfa_param", "fedfa_delta") and self.K > self.concurrency:
            warnings.warn(f"K={self.K} exceeds concurrency {self.concurrency}", stacklevel=2)

    def describe(self) -> dict:
        """JSON-friendly view of the resolved configuration (partition elided)."""
        d = asdict(self)
        d.pop("partition")
        d["partition_alpha"] = self.partition.alpha
        d["partition_seed"] = self.partition.seed
        d["partition_sizes"] = self.partition.sizes()
        return d


@dataclass(order=True)
class SimEvent:
    fire_time: float
    client_id: int
    seq: int
    dispatch_time: float = field(compare=False)
    update: ClientUpdate = field(compare=False)


def sample_replacement(pool: Sequence[int], active_set, rng: np.random.Generator) -> int:
    """Uniformly pick a client from ``pool`` that is not currently active."""
    candidates = sorted(set(pool).difference(active_set))
    if not candidates:
        raise ConfigError("no idle client left to sample")
    return candidates[int(rng.integers(len(candidates)))]


def server_wait_accounting(log: RunLog) -> float:
    """Total barrier idle time (client-seconds); zero for barrier-free strategies."""
    if log.header.get("strategy") != "fedavg":
        return 0.0
    return float(log.summary.get("total_wait", 0.0))


def _train_seed(seed: int, seq: int) -> int:
    return int(np.random.SeedSequence((seed, 0x5EED, seq)).generate_state(1)[0])


class _Run:
    def __init__(self, cfg: SimConfig, model: ModelSpec, shards: list[Dataset], test: Dataset):
        self.cfg, self.model, self.shards, self.test = cfg, model, shards, test
        ss = np.random.SeedSequence(cfg.seed)
        init_ss, speed_ss, sel_ss, noise_ss = ss.spawn(4)
        self.sel_rng = np.random.default_rng(sel_ss)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.multipliers = cfg.delay.client_multipliers(cfg.n_clients, np.random.default_rng(speed_ss))
        w0 = model.init_params(np.random.default_rng(init_ss))
        self.state = ServerState(
            w_g=w0,
            strategy=cfg.strategy,
            K=cfg.K,
            eta_g=cfg.eta_g,
            fedasync_beta=cfg.fedasync_beta,
            staleness_fn=cfg.staleness,
            delta_mode=cfg.delta_mode,
        )
        self.now = 0.0
        self.seq = 0
        self.dispatch_counts = [0] * cfg.n_clients
        self.total_wait = 0.0
        self.buffer_latency = 0.0
        self.pending_arrivals: list[float] = []
        self.stalenesses: list[int] = []
        self.log = RunLog(header={
            "strategy": cfg.strategy,
            "seed": cfg.seed,
            "model": asdict(model),
            "n_params": model.n_params,
            "sim": cfg.describe(),
            "stop": {"max_virtual_time": cfg.max_virtual_time, "max_versions": cfg.max_versions},
        })

    def train(self, client: int) -> tuple[ClientUpdate, float]:
        seq = self.seq
        self.seq += 1
        local = replace(self.cfg.local, rng_seed=_train_seed(self.cfg.seed, seq))
        if self.cfg.local_epochs is not None:
            q = steps_for_epochs(self.cfg.local_epochs, len(self.shards[client]), local.batch_size)
            local = replace(local, Q=q, eta_l=float(np.atleast_1d(local.eta_l)[0]))
        w_l, delta = local_train(self.model, self.state.w_g, self.shards[client], local)
        send_params = self.cfg.strategy in ("fedasync", "fedfa_param") or (
            self.cfg.strategy == "fedavg" and self.cfg.fedavg_payload == "params"
        )
        update = ClientUpdate(
            client_id=client,
            base_version=self.state.version,
            payload_params=w_l if send_params else None,
            payload_delta=None if send_params else delta,
            local_steps=local.Q,
        )
        nth = self.dispatch_counts[client]
        self.dispatch_counts[client] += 1
        delay = self.cfg.delay.sample(client, float(self.multipliers[client]), nth, self.noise_rng)
        return update, delay

    def record(self, staleness: int, active: int) -> None:
        loss, acc = evaluate(self.model, self.state.w_g, self.test)
        rec = {
            "time": self.now,
            "version": self.state.version,
            "arrivals": self.state.arrivals,
            "loss": loss,
            "accuracy": acc,
            "staleness": staleness,
            "wait": self.total_wait,
            "buffer_latency": self.buffer_latency,
            "active": active,
        }
        if self.cfg.store_checkpoints:
            rec["w"] = self.state.w_g.tolist()
        self.log.records.append(rec)

    def done(self) -> bool:
        mv = self.cfg.max_versions
        return mv is not None and self.state.version >= mv

    def past_deadline(self, t: float) -> bool:
        mt = self.cfg.max_virtual_time
        return mt is not None and t > mt

    def run_async(self) -> None:
        cfg = self.cfg
        pool = range(cfg.n_clients)
        heap: list[SimEvent] = []
        active: set[int] = set()

        def dispatch(client: int) -> None:
            update, delay = self.train(client)
            heapq.heappush(heap, SimEvent(self.now + delay, client, self.seq - 1, self.now, update))
            active.add(client)

        for c in self.sel_rng.choice(cfg.n_clients, size=cfg.concurrency, replace=False):
            dispatch(int(c))
        self.record(0, len(active))
        while heap and not self.done() and not self.past_deadline(heap[0].fire_time):
            ev = heapq.heappop(heap)
            self.now = ev.fire_time
            active.discard(ev.client_id)
            tau = staleness_of(self.state, ev.update)
            self.stalenesses.append(tau)
            before = self.state.version
            self.state = apply_update(self.state, ev.update)
            self.log.arrivals.append({
                "seq": ev.seq, "client": ev.client_id, "dispatch_time": ev.dispatch_time,
                "time": ev.fire_time, "base_version": ev.update.base_version,
                "staleness": tau, "version": self.state.version,
            })
            aggregated = self.state.version > before
            if cfg.strategy == "fedbuff":
                self.pending_arrivals.append(self.now)
                if aggregated:
                    self.buffer_latency += sum(self.now - t for t in self.pending_arrivals)
                    self.pending_arrivals.clear()
            dispatch(sample_replacement(pool, active, self.sel_rng))
            if aggregated and self.state.version % cfg.eval_every == 0:
                self.record(tau, len(active))
        self.log.summary["in_flight"] = sorted(
            [ev.seq, ev.client_id, ev.dispatch_time, ev.fire_time] for ev in heap
        )

    def run_fedavg(self) -> None:
        cfg = self.cfg
        self.record(0, 0)
        while not self.done():
            cohort = [int(c) for c in self.sel_rng.choice(cfg.n_clients, size=cfg.concurrency,
                                                          replace=False)]
            start = self.now
            trained = [(c, *self.train(c)) for c in cohort]
            round_time = max(d for _, _, d in trained)
            if self.past_deadline(start + round_time):
                break
            self.now = start + round_time
            self.total_wait += sum(round_time - d for _, _, d in trained)
            base = self.state.version
            self.state = fedavg_aggregate(self.state, [u for _, u, _ in trained])
            for c, u, d in sorted(trained, key=lambda t: (t[2], t[0])):
                self.stalenesses.append(0)
                self.log.arrivals.append({
                    "seq": None, "client": c, "dispatch_time": start, "time": start + d,
                    "base_version": base, "staleness": 0, "version": self.state.version,
                })
            if self.state.version % cfg.eval_every == 0:
                self.record(0, len(cohort))

    def execute(self) -> RunLog:
        summary = self.log.summary
        summary["aborted"] = False
        try:
            if self.cfg.strategy == "fedavg":
                self.run_fedavg()
            else:
                self.run_async()
        except DivergenceError as exc:
            log.warning("run diverged: %s", exc)
            summary["aborted"] = True
            summary["abort_reason"] = str(exc)
            summary["abort_step"] = exc.step
            summary["abort_version"] = self.state.version
            summary["abort_time"] = self.now
        if not self.log.records or self.log.records[-1]["version"] != self.state.version:
            if not summary["aborted"]:
                last = self.stalenesses[-1] if self.stalenesses else 0
                self.record(last, self.cfg.concurrency)
        hist = np.bincount(self.stalenesses) if self.stalenesses else np.zeros(1, dtype=int)
        summary.update({
            "final_time": self.now,
            "final_version": self.state.version,
            "total_arrivals": self.state.arrivals,
            "total_wait": self.total_wait,
            "buffer_latency": self.buffer_latency,
            "tau_max": int(max(self.stalenesses, default=0)),
            "staleness_histogram": hist.tolist(),
            "best_accuracy": max((r["accuracy"] for r in self.log.records), default=None),
        })
        if self.cfg.strategy == "fedfa_delta":
            summary["residence_max"] = max(self.state.residence.values(), default=0)
        return self.log


def run_simulation(cfg: SimConfig, model: ModelSpec, data: Dataset, test: Dataset) -> RunLog:
    """Simulate one training run; the result depends only on the inputs and ``cfg.seed``."""
    shards = cfg.partition.shards(data)
    for k, s in enumerate(shards):
        if len(s) == 0:
            raise ConfigError(f"client {k} has an empty partition")
    return _Run(cfg, model, shards, test).execute()


def run_with_state(cfg: SimConfig, model: ModelSpec, data: Dataset,
                   test: Dataset) -> tuple[RunLog, ServerState]:
    """Like :func:`run_simulation` but also hand back the final server state."""
    run = _Run(cfg, model, cfg.partition.shards(data), test)
    out = run.execute()
    return out, run.state
