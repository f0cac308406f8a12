"""Server-side aggregation: FedAvg, FedAsync, FedBuff and the sliding-window
FedFa variants (parameter and delta transmission).

Each ``*_step`` function takes a :class:`ServerState` and returns a new one;
the input state is never modified.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError
from .params import vec_axpy, vec_mean

STRATEGIES = ("fedavg", "fedasync", "fedbuff", "fedfa_param", "fedfa_delta")
ASYNC_STRATEGIES = ("fedasync", "fedbuff", "fedfa_param", "fedfa_delta")
DELTA_MODES = ("window", "oneshot")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    base_version: int
    payload_params: np.ndarray | None = None
    payload_delta: np.ndarray | None = None
    local_steps: int = 0

    def __post_init__(self):
        if (self.payload_params is None) == (self.payload_delta is None):
            raise ConfigError("ClientUpdate needs exactly one of payload_params / payload_delta")
        if self.base_version < 0:
            raise ConfigError("base_version must be non-negative")

    @property
    def payload(self) -> np.ndarray:
        return self.payload_params if self.payload_params is not None else self.payload_delta

    @property
    def is_delta(self) -> bool:
        return self.payload_delta is not None


@dataclass(frozen=True)
class BufferEntry:
    update: ClientUpdate
    seq: int
    residence: int = 0


class SlidingBuffer:
    """FIFO of at most ``capacity`` entries; push at the back, evict from the front."""

    def __init__(self, capacity: int, entries: Iterable[BufferEntry] = ()):
        if capacity < 1:
            raise ConfigError("buffer capacity K must be >= 1")
        self.capacity = capacity
        self._entries: deque[BufferEntry] = deque(entries)
        if len(self._entries) > capacity:
            raise ConfigError("buffer initialised above capacity")

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    @property
    def full(self) -> bool:
        return len(self._entries) == self.capacity

    def push(self, entry: BufferEntry) -> BufferEntry | None:
        """Append ``entry``; return the evicted front entry if capacity was exceeded."""
        self._entries.append(entry)
        if len(self._entries) > self.capacity:
            return self._entries.popleft()
        return None

    def payloads(self) -> list[np.ndarray]:
        return [e.update.payload for e in self._entries]

    def copy(self) -> SlidingBuffer:
        return SlidingBuffer(self.capacity, self._entries)

    def map(self, fn) -> SlidingBuffer:
        return SlidingBuffer(self.capacity, (fn(e) for e in self._entries))


@dataclass(frozen=True)
class StalenessFn:
    """Weight ``s(tau)``: ``1`` (constant) or ``(1 + tau) ** -a`` (polynomial)."""

    kind: str = "polynomial"
    a: float = 0.5

    def __post_init__(self):
        if self.kind not in ("constant", "polynomial"):
            raise ConfigError(f"unknown staleness function {self.kind!r}")
        if self.a < 0:
            raise ConfigError("polynomial staleness exponent must be non-negative")

    def __call__(self, tau: int) -> float:
        if self.kind == "constant":
            return 1.0
        return float((1.0 + tau) ** -self.a)


@dataclass(frozen=True)
class ServerState:
    """Global model plus strategy bookkeeping.

    ``residence`` maps an arrival sequence number to the number of
    aggregation steps that update has spent in the FedFa-Delta window, and
    ``applied_total`` is the running sum of every increment added to ``w_g``.
    """

    w_g: np.ndarray
    strategy: str = "fedfa_delta"
    K: int = 5
    version: int = 0
    buffer: SlidingBuffer | None = None
    eta_g: float = 1.0
    fedasync_beta: float = 0.5
    staleness_fn: StalenessFn = field(default_factory=StalenessFn)
    delta_mode: str = "window"
    arrivals: int = 0
    residence: dict = field(default_factory=dict)
    applied_total: np.ndarray | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.eta_g < 0:
            raise ConfigError("eta_g must be non-negative")
        if not 0.0 < self.fedasync_beta <= 1.0:
            raise ConfigError("fedasync beta must lie in (0, 1]")
        if self.delta_mode not in DELTA_MODES:
            raise ConfigError(f"unknown delta_mode {self.delta_mode!r}")
        w = np.asarray(self.w_g, dtype=np.float64)
        object.__setattr__(self, "w_g", w)
        if self.buffer is None:
            object.__setattr__(self, "buffer", SlidingBuffer(self.K))
        if self.applied_total is None:
            object.__setattr__(self, "applied_total", np.zeros_like(w))

    @property
    def transmits_delta(self) -> bool:
        return self.strategy in ("fedbuff", "fedfa_delta")

    @property
    def warming_up(self) -> bool:
        """True until the FedFa window has been filled once."""
        return self.strategy.startswith("fedfa") and not self.buffer.full


def _finite(w: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(w)):
        raise DivergenceError(f"global model became non-finite in {where}")
    return w


def _require(update: ClientUpdate, delta: bool, where: str) -> None:
    if update.is_delta != delta:
        want = "payload_delta" if delta else "payload_params"
        raise ConfigError(f"{where} expects {want}")


def staleness_of(state: ServerState, update: ClientUpdate) -> int:
    """Aggregation events since the update's base model was published."""
    tau = state.version - update.base_version
    if tau < 0:
        raise ConfigError(
            f"update from version {update.base_version} is newer than server version {state.version}"
        )
    return tau


def fedavg_aggregate(state: ServerState, updates: Sequence[ClientUpdate]) -> ServerState:
    """Synchronous round: every update must come from the current version.

    Parameter payloads are averaged directly; delta payloads are averaged and
    added to ``w_g``. With ``eta_g == 1`` the two coincide.
    """
    if not updates:
        raise ConfigError("fedavg round with no updates")
    if any(u.base_version != state.version for u in updates):
        raise ConfigError("fedavg barrier violated: updates from mixed base versions")
    modes = {u.is_delta for u in updates}
    if len(modes) != 1:
        raise ConfigError("fedavg round mixes parameter and delta payloads")
    if modes.pop():
        step = vec_mean([u.payload_delta for u in updates])
        w = vec_axpy(state.w_g, step, state.eta_g)
    else:
        mean = vec_mean([u.payload_params for u in updates])
        w = mean if state.eta_g == 1.0 else vec_axpy(state.w_g, mean - state.w_g, state.eta_g)
    _finite(w, "fedavg")
    return replace(
        state,
        w_g=w,
        version=state.version + 1,
        arrivals=state.arrivals + len(updates),
        applied_total=state.applied_total + (w - state.w_g),
    )


def fedasync_step(state: ServerState, update: ClientUpdate) -> ServerState:
    """``w <- (1 - b) w + b w_l`` with ``b = beta * s(staleness)``."""
    _require(update, delta=False, where="fedasync")
    beta_t = state.fedasync_beta * state.staleness_fn(staleness_of(state, update))
    w = _finite((1.0 - beta_t) * state.w_g + beta_t * update.payload_params, "fedasync")
    return replace(
        state,
        w_g=w,
        version=state.version + 1,
        arrivals=state.arrivals + 1,
        applied_total=state.applied_total + (w - state.w_g),
    )


def fedbuff_step(state: ServerState, update: ClientUpdate) -> ServerState:
    """Buffer deltas; once ``K`` are held apply ``eta_g * mean`` and clear."""
    _require(update, delta=True, where="fedbuff")
    buf = state.buffer.copy()
    buf.push(BufferEntry(update, state.arrivals))
    if not buf.full:
        return replace(state, buffer=buf, arrivals=state.arrivals + 1)
    w = _finite(vec_axpy(state.w_g, vec_mean(buf.payloads()), state.eta_g), "fedbuff")
    return replace(
        state,
        w_g=w,
        buffer=SlidingBuffer(state.K),
        version=state.version + 1,
        arrivals=state.arrivals + 1,
        applied_total=state.applied_total + (w - state.w_g),
    )


def fedfa_param_step(state: ServerState, update: ClientUpdate) -> ServerState:
    """Slide the window of received parameters and publish their mean.

    The first ``K - 1`` arrivals only fill the window; from the arrival that
    fills it onwards every arrival evicts the oldest entry (once full) and
    sets ``w_g`` to the window mean. The version advances on every arrival.
    """
    _require(update, delta=False, where="fedfa_param")
    buf = state.buffer.copy()
    buf.push(BufferEntry(update, state.arrivals))
    w = state.w_g
    if buf.full:
        mean = vec_mean(buf.payloads())
        w = mean if state.eta_g == 1.0 else vec_axpy(state.w_g, mean - state.w_g, state.eta_g)
        _finite(w, "fedfa_param")
    return replace(
        state,
        w_g=w,
        buffer=buf,
        version=state.version + 1,
        arrivals=state.arrivals + 1,
        applied_total=state.applied_total + (w - state.w_g),
    )


def fedfa_delta_step(state: ServerState, update: ClientUpdate) -> ServerState:
    """Slide the window of received deltas and add ``eta_g / K`` times their sum.

    In ``window`` mode each update is re-applied at ``eta_g / K`` for every
    step it stays in the window, so a delta resident for ``r`` steps
    contributes ``eta_g * r / K`` of itself; ``residence`` records ``r``.
    In ``oneshot`` mode only the arriving delta is applied, once, at
    ``eta_g / K``.
    """
    _require(update, delta=True, where="fedfa_delta")
    seq = state.arrivals
    buf = state.buffer.copy()
    buf.push(BufferEntry(update, seq))
    residence = dict(state.residence)
    scale = state.eta_g / state.K
    inc = np.zeros_like(state.w_g)
    if state.delta_mode == "oneshot":
        inc = scale * update.payload_delta
        residence[seq] = 1
    else:
        residence[seq] = 0
        if buf.full:
            window = buf.payloads()
            total = window[0].copy()
            for d in window[1:]:
                total += d
            inc = scale * total
            buf = buf.map(lambda e: replace(e, residence=e.residence + 1))
            for e in buf:
                residence[e.seq] = e.residence
    w = _finite(state.w_g + inc, "fedfa_delta")
    return replace(
        state,
        w_g=w,
        buffer=buf,
        version=state.version + 1,
        arrivals=seq + 1,
        residence=residence,
        applied_total=state.applied_total + inc,
    )


_STEPS = {
    "fedasync": fedasync_step,
    "fedbuff": fedbuff_step,
    "fedfa_param": fedfa_param_step,
    "fedfa_delta": fedfa_delta_step,
}


def apply_update(state: ServerState, update: ClientUpdate) -> ServerState:
    """Dispatch one arrival to the asynchronous strategy held in ``state``."""
    try:
        step = _STEPS[state.strategy]
    except KeyError:
        raise ConfigError(f"{state.strategy} is synchronous; use fedavg_aggregate") from None
    return step(state, update)
