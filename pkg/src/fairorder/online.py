"""Streaming sequencer: buffer arrivals, track per-client watermarks, emit batches once safe.

A batch is released at a clock tick only when

* the sequencer clock has reached the batch's safe emission time ``T_b``
  (the latest member's ``p_safe`` upper confidence bound on its true time), and
* every client's conservative watermark (its highest local timestamp shifted by
  the ``1 - p_safe`` offset quantile) has passed ``T_b``, so with high
  confidence nothing still in flight belongs in or before the batch.

Emitted batches are final.  An arrival that is not confidently later than an
already emitted message is counted as a violation and sequenced into a later
batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

from .clock_stats import (
    ClockModel,
    GaussianOffset,
    difference_pdf,
    offset_cdf,
    offset_quantile,
    preceding_prob_gaussian,
    tail_probability,
)
from .errors import ProtocolError, TieError, WatermarkNotEstablished
from .fair_order import DEFAULT_THRESHOLD, Message, SequencedOutput, sequence

logger = logging.getLogger(__name__)

DEFAULT_P_SAFE = 0.999
DEFAULT_SAFE_TOL = 1e-3


@dataclass(frozen=True)
class MessageArrival:
    message: Message


@dataclass(frozen=True)
class Heartbeat:
    client: str
    local_ts: float


@dataclass(frozen=True)
class ClockTick:
    now: float


Event = Union[MessageArrival, Heartbeat, ClockTick]


@dataclass(frozen=True)
class OnlineConfig:
    threshold: float = DEFAULT_THRESHOLD
    p_safe: float = DEFAULT_P_SAFE
    resolution: float = 1.0
    clients: tuple[str, ...] | None = None  # None: every client that has a model
    max_wait: float | None = None  # force-emit once now >= T_b + max_wait; None disables
    safe_tol: float = DEFAULT_SAFE_TOL  # bisection width for safe_time

    def __post_init__(self) -> None:
        if not 0.5 <= self.threshold < 1.0:
            raise ValueError(f"threshold must lie in [0.5, 1), got {self.threshold}")
        if not 0.5 < self.p_safe < 1.0:
            raise ValueError(f"p_safe must lie in (0.5, 1), got {self.p_safe}")
        if self.max_wait is not None and self.max_wait < 0:
            raise ValueError("max_wait must be nonnegative")


@dataclass(frozen=True)
class EmittedBatch:
    rank: int
    ids: tuple[str, ...]
    emit_time: float
    forced: bool = False


def safe_time(m: Message, model: ClockModel, p_safe: float = DEFAULT_P_SAFE, tol: float = DEFAULT_SAFE_TOL) -> float:
    """Smallest sequencer time ``T`` (to within *tol*) with ``P(T_m* < T) > p_safe``.

    Bisection over future timestamps, started from the ``p_safe`` offset quantile.
    """
    if not 0.5 < p_safe < 1.0:
        raise ValueError(f"p_safe must lie in (0.5, 1), got {p_safe}")
    if not tol > 0:
        raise ValueError("tol must be positive")

    def confident(T: float) -> bool:
        return offset_cdf(model, T - m.local_ts, strict=True) > p_safe

    lo = m.local_ts + offset_quantile(model, p_safe)
    if confident(lo):
        return lo
    step = tol
    hi = lo + step
    for _ in range(200):
        if confident(hi):
            break
        lo, step = hi, 2.0 * step
        hi = lo + step
    else:
        raise ArithmeticError(f"could not bracket the safe time of {m.id!r}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if confident(mid):
            hi = mid
        else:
            lo = mid
    return hi


def batch_emission_time(
    batch: Sequence[Message],
    models: Mapping[str, ClockModel],
    p_safe: float = DEFAULT_P_SAFE,
    tol: float = DEFAULT_SAFE_TOL,
) -> float:
    """``T_b``: the latest safe time over the batch members."""
    if not batch:
        raise ValueError("batch emission time of an empty batch")
    return max(safe_time(m, models[m.client], p_safe, tol) for m in batch)


def conservative_watermark(
    watermarks: Mapping[str, float],
    models: Mapping[str, ClockModel],
    p_safe: float = DEFAULT_P_SAFE,
    clients: Sequence[str] | None = None,
) -> float:
    """Lower confidence bound, in sequencer time, on the true time of any future message.

    ``min`` over clients of ``watermark_c + offset_quantile(model_c, 1 - p_safe)``.
    """
    clients = list(models) if clients is None else list(clients)
    missing = [c for c in clients if c not in watermarks]
    if missing:
        raise WatermarkNotEstablished(f"no watermark yet for client(s) {', '.join(map(str, missing))}")
    if not clients:
        raise WatermarkNotEstablished("empty client set")
    return min(watermarks[c] + offset_quantile(models[c], 1.0 - p_safe) for c in clients)


@dataclass
class SequencerState:
    buffer: dict[str, Message] = field(default_factory=dict)
    watermarks: dict[str, float] = field(default_factory=dict)
    emitted: list[EmittedBatch] = field(default_factory=list)
    now: float | None = None
    violations: list[str] = field(default_factory=list)
    forced: int = 0

    @property
    def max_rank(self) -> int:
        return self.emitted[-1].rank if self.emitted else -1


class OnlineSequencer:
    """Single-threaded event loop over :data:`Event` values.

    The buffered set is re-sequenced from scratch whenever it has changed and a
    tick needs the batch structure (arrivals only mark it stale).
    """

    def __init__(self, models: Mapping[str, ClockModel], config: OnlineConfig | None = None):
        self.models = dict(models)
        self.config = config or OnlineConfig()
        self.clients = tuple(self.config.clients) if self.config.clients is not None else tuple(self.models)
        unknown = [c for c in self.clients if c not in self.models]
        if unknown:
            raise ValueError(f"client set names clients without a model: {unknown}")
        self.state = SequencerState()
        self._plan: SequencedOutput | None = None
        self._safe: dict[str, float] = {}
        self._seen: set[str] = set()
        # emitted messages whose safe time is still above the conservative watermark
        self._recent: list[tuple[float, Message]] = []
        self._pdfs: dict[tuple[str, str], object] = {}

    # -- queries -----------------------------------------------------------

    @property
    def emitted(self) -> list[EmittedBatch]:
        return self.state.emitted

    @property
    def violations(self) -> list[str]:
        return self.state.violations

    def watermark(self) -> float:
        return conservative_watermark(self.state.watermarks, self.models, self.config.p_safe, self.clients)

    def open_batches(self) -> SequencedOutput:
        if self._plan is None:
            cfg = self.config
            self._plan = sequence(list(self.state.buffer.values()), self.models, cfg.threshold, cfg.resolution)
        return self._plan

    def safe_time_of(self, m: Message) -> float:
        st = self._safe.get(m.id)
        if st is None:
            st = safe_time(m, self.models[m.client], self.config.p_safe, self.config.safe_tol)
            self._safe[m.id] = st
        return st

    # -- event handling ----------------------------------------------------

    def ingest(self, event: Event) -> list[EmittedBatch]:
        """Apply one event; returns the batches it caused to be emitted (possibly none)."""
        if isinstance(event, MessageArrival):
            self._on_message(event.message)
            return []
        if isinstance(event, Heartbeat):
            self._advance(event.client, event.local_ts)
            return []
        if isinstance(event, ClockTick):
            return self._on_tick(event.now)
        raise TypeError(f"unknown event {event!r}")

    def run(self, events) -> list[EmittedBatch]:
        out: list[EmittedBatch] = []
        for ev in events:
            out.extend(self.ingest(ev))
        return out

    def _advance(self, client: str, local_ts: float) -> None:
        if client not in self.models or client not in self.clients:
            raise ProtocolError(f"unknown client {client!r}")
        prev = self.state.watermarks.get(client)
        if prev is not None and local_ts < prev:
            raise ProtocolError(f"client {client!r} went backwards from {prev} to {local_ts}")
        self.state.watermarks[client] = local_ts

    def _on_message(self, m: Message) -> None:
        if m.id in self._seen:
            raise ProtocolError(f"duplicate message id {m.id!r}")
        self._advance(m.client, m.local_ts)
        self._seen.add(m.id)
        if self._is_late(m):
            logger.debug("late arrival %s after emitted rank %d", m.id, self.state.max_rank)
            self.state.violations.append(m.id)
        self.state.buffer[m.id] = m
        self._plan = None

    def _prob(self, a: Message, b: Message) -> float:
        ca, cb = self.models[a.client], self.models[b.client]
        if isinstance(ca, GaussianOffset) and isinstance(cb, GaussianOffset):
            try:
                return preceding_prob_gaussian(a.local_ts, b.local_ts, ca, cb)
            except TieError:
                return 0.5
        key = (a.client, b.client)
        pdf = self._pdfs.get(key)
        if pdf is None:
            pdf = self._pdfs[key] = difference_pdf(ca, cb, self.config.resolution)
        return tail_probability(pdf, a.local_ts - b.local_ts)

    def _is_late(self, m: Message) -> bool:
        thr = self.config.threshold
        return any(self._prob(e, m) <= thr for _, e in self._recent)

    def _prune_recent(self) -> None:
        p = self.config.p_safe
        # sound only while p_safe**2 exceeds the threshold: then every future arrival
        # precedes-probability-dominates anything whose safe time is below the watermark
        if p * p <= self.config.threshold or not self._recent:
            return
        try:
            w = self.watermark()
        except WatermarkNotEstablished:
            return
        self._recent = [(st, e) for st, e in self._recent if st > w]

    def _on_tick(self, now: float) -> list[EmittedBatch]:
        st = self.state
        if st.now is not None and now < st.now:
            raise ProtocolError(f"sequencer clock went backwards from {st.now} to {now}")
        st.now = now
        if not st.buffer:
            return []
        try:
            w: float | None = self.watermark()
        except WatermarkNotEstablished:
            w = None
        max_wait = self.config.max_wait

        out: list[EmittedBatch] = []
        for batch in self.open_batches().batches:
            members = [st.buffer[mid] for mid in batch.ids]
            t_b = max(self.safe_time_of(m) for m in members)
            if now >= t_b and w is not None and w >= t_b:
                forced = False
            elif max_wait is not None and now >= t_b + max_wait:
                forced = True
            else:
                break
            eb = EmittedBatch(st.max_rank + 1, batch.ids, now, forced)
            st.emitted.append(eb)
            st.forced += forced
            out.append(eb)
            for m in members:
                self._recent.append((self.safe_time_of(m), m))

        if out:
            for eb in out:
                for mid in eb.ids:
                    del st.buffer[mid]
                    self._safe.pop(mid, None)
            self._plan = None
        self._prune_recent()
        return out
