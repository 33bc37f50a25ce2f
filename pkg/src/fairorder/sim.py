"""Seeded workloads with ground truth, baseline sequencers and the rank agreement score."""

from __future__ import annotations

import heapq
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .clock_stats import (
    ClockModel,
    GaussianOffset,
    model_from_dict,
    offset_mean,
    offset_std,
)
from .fair_order import DEFAULT_THRESHOLD, Message, sequence
from .online import DEFAULT_P_SAFE, ClockTick, Heartbeat, MessageArrival, OnlineConfig, OnlineSequencer

logger = logging.getLogger(__name__)

SEQUENCERS = ("tommy", "truetime", "wfo")
CSV_COLUMNS = (
    "trial",
    "seed",
    "n_clients",
    "sigma_scale",
    "mean_gap_us",
    "threshold",
    "p_safe",
    "ras_tommy",
    "ras_truetime",
    "ras_wfo",
    "batches_tommy",
    "violations_online",
)


class ConfigError(ValueError):
    """Invalid simulation configuration; the message names the offending field."""


@dataclass(frozen=True)
class SimConfig:
    n_clients: int = 50
    n_messages_per_client: int = 20
    # per-client std drawn uniformly from sigma_range, then multiplied by sigma_scale
    sigma_range: tuple[float, float] = (0.5, 1.5)
    sigma_scale: float = 1.0
    mean_range: tuple[float, float] = (0.0, 0.0)
    # explicit serialized models per client override the generator
    models: Mapping[str, Mapping[str, Any]] | None = None
    mean_gap_us: float = 1.0  # between consecutive messages across all clients
    gap_model: str = "exponential"  # or "fixed"
    threshold: float = DEFAULT_THRESHOLD
    p_safe: float = DEFAULT_P_SAFE
    resolution: float = 1.0
    seed: int = 0
    baselines: tuple[str, ...] = SEQUENCERS
    mode: str = "offline"  # or "online"
    network_delay_us: float = 0.0
    network_jitter_us: float = 0.0  # mean of the exponential extra delay
    heartbeat_interval_us: float | None = None  # None: max(largest std, mean_gap_us)
    tick_interval_us: float | None = None  # None: same as the heartbeat interval

    def __post_init__(self) -> None:
        def bad(name: str, why: str) -> ConfigError:
            return ConfigError(f"{name}: {why}")

        if int(self.n_clients) != self.n_clients or self.n_clients < 1:
            raise bad("n_clients", "must be a positive integer")
        if int(self.n_messages_per_client) != self.n_messages_per_client or self.n_messages_per_client < 0:
            raise bad("n_messages_per_client", "must be a nonnegative integer")
        lo, hi = self.sigma_range
        if not 0 <= lo <= hi:
            raise bad("sigma_range", "need 0 <= low <= high")
        if not self.sigma_scale >= 0:
            raise bad("sigma_scale", "must be >= 0")
        if not self.mean_range[0] <= self.mean_range[1]:
            raise bad("mean_range", "need low <= high")
        if not self.mean_gap_us > 0:
            raise bad("mean_gap_us", "must be > 0 so ground-truth times are distinct")
        if self.gap_model not in ("exponential", "fixed"):
            raise bad("gap_model", "must be 'exponential' or 'fixed'")
        if not 0.5 <= self.threshold < 1:
            raise bad("threshold", "must lie in [0.5, 1)")
        if not 0.5 < self.p_safe < 1:
            raise bad("p_safe", "must lie in (0.5, 1)")
        if not self.resolution > 0:
            raise bad("resolution", "must be > 0")
        unknown = set(self.baselines) - set(SEQUENCERS)
        if unknown:
            raise bad("baselines", f"unknown sequencer(s) {sorted(unknown)}")
        if self.mode not in ("offline", "online"):
            raise bad("mode", "must be 'offline' or 'online'")
        if self.network_delay_us < 0 or self.network_jitter_us < 0:
            raise bad("network_delay_us", "delays must be >= 0")
        for name in ("heartbeat_interval_us", "tick_interval_us"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise bad(name, "must be > 0")
        if self.models is not None and len(self.models) != self.n_clients:
            raise bad("models", f"expected {self.n_clients} client models, got {len(self.models)}")

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "SimConfig":
        names = {f.name for f in fields(cls)}
        extra = set(obj) - names
        if extra:
            raise ConfigError(f"{sorted(extra)[0]}: unknown config field")
        kw = dict(obj)
        for key in ("sigma_range", "mean_range", "baselines"):
            if key in kw:
                kw[key] = tuple(kw[key])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for key in ("sigma_range", "mean_range", "baselines"):
            d[key] = list(d[key])
        if self.models is not None:
            d["models"] = {k: dict(v) for k, v in self.models.items()}
        return d


@dataclass
class TrialResult:
    trial: int
    seed: int
    config: SimConfig
    ras: dict[str, int | None]
    max_ras: int
    n_messages: int
    batches_tommy: int | None = None
    mean_batch_size: float | None = None
    violations_online: int | None = None
    late_inversions: int | None = None  # arrivals whose true time precedes an already emitted message
    forced_online: int | None = None
    unemitted_online: int | None = None
    wall_time: float = 0.0

    def to_row(self) -> dict[str, Any]:
        c = self.config
        return {
            "trial": self.trial,
            "seed": self.seed,
            "n_clients": c.n_clients,
            "sigma_scale": c.sigma_scale,
            "mean_gap_us": c.mean_gap_us,
            "threshold": c.threshold,
            "p_safe": c.p_safe,
            "ras_tommy": self.ras.get("tommy"),
            "ras_truetime": self.ras.get("truetime"),
            "ras_wfo": self.ras.get("wfo"),
            "batches_tommy": self.batches_tommy,
            "violations_online": self.violations_online,
        }


def trial_rng(seed: int, trial: int, stream: int = 0) -> np.random.Generator:
    """Generator owned by one trial; *stream* separates independent uses within it."""
    key = [int(seed), int(trial)] + ([int(stream)] if stream else [])
    return np.random.default_rng(np.random.SeedSequence(key))


def client_ids(n: int) -> list[str]:
    width = max(3, len(str(n - 1)))
    return [f"c{k:0{width}d}" for k in range(n)]


def sample_offsets(model: ClockModel, rng: np.random.Generator, size: int) -> np.ndarray:
    if isinstance(model, GaussianOffset):
        return model.mean + model.std * rng.standard_normal(size)
    # inverse of the piecewise-linear CDF; side="left" never lands on a zero-mass bin
    u = np.maximum(rng.random(size), 1e-300)
    cdf, edges = model.cdf, model.bin_edges
    k = np.searchsorted(cdf, u, side="left")
    lo_c, hi_c = cdf[k - 1], cdf[k]
    return edges[k - 1] + (u - lo_c) / (hi_c - lo_c) * (edges[k] - edges[k - 1])


def make_models(cfg: SimConfig, rng: np.random.Generator) -> dict[str, ClockModel]:
    if cfg.models is not None:
        return {str(c): model_from_dict(v) for c, v in cfg.models.items()}
    ids = client_ids(cfg.n_clients)
    sig = cfg.sigma_scale * rng.uniform(*cfg.sigma_range, size=cfg.n_clients)
    mu = rng.uniform(*cfg.mean_range, size=cfg.n_clients)
    return {c: GaussianOffset(float(m), float(s)) for c, m, s in zip(ids, mu, sig)}


def generate_workload(cfg: SimConfig, trial: int = 0) -> tuple[list[Message], dict[str, ClockModel]]:
    """Messages with ground truth for one trial, plus the client models they were drawn from.

    Generation instants form one stream across clients (``mean_gap_us`` apart) and
    each client owns ``n_messages_per_client`` of them.  A client whose offset at
    that instant is ``theta`` stamps ``local_ts = true_ts - theta``, so that
    ``true_ts = local_ts + theta`` as the sequencer models it.
    """
    rng = trial_rng(cfg.seed, trial)
    models = make_models(cfg, rng)
    ids = list(models)
    n = cfg.n_clients * cfg.n_messages_per_client
    if cfg.gap_model == "exponential":
        gaps = cfg.mean_gap_us * rng.standard_exponential(n)
    else:
        gaps = np.full(n, cfg.mean_gap_us)
    true_ts = np.cumsum(gaps)
    owners = rng.permutation(np.repeat(np.arange(cfg.n_clients), cfg.n_messages_per_client))
    theta = np.empty(n)
    for k, c in enumerate(ids):
        sel = np.flatnonzero(owners == k)
        theta[sel] = sample_offsets(models[c], rng, sel.size)
    local = true_ts - theta
    counters = [0] * cfg.n_clients
    messages = []
    for idx in range(n):
        k = int(owners[idx])
        messages.append(Message(f"{ids[k]}-{counters[k]:04d}", ids[k], float(local[idx]), float(true_ts[idx])))
        counters[k] += 1
    return messages, models


# ---------------------------------------------------------------------------
# baselines and scoring
# ---------------------------------------------------------------------------


def truetime_rank(
    messages: Sequence[Message], models: Mapping[str, ClockModel], width: float = 3.0
) -> dict[str, int]:
    """Rank by uncertainty intervals ``local + mean +/- width * std``; overlapping intervals share a rank.

    Overlap is closed transitively: sorted by left endpoint, an interval joins the
    current group when it starts at or before the group's rightmost end.
    """
    if not messages:
        return {}
    center = np.array([m.local_ts + offset_mean(models[m.client]) for m in messages])
    half = np.array([width * offset_std(models[m.client]) for m in messages])
    left, right = center - half, center + half
    order = np.lexsort((right, left))
    ranks: dict[str, int] = {}
    rank, reach = -1, -math.inf
    for k in order:
        if left[k] > reach:
            rank += 1
            reach = right[k]
        else:
            reach = max(reach, right[k])
        ranks[messages[k].id] = rank
    return ranks


def wfo_order(streams: Mapping[str, Sequence[Message]]) -> list[str]:
    """Waits-for-one: with a head from every live client, release the smallest timestamp.

    Each stream is one client's messages in channel order; an exhausted stream stops
    being waited for.  Equal timestamps go to the smaller client id.
    """
    heads = [(s[0].local_ts, c, 0) for c, s in streams.items() if s]
    heapq.heapify(heads)
    out = []
    while heads:
        _, c, k = heapq.heappop(heads)
        out.append(streams[c][k].id)
        if k + 1 < len(streams[c]):
            heapq.heappush(heads, (streams[c][k + 1].local_ts, c, k + 1))
    return out


def wfo_rank(messages: Sequence[Message]) -> dict[str, int]:
    """WFO ranks with each client's messages fed in local-timestamp order."""
    streams: dict[str, list[Message]] = {}
    for m in sorted(messages, key=lambda m: (m.local_ts, m.id)):
        streams.setdefault(m.client, []).append(m)
    return {mid: r for r, mid in enumerate(wfo_order(streams))}


def ras(ranks: Mapping[str, int], truth: Mapping[str, float]) -> int:
    """Rank agreement score: +1 per pair ranked in true order, -1 per inverted pair, 0 per shared rank."""
    missing = set(truth) ^ set(ranks)
    if missing:
        raise KeyError(f"rank/truth mismatch for id(s) {sorted(missing)[:5]}")
    ids = list(truth)
    t = np.array([truth[i] for i in ids], dtype=np.float64)
    if np.unique(t).size != t.size:
        raise ValueError("ground-truth timestamps must be distinct")
    r = np.array([ranks[i] for i in ids], dtype=np.int64)[np.argsort(t, kind="stable")]
    total = 0
    chunk = 2048
    for start in range(0, r.size, chunk):
        rows = r[start : start + chunk]
        # pairs (i, j) with i in this chunk and j after i in true order
        diff = np.sign(r[None, :] - rows[:, None])
        mask = np.arange(r.size)[None, :] > np.arange(start, start + rows.size)[:, None]
        total += int(diff[mask].sum())
    return total


# ---------------------------------------------------------------------------
# online driver
# ---------------------------------------------------------------------------


def _online_intervals(cfg: SimConfig, models: Mapping[str, ClockModel]) -> tuple[float, float]:
    biggest = max(offset_std(m) for m in models.values())
    hb = cfg.heartbeat_interval_us or max(biggest, cfg.mean_gap_us)
    tick = cfg.tick_interval_us or hb
    return hb, tick


def build_online_events(
    messages: Sequence[Message],
    models: Mapping[str, ClockModel],
    cfg: SimConfig,
    rng: np.random.Generator,
) -> list[tuple[float, Any]]:
    """Timed event stream for the online sequencer, sorted by arrival time.

    Each client interleaves its messages with periodic heartbeats, sends every
    reading in local-timestamp order (a reading leaves no earlier than its true
    time) and the channel adds ``network_delay_us`` plus exponential jitter while
    preserving per-client FIFO order.  Ticks run at the sequencer clock.
    """
    hb, tick = _online_intervals(cfg, models)
    spread = max(offset_std(m) for m in models.values())
    shift = max(abs(offset_mean(m)) for m in models.values())
    last = max((m.true_ts for m in messages), default=0.0)
    margin = 2 * (8 * spread + shift) + 10 * (cfg.network_delay_us + cfg.network_jitter_us) + 3 * max(hb, tick)
    horizon = last + margin

    by_client: dict[str, list[Message]] = {c: [] for c in models}
    for m in messages:
        by_client[m.client].append(m)

    timed: list[tuple[float, int, str, int, Any]] = []
    hb_times = np.arange(0.0, horizon + hb, hb)
    for c, model in models.items():
        hb_local = hb_times - sample_offsets(model, rng, hb_times.size)
        readings = [(m.local_ts, m.true_ts, 0, m) for m in by_client[c]]
        readings += [(float(lt), float(tt), 1, None) for lt, tt in zip(hb_local, hb_times)]
        readings.sort(key=lambda r: (r[0], r[2]))
        depart = np.maximum.accumulate(np.array([r[1] for r in readings]))
        delay = cfg.network_delay_us + cfg.network_jitter_us * rng.standard_exponential(len(readings))
        arrive = np.maximum.accumulate(depart + delay)
        for seq, ((lt, _, kind, m), at) in enumerate(zip(readings, arrive)):
            ev = MessageArrival(m) if kind == 0 else Heartbeat(c, lt)
            timed.append((float(at), 0, c, seq, ev))
    end = max(t[0] for t in timed) + margin
    for k, now in enumerate(np.arange(0.0, end + tick, tick)):
        timed.append((float(now), 1, "", k, ClockTick(float(now))))
    timed.sort(key=lambda t: t[:4])
    return [(t[0], t[4]) for t in timed]


@dataclass
class OnlineOutcome:
    ranks: dict[str, int]
    batches: int
    violations: int
    late_inversions: int
    forced: int
    unemitted: int


def run_online(
    messages: Sequence[Message],
    models: Mapping[str, ClockModel],
    cfg: SimConfig,
    rng: np.random.Generator,
) -> OnlineOutcome:
    seq = OnlineSequencer(
        models, OnlineConfig(threshold=cfg.threshold, p_safe=cfg.p_safe, resolution=cfg.resolution)
    )
    truth = {m.id: m.true_ts for m in messages}
    emitted_max_true = -math.inf
    late = 0
    for _, ev in build_online_events(messages, models, cfg, rng):
        if isinstance(ev, MessageArrival) and ev.message.true_ts < emitted_max_true:
            late += 1
        for b in seq.ingest(ev):
            emitted_max_true = max(emitted_max_true, max(truth[i] for i in b.ids))
    ranks = {mid: b.rank for b in seq.emitted for mid in b.ids}
    unemitted = len(seq.state.buffer)
    batches = len(seq.emitted)
    if unemitted:
        logger.warning("%d message(s) never became safe to emit; ranking them after the last batch", unemitted)
        rest = seq.open_batches()
        base = seq.state.max_rank + 1
        for b in rest.batches:
            for mid in b.ids:
                ranks[mid] = base + b.rank
        batches += len(rest.batches)
    return OnlineOutcome(ranks, batches, len(seq.violations), late, seq.state.forced, unemitted)


# ---------------------------------------------------------------------------
# trials and sweeps
# ---------------------------------------------------------------------------


def run_trial(cfg: SimConfig, trial: int = 0) -> TrialResult:
    start = time.perf_counter()
    messages, models = generate_workload(cfg, trial)
    truth = {m.id: m.true_ts for m in messages}
    n = len(messages)
    res = TrialResult(trial, cfg.seed, cfg, {}, n * (n - 1) // 2, n)
    if "tommy" in cfg.baselines:
        if cfg.mode == "offline":
            out = sequence(messages, models, cfg.threshold, cfg.resolution)
            ranks = out.ranks()
            res.batches_tommy = len(out.batches)
        else:
            # a separate stream keeps the workload identical to the offline mode
            outcome = run_online(messages, models, cfg, trial_rng(cfg.seed, trial, stream=1))
            ranks = outcome.ranks
            res.batches_tommy = outcome.batches
            res.violations_online = outcome.violations
            res.late_inversions = outcome.late_inversions
            res.forced_online = outcome.forced
            res.unemitted_online = outcome.unemitted
        res.ras["tommy"] = ras(ranks, truth)
        res.mean_batch_size = n / res.batches_tommy if res.batches_tommy else None
    if "truetime" in cfg.baselines:
        res.ras["truetime"] = ras(truetime_rank(messages, models), truth)
    if "wfo" in cfg.baselines:
        res.ras["wfo"] = ras(wfo_rank(messages), truth)
    res.wall_time = time.perf_counter() - start
    return res


@dataclass(frozen=True)
class Sweep:
    """A grid of std scales and mean gaps, each point run for ``trials`` seeded trials."""

    base: SimConfig = field(default_factory=SimConfig)
    sigma_scales: tuple[float, ...] = (1.0,)
    mean_gaps_us: tuple[float, ...] = (1.0,)
    trials: int = 1

    def points(self) -> list[tuple[SimConfig, int]]:
        return [
            (replace(self.base, sigma_scale=float(s), mean_gap_us=float(g)), t)
            for s in self.sigma_scales
            for g in self.mean_gaps_us
            for t in range(self.trials)
        ]


def _run_point(point: tuple[SimConfig, int]) -> TrialResult:
    return run_trial(*point)


def run_sweep(sweep: Sweep, jobs: int = 1) -> list[TrialResult]:
    """Every (grid point, trial) result, in grid-major order whatever *jobs* is."""
    pts = sweep.points()
    if jobs <= 1:
        return [_run_point(p) for p in pts]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_point, pts))


def summarize(results: Iterable[TrialResult]) -> dict[tuple[float, float], dict[str, float]]:
    """Mean RAS per sequencer at each (sigma_scale, mean_gap_us) grid point."""
    acc: dict[tuple[float, float], dict[str, list[float]]] = {}
    for r in results:
        key = (r.config.sigma_scale, r.config.mean_gap_us)
        slot = acc.setdefault(key, {})
        for name, v in r.ras.items():
            if v is not None:
                slot.setdefault(name, []).append(v)
        slot.setdefault("max_ras", []).append(r.max_ras)
    return {k: {name: float(np.mean(v)) for name, v in d.items()} for k, d in acc.items()}
