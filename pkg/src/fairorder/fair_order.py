"""Offline fair ordering: likely-happened-before tournament, linear order, threshold batches."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .clock_stats import ClockModel, preceding_matrix
from .errors import CycleError, OrderError, TieError

DEFAULT_THRESHOLD = 0.75
# weights are rounded to this many decimals before any equality comparison
TIE_DECIMALS = 12


@dataclass(frozen=True)
class Message:
    id: str
    client: str
    local_ts: float
    true_ts: float | None = None


@dataclass(frozen=True)
class Batch:
    rank: int
    ids: tuple[str, ...]


@dataclass(frozen=True)
class SequencedOutput:
    batches: tuple[Batch, ...] = ()
    boundary_ps: tuple[float, ...] = ()
    cycle_breaks: int = 0

    def ranks(self) -> dict[str, int]:
        return {mid: b.rank for b in self.batches for mid in b.ids}

    def order(self) -> list[str]:
        return [mid for b in self.batches for mid in b.ids]

    def to_records(self) -> list[dict]:
        return [{"rank": b.rank, "ids": list(b.ids)} for b in self.batches]


class Tournament:
    """Directed graph over messages; ``weights[i, j] > 0`` means the edge ``i -> j`` is kept.

    A freshly built tournament has exactly one edge per unordered pair.  After
    :func:`break_cycles` some pairs may have no edge left; those removals are
    listed in :attr:`removed`.
    """

    def __init__(
        self,
        messages: Sequence[Message],
        weights: np.ndarray,
        removed: Iterable[tuple[str, str, float]] = (),
    ):
        self.messages = tuple(messages)
        self.nodes = [m.id for m in self.messages]
        self.index = {mid: k for k, mid in enumerate(self.nodes)}
        if len(self.index) != len(self.nodes):
            raise ValueError("message ids must be unique")
        w = np.array(weights, dtype=np.float64)
        if w.shape != (len(self.nodes), len(self.nodes)):
            raise ValueError(f"weight matrix shape {w.shape} does not match {len(self.nodes)} nodes")
        w.setflags(write=False)
        self.weights = w
        self.removed = tuple(removed)

    def __len__(self) -> int:
        return len(self.nodes)

    def weight(self, src: str, dst: str) -> float | None:
        w = self.weights[self.index[src], self.index[dst]]
        return float(w) if w > 0 else None

    def edges(self) -> list[tuple[str, str, float]]:
        rows, cols = np.nonzero(self.weights)
        return [(self.nodes[r], self.nodes[c], float(self.weights[r, c])) for r, c in zip(rows, cols)]

    @property
    def is_complete(self) -> bool:
        """True when every unordered pair still carries exactly one edge."""
        has = self.weights > 0
        both = has & has.T
        either = has | has.T
        np.fill_diagonal(either, True)
        return bool(either.all() and not both.any())

    def out_degrees(self) -> np.ndarray:
        return (self.weights > 0).sum(axis=1)

    def __repr__(self) -> str:
        return f"Tournament(n={len(self)}, edges={int((self.weights > 0).sum())}, removed={len(self.removed)})"


def _check_unique(messages: Sequence[Message]) -> None:
    seen: set[str] = set()
    for m in messages:
        if m.id in seen:
            raise ValueError(f"duplicate message id {m.id!r}")
        seen.add(m.id)


def tournament_from_probabilities(messages: Sequence[Message], probs: np.ndarray) -> Tournament:
    """Keep, for each pair, the direction with the higher preceding-probability.

    ``probs[i, j]`` is ``P(i precedes j)``.  Equal weights (after rounding) raise
    :class:`TieError` naming the pair.
    """
    _check_unique(messages)
    P = np.asarray(probs, dtype=np.float64)
    n = len(messages)
    if P.shape != (n, n):
        raise ValueError(f"probability matrix shape {P.shape} does not match {n} messages")
    R = np.round(P, TIE_DECIMALS)
    off = ~np.eye(n, dtype=bool)
    ties = (R == R.T) & off
    if ties.any():
        i, j = map(int, np.argwhere(ties)[0])
        a, b = messages[i].id, messages[j].id
        raise TieError(f"exact tie between {a!r} and {b!r} (p = {P[i, j]:.12f})", (a, b))
    keep = (R > R.T) & off
    if np.any(R[keep] <= 0.5):
        i, j = map(int, np.argwhere(keep & (R <= 0.5))[0])
        raise ValueError(
            f"inconsistent probabilities for {messages[i].id!r}/{messages[j].id!r}: "
            f"neither direction exceeds 0.5"
        )
    return Tournament(messages, np.where(keep, P, 0.0))


def build_tournament(
    messages: Sequence[Message],
    models: Mapping[str, ClockModel],
    resolution: float = 1.0,
) -> Tournament:
    """Likely-happened-before tournament over *messages* under per-client *models*."""
    _check_unique(messages)
    for m in messages:
        if m.client not in models:
            raise KeyError(f"unknown client {m.client!r} for message {m.id!r}")
    P = preceding_matrix([m.local_ts for m in messages], [models[m.client] for m in messages], resolution)
    return tournament_from_probabilities(messages, P)


def _dfs_cycle(adj: np.ndarray) -> list[int] | None:
    n = adj.shape[0]
    succ = [np.flatnonzero(adj[k]).tolist() for k in range(n)]
    color = [0] * n  # 0 new, 1 on stack, 2 done
    for root in range(n):
        if color[root]:
            continue
        stack = [(root, 0)]
        path = [root]
        color[root] = 1
        while stack:
            node, pos = stack[-1]
            if pos < len(succ[node]):
                stack[-1] = (node, pos + 1)
                nxt = succ[node][pos]
                if color[nxt] == 1:
                    return path[path.index(nxt):]
                if color[nxt] == 0:
                    color[nxt] = 1
                    stack.append((nxt, 0))
                    path.append(nxt)
            else:
                color[node] = 2
                stack.pop()
                path.pop()
    return None


def detect_cycle(t: Tournament) -> list[str] | None:
    """Some directed cycle of *t* as a list of node ids, or None if *t* is acyclic."""
    adj = t.weights > 0
    if t.is_complete:
        # a complete tournament is acyclic iff its out-degrees are all distinct;
        # otherwise some edge u->v has score(v) >= score(u) and closes a 3-cycle
        scores = adj.sum(axis=1)
        if np.unique(scores).size == len(scores):
            return None
        bad = adj & (scores[None, :] >= scores[:, None])
        u, v = map(int, np.argwhere(bad)[0])
        w = int(np.flatnonzero(adj[v] & adj[:, u])[0])
        return [t.nodes[u], t.nodes[v], t.nodes[w]]
    cyc = _dfs_cycle(adj)
    return None if cyc is None else [t.nodes[k] for k in cyc]


def break_cycles(t: Tournament) -> Tournament:
    """Greedily drop the lightest edge lying on a cycle until the graph is acyclic.

    An edge lies on a cycle iff both endpoints share a strongly connected
    component.  Weights are compared after rounding; ties go to the
    lexicographically smallest ``(from, to)`` id pair.
    """
    W = np.array(t.weights)
    removed = list(t.removed)
    ids = np.array(t.nodes, dtype=object)
    while True:
        adj = W > 0
        _, labels = connected_components(csr_matrix(adj), directed=True, connection="strong")
        on_cycle = adj & (labels[:, None] == labels[None, :])
        if not on_cycle.any():
            break
        rows, cols = np.nonzero(on_cycle)
        rounded = np.round(W[rows, cols], TIE_DECIMALS)
        lightest = rounded == rounded.min()
        r, c = min(zip(rows[lightest], cols[lightest]), key=lambda rc: (ids[rc[0]], ids[rc[1]]))
        removed.append((t.nodes[r], t.nodes[c], float(W[r, c])))
        W[r, c] = 0.0
    if len(removed) == len(t.removed):
        return t
    return Tournament(t.messages, W, removed)


def topological_order(t: Tournament) -> list[str]:
    """Linear order of an acyclic graph.

    For a complete (transitive) tournament this is its unique Hamiltonian path,
    i.e. nodes by decreasing out-degree.  When pairs were removed, incomparable
    nodes are taken by ascending local timestamp, then client, then id.
    """
    n = len(t)
    if n == 0:
        return []
    adj = t.weights > 0
    if t.is_complete:
        scores = adj.sum(axis=1)
        if np.unique(scores).size != n:
            raise CycleError("tournament contains a cycle; call break_cycles first")
        return [t.nodes[k] for k in np.argsort(-scores, kind="stable")]

    indeg = adj.sum(axis=0).astype(int)
    key = [(m.local_ts, m.client, m.id, k) for k, m in enumerate(t.messages)]
    heap = [key[k] for k in range(n) if indeg[k] == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        k = heapq.heappop(heap)[-1]
        out.append(t.nodes[k])
        for nxt in np.flatnonzero(adj[k]):
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(heap, key[nxt])
    if len(out) != n:
        raise CycleError("graph contains a cycle; call break_cycles first")
    return out


def _check_threshold(threshold: float) -> None:
    if not 0.5 <= threshold < 1.0:
        raise ValueError(f"threshold must lie in [0.5, 1), got {threshold}")


def form_batches(order: Sequence[str], t: Tournament, threshold: float = DEFAULT_THRESHOLD) -> SequencedOutput:
    """Cut *order* wherever the edge between neighbours is heavier than *threshold*."""
    _check_threshold(threshold)
    if sorted(order) != sorted(t.nodes):
        raise OrderError("order is not a permutation of the tournament's nodes")
    if not order:
        return SequencedOutput(cycle_breaks=len(t.removed))
    perm = np.array([t.index[mid] for mid in order])
    Wp = t.weights[np.ix_(perm, perm)]
    back = np.argwhere(np.tril(Wp, -1) > 0)
    if back.size:
        i, j = map(int, back[0])
        raise OrderError(f"order puts {order[j]!r} before {order[i]!r} against edge {order[i]!r}->{order[j]!r}")

    batches: list[Batch] = []
    boundary_ps: list[float] = []
    current = [order[0]]
    for k in range(1, len(order)):
        w = float(Wp[k - 1, k])
        if w > threshold:
            batches.append(Batch(len(batches), tuple(current)))
            boundary_ps.append(w)
            current = []
        current.append(order[k])
    batches.append(Batch(len(batches), tuple(current)))
    return SequencedOutput(tuple(batches), tuple(boundary_ps), len(t.removed))


def order_tournament(t: Tournament, threshold: float = DEFAULT_THRESHOLD) -> SequencedOutput:
    """Cycle-break if needed, extract the linear order and batch it."""
    _check_threshold(threshold)
    if len(t) and detect_cycle(t) is not None:
        t = break_cycles(t)
    return form_batches(topological_order(t), t, threshold)


def sequence(
    messages: Sequence[Message],
    models: Mapping[str, ClockModel],
    threshold: float = DEFAULT_THRESHOLD,
    resolution: float = 1.0,
) -> SequencedOutput:
    """Ranked batches for a complete message set."""
    _check_threshold(threshold)
    if not messages:
        return SequencedOutput()
    return order_tournament(build_tournament(messages, models, resolution), threshold)
