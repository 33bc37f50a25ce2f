"""Readers and writers for the text formats used by the command line."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable, Iterator, TextIO

from .clock_stats import ClockModel, model_from_dict, model_to_dict
from .fair_order import Message, SequencedOutput
from .online import ClockTick, EmittedBatch, Event, Heartbeat, MessageArrival

_SPLIT = re.compile(r"[,\s]+")


class FormatError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)
        self.lineno = lineno


def _records(text: str) -> Iterator[tuple[int, list[str]]]:
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            yield lineno, [tok for tok in _SPLIT.split(line) if tok]


def _num(tok: str, what: str, lineno: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise FormatError(f"{what} is not a number: {tok!r}", lineno) from None


def load_models(path: str | Path) -> dict[str, ClockModel]:
    """JSON object mapping client id to a serialized clock model."""
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"models file is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise FormatError("models file must hold a JSON object of client -> model")
    return {str(c): model_from_dict(spec) for c, spec in obj.items()}


def dump_models(models: dict[str, ClockModel]) -> str:
    return json.dumps({c: model_to_dict(m) for c, m in models.items()}, indent=2) + "\n"


def parse_messages(text: str) -> list[Message]:
    """One message per line: ``id client local_ts [true_ts]`` (whitespace or commas)."""
    out: list[Message] = []
    seen: set[str] = set()
    for lineno, toks in _records(text):
        if len(toks) not in (3, 4):
            raise FormatError(f"expected 'id client local_ts [true_ts]', got {len(toks)} fields", lineno)
        mid, client = toks[0], toks[1]
        if mid in seen:
            raise FormatError(f"duplicate message id {mid!r}", lineno)
        seen.add(mid)
        local = _num(toks[2], "local_ts", lineno)
        true = _num(toks[3], "true_ts", lineno) if len(toks) == 4 else None
        out.append(Message(mid, client, local, true))
    return out


def format_messages(messages: Iterable[Message]) -> str:
    lines = []
    for m in messages:
        fields = [m.id, m.client, repr(m.local_ts)]
        if m.true_ts is not None:
            fields.append(repr(m.true_ts))
        lines.append(" ".join(fields))
    return "".join(line + "\n" for line in lines)


def sequenced_to_json(out: SequencedOutput) -> str:
    return json.dumps(out.to_records(), indent=2) + "\n"


def parse_trace(text: str) -> list[tuple[int, Event]]:
    """Events with their line numbers: ``M client local_ts id``, ``H client local_ts``, ``T now``."""
    events: list[tuple[int, Event]] = []
    for lineno, toks in _records(text):
        kind, args = toks[0], toks[1:]
        if kind == "M" and len(args) == 3:
            client, ts, mid = args
            events.append((lineno, MessageArrival(Message(mid, client, _num(ts, "local_ts", lineno)))))
        elif kind == "H" and len(args) == 2:
            events.append((lineno, Heartbeat(args[0], _num(args[1], "local_ts", lineno))))
        elif kind == "T" and len(args) == 1:
            events.append((lineno, ClockTick(_num(args[0], "now", lineno))))
        else:
            raise FormatError(f"unrecognized trace record {' '.join(toks)!r}", lineno)
    return events


def format_trace(events: Iterable[Event]) -> str:
    lines = []
    for ev in events:
        if isinstance(ev, MessageArrival):
            m = ev.message
            lines.append(f"M {m.client} {m.local_ts!r} {m.id}")
        elif isinstance(ev, Heartbeat):
            lines.append(f"H {ev.client} {ev.local_ts!r}")
        else:
            lines.append(f"T {ev.now!r}")
    return "".join(line + "\n" for line in lines)


def format_emission(b: EmittedBatch) -> str:
    return f"B {b.rank} {','.join(b.ids)} {b.emit_time:.6f}"


def write_text(text: str, dest: str | Path | None, stdout: TextIO) -> None:
    if dest is None or str(dest) == "-":
        stdout.write(text)
    else:
        Path(dest).write_text(text)
