"""Command line: ``probe``, ``order``, ``replay`` and ``simulate``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .clock_stats import dispatch_path, preceding_prob
from .errors import ProtocolError
from .fair_order import DEFAULT_THRESHOLD, sequence
from .io import FormatError, format_emission, load_models, parse_messages, parse_trace, sequenced_to_json, write_text
from .online import DEFAULT_P_SAFE, OnlineConfig, OnlineSequencer
from .sim import CSV_COLUMNS, ConfigError, SimConfig, Sweep, run_sweep

logger = logging.getLogger("fairorder")

DEFAULT_RESOLUTION = 1.0
SWEEP_KEYS = ("sigma_scales", "mean_gaps_us", "trials")


class CliError(Exception):
    pass


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # registered on the top-level parser and on every subcommand so flags work on either side
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="base RNG seed (simulate)")
    parser.add_argument("--resolution-us", type=float, default=default, help="bin width for FFT densities (default 1)")
    parser.add_argument("--threshold", type=float, default=default, help="batch boundary threshold (default 0.75)")
    parser.add_argument("--p-safe", type=float, default=default, help="online emission confidence (default 0.999)")
    parser.add_argument("--output", "-o", default=default, help="output file (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairorder", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("probe", help="preceding-probability of one timestamp pair")
    _global_flags(p, suppress=True)
    p.add_argument("models")
    p.add_argument("t_i", type=float)
    p.add_argument("t_j", type=float)
    p.add_argument("client_i")
    p.add_argument("client_j")

    p = sub.add_parser("order", help="sequence a complete message file into ranked batches")
    _global_flags(p, suppress=True)
    p.add_argument("messages")
    p.add_argument("models")

    p = sub.add_parser("replay", help="run an event trace through the online sequencer")
    _global_flags(p, suppress=True)
    p.add_argument("trace")
    p.add_argument("models")
    p.add_argument("--max-wait", type=float, default=None, help="force-emit after waiting this long past T_b")

    p = sub.add_parser("simulate", help="seeded simulation sweep written as CSV")
    _global_flags(p, suppress=True)
    p.add_argument("config")
    p.add_argument("output_csv", nargs="?", default=None)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent trials")
    return parser


def _opt(args: argparse.Namespace, name: str, default: Any) -> Any:
    v = getattr(args, name, None)
    return default if v is None else v


def cmd_probe(args: argparse.Namespace, stdout) -> None:
    models = load_models(args.models)
    for c in (args.client_i, args.client_j):
        if c not in models:
            raise CliError(f"unknown client {c!r}")
    ci, cj = models[args.client_i], models[args.client_j]
    p = preceding_prob(args.t_i, args.t_j, ci, cj, _opt(args, "resolution_us", DEFAULT_RESOLUTION))
    write_text(f"{p:.6f} {dispatch_path(ci, cj)}\n", args.output, stdout)


def cmd_order(args: argparse.Namespace, stdout, stderr) -> None:
    models = load_models(args.models)
    messages = parse_messages(Path(args.messages).read_text())
    for m in messages:
        if m.client not in models:
            raise CliError(f"unknown client {m.client!r} (message {m.id!r})")
    out = sequence(
        messages,
        models,
        _opt(args, "threshold", DEFAULT_THRESHOLD),
        _opt(args, "resolution_us", DEFAULT_RESOLUTION),
    )
    write_text(sequenced_to_json(out), args.output, stdout)
    stderr.write(f"cycle breaks: {out.cycle_breaks}\n")


def cmd_replay(args: argparse.Namespace, stdout) -> None:
    models = load_models(args.models)
    events = parse_trace(Path(args.trace).read_text())
    cfg = OnlineConfig(
        threshold=_opt(args, "threshold", DEFAULT_THRESHOLD),
        p_safe=_opt(args, "p_safe", DEFAULT_P_SAFE),
        resolution=_opt(args, "resolution_us", DEFAULT_RESOLUTION),
        max_wait=args.max_wait,
    )
    seq = OnlineSequencer(models, cfg)
    lines = []
    for lineno, ev in events:
        try:
            emitted = seq.ingest(ev)
        except ProtocolError as exc:
            raise CliError(f"line {lineno}: protocol error: {exc}") from None
        lines.extend(format_emission(b) for b in emitted)
    if events:
        lines.append(f"V {len(seq.violations)}")
    write_text("".join(line + "\n" for line in lines), args.output, stdout)


def _load_sim_config(path: str) -> dict[str, Any]:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    # a run manifest can be fed straight back in
    if "tool" in obj and "config" in obj:
        obj = obj["config"]
    return dict(obj)


def resolve_sweep(raw: dict[str, Any], args: argparse.Namespace) -> tuple[Sweep, dict[str, Any]]:
    raw = dict(raw)
    grid = {k: raw.pop(k) for k in SWEEP_KEYS if k in raw}
    for flag, key in (("seed", "seed"), ("threshold", "threshold"), ("p_safe", "p_safe"), ("resolution_us", "resolution")):
        v = getattr(args, flag, None)
        if v is not None:
            raw[key] = v
    base = SimConfig.from_dict(raw)
    sigma_scales = tuple(float(s) for s in grid.get("sigma_scales", [base.sigma_scale]))
    gaps = tuple(float(g) for g in grid.get("mean_gaps_us", [base.mean_gap_us]))
    trials = grid.get("trials", 1)
    if int(trials) != trials or trials < 1:
        raise ConfigError("trials: must be a positive integer")
    if not sigma_scales or not gaps:
        raise ConfigError("sigma_scales: grid axes must be nonempty")
    for s in sigma_scales:
        if s < 0:
            raise ConfigError("sigma_scales: values must be >= 0")
    for g in gaps:
        if not g > 0:
            raise ConfigError("mean_gaps_us: values must be > 0")
    sweep = Sweep(base, sigma_scales, gaps, int(trials))
    resolved = base.to_dict()
    resolved.update(sigma_scales=list(sigma_scales), mean_gaps_us=list(gaps), trials=int(trials))
    return sweep, resolved


def cmd_simulate(args: argparse.Namespace, stdout) -> None:
    sweep, resolved = resolve_sweep(_load_sim_config(args.config), args)
    results = run_sweep(sweep, jobs=args.jobs)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in results:
        writer.writerow({k: ("" if v is None else v) for k, v in r.to_row().items()})
    dest = args.output_csv or getattr(args, "output", None)
    write_text(buf.getvalue(), dest, stdout)
    if dest and dest != "-":
        manifest = {
            "tool": "fairorder",
            "version": __version__,
            "seed": sweep.base.seed,
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "note": "sigma_scales and mean_gaps_us form a harness-chosen grid",
            "config": resolved,
        }
        Path(str(dest) + ".manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def main(argv: Sequence[str] | None = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "probe":
            cmd_probe(args, stdout)
        elif args.command == "order":
            cmd_order(args, stdout, stderr)
        elif args.command == "replay":
            cmd_replay(args, stdout)
        else:
            cmd_simulate(args, stdout)
    except KeyError as exc:
        stderr.write(f"error: {exc.args[0] if exc.args else exc}\n")
        return 1
    except (CliError, FormatError, ConfigError, ValueError, OSError) as exc:
        stderr.write(f"error: {exc}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
