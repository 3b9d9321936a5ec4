"""`bench` command line: run a benchmark config, emit a preset config, or
turn a results CSV into whitespace-separated plot data."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import ConfigError, format_config, load_config, preset
from .runner import run_benchmark


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.protocol is not None:
            cfg = replace(cfg, protocol=tuple(p.strip() for p in args.protocol.split(",")))
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.reps is not None:
            cfg = replace(cfg, reps=args.reps)
        cfg.validate()
    except (ConfigError, OSError) as e:
        print(f"bench: {e}", file=sys.stderr)
        return 2
    progress = None
    if not args.quiet:
        progress = lambda msg: print(f"[bench] {msg}", file=sys.stderr)
    csv_path, json_path = run_benchmark(cfg, args.out, progress)
    print(csv_path)
    print(json_path)
    return 0


def _cmd_preset(args) -> int:
    try:
        cfg = preset(args.name)
    except ConfigError as e:
        print(f"bench: {e}", file=sys.stderr)
        return 2
    sys.stdout.write(format_config(cfg))
    return 0


def _cmd_plot(args) -> int:
    """Aggregate a results CSV into per-figure plot blocks: one block per
    metric, one `protocol regime value` line per cell."""
    try:
        with open(args.csv, "r", encoding="utf-8") as f:
            lines = [ln.strip() for ln in f if ln.strip()]
    except OSError as e:
        print(f"bench: {e}", file=sys.stderr)
        return 2
    if not lines:
        print("bench: empty CSV", file=sys.stderr)
        return 2
    header = lines[0].split(",")
    rows = [dict(zip(header, ln.split(","))) for ln in lines[1:]]
    metrics = ("p95_latency", "msgs_observed_per_query", "msgs_get_per_query")
    cells: dict[tuple, dict] = {}
    order: list[tuple] = []
    for row in rows:
        key = (row["protocol"], row["regime"])
        if key not in cells:
            cells[key] = {m: [0.0, 0.0] for m in metrics}
            order.append(key)
        w = float(row["queries"] or 0)
        for m in metrics:
            if row.get(m):
                cells[key][m][0] += float(row[m]) * w
                cells[key][m][1] += w
    out = []
    for m in metrics:
        out.append(f"# {m}")
        for key in order:
            num, den = cells[key][m]
            if den > 0:
                out.append(f"{key[0]} {key[1]} {num / den:.6g}")
        out.append("")
    sys.stdout.write("\n".join(out))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bench",
        description="Deterministic DHT discovery benchmark harness "
                    "(Chord, Pastry, Kademlia).")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a benchmark configuration")
    p_run.add_argument("config", help="path to a key = value config file")
    p_run.add_argument("--out", default="bench-out", help="output directory")
    p_run.add_argument("--protocol", help="override the protocol list")
    p_run.add_argument("--seed", type=int, help="override the base seed")
    p_run.add_argument("--reps", type=int, help="override the repetition count")
    p_run.add_argument("--quiet", action="store_true", help="suppress progress")
    p_run.set_defaults(fn=_cmd_run)

    p_preset = sub.add_parser("preset", help="print a built-in config")
    p_preset.add_argument("name", choices=["stationary", "churn"])
    p_preset.set_defaults(fn=_cmd_preset)

    p_plot = sub.add_parser("plot", help="emit plot data from a results CSV")
    p_plot.add_argument("csv", help="path to results.csv")
    p_plot.set_defaults(fn=_cmd_plot)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
