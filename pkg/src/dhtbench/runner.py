"""Repetition orchestration and result output: runs every (protocol, regime,
repetition) cell of a configuration and writes results.csv plus summary.json."""

from __future__ import annotations

import json
import os
from dataclasses import asdict
from typing import Callable, Optional

from .config import BenchmarkConfig
from .metrics import MetricsRecord, aggregate_runs, compute_record
from .workload import BenchmarkRun

CSV_HEADER = ("protocol,nodes,rep,seed,regime,queries,success,precision,recall,"
              "p95_latency,msgs_observed_per_query,msgs_get_per_query,"
              "mean_hops,mean_routing_entries")


def _fmt(v) -> str:
    if v is None:
        return ""   # absent metric, never serialized as 0
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def record_csv_row(r: MetricsRecord) -> str:
    return ",".join(_fmt(v) for v in (
        r.protocol, r.nodes, r.rep, r.seed, r.regime, r.query_count,
        r.success, r.precision, r.recall, r.p95_latency,
        r.msgs_observed_per_query, r.msgs_get_per_query,
        r.mean_hops, r.mean_routing_entries))


def run_cells(cfg: BenchmarkConfig,
              progress: Optional[Callable[[str], None]] = None) -> list[MetricsRecord]:
    """Execute every (protocol, regime, repetition) combination in order."""
    cfg.validate()
    records = []
    for protocol in cfg.protocol:
        for regime in cfg.regime:
            for rep in range(cfg.reps):
                if progress:
                    progress(f"{protocol} {regime} rep {rep}")
                run = BenchmarkRun(cfg, protocol, regime, rep).execute()
                records.append(compute_record(run))
                run.net.nodes = []  # release the simulation promptly
    return records


def write_outputs(cfg: BenchmarkConfig, records: list, out_dir: str) -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "results.csv")
    json_path = os.path.join(out_dir, "summary.json")

    lines = [CSV_HEADER]
    lines.extend(record_csv_row(r) for r in records)
    with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")

    cells = []
    for protocol in cfg.protocol:
        for regime in cfg.regime:
            cell = [r for r in records if r.protocol == protocol and r.regime == regime]
            if cell:
                cells.append(aggregate_runs(cell))
    summary = {
        "config": _config_echo(cfg),
        "cells": cells,
    }
    with open(json_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return csv_path, json_path


def _config_echo(cfg: BenchmarkConfig) -> dict:
    d = asdict(cfg)
    d["protocol"] = list(cfg.protocol)
    d["regime"] = list(cfg.regime)
    return d


def run_benchmark(cfg: BenchmarkConfig, out_dir: str,
                  progress: Optional[Callable[[str], None]] = None) -> tuple[str, str]:
    """Full pipeline; validates before producing any output file."""
    cfg.validate()
    records = run_cells(cfg, progress)
    return write_outputs(cfg, records, out_dir)
