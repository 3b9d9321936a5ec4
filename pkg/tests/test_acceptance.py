"""Acceptance gate: the nine headline checks, one printed verdict per
criterion.  The heavy fixtures run the full N=4096 benchmark, so this module
dominates the suite's runtime; run with `-s` to watch progress."""

import dataclasses
import math
import time

import numpy as np
import pytest

from dhtbench.config import preset
from dhtbench.ids import AgentDescriptor
from dhtbench.metrics import aggregate_runs
from dhtbench.runner import run_benchmark, run_cells
from dhtbench.sim import Simulator
from dhtbench.workload import ChurnProcess

from conftest import (build_stable_run, oracle_numeric_closest,
                      oracle_successor, oracle_xor_closest)

PROTOCOLS = ("chord", "pastry", "kademlia")


def verdict(num: int, name: str, ok: bool, detail: str = "") -> None:
    tail = f" ({detail})" if detail else ""
    print(f"\n[criterion {num}] {'PASS' if ok else 'FAIL'}: {name}{tail}", flush=True)
    assert ok, f"criterion {num} failed: {name}{tail}"


# -- heavy shared fixtures ---------------------------------------------------

@pytest.fixture(scope="session")
def stationary():
    """Full stationary benchmark: 3 protocols x {immediate, warmed} x 10 reps
    at N=4096; per-protocol wall time is kept for the runtime report."""
    cfg = preset("stationary")
    records, walls = [], {}
    for proto in cfg.protocol:
        t0 = time.perf_counter()
        sub = dataclasses.replace(cfg, protocol=(proto,))
        records.extend(run_cells(sub, progress=lambda m: print(f"[stationary] {m}", flush=True)))
        walls[proto] = time.perf_counter() - t0
    cells = {}
    for proto in cfg.protocol:
        for regime in cfg.regime:
            group = [r for r in records if r.protocol == proto and r.regime == regime]
            cells[(proto, regime)] = aggregate_runs(group)
    return {"cells": cells, "walls": walls, "records": records}


@pytest.fixture(scope="session")
def churn_outputs(tmp_path_factory):
    """The churn preset executed twice into separate directories: the summary
    feeds the churn criterion, the double execution the determinism one."""
    cfg = preset("churn")
    root = tmp_path_factory.mktemp("churn")
    paths = []
    for tag in ("a", "b"):
        out = root / tag
        run_benchmark(cfg, str(out),
                      progress=lambda m: print(f"[churn/{tag}] {m}", flush=True))
        paths.append(out)
    import json
    summary = json.loads((paths[0] / "summary.json").read_text())
    cells = {c["protocol"]: c for c in summary["cells"]}
    return {"dirs": paths, "cells": cells}


@pytest.fixture(scope="session")
def scaling(stationary):
    """Warmed runs at N in {256, 1024}; the 4096 point reuses the stationary
    records."""
    cfg = preset("stationary")
    out = {}
    for n in (256, 1024):
        sub = dataclasses.replace(cfg, nodes=n, reps=2, regime=("warmed",))
        recs = run_cells(sub, progress=lambda m, n=n: print(f"[scale {n}] {m}", flush=True))
        for proto in PROTOCOLS:
            out[(proto, n)] = aggregate_runs(
                [r for r in recs if r.protocol == proto])
    for proto in PROTOCOLS:
        out[(proto, 4096)] = stationary["cells"][(proto, "warmed")]
    return out


# -- criteria ----------------------------------------------------------------

def test_criterion_1_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    sizes = ((8, 200), (16, 300), (64, 500))  # 1000 keys per protocol
    agent_base = 700_000
    failures = []

    for protocol in PROTOCOLS:
        for n, n_keys in sizes:
            run = build_stable_run(protocol, n, id_bits=12)
            keys = [int(x) for x in rng.integers(0, 1 << 12, size=n_keys)]
            if protocol == "kademlia":
                results = {}
                for j, key in enumerate(keys):
                    origin = int(rng.integers(0, n))
                    run.net.nodes[origin].lookup(
                        key, find_value=False, msg_class="GET", query_id=None,
                        on_done=lambda res, rounds, j=j: results.__setitem__(j, res))
                    if (j + 1) % 100 == 0:
                        run.sim.run_until(run.sim.clock + 30.0)
                run.sim.run_until(run.sim.clock + 30.0)
                for j, key in enumerate(keys):
                    want = set(oracle_xor_closest(run, key, min(run.net.nodes[0].k, n)))
                    if set(results.get(j, ())) != want:
                        failures.append((protocol, n, key))
            else:
                now = run.sim.clock
                for j, key in enumerate(keys):
                    origin = int(rng.integers(0, n))
                    d = AgentDescriptor(agent_base + j, "skill_00", now, 1e9)
                    run.net.nodes[origin].put(key, d)
                    if (j + 1) % 100 == 0:
                        run.sim.run_until(run.sim.clock + 30.0)
                run.sim.run_until(run.sim.clock + 60.0)
                roots = {}
                for i, node in enumerate(run.net.nodes):
                    for d in node.store._entries.values():
                        if d.agent_id >= agent_base and d.replica_index == 0:
                            roots[d.agent_id - agent_base] = i
                for j, key in enumerate(keys):
                    want = (oracle_successor(run, key) if protocol == "chord"
                            else oracle_numeric_closest(run, key)[0])
                    if roots.get(j) != want:
                        failures.append((protocol, n, key))
            agent_base += 10_000

    wall = time.perf_counter() - t0
    ok = not failures and wall < 30.0
    verdict(1, "oracle equivalence at N in {8,16,64}, 1000 keys/protocol",
            ok, f"{len(failures)} disagreements, {wall:.1f}s")


def test_criterion_2_warmed_reproduction(stationary):
    details = []
    ok = True
    for proto in PROTOCOLS:
        cell = stationary["cells"][(proto, "warmed")]
        wall = stationary["walls"][proto]
        good = (cell["success"] == 1.0
                and abs(cell["recall"] - 0.0122) <= 0.0002)
        ok = ok and good
        details.append(f"{proto}: success={cell['success']} "
                       f"recall={cell['recall']:.5f} wall={wall:.0f}s")
    verdict(2, "warmed stationary: success 1.000, recall 0.0122 +/- 0.0002",
            ok, "; ".join(details))


def test_criterion_3_warmed_latency(stationary):
    p95 = {p: stationary["cells"][(p, "warmed")]["p95_latency"] for p in PROTOCOLS}
    ok = (abs(p95["pastry"] - 4.0) <= 1.0
          and abs(p95["chord"] - 7.0) <= 2.0
          and p95["pastry"] < p95["kademlia"] < p95["chord"])
    verdict(3, "warmed P95 latency: pastry 4+/-1, chord 7+/-2, kademlia between",
            ok, f"pastry={p95['pastry']} chord={p95['chord']} kademlia={p95['kademlia']}")


def test_criterion_4_cost_ordering(stationary):
    get = {p: stationary["cells"][(p, "warmed")]["msgs_get_per_query"] for p in PROTOCOLS}
    obs = {p: stationary["cells"][(p, "warmed")]["msgs_observed_per_query"] for p in PROTOCOLS}
    reference = {"pastry": 8.1, "chord": 14.5, "kademlia": 16.7}
    ok = (get["pastry"] < get["chord"] < get["kademlia"]
          and all(reference[p] / 2 <= get[p] <= reference[p] * 2 for p in PROTOCOLS)
          and obs["pastry"] < obs["chord"] < obs["kademlia"])
    verdict(4, "warmed GET cost ordering pastry < chord < kademlia, within 2x of reference",
            ok, f"get={ {p: round(get[p], 2) for p in PROTOCOLS} } "
                f"obs={ {p: round(obs[p]) for p in PROTOCOLS} }")


def test_criterion_5_immediate_degradation(stationary):
    details = []
    ok = True
    for proto in PROTOCOLS:
        imm = stationary["cells"][(proto, "immediate")]
        warm = stationary["cells"][(proto, "warmed")]
        good = (imm["success"] < 0.9
                and imm["success"] < warm["success"]
                and imm["msgs_observed_per_query"] > warm["msgs_observed_per_query"])
        ok = ok and good
        details.append(f"{proto}: imm success={imm['success']:.2f} "
                       f"obs {imm['msgs_observed_per_query']:.0f} vs warmed "
                       f"{warm['msgs_observed_per_query']:.0f}")
    verdict(5, "immediate regime degrades success (<0.9) and inflates observed cost",
            ok, "; ".join(details))


def test_criterion_6_churn_point(churn_outputs):
    cells = churn_outputs["cells"]
    details = []
    ok = True
    for proto in PROTOCOLS:
        c = cells[proto]
        good = (c["query_count"] == 5 and c["success"] == 1.0 and c["precision"] == 1.0)
        ok = ok and good
        details.append(f"{proto}: q={c['query_count']} success={c['success']} "
                       f"precision={c['precision']} p95={c['p95_latency']} "
                       f"get={c['msgs_get_per_query']:.1f}")
    cheapest = (cells["pastry"]["p95_latency"] <= min(cells[p]["p95_latency"] for p in PROTOCOLS)
                and cells["pastry"]["msgs_get_per_query"] < cells["chord"]["msgs_get_per_query"]
                < cells["kademlia"]["msgs_get_per_query"]
                and all(cells["pastry"]["msgs_observed_per_query"]
                        < cells[p]["msgs_observed_per_query"] for p in ("chord", "kademlia")))
    ok = ok and cheapest
    verdict(6, "churn point: 5 queries, success 1.000, precision 1.000, pastry cheapest",
            ok, "; ".join(details))


def test_criterion_7_churn_calibration():
    sim = Simulator(seed=42)
    churn = ChurnProcess(sim, n=256, session_mean=100.0, downtime_mean=30.0)
    churn.start(at=0.0)
    sim.run_until(10_000.0)
    frac = churn.mean_alive_fraction()
    ok = 0.72 <= frac <= 0.82
    verdict(7, "churn calibration: alive fraction in [0.72, 0.82] (target 10/13)",
            ok, f"measured {frac:.4f}")


def test_criterion_8_determinism(churn_outputs):
    a, b = churn_outputs["dirs"]
    same_csv = (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    same_json = (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    ok = same_csv and same_json
    verdict(8, "identical seeds give byte-identical CSV and JSON",
            ok, f"csv={same_csv} json={same_json}")


def test_criterion_9_scaling(scaling):
    details = []
    ok = True
    for proto in PROTOCOLS:
        for metric in ("mean_hops", "mean_routing_entries"):
            vals = {n: scaling[(proto, n)][metric] for n in (256, 1024, 4096)}
            # fit c on the two smaller sizes, then the large point must not
            # outgrow c * log2(N) (5% numerical slack)
            c = max(vals[n] / math.log2(n) for n in (256, 1024))
            good = vals[4096] <= c * math.log2(4096) * 1.05
            ok = ok and good
            details.append(f"{proto}.{metric}: " +
                           " ".join(f"{vals[n]:.2f}" for n in (256, 1024, 4096)))
    verdict(9, "mean_hops and mean_routing_entries grow at most like c*log2(N)",
            ok, "; ".join(details))
