"""Shared fixtures: small stable overlays with exhaustive oracles."""

import pytest

from dhtbench.config import BenchmarkConfig
from dhtbench.ids import ring_distance, xor_distance
from dhtbench.workload import BenchmarkRun


def build_stable_run(protocol: str, n: int, id_bits: int = 16, seed: int = 42,
                     horizon: float = 30.0, settle: float = 20.0) -> BenchmarkRun:
    """Bootstrap an N-node overlay with no churn and no queries, run it past
    the horizon plus a settling allowance, and hand back the live run."""
    cfg = BenchmarkConfig(
        protocol=(protocol,),
        nodes=n,
        reps=1,
        seed=seed,
        regime=("warmup_only",),
        horizon=horizon,
        query_rate=1.0 / (horizon + settle + 100.0),  # no queries fire
        churn_enabled=False,
        id_bits=id_bits,
        target_skill="skill_00",
    )
    run = BenchmarkRun(cfg, protocol, "warmup_only", 0)
    run.execute()
    run.sim.run_until(run.sim.clock + settle)
    assert run.bootstrap_done is not None, "bootstrap did not complete"
    assert all(node.joined for node in run.net.nodes)
    return run


def oracle_successor(run: BenchmarkRun, key: int) -> int:
    """Index of the first node clockwise from key (inclusive)."""
    m = run.cfg.id_bits
    return min(range(run.cfg.nodes),
               key=lambda i: ring_distance(key, run.node_ids[i], m))


def oracle_ring_successors(run: BenchmarkRun, key: int, count: int) -> list[int]:
    m = run.cfg.id_bits
    order = sorted(range(run.cfg.nodes),
                   key=lambda i: ring_distance(key, run.node_ids[i], m))
    return order[:count]


def oracle_numeric_closest(run: BenchmarkRun, key: int, count: int = 1) -> list[int]:
    """Numerically closest nodes; distance ties break toward the smaller id."""
    m = run.cfg.id_bits
    space = 1 << m
    order = sorted(range(run.cfg.nodes),
                   key=lambda i: (min(ring_distance(key, run.node_ids[i], m),
                                      ring_distance(run.node_ids[i], key, m)),
                                  run.node_ids[i]))
    del space
    return order[:count]


def oracle_xor_closest(run: BenchmarkRun, key: int, count: int) -> list[int]:
    order = sorted(range(run.cfg.nodes),
                   key=lambda i: xor_distance(run.node_ids[i], key))
    return order[:count]


@pytest.fixture(scope="session")
def chord64():
    return build_stable_run("chord", 64)


@pytest.fixture(scope="session")
def pastry64():
    return build_stable_run("pastry", 64)


@pytest.fixture(scope="session")
def kademlia64():
    return build_stable_run("kademlia", 64)
