"""Pastry: leaf-set geometry, prefix-table invariants, delivery oracle."""

import numpy as np

from dhtbench.ids import AgentDescriptor, digit_at, ring_distance, shared_prefix_len

from conftest import build_stable_run, oracle_numeric_closest

PROBE_AGENT_BASE = 200_000


def issue_put_probes(run, keys, rng, tag_base):
    now = run.sim.clock
    for j, key in enumerate(keys):
        origin = int(rng.integers(0, run.cfg.nodes))
        d = AgentDescriptor(tag_base + j, "skill_00", now, 50_000.0)
        run.net.nodes[origin].put(key, d)
    run.sim.run_until(run.sim.clock + 60.0)


def holders_of(run, key, agent):
    return {i for i, node in enumerate(run.net.nodes)
            for d in node.store.get_live(key, run.sim.clock)
            if d.agent_id == agent}


def root_of(run, key, agent):
    for i, node in enumerate(run.net.nodes):
        for d in node.store.get_live(key, run.sim.clock):
            if d.agent_id == agent and d.replica_index == 0:
                return i
    return None


def test_singleton():
    run = build_stable_run("pastry", 1)
    node = run.net.nodes[0]
    assert node.joined
    assert node.leaf_cw == [] and node.leaf_ccw == []


def test_two_node_leafsets():
    run = build_stable_run("pastry", 2)
    a, b = run.net.nodes
    assert set(a.leaf_cw + a.leaf_ccw) == {1}
    assert set(b.leaf_cw + b.leaf_ccw) == {0}


def test_leaf_sets_match_ring_neighbors(pastry64):
    run = pastry64
    m = run.cfg.id_bits
    n = run.cfg.nodes
    for i, node in enumerate(run.net.nodes):
        h = node.half_leaf
        cw = sorted((j for j in range(n) if j != i),
                    key=lambda j: ring_distance(run.node_ids[i], run.node_ids[j], m))[:h]
        ccw = sorted((j for j in range(n) if j != i),
                     key=lambda j: ring_distance(run.node_ids[j], run.node_ids[i], m))[:h]
        assert node.leaf_cw == cw, f"node {i} clockwise leaves"
        assert node.leaf_ccw == ccw, f"node {i} counterclockwise leaves"


def test_leaf_sides_are_disjoint(pastry64):
    for node in pastry64.net.nodes:
        assert not set(node.leaf_cw) & set(node.leaf_ccw)
        assert node.idx not in node.leaf_cw + node.leaf_ccw


def test_table_entries_sit_in_their_slot(pastry64):
    run = pastry64
    m, b = run.cfg.id_bits, run.cfg.pastry_b
    for i, node in enumerate(run.net.nodes):
        for r, row in enumerate(node.table):
            for d, e in enumerate(row):
                if e is None:
                    continue
                eid = run.node_ids[e]
                assert shared_prefix_len(eid, run.node_ids[i], b, m) >= r
                assert digit_at(eid, r, b, m) == d
                assert digit_at(run.node_ids[i], r, b, m) != d or e == i


def test_delivery_matches_numeric_closest_oracle(pastry64):
    run = pastry64
    rng = np.random.default_rng(111)
    keys = [int(k) for k in rng.integers(0, 1 << run.cfg.id_bits, size=1000)]
    issue_put_probes(run, keys, rng, PROBE_AGENT_BASE)
    misses = []
    for j, key in enumerate(keys):
        root = root_of(run, key, PROBE_AGENT_BASE + j)
        if root != oracle_numeric_closest(run, key)[0]:
            misses.append((key, root))
    assert not misses, f"{len(misses)} keys off oracle, first: {misses[:3]}"


def test_replicas_land_on_three_numerically_closest(pastry64):
    run = pastry64
    rng = np.random.default_rng(222)
    keys = [int(k) for k in rng.integers(0, 1 << run.cfg.id_bits, size=100)]
    issue_put_probes(run, keys, rng, PROBE_AGENT_BASE + 5000)
    for j, key in enumerate(keys):
        got = holders_of(run, key, PROBE_AGENT_BASE + 5000 + j)
        assert got == set(oracle_numeric_closest(run, key, 3)), f"key {key}"


def test_get_succeeds_with_bounded_hops(pastry64):
    run = pastry64
    rng = np.random.default_rng(333)
    bound = run.cfg.id_bits // run.cfg.pastry_b + 2
    for trial in range(50):
        origin = int(rng.integers(0, run.cfg.nodes))
        out = {}
        run.net.nodes[origin].get(run.target_key, 91_000 + trial, 1,
                                  lambda descs, hops: out.update(descs=descs, hops=hops))
        run.sim.run_until(run.sim.clock + 60.0)
        assert out and out["descs"], "warmed stable get must succeed"
        assert 0 <= out["hops"] <= bound


def test_leaf_sets_heal_after_departures():
    run = build_stable_run("pastry", 64, seed=11)
    rng = np.random.default_rng(13)
    dead = set(int(x) for x in rng.choice(64, size=6, replace=False))
    for i in dead:
        run._node_down(i)
    # one leaf probe per repair tick: detecting every death takes a full
    # rotation over the leafset, refilling takes a few gossip rounds more
    run.sim.run_until(run.sim.clock + 40 * run.cfg.stabilize_period)
    m = run.cfg.id_bits
    alive = [i for i in range(64) if i not in dead]
    for i in alive:
        node = run.net.nodes[i]
        assert not (set(node.leaf_cw) | set(node.leaf_ccw)) & dead, f"node {i} keeps dead leaf"
        h = node.half_leaf
        cw = sorted((j for j in alive if j != i),
                    key=lambda j: ring_distance(run.node_ids[i], run.node_ids[j], m))[:h]
        assert node.leaf_cw == cw, f"node {i} clockwise leaves after churn"
