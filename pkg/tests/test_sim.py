"""Event engine: ordering, cancellation, delivery accounting, RNG streams."""

import numpy as np
import pytest

from dhtbench.sim import (Network, Simulator, build_er_underlay, rng_stream,
                          sample_exponential)


class Probe:
    """Minimal node double for Network tests."""

    def __init__(self, alive=True):
        self.alive = alive
        self.received = []

    def on_message(self, src, kind, payload, query_id):
        self.received.append((src, kind, payload, query_id))


def test_clock_advances_to_end_on_empty_queue():
    sim = Simulator(1)
    sim.run_until(40.0)
    assert sim.clock == 40.0


def test_events_execute_in_time_order():
    sim = Simulator(1)
    fired = []
    sim.schedule(3.0, lambda: fired.append(3))
    sim.schedule(1.0, lambda: fired.append(1))
    sim.schedule(2.0, lambda: fired.append(2))
    sim.run_until(2.0)
    assert fired == [1, 2]
    sim.run_until(10.0)
    assert fired == [1, 2, 3]


def test_same_instant_ties_break_by_schedule_order():
    sim = Simulator(1)
    fired = []
    for tag in range(5):
        sim.schedule(5.0, lambda tag=tag: fired.append(tag))
    sim.run_until(5.0)
    assert fired == [0, 1, 2, 3, 4]


def test_handler_scheduling_at_current_instant_runs_in_same_pass():
    sim = Simulator(1)
    fired = []

    def outer():
        fired.append("outer")
        sim.schedule(sim.clock, lambda: fired.append("inner"))

    sim.schedule(2.0, outer)
    sim.run_until(2.0)
    assert fired == ["outer", "inner"]


def test_cancelled_event_never_fires():
    sim = Simulator(1)
    fired = []
    h = sim.schedule(1.0, lambda: fired.append("x"))
    h.cancel()
    sim.run_until(5.0)
    assert fired == []


def test_scheduling_into_the_past_fails_loudly():
    sim = Simulator(1)
    sim.run_until(10.0)
    with pytest.raises(ValueError):
        sim.schedule(9.0, lambda: None)


def test_clock_is_monotone_across_many_events():
    sim = Simulator(3)
    rng = sim.stream("t")
    seen = []
    for _ in range(200):
        sim.schedule(float(rng.uniform(0, 50)), lambda: seen.append(sim.clock))
    sim.run_until(50.0)
    assert seen == sorted(seen)
    assert len(seen) == 200


def test_rng_streams_are_reproducible_and_independent():
    a1 = rng_stream(42, "churn").random(8)
    a2 = rng_stream(42, "churn").random(8)
    b = rng_stream(42, "workload").random(8)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)


def test_adding_a_stream_does_not_perturb_existing_ones():
    sim1 = Simulator(7)
    first = sim1.stream("churn").random(4)
    sim2 = Simulator(7)
    sim2.stream("extra-consumer").random(100)
    second = sim2.stream("churn").random(4)
    assert np.array_equal(first, second)


def test_exponential_sampler_mean_and_positivity():
    rng = rng_stream(11, "exp")
    draws = np.array([sample_exponential(rng, 100.0) for _ in range(100_000)])
    assert draws.min() > 0.0
    assert 98.0 <= draws.mean() <= 102.0


def test_exponential_sampler_variance():
    rng = rng_stream(12, "exp")
    draws = np.array([sample_exponential(rng, 30.0) for _ in range(1_000_000)])
    assert 855.0 <= draws.var() <= 945.0


def test_exponential_sampler_ks_statistic():
    rng = rng_stream(13, "exp")
    mean = 30.0
    n = 100_000
    draws = np.sort([sample_exponential(rng, mean) for _ in range(n)])
    cdf = 1.0 - np.exp(-draws / mean)
    grid = np.arange(1, n + 1) / n
    ks = max(np.abs(cdf - grid).max(), np.abs(cdf - (grid - 1.0 / n)).max())
    assert ks < 0.01


def test_exponential_sampler_rejects_bad_mean():
    rng = rng_stream(14, "exp")
    with pytest.raises(ValueError):
        sample_exponential(rng, 0.0)
    with pytest.raises(ValueError):
        sample_exponential(rng, -1.0)


def test_message_delivery_latency_and_conservation():
    sim = Simulator(1)
    net = Network(sim, latency=1.0, loss=0.0)
    net.nodes = [Probe(), Probe()]
    sim.run_until(7.0)
    net.send(0, 1, "ping", {}, "MAINTENANCE")
    assert net.nodes[1].received == []
    sim.run_until(8.0)
    assert net.nodes[1].received == [(0, "ping", {}, None)]
    for _ in range(100):
        net.send(0, 1, "ping", {}, "MAINTENANCE")
    sim.run_until(20.0)
    assert net.deliveries == net.sends == 101


def test_certain_loss_delivers_nothing_but_counts_sends():
    sim = Simulator(1)
    net = Network(sim, latency=1.0, loss=1.0)
    net.nodes = [Probe(), Probe()]
    for _ in range(50):
        net.send(0, 1, "ping", {}, "MAINTENANCE")
    sim.run_until(10.0)
    assert net.sends == 50
    assert net.deliveries == 0


def test_dead_destination_is_a_silent_tombstone_drop():
    sim = Simulator(1)
    net = Network(sim, latency=1.0, loss=0.0)
    net.nodes = [Probe(), Probe(alive=False)]
    net.send(0, 1, "ping", {}, "MAINTENANCE")
    sim.run_until(5.0)
    assert net.sends == 1
    assert net.deliveries == 0
    assert net.nodes[1].received == []


def test_send_accounting_by_class_and_query():
    sim = Simulator(1)
    net = Network(sim, latency=1.0, loss=0.0)
    net.nodes = [Probe(), Probe()]
    sim.run_until(2.0)
    net.send(0, 1, "a", {}, "GET", query_id=9)
    net.send(0, 1, "b", {}, "GET", query_id=9)
    net.send(0, 1, "c", {}, "PUT")
    assert net.query_msgs[9] == 2
    assert net.send_times["GET"] == [2.0, 2.0]
    assert net.sends_in_window(0.0, 3.0) == 3
    assert net.sends_in_window(0.0, 3.0, "PUT") == 1


def test_network_rejects_bad_parameters():
    sim = Simulator(1)
    with pytest.raises(ValueError):
        Network(sim, latency=0.0)
    with pytest.raises(ValueError):
        Network(sim, latency=1.0, loss=1.5)


def test_underlay_degree_and_symmetry():
    rng = rng_stream(5, "topology")
    adj = build_er_underlay(512, 6.0, rng)
    assert len(adj) == 512
    degrees = [len(nbrs) for nbrs in adj]
    avg = sum(degrees) / len(degrees)
    assert 5.4 <= avg <= 6.6
    for a, nbrs in enumerate(adj):
        assert a not in nbrs
        assert len(set(nbrs)) == len(nbrs)
        for b in nbrs:
            assert a in adj[b]


def test_underlay_is_deterministic_for_a_seed():
    a = build_er_underlay(64, 6.0, rng_stream(9, "topology"))
    b = build_er_underlay(64, 6.0, rng_stream(9, "topology"))
    assert a == b
