from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from dpsgd.commcost import (
    NetworkModel,
    busiest_node_messages,
    crossover_report,
    per_iteration_time,
    server_traffic_bytes,
)


def test_message_counts():
    assert busiest_node_messages("parameter-server", 8) == 16
    assert busiest_node_messages("allreduce", 8) == 14
    assert busiest_node_messages("easgd", 8, tau=4) == 4
    assert busiest_node_messages("easgd", 8, tau=3) == Fraction(16, 3)
    for n in (3, 50, 1000):
        assert busiest_node_messages("decentralized", n, deg=2) == 4
    with pytest.raises(ValueError):
        busiest_node_messages("decentralized", 2, deg=2)
    with pytest.raises(ValueError):
        busiest_node_messages("mesh", 4)


def test_parameter_server_example():
    m = NetworkModel(100e6, 1e-3, 1e6, 0.0, pattern="parameter-server")
    assert per_iteration_time(m, 8) == pytest.approx(0.162, abs=1e-12)


def test_overlap_takes_max():
    # comm = latency + deg * msg / bw = 0 + 2 * 2000 / 1e6 = 4 ms
    m = NetworkModel(1e6, 0.0, 2000, 0.010, overlap=True)
    assert per_iteration_time(m, 10) == pytest.approx(0.010)
    assert per_iteration_time(replace(m, overlap=False), 10) == pytest.approx(0.014)


def test_infinite_network_is_compute_bound():
    for p in ("parameter-server", "allreduce", "decentralized", "easgd"):
        m = NetworkModel(1e300, 0.0, 1e6, 0.05, pattern=p)
        assert per_iteration_time(m, 64) == pytest.approx(0.05, rel=1e-12)


def test_easgd_traffic_amortized():
    base = NetworkModel(1e8, 1e-4, 1e6, 0.05, pattern="easgd", tau=1)
    t1 = server_traffic_bytes(base, 8)
    assert t1 / server_traffic_bytes(replace(base, tau=16), 8) == 16


def test_large_latency_hurts_allreduce_most():
    lo, hi = 1e-5, 1e-1
    growth = {}
    for p in ("parameter-server", "allreduce", "decentralized"):
        m = NetworkModel(1e9, lo, 1e6, 0.05, pattern=p)
        growth[p] = per_iteration_time(replace(m, latency=hi), 16) - per_iteration_time(m, 16)
    assert max(growth, key=growth.get) == "allreduce"


def test_crossover_grid_flags():
    cells = crossover_report([1e6, 1e12], [1e-3, 1e-9], 16, 1e6, 0.05, deg=2)
    slow = next(c for c in cells if c.bandwidth == 1e6 and c.latency == 1e-3)
    assert slow.decentralized_5x
    fast = next(c for c in cells if c.bandwidth == 1e12 and c.latency == 1e-9)
    assert fast.within_20pct
    assert "easgd" not in fast.seconds
    assert "easgd" in crossover_report([1e6], [1e-3], 16, 1e6, 0.05, tau=4)[0].seconds


def test_validation():
    with pytest.raises(ValueError):
        NetworkModel(0, 0, 1, 0)
    with pytest.raises(ValueError):
        NetworkModel(1, -1, 1, 0)
    with pytest.raises(ValueError):
        NetworkModel(1, 0, 1, 0, pattern="mesh")
    assert NetworkModel.for_model(10, bandwidth=1, latency=0, compute_time=0).msg_size == 80


pos = st.floats(1e-6, 1e3)


@settings(max_examples=60, deadline=None)
@given(
    pattern=st.sampled_from(["parameter-server", "allreduce", "decentralized", "easgd"]),
    bw=st.floats(1e3, 1e12),
    lat=st.floats(0, 1),
    msg=st.floats(1, 1e9),
    comp=st.floats(0, 10),
    n=st.integers(3, 200),
)
def test_time_monotone(pattern, bw, lat, msg, comp, n):
    m = NetworkModel(bw, lat, msg, comp, pattern=pattern)
    t = per_iteration_time(m, n)
    assert t >= comp
    assert per_iteration_time(replace(m, bandwidth=bw * 2), n) <= t
    assert per_iteration_time(replace(m, latency=lat + 1e-3), n) >= t
    assert per_iteration_time(replace(m, msg_size=msg * 2), n) >= t
    if pattern != "decentralized":
        assert per_iteration_time(m, n + 1) >= t
