"""Analytic per-iteration wall-clock model for centralized and decentralized SGD.

Conventions: full-duplex NICs; under centralization the server NIC is the
only bottleneck and serializes every flow; AllReduce follows the ring
schedule; a decentralized node sends to its neighbours one after another
over a single NIC while receives are free.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Sequence

__all__ = [
    "PATTERNS",
    "NetworkModel",
    "busiest_node_messages",
    "per_iteration_time",
    "server_traffic_bytes",
    "crossover_report",
    "CrossoverCell",
    "pattern_for_algorithm",
    "crossover_rows",
]

PATTERNS = ("parameter-server", "allreduce", "decentralized", "easgd")
BYTES_PER_SCALAR = 8


@dataclass(frozen=True)
class NetworkModel:
    """Link and workload parameters.

    bandwidth in bytes/s, latency in s per message, msg_size in bytes,
    compute_time in s per local mini-batch gradient.
    """

    bandwidth: float
    latency: float
    msg_size: float
    compute_time: float
    pattern: str = "decentralized"
    deg: int = 2
    tau: int = 1
    overlap: bool = False

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.latency < 0:
            raise ValueError(f"latency must be >= 0, got {self.latency}")
        if not self.msg_size > 0:
            raise ValueError(f"msg_size must be > 0, got {self.msg_size}")
        if self.compute_time < 0:
            raise ValueError(f"compute_time must be >= 0, got {self.compute_time}")
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if self.deg < 0:
            raise ValueError(f"deg must be >= 0, got {self.deg}")

    @classmethod
    def for_model(cls, dim: int, **kw) -> "NetworkModel":
        """Message size defaults to ``dim`` double-precision scalars."""
        kw.setdefault("msg_size", dim * BYTES_PER_SCALAR)
        return cls(**kw)


def pattern_for_algorithm(algorithm: str) -> str:
    return {
        "dpsgd": "decentralized",
        "cpsgd": "parameter-server",
        "allreduce": "allreduce",
        "eamsgd": "easgd",
    }[algorithm]


def busiest_node_messages(pattern: str, n: int, deg: int = 2, tau: int = 1) -> int | Fraction:
    """Messages handled per iteration by the busiest node.

    parameter-server: ``2n`` (n receives and n sends at the server).
    allreduce: ``2(n - 1)`` sequential send/receive steps on the ring.
    decentralized: ``2 deg``, independent of ``n``.
    easgd: ``2n / tau`` amortized at the server; a ``Fraction`` when not integral.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if pattern == "decentralized":
        if deg < 0 or (deg >= n and not (n == 1 and deg == 0)):
            raise ValueError(f"degree must satisfy 0 <= deg < n, got deg={deg}, n={n}")
        return 2 * deg
    if pattern == "parameter-server":
        return 2 * n
    if pattern == "allreduce":
        return 2 * (n - 1)
    if pattern == "easgd":
        if tau < 1:
            raise ValueError(f"tau must be >= 1, got {tau}")
        q = Fraction(2 * n, tau)
        return int(q) if q.denominator == 1 else q
    raise ValueError(f"unknown pattern {pattern!r}")


def server_traffic_bytes(model: NetworkModel, n: int) -> float:
    """Bytes through the busiest NIC per iteration (amortized for easgd)."""
    p = model.pattern
    if p == "parameter-server":
        return 2 * n * model.msg_size
    if p == "easgd":
        return 2 * n * model.msg_size / model.tau
    if p == "allreduce":
        return 2 * (n - 1) / n * model.msg_size
    return model.deg * model.msg_size


def per_iteration_time(model: NetworkModel, n: int) -> float:
    """Seconds per synchronous iteration under ``model.pattern``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    bw, lat, msg, comp = model.bandwidth, model.latency, model.msg_size, model.compute_time
    p = model.pattern
    if p == "parameter-server":
        return comp + 2 * lat + 2 * n * msg / bw
    if p == "allreduce":
        return comp + 2 * (n - 1) * lat + 2 * ((n - 1) / n) * msg / bw
    if p == "decentralized":
        comm = lat + model.deg * msg / bw
        # communication overlaps the gradient computation
        return max(comp, comm) if model.overlap else comp + comm
    if p == "easgd":
        return comp + (2 * lat + 2 * n * msg / bw) / model.tau
    raise ValueError(f"unknown pattern {p!r}")


@dataclass(frozen=True)
class CrossoverCell:
    bandwidth: float
    latency: float
    seconds: dict[str, float]
    decentralized_5x: bool
    within_20pct: bool


def crossover_report(
    bandwidths: Sequence[float],
    latencies: Sequence[float],
    n: int,
    msg_size: float,
    compute_time: float,
    deg: int = 2,
    tau: int | None = None,
    overlap: bool = False,
) -> list[CrossoverCell]:
    """Evaluate every pattern on the bandwidth x latency grid.

    A cell is flagged ``decentralized_5x`` when decentralized is at least 5x
    faster than the parameter server, and ``within_20pct`` when the
    slowest pattern is within 20% of the fastest. easgd is included only when
    ``tau`` is given.
    """
    if not bandwidths or not latencies:
        raise ValueError("bandwidth and latency ranges must be non-empty")
    patterns: Iterable[str] = ("parameter-server", "allreduce", "decentralized")
    if tau is not None:
        patterns = (*patterns, "easgd")
    cells = []
    for bw, lat in itertools.product(bandwidths, latencies):
        base = NetworkModel(bw, lat, msg_size, compute_time, deg=deg, tau=tau or 1, overlap=overlap)
        secs = {p: per_iteration_time(replace(base, pattern=p), n) for p in patterns}
        fastest, slowest = min(secs.values()), max(secs.values())
        cells.append(
            CrossoverCell(
                bw,
                lat,
                secs,
                decentralized_5x=5 * secs["decentralized"] <= secs["parameter-server"],
                within_20pct=slowest <= 1.2 * fastest,
            )
        )
    return cells


def crossover_rows(cells: Iterable[CrossoverCell]):
    """Flatten to ``(pattern, bandwidth, latency, seconds)`` tuples."""
    for c in cells:
        for p, s in c.seconds.items():
            yield p, c.bandwidth, c.latency, s
