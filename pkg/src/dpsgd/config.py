"""JSON run configuration.

A config is a JSON object with ``"version": 1``. Validation errors name the
offending key path and, for syntax errors, the line and column.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .commcost import NetworkModel
from .engine import ALGORITHMS, AVERAGE_THEN_UPDATE, UPDATE_THEN_AVERAGE, StepSchedule
from .problems import PARTITIONED, SHARED, StochasticProblem, logistic_problem, quadratic_problem
from .topology import WeightMatrix, build_topology

__all__ = ["SCHEMA_VERSION", "ConfigError", "RunConfig", "load_config", "parse_config"]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Config could not be parsed or failed validation."""


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return d[key]


def _int(v, where: str, lo: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where}: expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{where}: must be >= {lo}, got {v}")
    return v


def _num(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{where}: expected a finite number, got {v!r}")
    return float(v)


@dataclass
class RunConfig:
    """Everything needed to reproduce a set of training runs."""

    algorithm: str
    topology: dict[str, Any]
    problem: dict[str, Any]
    n_iter: int
    stepsize: dict[str, Any]
    seeds: list[int]
    algorithm_params: dict[str, Any] = field(default_factory=dict)
    output_dir: str | None = None
    record_every: int = 1
    loss_threshold: float | None = None
    network: dict[str, Any] | None = None
    n_jobs: int | None = None
    validate_stepsize: bool = False
    sample_budget: int | None = None
    x0: list[float] | None = None
    version: int = SCHEMA_VERSION

    @property
    def n(self) -> int:
        return self.build_topology().n if "n" not in self.topology else int(self.topology["n"])

    def build_topology(self) -> WeightMatrix:
        return build_topology(self.topology)

    def build_problem(self, n: int | None = None) -> StochasticProblem:
        p = dict(self.problem)
        n = n if n is not None else self.n
        kind = p.pop("kind")
        p.pop("n", None)
        if kind == "quadratic":
            return quadratic_problem(
                p["dim"], n, p.get("spread", 0.0), p.get("noise_sigma", 0.0),
                p.get("strategy"), p.get("center", 0.0),
            )
        return logistic_problem(
            p["samples_per_node"], p["dim"], n, p.get("seed", 0), p.get("strategy", PARTITIONED)
        )

    def iterations(self, n: int) -> int:
        """``n_iter``, or ``ceil(sample_budget / n)`` when a total gradient budget is set."""
        if self.sample_budget is not None:
            return -(-self.sample_budget // n)
        return self.n_iter

    def schedule(self):
        s = self.stepsize
        if s["kind"] == "corollary2":
            return "corollary2"
        return StepSchedule(float(s["gamma"]), s.get("drop_at"), s.get("factor", 0.1))

    def network_model(self, dim: int) -> NetworkModel | None:
        if self.network is None:
            return None
        return NetworkModel.for_model(dim, **self.network)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        return {"version": d.pop("version"), **d}


def _check_topology(t, where="topology") -> dict:
    if isinstance(t, str):
        raise ConfigError(f"{where}: give an object such as {{\"name\": \"ring\", \"n\": 8}}")
    if not isinstance(t, dict):
        raise ConfigError(f"{where}: expected an object, got {t!r}")
    if "file" in t:
        if not Path(t["file"]).is_file():
            raise ConfigError(f"{where}.file: no such file {t['file']!r}")
    elif "matrix" in t:
        if not isinstance(t["matrix"], list):
            raise ConfigError(f"{where}.matrix: expected a list of rows")
    else:
        name = _need(t, "name", where)
        if name not in ("ring", "complete", "identity"):
            raise ConfigError(f"{where}.name: unknown topology {name!r}")
        _int(_need(t, "n", where), f"{where}.n", 1)
    return dict(t)


def _check_problem(p) -> dict:
    where = "problem"
    if not isinstance(p, dict):
        raise ConfigError(f"{where}: expected an object")
    kind = _need(p, "kind", where)
    _int(_need(p, "dim", where), f"{where}.dim", 1)
    if kind == "quadratic":
        for key in ("spread", "noise_sigma"):
            if key in p and _num(p[key], f"{where}.{key}") < 0:
                raise ConfigError(f"{where}.{key}: must be >= 0")
    elif kind == "logistic":
        _int(_need(p, "samples_per_node", where), f"{where}.samples_per_node", 1)
    else:
        raise ConfigError(f"{where}.kind: expected 'quadratic' or 'logistic', got {kind!r}")
    if "strategy" in p and p["strategy"] not in (SHARED, PARTITIONED):
        raise ConfigError(f"{where}.strategy: expected {SHARED!r} or {PARTITIONED!r}")
    return dict(p)


def _check_stepsize(s) -> dict:
    where = "stepsize"
    if isinstance(s, (int, float)) and not isinstance(s, bool):
        s = {"kind": "constant", "gamma": s}
    if s == "corollary2":
        s = {"kind": "corollary2"}
    if not isinstance(s, dict):
        raise ConfigError(f"{where}: expected an object, a number or 'corollary2'")
    kind = _need(s, "kind", where)
    if kind in ("constant", "drop"):
        if _num(_need(s, "gamma", where), f"{where}.gamma") <= 0:
            raise ConfigError(f"{where}.gamma: must be > 0")
        if kind == "drop":
            _int(_need(s, "drop_at", where), f"{where}.drop_at", 0)
    elif kind != "corollary2":
        raise ConfigError(f"{where}.kind: expected constant, drop or corollary2, got {kind!r}")
    return dict(s)


_ALGO_KEYS = {"order", "overlap", "momentum", "beta", "tau", "batch_size", "output"}


def parse_config(data: dict[str, Any], base_dir: Path | None = None) -> RunConfig:
    """Validate a decoded JSON document and build a RunConfig."""
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a JSON object")
    version = data.get("version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"version: expected {SCHEMA_VERSION}, got {version!r}")
    algorithm = _need(data, "algorithm", "config")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm: expected one of {ALGORITHMS}, got {algorithm!r}")

    topology = _need(data, "topology", "config")
    if isinstance(topology, dict) and "file" in topology and base_dir is not None:
        if not Path(topology["file"]).is_absolute():
            topology = {**topology, "file": str((base_dir / topology["file"]).resolve())}
    topology = _check_topology(topology)

    problem = _check_problem(_need(data, "problem", "config"))
    n_iter = _int(data.get("n_iter", 0), "n_iter", 0)
    if "n_iter" not in data and "sample_budget" not in data:
        raise ConfigError("config: missing required key 'n_iter'")
    stepsize = _check_stepsize(data.get("stepsize", {"kind": "corollary2"}))

    seeds = data.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds: expected a non-empty list of integers")
    seeds = [_int(s, f"seeds[{i}]", 0) for i, s in enumerate(seeds)]

    params = dict(data.get("algorithm_params", {}))
    unknown = set(params) - _ALGO_KEYS
    if unknown:
        raise ConfigError(f"algorithm_params: unknown keys {sorted(unknown)}")
    if params.get("order", AVERAGE_THEN_UPDATE) not in (AVERAGE_THEN_UPDATE, UPDATE_THEN_AVERAGE):
        raise ConfigError(f"algorithm_params.order: unknown order {params['order']!r}")
    if "tau" in params:
        _int(params["tau"], "algorithm_params.tau", 1)
    if "batch_size" in params:
        _int(params["batch_size"], "algorithm_params.batch_size", 1)

    network = data.get("network")
    if network is not None:
        try:
            NetworkModel.for_model(problem["dim"], **network)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"network: {exc}") from None

    cfg = RunConfig(
        algorithm=algorithm,
        topology=topology,
        problem=problem,
        n_iter=n_iter,
        stepsize=stepsize,
        seeds=seeds,
        algorithm_params=params,
        output_dir=data.get("output_dir"),
        record_every=_int(data.get("record_every", 1), "record_every", 1),
        loss_threshold=None if data.get("loss_threshold") is None else _num(data["loss_threshold"], "loss_threshold"),
        network=network,
        n_jobs=None if data.get("n_jobs") is None else _int(data["n_jobs"], "n_jobs", 1),
        validate_stepsize=bool(data.get("validate_stepsize", False)),
        sample_budget=None if data.get("sample_budget") is None else _int(data["sample_budget"], "sample_budget", 1),
        x0=data.get("x0"),
    )
    if "n" in problem and "n" in topology and problem["n"] != topology["n"]:
        raise ConfigError(
            f"problem.n = {problem['n']} disagrees with topology.n = {topology['n']}"
        )
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return parse_config(data, path.parent)
