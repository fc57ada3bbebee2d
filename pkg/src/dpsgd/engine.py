"""Lockstep simulation of D-PSGD, C-PSGD and EAMSGD.

The model state is an ``N x n`` matrix whose column ``i`` is node ``i``'s
local iterate. Every iteration is a synchronous barrier step; metrics are
taken on the pre-step state, so a run of ``K`` iterations records
``k = 0..K-1``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from . import commcost
from .problems import NonFiniteGradientError, StochasticProblem
from .theory import corollary2_stepsize
from .topology import WeightMatrix, complete_weight_matrix

__all__ = [
    "ALGORITHMS",
    "TRACE_COLUMNS",
    "AVERAGE_THEN_UPDATE",
    "UPDATE_THEN_AVERAGE",
    "EAMSGD_CONVENTION",
    "TrainState",
    "MetricsRecord",
    "MetricsTrace",
    "StepSchedule",
    "TrainResult",
    "TrainingAborted",
    "initial_state",
    "mix_and_update",
    "elastic_exchange",
    "dpsgd_step",
    "cpsgd_step",
    "eamsgd_step",
    "compute_metrics",
    "run_training",
    "output_model",
    "corollary2_stepsize",
]

ALGORITHMS = ("dpsgd", "cpsgd", "allreduce", "eamsgd")
TRACE_COLUMNS = ("k", "loss_avg", "grad_norm_sq_avg", "consensus_M", "running_eps", "wallclock_model_s")
AVERAGE_THEN_UPDATE = "average-then-update"
UPDATE_THEN_AVERAGE = "update-then-average"
EAMSGD_CONVENTION = (
    "elastic rate alpha = beta / n; every tau-th iteration x_i -= alpha (x_i - center) "
    "and center += alpha * sum_i (x_i - center), both from pre-exchange values; "
    "gradients are taken at the pre-exchange local iterate"
)


class TrainingAborted(RuntimeError):
    """A step produced a non-finite gradient; ``partial`` holds the trace so far."""

    def __init__(self, cause: NonFiniteGradientError, partial: "TrainResult"):
        super().__init__(str(cause))
        self.k = cause.k
        self.node = cause.node
        self.partial = partial


@dataclass(frozen=True, eq=False)
class TrainState:
    """Local iterates ``X`` (``N x n``), the iteration counter and the run seed.

    Random draws are addressed by ``(seed, node, k)``, so ``k`` is every
    node's stream cursor. ``extras`` holds momentum buffers (``"V"``) and the
    EAMSGD centre variable (``"center"``).
    """

    X: np.ndarray
    k: int = 0
    seed: int = 0
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def rng_states(self) -> tuple[int, ...]:
        return (self.k,) * self.X.shape[1]


def initial_state(dim: int, n: int, seed: int = 0, x0=None) -> TrainState:
    X = np.zeros((dim, n))
    if x0 is not None:
        X[:] = np.asarray(x0, dtype=np.float64).reshape(dim, 1)
    return TrainState(X, 0, seed)


@dataclass(frozen=True)
class MetricsRecord:
    k: int
    loss_avg: float
    grad_norm_sq_avg: float
    consensus_M: float
    running_eps: float
    wallclock_model_s: float


@dataclass(eq=False)
class MetricsTrace:
    """Column-oriented per-iteration metrics.

    ``partial_grad_sq`` (``||mean_i grad f_i(x_i)||^2``) is kept for
    diagnostics only and is not part of the CSV schema.
    """

    k: list[int] = field(default_factory=list)
    loss_avg: list[float] = field(default_factory=list)
    grad_norm_sq_avg: list[float] = field(default_factory=list)
    consensus_M: list[float] = field(default_factory=list)
    running_eps: list[float] = field(default_factory=list)
    wallclock_model_s: list[float] = field(default_factory=list)
    partial_grad_sq: list[float] = field(default_factory=list)
    _grad_sum: float = field(default=0.0, repr=False)

    def __len__(self):
        return len(self.k)

    def append(self, k, loss, grad_sq, consensus, wallclock, partial=None):
        self._grad_sum += grad_sq
        self.k.append(int(k))
        self.loss_avg.append(float(loss))
        self.grad_norm_sq_avg.append(float(grad_sq))
        self.consensus_M.append(float(consensus))
        self.running_eps.append(self._grad_sum / len(self.k))
        self.wallclock_model_s.append(float(wallclock))
        if partial is not None:
            self.partial_grad_sq.append(float(partial))

    def __getitem__(self, idx) -> MetricsRecord:
        return MetricsRecord(*(getattr(self, c)[idx] for c in TRACE_COLUMNS))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def column(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=np.float64)

    def to_csv(self, path=None) -> str:
        """Write (or return) the CSV; floats use shortest round-trip repr."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for i in range(len(self)):
            w.writerow([self.k[i]] + [repr(getattr(self, c)[i]) for c in TRACE_COLUMNS[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "MetricsTrace":
        out = cls()
        with open(path, newline="") as fh:
            rows = csv.DictReader(fh)
            if tuple(rows.fieldnames or ()) != TRACE_COLUMNS:
                raise ValueError(f"unexpected trace header {rows.fieldnames}")
            for r in rows:
                out.k.append(int(r["k"]))
                for c in TRACE_COLUMNS[1:]:
                    getattr(out, c).append(float(r[c]))
        return out


@dataclass(frozen=True)
class StepSchedule:
    """Constant step, optionally divided by ``1 / factor`` from ``drop_at`` on."""

    gamma: float
    drop_at: int | None = None
    factor: float = 0.1

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"step size must be > 0, got {self.gamma}")

    def __call__(self, k: int) -> float:
        if self.drop_at is not None and k >= self.drop_at:
            return self.gamma * self.factor
        return self.gamma


# ------------------------------------------------------------------ steps


def mix_and_update(X, W, step, order=AVERAGE_THEN_UPDATE) -> np.ndarray:
    """Apply the gossip average and the additive update ``step`` (already scaled).

    ``average-then-update`` computes ``X W + step``; ``update-then-average``
    computes ``(X + step) W``.
    """
    Wm = W.entries if isinstance(W, WeightMatrix) else np.asarray(W)
    if order == AVERAGE_THEN_UPDATE:
        return X @ Wm + step
    if order == UPDATE_THEN_AVERAGE:
        return (X + step) @ Wm
    raise ValueError(f"unknown order {order!r}")


def elastic_exchange(X, center, alpha) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric elastic pull between the local iterates and the centre."""
    D = X - center[:, None]
    return X - alpha * D, center + alpha * D.sum(axis=1)


def _check(state: TrainState, n: int, problem: StochasticProblem):
    if state.X.shape != (problem.dim, n):
        raise ValueError(
            f"state has shape {state.X.shape}, expected ({problem.dim}, {n})"
        )


def dpsgd_step(
    state: TrainState,
    W: WeightMatrix,
    gamma: float,
    problem: StochasticProblem,
    order: str = AVERAGE_THEN_UPDATE,
    overlap: bool = False,
    momentum: float = 0.0,
    batch_size: int = 1,
    n_jobs: int | None = None,
) -> TrainState:
    """One decentralized iteration.

    Gradients are always evaluated at the pre-communication local iterates,
    whichever order is used. ``overlap`` only affects the cost model and is
    accepted here so callers can pass a full configuration.
    """
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    _check(state, W.n, problem)
    G = problem.stochastic_gradients(state.X, state.k, state.seed, batch_size, n_jobs)
    extras = state.extras
    if momentum:
        V = momentum * extras.get("V", np.zeros_like(G)) - gamma * G
        extras = {**extras, "V": V}
        step = V
    else:
        step = -gamma * G
    return TrainState(mix_and_update(state.X, W, step, order), state.k + 1, state.seed, extras)


def cpsgd_step(
    state: TrainState,
    gamma: float,
    problem: StochasticProblem,
    batch_size: int = 1,
    n_jobs: int | None = None,
) -> TrainState:
    """Mini-batch SGD: one model, ``n`` gradients averaged per step.

    All columns of ``X`` carry the same model, so consensus is identically 0.
    """
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    _check(state, problem.node_count, problem)
    n = problem.node_count
    x = state.X[:, 0]
    G = problem.stochastic_gradients(np.repeat(x[:, None], n, axis=1), state.k, state.seed, batch_size, n_jobs)
    x_new = x - gamma * G.mean(axis=1)
    return TrainState(np.repeat(x_new[:, None], n, axis=1), state.k + 1, state.seed, state.extras)


def eamsgd_step(
    state: TrainState,
    gamma: float,
    alpha: float,
    tau: int,
    momentum: float,
    problem: StochasticProblem,
    batch_size: int = 1,
    n_jobs: int | None = None,
) -> TrainState:
    """Elastic averaging with heavy-ball local steps.

    Each node computes ``v <- momentum v - gamma grad`` at its current iterate.
    On iterations with ``k % tau == 0`` the elastic exchange is applied to
    the pre-step iterates before ``v`` is added.
    """
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    _check(state, problem.node_count, problem)
    X = state.X
    G = problem.stochastic_gradients(X, state.k, state.seed, batch_size, n_jobs)
    V = momentum * state.extras.get("V", np.zeros_like(X)) - gamma * G
    center = state.extras.get("center")
    if center is None:
        center = X.mean(axis=1)
    if state.k % tau == 0:
        X, center = elastic_exchange(X, center, alpha)
    return TrainState(X + V, state.k + 1, state.seed, {"V": V, "center": center})


# --------------------------------------------------------------- metrics


def compute_metrics(problem: StochasticProblem, X: np.ndarray, partial: bool = False):
    """``(f(xbar), ||grad f(xbar)||^2, M, partial)`` for the column average ``xbar``.

    ``partial`` is ``||(1/n) sum_i grad f_i(x_i)||^2`` when requested, else None.
    """
    xbar = X.mean(axis=1)
    g = problem.gradient(xbar)
    dev = X - xbar[:, None]
    M = float(np.mean(np.sum(dev * dev, axis=0)))
    p = None
    if partial:
        pg = np.mean([problem.local_gradient(i, X[:, i]) for i in range(X.shape[1])], axis=0)
        p = float(pg @ pg)
    return problem.loss(xbar), float(g @ g), M, p


# ------------------------------------------------------------------- runs


@dataclass(eq=False)
class TrainResult:
    trace: MetricsTrace
    state: TrainState
    metadata: dict[str, Any]

    @property
    def model(self) -> np.ndarray:
        return output_model(self.state)


def output_model(state: TrainState, mode: str | int = "average") -> np.ndarray:
    """Column average (default), a single node's iterate (int), or ``"center"``."""
    if mode == "average":
        return state.X.mean(axis=1)
    if mode == "center":
        if "center" not in state.extras:
            raise ValueError("state has no centre variable")
        return state.extras["center"].copy()
    i = int(mode)
    if not 0 <= i < state.X.shape[1]:
        raise ValueError(f"node index {i} outside [0, {state.X.shape[1]})")
    return state.X[:, i].copy()


def _resolve_schedule(gamma, problem, n_iter, batch_size) -> tuple[Callable[[int], float], dict]:
    if isinstance(gamma, StepSchedule):
        return gamma, {"kind": "drop" if gamma.drop_at is not None else "constant", "gamma": gamma.gamma,
                       "drop_at": gamma.drop_at, "factor": gamma.factor}
    if gamma == "corollary2":
        s2 = problem.effective_sigma_sq(batch_size)
        if s2 is None:
            raise ValueError("corollary2 step size needs a known sigma^2; pass an estimate via a constant step")
        g = corollary2_stepsize(problem.known_L, math.sqrt(s2), max(n_iter, 1), problem.node_count)
        return StepSchedule(g), {"kind": "corollary2", "gamma": g}
    g = float(gamma)
    return StepSchedule(g), {"kind": "constant", "gamma": g}


def run_training(
    problem: StochasticProblem,
    *,
    algorithm: str = "dpsgd",
    W: WeightMatrix | None = None,
    n_iter: int,
    gamma: float | str | StepSchedule = "corollary2",
    seed: int = 0,
    order: str = AVERAGE_THEN_UPDATE,
    overlap: bool = False,
    momentum: float = 0.0,
    beta: float = 0.9,
    tau: int = 1,
    batch_size: int = 1,
    record_every: int = 1,
    x0=None,
    n_jobs: int | None = None,
    network: commcost.NetworkModel | None = None,
    track_partial: bool = False,
    on_step: Callable[[TrainState], None] | None = None,
) -> TrainResult:
    """Run ``n_iter`` synchronous iterations and record metrics.

    Parameters
    ----------
    algorithm : {"dpsgd", "cpsgd", "allreduce", "eamsgd"}
        ``cpsgd`` and ``allreduce`` share numerics and differ in cost model.
    W : WeightMatrix
        Mixing matrix for ``dpsgd``; defaults to the complete graph.
    gamma : float, "corollary2" or StepSchedule
    beta, tau : float, int
        EAMSGD centre moving rate and communication period.
    record_every : int
        Record metrics when ``k % record_every == 0``.
    network : NetworkModel, optional
        Cost model for ``wallclock_model_s``; its pattern, degree, tau and
        overlap are overridden from the run. Without it the column is 0.
    on_step : callable, optional
        Called with every post-step state (used by tests).

    Raises
    ------
    TrainingAborted
        On a non-finite gradient; carries the partial result.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {algorithm!r}")
    if n_iter < 0:
        raise ValueError(f"n_iter must be >= 0, got {n_iter}")
    if record_every < 1:
        raise ValueError(f"record_every must be >= 1, got {record_every}")
    n = problem.node_count
    if algorithm == "dpsgd":
        W = W if W is not None else complete_weight_matrix(n)
        if W.n != n:
            raise ValueError(f"topology has {W.n} nodes but the problem has {n}")
    schedule, step_meta = _resolve_schedule(gamma, problem, n_iter, batch_size)
    alpha = beta / n

    per_iter = 0.0
    if network is not None:
        net = replace(
            network,
            pattern=commcost.pattern_for_algorithm(algorithm),
            deg=W.degree if algorithm == "dpsgd" else network.deg,
            tau=tau if algorithm == "eamsgd" else 1,
            overlap=overlap if algorithm == "dpsgd" else False,
        )
        per_iter = commcost.per_iteration_time(net, n)

    metadata = {
        "algorithm": algorithm,
        "problem": problem.describe(),
        "topology": None if W is None else {"name": W.name, "n": W.n, "rho": W.rho, "degree": W.degree},
        "n_iter": n_iter,
        "stepsize": step_meta,
        "seed": seed,
        "batch_size": batch_size,
        "record_every": record_every,
        "start_point": "zero" if x0 is None else "override",
        "output_mode": "average",
        "seconds_per_iteration": per_iter,
        "decisions": {
            "gradient_point": "pre-communication local iterate",
            "rng": "Philox counter-based streams keyed by (seed, node, iteration)",
        },
    }
    if algorithm == "dpsgd":
        metadata.update(order=order, overlap=overlap, momentum=momentum)
    if algorithm == "eamsgd":
        metadata.update(beta=beta, alpha=alpha, tau=tau, momentum=momentum)
        metadata["decisions"]["eamsgd"] = EAMSGD_CONVENTION

    state = initial_state(problem.dim, n, seed, x0)
    if algorithm == "eamsgd":
        state = replace(state, extras={"center": state.X[:, 0].copy(), "V": np.zeros_like(state.X)})
    trace = MetricsTrace()
    for k in range(n_iter):
        if k % record_every == 0:
            loss, gsq, M, p = compute_metrics(problem, state.X, track_partial)
            trace.append(k, loss, gsq, M, k * per_iter, p)
        g = schedule(k)
        try:
            if algorithm == "dpsgd":
                state = dpsgd_step(state, W, g, problem, order, overlap, momentum, batch_size, n_jobs)
            elif algorithm == "eamsgd":
                state = eamsgd_step(state, g, alpha, tau, momentum, problem, batch_size, n_jobs)
            else:
                state = cpsgd_step(state, g, problem, batch_size, n_jobs)
        except NonFiniteGradientError as exc:
            metadata["aborted"] = {"k": exc.k, "node": exc.node}
            raise TrainingAborted(exc, TrainResult(trace, state, metadata)) from exc
        if on_step is not None:
            on_step(state)
    return TrainResult(trace, state, metadata)
