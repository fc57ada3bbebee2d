"""Synthetic objectives ``f = (1/n) sum_i f_i`` with per-node sampling oracles."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.linalg import helmert
from scipy.optimize import minimize
from scipy.special import expit, log1p

from .rng import ESTIMATOR_TAG, INDEX_TAG, NOISE_TAG, CounterStream

__all__ = [
    "SHARED",
    "PARTITIONED",
    "StochasticProblem",
    "QuadraticProblem",
    "LogisticProblem",
    "GradientSample",
    "VarianceEstimate",
    "NonFiniteGradientError",
    "quadratic_problem",
    "logistic_problem",
    "estimate_sigma_zeta",
    "full_gradient",
]

SHARED = "shared-data"
PARTITIONED = "partitioned"
_STRATEGIES = (SHARED, PARTITIONED)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, k: int, node: int):
        super().__init__(f"non-finite stochastic gradient at iteration {k}, node {node}")
        self.k = k
        self.node = node


class GradientSample(NamedTuple):
    node: int
    iterate: np.ndarray
    gradient: np.ndarray
    sample_id: tuple[int, int, int]  # (seed, node, iteration)


class StochasticProblem:
    """Base class: subclasses define local losses, full and stochastic gradients.

    Attributes every subclass provides: ``dim``, ``node_count``, ``known_L``,
    ``known_sigma_sq``, ``known_zeta_sq`` (``None`` when only estimable),
    ``f_star`` and ``strategy``.
    """

    kind = "abstract"

    def _streams(self, seed: int, batch_size: int) -> list[CounterStream]:
        key = (seed, batch_size)
        cache = self.__dict__.setdefault("_stream_cache", {})
        if key not in cache:
            cache.clear()
            cache[key] = [self._make_stream(seed, i, batch_size) for i in range(self.node_count)]
        return cache[key]

    def _make_stream(self, seed, node, batch_size) -> CounterStream:
        raise NotImplementedError

    def local_loss(self, i: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def loss(self, x: np.ndarray) -> float:
        return float(np.mean([self.local_loss(i, x) for i in range(self.node_count)]))

    def local_gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return np.mean([self.local_gradient(i, x) for i in range(self.node_count)], axis=0)

    def _node_gradient(self, stream: CounterStream, i: int, x: np.ndarray, k: int) -> np.ndarray:
        raise NotImplementedError

    def stochastic_gradient(self, node, x, k, seed, batch_size=1) -> GradientSample:
        """One draw of ``grad F_i(x; xi)`` for ``node`` at iteration ``k``."""
        stream = self._streams(seed, batch_size)[node]
        g = self._node_gradient(stream, node, np.asarray(x, dtype=np.float64), k)
        return GradientSample(node, np.asarray(x), g, (seed, node, k))

    def stochastic_gradients(self, X, k, seed, batch_size=1, n_jobs=None) -> np.ndarray:
        """Column ``i`` of the result is node ``i``'s gradient at column ``i`` of ``X``.

        With ``n_jobs > 1`` nodes are evaluated on a thread pool; each node
        reads only its own stream so the result is bitwise identical to the
        sequential path.
        """
        streams = self._streams(seed, batch_size)
        n = self.node_count

        def one(i):
            return self._node_gradient(streams[i], i, X[:, i], k)

        if n_jobs is not None and n_jobs > 1 and n > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                cols = list(pool.map(one, range(n)))
        else:
            cols = [one(i) for i in range(n)]
        G = np.column_stack(cols)
        if not np.all(np.isfinite(G)):
            bad = int(np.argwhere(~np.isfinite(G))[0][1])
            raise NonFiniteGradientError(k, bad)
        return G

    def effective_sigma_sq(self, batch_size: int = 1) -> float | None:
        if self.known_sigma_sq is None:
            return None
        return self.known_sigma_sq / batch_size

    def describe(self) -> dict:
        raise NotImplementedError


# ---------------------------------------------------------------- quadratic


def _node_offsets(dim: int, n: int, spread: float) -> np.ndarray:
    """Zero-mean offsets ``d_i`` (as columns) with ``mean_i ||d_i||^2 == spread^2``.

    Rows of the Helmert basis are orthonormal-frame points of a centred
    simplex; when ``dim < n - 1`` surplus coordinates are folded onto the
    available ones, which keeps the offsets centred.
    """
    D = np.zeros((dim, n))
    if n == 1 or spread == 0.0:
        return D
    H = helmert(n)  # (n-1, n), rows orthonormal and orthogonal to ones
    for c in range(n - 1):
        D[c % dim] += H[c]
    scale = spread / np.sqrt(np.mean(np.sum(D * D, axis=0)))
    D *= scale
    D -= D.mean(axis=1, keepdims=True)
    return D


@dataclass(frozen=True, eq=False)
class QuadraticProblem(StochasticProblem):
    """``f_i(x) = 0.5 ||x - b_i||^2`` with isotropic Gaussian gradient noise."""

    dim: int
    node_count: int
    centers: np.ndarray  # (dim, n), column i is b_i
    center_mean: np.ndarray
    noise_sigma: float
    spread: float
    strategy: str

    kind = "quadratic"

    @property
    def local_means(self) -> np.ndarray:
        return self.centers

    @property
    def known_L(self) -> float:
        return 1.0

    @property
    def known_sigma_sq(self) -> float:
        return self.dim * self.noise_sigma**2

    @property
    def known_zeta_sq(self) -> float:
        return float(np.mean(np.sum((self.centers - self.center_mean[:, None]) ** 2, axis=0)))

    @property
    def minimizer(self) -> np.ndarray:
        return self.center_mean.copy()

    @property
    def f_star(self) -> float:
        return self.loss(self.center_mean)

    def local_loss(self, i, x):
        r = np.asarray(x) - self.centers[:, i]
        return 0.5 * float(r @ r)

    def loss(self, x):
        R = np.asarray(x)[:, None] - self.centers
        return 0.5 * float(np.mean(np.sum(R * R, axis=0)))

    def local_gradient(self, i, x):
        return np.asarray(x, dtype=np.float64) - self.centers[:, i]

    def gradient(self, x):
        return np.asarray(x, dtype=np.float64) - self.center_mean

    def _make_stream(self, seed, node, batch_size):
        return CounterStream(seed, node, self.dim * batch_size, NOISE_TAG)

    def _node_gradient(self, stream, i, x, k):
        g = x - self.centers[:, i]
        if self.noise_sigma == 0.0:
            return g
        z = stream.normal(k).reshape(-1, self.dim)
        noise = z[0] if z.shape[0] == 1 else z.mean(axis=0)
        return g + self.noise_sigma * noise

    def describe(self):
        return {
            "kind": "quadratic",
            "dim": self.dim,
            "n": self.node_count,
            "spread": self.spread,
            "noise_sigma": self.noise_sigma,
            "strategy": self.strategy,
            "center": self.center_mean.tolist(),
        }


def quadratic_problem(dim, n, spread=0.0, noise_sigma=0.0, strategy=None, center=0.0):
    """Build the quadratic test objective.

    Parameters
    ----------
    dim, n : int
        Model dimension and node count.
    spread : float
        Root-mean-square distance of node centres from their mean. Ignored
        (forced to 0) for ``strategy="shared-data"`` and for ``n == 1``.
    noise_sigma : float
        Per-coordinate standard deviation of gradient noise.
    strategy : {"shared-data", "partitioned"}, optional
        Defaults to ``"partitioned"`` when ``spread > 0``.
    center : float or array of shape (dim,)
        Mean centre ``b_bar``, which is also the global minimizer.
    """
    if dim < 1 or n < 1:
        raise ValueError(f"dim and n must be >= 1, got dim={dim}, n={n}")
    if spread < 0 or noise_sigma < 0:
        raise ValueError("spread and noise_sigma must be non-negative")
    if strategy is None:
        strategy = PARTITIONED if spread > 0 else SHARED
    if strategy not in _STRATEGIES:
        raise ValueError(f"strategy must be one of {_STRATEGIES}, got {strategy!r}")
    if strategy == SHARED or n == 1:
        spread = 0.0
    b_bar = np.broadcast_to(np.asarray(center, dtype=np.float64), (dim,)).copy()
    B = b_bar[:, None] + _node_offsets(dim, n, float(spread))
    for arr in (B, b_bar):
        arr.setflags(write=False)
    return QuadraticProblem(dim, n, B, b_bar, float(noise_sigma), float(spread), strategy)


# ----------------------------------------------------------------- logistic

_REG = 1e-3


@dataclass(frozen=True, eq=False)
class LogisticProblem(StochasticProblem):
    """l2-regularised logistic regression on a synthetic dataset.

    ``features`` is the full pool ``(n * samples_per_node, dim)``, labels are
    in ``{-1, +1}``. Under ``"partitioned"`` node ``i`` owns rows
    ``i*m:(i+1)*m``; under ``"shared-data"`` every node samples the pool.
    """

    dim: int
    node_count: int
    samples_per_node: int
    features: np.ndarray
    labels: np.ndarray
    seed: int
    strategy: str
    reg: float = _REG

    kind = "logistic"

    @property
    def known_L(self) -> float:
        return 0.25 * float(np.max(np.sum(self.features**2, axis=1))) + self.reg

    known_sigma_sq = None

    @property
    def known_zeta_sq(self):
        return 0.0 if self.strategy == SHARED else None

    def _rows(self, i: int) -> slice:
        if self.strategy == SHARED:
            return slice(None)
        m = self.samples_per_node
        return slice(i * m, (i + 1) * m)

    @property
    def local_means(self) -> np.ndarray:
        return np.column_stack(
            [self.features[self._rows(i)].mean(axis=0) for i in range(self.node_count)]
        )

    def _loss_on(self, A, y, w):
        z = y * (A @ w)
        # log(1 + exp(-z)) without overflow
        val = np.where(z > 0, log1p(np.exp(-np.abs(z))), -z + log1p(np.exp(-np.abs(z))))
        return float(np.mean(val)) + 0.5 * self.reg * float(w @ w)

    def _grad_on(self, A, y, w):
        z = y * (A @ w)
        coef = -y * expit(-z)
        return A.T @ coef / A.shape[0] + self.reg * w

    def local_loss(self, i, x):
        r = self._rows(i)
        return self._loss_on(self.features[r], self.labels[r], np.asarray(x, dtype=np.float64))

    def local_gradient(self, i, x):
        r = self._rows(i)
        return self._grad_on(self.features[r], self.labels[r], np.asarray(x, dtype=np.float64))

    def loss(self, x):
        return self._loss_on(self.features, self.labels, np.asarray(x, dtype=np.float64))

    def gradient(self, x):
        # Every node holds the same number of rows, so the pooled gradient
        # equals the node average for both strategies.
        return self._grad_on(self.features, self.labels, np.asarray(x, dtype=np.float64))

    def _make_stream(self, seed, node, batch_size):
        return CounterStream(seed, node, batch_size, INDEX_TAG)

    def _node_gradient(self, stream, i, x, k):
        r = self._rows(i)
        A, y = self.features[r], self.labels[r]
        idx = stream.integers(k, A.shape[0])
        return self._grad_on(A[idx], y[idx], x)

    @cached_property
    def _optimum(self):
        res = minimize(
            self.loss,
            np.zeros(self.dim),
            jac=self.gradient,
            method="L-BFGS-B",
            options={"gtol": 1e-12, "ftol": 0.0, "maxiter": 100_000},
        )
        return res.x, float(res.fun)

    @property
    def minimizer(self) -> np.ndarray:
        return self._optimum[0].copy()

    @property
    def f_star(self) -> float:
        """Optimal value, computed once on first access."""
        return self._optimum[1]

    def to_csv(self, path) -> None:
        """Write ``label,x0,x1,...`` rows, one per sample, pool order."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label"] + [f"x{j}" for j in range(self.dim)])
            for lab, row in zip(self.labels, self.features):
                w.writerow([int(lab)] + [repr(float(v)) for v in row])

    def describe(self):
        return {
            "kind": "logistic",
            "dim": self.dim,
            "n": self.node_count,
            "samples_per_node": self.samples_per_node,
            "seed": self.seed,
            "strategy": self.strategy,
        }


def logistic_problem(samples_per_node, dim, n, seed=0, strategy=PARTITIONED, label_noise=0.5):
    """Synthetic binary classification: Gaussian features, labels from a
    random hyperplane with Gaussian margin noise."""
    if samples_per_node < 1 or dim < 1 or n < 1:
        raise ValueError("samples_per_node, dim and n must all be >= 1")
    if strategy not in _STRATEGIES:
        raise ValueError(f"strategy must be one of {_STRATEGIES}, got {strategy!r}")
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(dim)
    A = rng.standard_normal((samples_per_node * n, dim))
    margin = A @ w_true + label_noise * rng.standard_normal(A.shape[0])
    y = np.where(margin >= 0, 1.0, -1.0)
    A.setflags(write=False)
    y.setflags(write=False)
    return LogisticProblem(dim, n, samples_per_node, A, y, int(seed), strategy)


# ---------------------------------------------------------------- estimators


class VarianceEstimate(NamedTuple):
    sigma_sq: float
    sigma_sq_se: float
    zeta_sq: float
    zeta_sq_se: float


def full_gradient(problem: StochasticProblem, node, x) -> np.ndarray:
    """Exact ``grad f_i(x)``, or ``grad f(x)`` when ``node == "global"``."""
    if node == "global":
        return problem.gradient(x)
    return problem.local_gradient(int(node), x)


def estimate_sigma_zeta(problem, x, draws, batch_size=1, seed=0) -> VarianceEstimate:
    """Monte-Carlo estimate of the two variance constants at the point ``x``.

    ``sigma_sq`` is the node-averaged mean of ``||grad F_i(x; xi) - grad f_i(x)||^2``
    over ``draws`` samples per node, with its standard error. ``zeta_sq`` is
    computed from exact local gradients, so its standard error is zero.
    """
    if draws < 2:
        raise ValueError(f"draws must be >= 2, got {draws}")
    x = np.asarray(x, dtype=np.float64)
    n = problem.node_count
    full = [problem.local_gradient(i, x) for i in range(n)]
    gbar = np.mean(full, axis=0)
    zeta = float(np.mean([np.sum((g - gbar) ** 2) for g in full]))

    node_means = np.empty(n)
    node_vars = np.empty(n)
    for i in range(n):
        if problem.kind == "quadratic":
            stream = CounterStream(seed, i, problem.dim * batch_size, ESTIMATOR_TAG)
        else:
            stream = CounterStream(seed, i, batch_size, ESTIMATOR_TAG)
        sq = np.empty(draws)
        for d in range(draws):
            g = problem._node_gradient(stream, i, x, d)
            sq[d] = np.sum((g - full[i]) ** 2)
        node_means[i] = sq.mean()
        node_vars[i] = sq.var(ddof=1)
    sigma = float(node_means.mean())
    se = float(np.sqrt(np.sum(node_vars / draws)) / n)
    return VarianceEstimate(sigma, se, zeta, 0.0)
