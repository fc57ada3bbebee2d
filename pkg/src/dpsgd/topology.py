"""Mixing matrices for decentralized averaging and their spectra."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "MAX_NODES",
    "WeightMatrix",
    "WeightMatrixError",
    "SpectralGapWarning",
    "RingFit",
    "ring_weight_matrix",
    "complete_weight_matrix",
    "identity_weight_matrix",
    "custom_weight_matrix",
    "spectral_gap",
    "mixing_decay",
    "ring_rho_asymptotic_fit",
    "ring_second_eigenvalue",
    "load_matrix",
    "save_matrix",
    "build_topology",
]

MAX_NODES = 4096
REFERENCE_RING_CONSTANT = 16 * math.pi**2 / 3
CIRCULANT_RING_CONSTANT = 8 * math.pi**2 / 3


class WeightMatrixError(ValueError):
    """A matrix failed one of the symmetric doubly stochastic checks."""


class SpectralGapWarning(UserWarning):
    """rho == 1: the matrix never mixes information between some nodes."""


def _check_n(n) -> int:
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)):
        raise TypeError(f"node count must be an integer, got {type(n).__name__}")
    if n < 1:
        raise ValueError(f"node count must be >= 1, got {n}")
    if n > MAX_NODES:
        raise ValueError(f"node count {n} exceeds the dense limit {MAX_NODES}")
    return int(n)


def _validate(W: np.ndarray, rowsum_tol: float, sym_tol: float) -> None:
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise WeightMatrixError(f"not square: shape {W.shape}")
    if W.shape[0] == 0:
        raise WeightMatrixError("empty matrix")
    if W.shape[0] > MAX_NODES:
        raise WeightMatrixError(f"node count {W.shape[0]} exceeds {MAX_NODES}")
    if not np.all(np.isfinite(W)):
        i, j = np.argwhere(~np.isfinite(W))[0]
        raise WeightMatrixError(f"non-finite entry at ({i}, {j})")
    if np.any(W < 0):
        i, j = np.argwhere(W < 0)[0]
        raise WeightMatrixError(f"negative entry W[{i},{j}] = {W[i, j]!r}")
    if np.any(W > 1 + rowsum_tol):
        i, j = np.argwhere(W > 1 + rowsum_tol)[0]
        raise WeightMatrixError(f"entry above 1: W[{i},{j}] = {W[i, j]!r}")
    asym = np.abs(W - W.T)
    if np.any(asym > sym_tol):
        i, j = np.unravel_index(np.argmax(asym), asym.shape)
        raise WeightMatrixError(
            f"not symmetric: W[{i},{j}] = {W[i, j]!r} but W[{j},{i}] = {W[j, i]!r}"
        )
    dev = np.abs(W.sum(axis=1) - 1.0)
    if np.any(dev > rowsum_tol):
        i = int(np.argmax(dev))
        raise WeightMatrixError(
            f"row {i} sums to {W[i].sum()!r}, deviation {dev[i]:.3g} > {rowsum_tol:g}"
        )


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Validated symmetric doubly stochastic matrix.

    The entries array is read-only; the spectrum is computed once on first
    access.
    """

    entries: np.ndarray
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        W = np.array(self.entries, dtype=np.float64, copy=True)
        W.setflags(write=False)
        object.__setattr__(self, "entries", W)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues sorted in descending order."""
        lam = np.linalg.eigvalsh(self.entries)[::-1].copy()
        lam.setflags(write=False)
        return lam

    @cached_property
    def rho(self) -> float:
        return _rho_from_eigenvalues(self.eigenvalues)

    @property
    def degree(self) -> int:
        """Largest number of neighbours (non-zero off-diagonal weights) of any node."""
        off = self.entries != 0
        np.fill_diagonal(off, False)
        return int(off.sum(axis=1).max()) if self.n > 1 else 0

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)

    def __repr__(self):
        return f"WeightMatrix(name={self.name!r}, n={self.n})"


def _rho_from_eigenvalues(lam: np.ndarray) -> float:
    if lam.shape[0] < 2:
        return 0.0
    r = max(abs(float(lam[1])), abs(float(lam[-1])))
    return min(r * r, 1.0)


def _finish(W: np.ndarray, name: str, rowsum_tol: float, sym_tol: float) -> WeightMatrix:
    _validate(W, rowsum_tol, sym_tol)
    out = WeightMatrix(W, name=name)
    top = out.eigenvalues[0]
    if abs(top - 1.0) > 1e-10:
        raise WeightMatrixError(f"largest eigenvalue is {top!r}, expected 1")
    if out.n > 1 and out.rho >= 1.0 - 1e-12:
        warnings.warn(
            f"{name} matrix has rho = 1 (Assumption 1-2 violated); nodes will not reach consensus",
            SpectralGapWarning,
            stacklevel=3,
        )
    return out


def ring_weight_matrix(n: int) -> WeightMatrix:
    """Ring with weight 1/3 on each node and its two neighbours.

    For ``n <= 3`` neighbour slots coincide and their weights are added, so
    ``n = 2`` gives ``[[1/3, 2/3], [2/3, 1/3]]`` and ``n = 3`` is the complete
    graph.
    """
    n = _check_n(n)
    W = np.zeros((n, n))
    third = 1.0 / 3.0
    if n == 1:
        W[0, 0] = 1.0
    elif n == 3:
        W[:] = third
    else:
        for i in range(n):
            W[i, i] += third
            W[i, (i - 1) % n] += third
            W[i, (i + 1) % n] += third
    return _finish(W, "ring", 1e-12, 1e-12)


def complete_weight_matrix(n: int) -> WeightMatrix:
    n = _check_n(n)
    return _finish(np.full((n, n), 1.0 / n), "complete", 1e-12, 1e-12)


def identity_weight_matrix(n: int) -> WeightMatrix:
    """No mixing at all; useful for running n isolated SGD chains."""
    n = _check_n(n)
    return _finish(np.eye(n), "identity", 1e-12, 1e-12)


def custom_weight_matrix(entries, name: str = "custom") -> WeightMatrix:
    """Validate a user-supplied matrix.

    Raises
    ------
    WeightMatrixError
        If the matrix is not square, has an entry outside [0, 1], is not
        symmetric to 1e-9, or has a row sum off by more than 1e-9.
    """
    try:
        W = np.array(entries, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise WeightMatrixError(f"not a numeric square matrix: {exc}") from None
    return _finish(W, name, 1e-9, 1e-9)


def spectral_gap(W: WeightMatrix) -> float:
    """rho = max(|lambda_2|, |lambda_n|)**2; 0 for a single node."""
    if not isinstance(W, WeightMatrix):
        W = custom_weight_matrix(W)
    return W.rho


def mixing_decay(W: WeightMatrix, k: int, i: int) -> tuple[float, float]:
    """Distance of ``W^k e_i`` from the uniform vector, and the bound ``rho^k``.

    ``i`` is a 0-based node index. The power is applied by repeated
    matrix-vector products.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if not 0 <= i < W.n:
        raise ValueError(f"node index {i} outside [0, {W.n})")
    v = np.zeros(W.n)
    v[i] = 1.0
    for _ in range(k):
        v = W.entries @ v
    lhs = float(np.sum((1.0 / W.n - v) ** 2))
    return lhs, W.rho**k


def mixing_decay_curve(W: WeightMatrix, k_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Worst-node ``||1/n - W^k e_i||^2`` and ``rho^k`` for ``k = 0..k_max``."""
    P = np.eye(W.n)
    worst = np.empty(k_max + 1)
    for k in range(k_max + 1):
        worst[k] = np.max(np.sum((1.0 / W.n - P) ** 2, axis=0))
        P = W.entries @ P
    return worst, W.rho ** np.arange(k_max + 1)


def ring_second_eigenvalue(n: int) -> float:
    """Closed-form second eigenvalue of the ring matrix for ``n >= 5``."""
    return (1.0 + 2.0 * math.cos(2.0 * math.pi / n)) / 3.0


@dataclass(frozen=True)
class RingFit:
    """Fitted constant c in ``rho(n) ~ 1 - c / n^2``."""

    n_values: tuple[int, ...]
    scaled_gaps: tuple[float, ...]
    c: float
    reference_constant: float = REFERENCE_RING_CONSTANT
    circulant_constant: float = CIRCULANT_RING_CONSTANT

    def summary(self) -> str:
        return (
            f"fitted c = {self.c:.4f}; 16*pi^2/3 = {self.reference_constant:.4f} "
            f"(ratio {self.c / self.reference_constant:.3f}); "
            f"8*pi^2/3 = {self.circulant_constant:.4f} "
            f"(ratio {self.c / self.circulant_constant:.3f})"
        )


def ring_rho_asymptotic_fit(n_values: Sequence[int]) -> RingFit:
    """Least-squares constant for ``(1 - rho(n)) * n^2`` over ring sizes.

    With a single free constant the least-squares solution is the mean of
    the scaled gaps.
    """
    ns = tuple(int(v) for v in n_values)
    if len(ns) < 2:
        raise ValueError("need at least two ring sizes to fit")
    if min(ns) < 5:
        raise ValueError(f"ring sizes must be >= 5, got {min(ns)}")
    gaps = tuple((1.0 - ring_weight_matrix(n).rho) * n * n for n in ns)
    return RingFit(ns, gaps, float(np.mean(gaps)))


def save_matrix(path, W) -> None:
    """One row per line, whitespace-separated, round-trip precision."""
    np.savetxt(path, np.asarray(W, dtype=np.float64), fmt="%.17g")


def load_matrix(path, name: str | None = None) -> WeightMatrix:
    path = Path(path)
    try:
        W = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise WeightMatrixError(f"{path}: {exc}") from None
    return custom_weight_matrix(W, name=name or path.name)


_BUILTIN = {
    "ring": ring_weight_matrix,
    "complete": complete_weight_matrix,
    "identity": identity_weight_matrix,
}


def build_topology(spec) -> WeightMatrix:
    """Build from a name (``"ring"``), a dict, a matrix, or a WeightMatrix.

    Dict forms: ``{"name": "ring", "n": 8}``, ``{"file": "w.txt"}``,
    ``{"matrix": [[...], ...]}``.
    """
    if isinstance(spec, WeightMatrix):
        return spec
    if isinstance(spec, dict):
        if "matrix" in spec:
            return custom_weight_matrix(spec["matrix"])
        if "file" in spec:
            return load_matrix(spec["file"])
        name, n = spec.get("name"), spec.get("n")
        if name not in _BUILTIN:
            raise ValueError(f"unknown topology {name!r}; choose from {sorted(_BUILTIN)}")
        return _BUILTIN[name](n)
    return custom_weight_matrix(spec)
