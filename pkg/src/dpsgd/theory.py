"""Closed-form convergence bounds and thresholds for decentralized SGD.

All evaluators are pure. Products that can overflow a double (``n**5 /
sigma**6`` in the iteration threshold) are evaluated with mpmath and
converted back, raising ``OverflowError`` instead of returning ``inf``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import mpmath

__all__ = [
    "TheoryInputs",
    "StepSizeTooLarge",
    "CorollaryInapplicable",
    "corollary2_stepsize",
    "d_constants",
    "theorem1_rhs",
    "theorem1_lhs_weights",
    "corollary2_rhs",
    "k_thresholds",
    "theorem3_max_nodes",
    "theorem4_consensus_rhs",
    "bounds_table",
]


class StepSizeTooLarge(ValueError):
    """D1 or D2 is not positive for the requested step size."""

    def __init__(self, message: str, gamma_max: float):
        super().__init__(f"{message}; step size must stay below gamma_max = {gamma_max:.6g}")
        self.gamma_max = gamma_max


class CorollaryInapplicable(ValueError):
    """sigma = 0: the noise-dependent step size and thresholds degenerate."""


@dataclass(frozen=True)
class TheoryInputs:
    L: float
    sigma_sq: float
    zeta_sq: float
    rho: float
    n: int
    K: int
    gamma: float
    f0_minus_fstar: float

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError(f"L must be > 0, got {self.L}")
        if self.sigma_sq < 0 or self.zeta_sq < 0:
            raise ValueError("sigma_sq and zeta_sq must be >= 0")
        if not 0 <= self.rho < 1:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if self.n < 1 or self.K < 1:
            raise ValueError("n and K must be >= 1")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.f0_minus_fstar < 0:
            raise ValueError("f0_minus_fstar must be >= 0")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma_sq)

    def with_corollary2_gamma(self) -> "TheoryInputs":
        return replace(self, gamma=corollary2_stepsize(self.L, self.sigma, self.K, self.n))


def corollary2_stepsize(L, sigma, K, n) -> float:
    """gamma = 1 / (2L + sigma * sqrt(K / n))."""
    if not L > 0:
        raise ValueError(f"L must be > 0, got {L}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if K < 1 or n < 1:
        raise ValueError("K and n must be >= 1")
    return 1.0 / (2.0 * L + sigma * math.sqrt(K / n))


def _gamma_max(rho, n, L) -> float:
    return (1.0 - math.sqrt(rho)) / (math.sqrt(18.0 * n) * L)


def d_constants(inp: TheoryInputs) -> tuple[float, float]:
    """Return ``(D1, D2)``; raise ``StepSizeTooLarge`` if ``D2 <= 0``."""
    gap_sq = (1.0 - math.sqrt(inp.rho)) ** 2
    g2 = inp.gamma**2
    D2 = 1.0 - 18.0 * g2 / gap_sq * inp.n * inp.L**2
    if D2 <= 0:
        raise StepSizeTooLarge(f"D2 = {D2:.6g} <= 0", _gamma_max(inp.rho, inp.n, inp.L))
    D1 = 0.5 - 9.0 * g2 * inp.L**2 * inp.n / (gap_sq * D2)
    return D1, D2


def theorem1_lhs_weights(inp: TheoryInputs) -> tuple[float, float]:
    """Weights on the two gradient sums of the left-hand side, as printed:
    ``(1 - gamma L) / 2`` for the averaged local-gradient term and ``D1`` for
    the gradient at the averaged iterate."""
    D1, _ = d_constants(inp)
    return (1.0 - inp.gamma * inp.L) / 2.0, D1


def theorem1_rhs(inp: TheoryInputs) -> float:
    _, D2 = d_constants(inp)
    g, L, n = inp.gamma, inp.L, inp.n
    gap_sq = (1.0 - math.sqrt(inp.rho)) ** 2
    return (
        inp.f0_minus_fstar / (g * inp.K)
        + g * L * inp.sigma_sq / (2.0 * n)
        + g**2 * L**2 * n * inp.sigma_sq / ((1.0 - inp.rho) * D2)
        + 9.0 * g**2 * L**2 * n * inp.zeta_sq / (gap_sq * D2)
    )


def corollary2_rhs(L, sigma, K, n, f0_minus_fstar) -> float:
    """8 (f0 - f*) L / K + (8 (f0 - f*) + 4 L) sigma / sqrt(K n)."""
    if K < 1 or n < 1:
        raise ValueError("K and n must be >= 1")
    return 8.0 * f0_minus_fstar * L / K + (8.0 * f0_minus_fstar + 4.0 * L) * sigma / math.sqrt(K * n)


def _to_float(x) -> float:
    if not mpmath.isfinite(x) or abs(x) > mpmath.mpf(1.7976931348623157e308):
        raise OverflowError(f"value {mpmath.nstr(x, 6)} does not fit in a double")
    return float(x)


def k_thresholds(L, sigma, zeta, rho, n, f0_minus_fstar) -> tuple[float, float]:
    """Minimum iteration counts from the two sufficient conditions on K.

    Returns the unrounded ``(K_min_eq5, K_min_eq6)``. ``zeta`` and ``sigma``
    are standard deviations, not variances.
    """
    if sigma <= 0:
        raise CorollaryInapplicable(
            "sigma = 0: deterministic gradients, K thresholds are not defined"
        )
    if not 0 <= rho < 1:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    with mpmath.workdps(40):
        L_, s, z, r, n_, d = (mpmath.mpf(v) for v in (L, sigma, zeta, rho, n, f0_minus_fstar))
        gap_sq = (1 - mpmath.sqrt(r)) ** 2
        inner = s**2 / (1 - r) + 9 * z**2 / gap_sq
        eq5 = 4 * L_**4 * n_**5 / (s**6 * (d + L_) ** 2) * inner**2
        eq6 = 72 * L_**2 * n_**2 / (s**2 * gap_sq)
        return _to_float(eq5), _to_float(eq6)


def theorem3_max_nodes(K: int, zeta_is_zero: bool) -> float:
    """Constant-free node-count guidance: ``K**(1/9)`` if zeta = 0, else ``K**(1/13)``.

    The hidden constants depend on sigma, zeta, L and f(0) - f*; only the
    growth order is meaningful.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    p = 9 if zeta_is_zero else 13
    r = K ** (1.0 / p)
    nearest = round(r)
    if nearest**p == K:
        return float(nearest)
    return r


def theorem4_consensus_rhs(inp: TheoryInputs) -> float:
    """Bound ``n gamma^2 A / D2`` on the running average of the consensus distance."""
    D1, D2 = d_constants(inp)
    if D1 <= 0:
        # D1 > 0 exactly when gamma < (1 - sqrt(rho)) / (6 sqrt(n) L)
        limit = (1.0 - math.sqrt(inp.rho)) / (6.0 * math.sqrt(inp.n) * inp.L)
        raise StepSizeTooLarge(f"D1 = {D1:.6g} <= 0", limit)
    s2, z2, L, g, n = inp.sigma_sq, inp.zeta_sq, inp.L, inp.gamma, inp.n
    gap_sq = (1.0 - math.sqrt(inp.rho)) ** 2
    noise = s2 / (1.0 - inp.rho) + 9.0 * z2 / gap_sq
    A = (
        2.0 * s2 / (1.0 - inp.rho)
        + 18.0 * z2 / gap_sq
        + L**2 / D1 * noise
        + 18.0 / gap_sq * (inp.f0_minus_fstar / (g * inp.K) + g * L * s2 / (2.0 * n * D1))
    )
    return n * g**2 * A / D2


def bounds_table(inp: TheoryInputs) -> dict[str, float | str]:
    """Every bound for one configuration; failures become message strings."""
    row: dict[str, float | str] = {}
    try:
        row["D1"], row["D2"] = d_constants(inp)
        row["theorem1_rhs"] = theorem1_rhs(inp)
    except StepSizeTooLarge as exc:
        row["D1"] = row["D2"] = row["theorem1_rhs"] = f"step size too large (gamma_max={exc.gamma_max:.6g})"
    if inp.sigma_sq == 0:
        msg = "Corollary 2 inapplicable (sigma = 0)"
        row["corollary2_rhs"] = corollary2_rhs(inp.L, 0.0, inp.K, inp.n, inp.f0_minus_fstar)
        row["K_min_eq5"] = row["K_min_eq6"] = msg
    else:
        row["corollary2_rhs"] = corollary2_rhs(inp.L, inp.sigma, inp.K, inp.n, inp.f0_minus_fstar)
        try:
            row["K_min_eq5"], row["K_min_eq6"] = k_thresholds(
                inp.L, inp.sigma, math.sqrt(inp.zeta_sq), inp.rho, inp.n, inp.f0_minus_fstar
            )
        except OverflowError as exc:
            row["K_min_eq5"] = row["K_min_eq6"] = f"overflow: {exc}"
    try:
        row["theorem4_rhs"] = theorem4_consensus_rhs(inp)
    except StepSizeTooLarge as exc:
        row["theorem4_rhs"] = f"step size too large (gamma_max={exc.gamma_max:.6g})"
    return row
