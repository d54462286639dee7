"""Occupation-measure machinery for tabular chains.

The discounted sum operator used throughout is
``(1 - gamma) * sum_t gamma**t * y_t``; the occupation measure of a chain is
that operator applied to the state-visitation distributions, either over an
infinite horizon (closed form ``(1-g) * (I - g P^T)^-1 p0``) or a finite one
(normalized truncated series). These exact quantities serve as the
brute-force oracle against which the Monte-Carlo risk estimators and the
discounted-sum/occupation-expectation identity are checked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonErgodicChainError, ShapeError

# Discount factors this close to 1 make the resolvent numerically useless.
GAMMA_CEILING = 1.0 - 1e-9

# Relative slack when testing the geometric-accumulation threshold; values
# within this factor of the bound count as achieving it (ties count per the
# >= in the definition, and exact ties in floats need the slack).
_TIE_TOL = 1e-9


@dataclass(frozen=True)
class DiscountSpec:
    """Discount factor plus optional finite horizon (inclusive, t = 0..T)."""

    gamma: float
    horizon: int | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.horizon is not None and self.horizon < 0:
            raise ValueError(f"horizon must be >= 0, got {self.horizon}")


@dataclass(frozen=True)
class OccupationResult:
    """Occupation measure vector plus the mode it was computed in."""

    mu: np.ndarray
    mode: str  # "infinite" or "finite"

    def __post_init__(self):
        if self.mode not in ("infinite", "finite"):
            raise ValueError(f"unknown mode {self.mode!r}")


def discounted_sum(values, spec):
    """``(1-gamma) * sum_{t=0}^{T} gamma**t * values[t]``.

    ``values`` may be a sequence of scalars or of vectors (componentwise).
    If ``spec.horizon`` is set, at most ``horizon + 1`` leading entries are
    summed. An empty sequence yields 0 by convention.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return 0.0
    n = arr.shape[0]
    if spec.horizon is not None:
        n = min(n, spec.horizon + 1)
    g = spec.gamma
    w = (1.0 - g) * np.power(g, np.arange(n))
    out = np.tensordot(w, arr[:n], axes=(0, 0))
    return float(out) if out.ndim == 0 else out


def occupation_exact(mdp, spec):
    """Exact occupation measure of a tabular chain.

    Infinite-horizon mode solves ``(I - gamma P^T) mu = (1-gamma) p0``;
    finite-horizon mode evaluates the normalized truncated series
    ``(1-g)/(1-g^{T+1}) * sum_t g^t (P^T)^t p0``.
    """
    g = spec.gamma
    if g > GAMMA_CEILING:
        raise ValueError(f"gamma must be <= {GAMMA_CEILING} for the exact solver")
    P = np.asarray(mdp.P, dtype=np.float64)
    p0 = np.asarray(mdp.p0, dtype=np.float64)
    if spec.horizon is None:
        S = P.shape[0]
        mu = np.linalg.solve(np.eye(S) - g * P.T, (1.0 - g) * p0)
        return OccupationResult(mu=mu, mode="infinite")
    T = spec.horizon
    acc = np.zeros_like(p0)
    pt = p0.copy()
    w = 1.0
    for _ in range(T + 1):
        acc += w * pt
        pt = P.T @ pt
        w *= g
    mu = (1.0 - g) / (1.0 - g ** (T + 1)) * acc
    return OccupationResult(mu=mu, mode="finite")


def stationary_distribution(mdp, tol=1e-8):
    """Stationary distribution of an ergodic chain via the unit eigenvector.

    Raises :class:`NonErgodicChainError` when the unit eigenvalue is not
    simple or another eigenvalue sits on the unit circle (periodic chain).
    """
    P = np.asarray(mdp.P, dtype=np.float64)
    eigvals, eigvecs = np.linalg.eig(P.T)
    on_circle = np.abs(np.abs(eigvals) - 1.0) < tol
    if on_circle.sum() != 1:
        raise NonErgodicChainError(
            f"{int(on_circle.sum())} eigenvalues on the unit circle; "
            "chain has no unique stationary limit"
        )
    idx = int(np.argmin(np.abs(eigvals - 1.0)))
    v = np.real(eigvecs[:, idx])
    v = np.clip(v / v.sum(), 0.0, None)
    return v / v.sum()


def occupation_limits_check(mdp, gamma_grid, stationary=True):
    """Distances of the occupation measure to its two limits over a gamma grid.

    Returns a list of rows ``{gamma, dist_p0, dist_stationary}`` with max-norm
    distances to the initial distribution and (when ``stationary``) to the
    stationary distribution. Requesting the stationary branch on a
    non-ergodic chain raises.
    """
    p_inf = stationary_distribution(mdp) if stationary else None
    p0 = np.asarray(mdp.p0, dtype=np.float64)
    rows = []
    for g in gamma_grid:
        mu = occupation_exact(mdp, DiscountSpec(gamma=float(g))).mu
        rows.append(
            {
                "gamma": float(g),
                "dist_p0": float(np.max(np.abs(mu - p0))),
                "dist_stationary": (
                    float(np.max(np.abs(mu - p_inf))) if p_inf is not None else None
                ),
            }
        )
    return rows


def effective_horizon_t1(gamma):
    """Expected geometric termination time ``1 / (1 - gamma)``."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    return 1.0 / (1.0 - gamma)


def effective_horizon_t2(gamma, eps):
    """Smallest K whose accumulated discount weight reaches ``1 - eps``.

    ``1 - gamma**K >= 1 - eps`` i.e. ``gamma**K <= eps``; closed form
    ``ceil(log eps / log gamma)``. Ties count as achieving the bound; a
    relative slack of 1e-9 absorbs float rounding at exact ties, so at
    non-generic (gamma, eps) pairs the result can differ by one from a
    slack-free scan.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must be in (0, 1), got {eps}")
    ratio = math.log(eps) / math.log(gamma)
    return max(1, math.ceil(ratio - _TIE_TOL))


def discounted_expectation_equivalence(mdp, h, spec, tail_tol=1e-12):
    """Both sides of the discounted-sum / occupation-expectation identity.

    Left side: the discounted sum of ``E[h(x_t)]`` computed by iterating the
    transition operator (truncated where the certified geometric tail bound
    drops below ``tail_tol``). Right side: ``mu . h`` under the exact
    occupation measure (scaled by ``1 - gamma**(T+1)`` in finite-horizon mode
    so both sides estimate the same discounted sum). Returns
    ``(lhs, rhs, gap)``.
    """
    P = np.asarray(mdp.P, dtype=np.float64)
    p0 = np.asarray(mdp.p0, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if h.shape != p0.shape:
        raise ShapeError(f"h shape {h.shape} != state count {p0.shape}")
    g = spec.gamma
    if spec.horizon is None:
        hmax = max(float(np.max(np.abs(h))), 1e-300)
        n_terms = max(1, math.ceil(math.log(tail_tol / hmax) / math.log(g)))
        scale = 1.0
    else:
        n_terms = spec.horizon + 1
        scale = 1.0 - g ** (spec.horizon + 1)
    lhs = 0.0
    pt = p0.copy()
    w = 1.0 - g
    for _ in range(n_terms):
        lhs += w * float(pt @ h)
        pt = P.T @ pt
        w *= g
    rhs = scale * float(occupation_exact(mdp, spec).mu @ h)
    return lhs, rhs, abs(lhs - rhs)
