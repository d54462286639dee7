"""Penalty transforms and discounted risk estimators.

The penalty transforms rewrite a raw constraint signal c so that driving the
discounted-sum constraint ``E[(1-g) sum_t g^t c~_t] <= 0`` enforces an
interpretable guarantee under the occupation measure:

* ``average`` - identity; the plain discounted average constraint.
* ``chance``  - ``I[c >= alpha] - delta``; bounds the violation probability
  ``Pr{C(x) >= alpha}`` by delta.
* ``cvar``    - ``[c - alpha]_+ - delta``; bounds ``CVaR_beta`` by
  ``alpha + delta / (1 - beta)``.

The estimators work on weighted samples: each visited state contributes
weight ``gamma**t * (1-gamma)/(1-gamma**(T+1))`` within its episode (weights
sum to one per episode), and episodes are averaged uniformly, giving an
unbiased empirical picture of the finite-horizon occupation measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_METRICS = ("average", "chance", "cvar")

# Cumulative-weight comparisons tolerate this much float slack so that e.g.
# ten 0.1-weights reach the 0.9 quantile exactly.
_CUM_TOL = 1e-12


@dataclass(frozen=True)
class PenaltySpec:
    """Risk-metric selector with its tolerances.

    ``alpha`` and ``delta`` are per-constraint vectors (scalars broadcast);
    ``beta`` is the risk level used for CVaR reporting.
    """

    metric: str
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(1))
    delta: np.ndarray = field(default_factory=lambda: np.zeros(1))
    beta: float = 0.9

    def __post_init__(self):
        if self.metric not in _METRICS:
            raise ValueError(f"metric must be one of {_METRICS}, got {self.metric!r}")
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        delta = np.atleast_1d(np.asarray(self.delta, dtype=np.float64))
        if alpha.shape != delta.shape:
            alpha, delta = np.broadcast_arrays(alpha, delta)
        object.__setattr__(self, "alpha", alpha.copy())
        object.__setattr__(self, "delta", delta.copy())
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")
        if self.metric == "chance" and (np.any(self.delta < 0) or np.any(self.delta > 1)):
            raise ValueError("chance mode needs delta in [0, 1]")
        if self.metric == "cvar" and (np.any(self.alpha < 0) or np.any(self.delta < 0)):
            raise ValueError("cvar mode needs alpha >= 0 and delta >= 0")

    @property
    def m(self):
        return self.alpha.shape[0]


@dataclass(frozen=True)
class WeightedSample:
    """One constraint evaluation with its discount weight."""

    value: float
    weight: float


def stack_samples(samples):
    """(values, weights) arrays from a WeightedSample sequence."""
    values = np.array([s.value for s in samples], dtype=np.float64)
    weights = np.array([s.weight for s in samples], dtype=np.float64)
    return values, weights


def discount_weights(n, gamma):
    """Per-step weights ``gamma**t (1-g)/(1-g**n)`` for t = 0..n-1; sum to 1."""
    if n < 1:
        raise ValueError("need at least one step")
    w = (1.0 - gamma) * np.power(gamma, np.arange(n))
    return w / (1.0 - gamma**n)


def transform_penalty(c_raw, spec):
    """Componentwise penalty transform of a raw constraint evaluation.

    Accepts a single m-vector or a (T, m) batch; never mutates the input.
    """
    c = np.atleast_1d(np.asarray(c_raw, dtype=np.float64))
    if spec.metric == "average":
        return c.copy()
    if spec.metric == "chance":
        return (c >= spec.alpha).astype(np.float64) - spec.delta
    return np.maximum(c - spec.alpha, 0.0) - spec.delta


def joint_violation_indicator(c_raw, alpha):
    """1.0 when every component violates its tolerance, else 0.0.

    The conjunction form of the violation statement, usable as an aggregate
    single-channel constraint.
    """
    c = np.atleast_1d(np.asarray(c_raw, dtype=np.float64))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    return float(np.all(c >= alpha, axis=-1))


def _sorted_normalized(values, weights):
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty sample set")
    if values.shape != weights.shape:
        raise ValueError("values and weights must have identical shape")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    total = weights.sum()
    if total <= 0:
        raise ValueError("total weight must be positive")
    order = np.argsort(values, kind="stable")
    return values[order], weights[order] / total


def empirical_var(values, weights, beta):
    """Weighted lower quantile: smallest v with cum-weight{c <= v} >= beta."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must be in (0, 1), got {beta}")
    v, w = _sorted_normalized(values, weights)
    cum = np.cumsum(w)
    idx = int(np.searchsorted(cum, beta - _CUM_TOL, side="left"))
    return float(v[min(idx, len(v) - 1)])


def empirical_cvar(values, weights, beta):
    """Weighted mean of the upper (1-beta) tail.

    The atom at the quantile is split proportionally so the tail carries
    exactly mass ``1 - beta`` (the continuous-cdf limit convention).
    """
    var = empirical_var(values, weights, beta)
    v, w = _sorted_normalized(values, weights)
    tail = 1.0 - beta
    above = v > var
    w_above = float(w[above].sum())
    s_above = float((w[above] * v[above]).sum())
    atom = max(tail - w_above, 0.0)
    return (s_above + atom * var) / tail


def empirical_violation_probability(values, weights, alpha):
    """Total normalized weight of samples with value >= alpha."""
    v, w = _sorted_normalized(values, weights)
    return float(w[v >= alpha].sum())


def cvar_upper_bound(alpha, delta, beta):
    """``alpha + delta / (1 - beta)``, componentwise."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must be in (0, 1), got {beta}")
    alpha = np.asarray(alpha, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    out = alpha + delta / (1.0 - beta)
    return float(out) if out.ndim == 0 else out


def f_alpha_curve(values, weights, beta, alpha_grid):
    """Empirical ``F(a) = a + E[[c - a]_+] / (1 - beta)`` on a grid.

    Returns an array of F values aligned with ``alpha_grid``. The grid
    argmin approximates the value-at-risk and the minimum approximates the
    CVaR (exactly so at a = VaR in the continuous limit).
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must be in (0, 1), got {beta}")
    v, w = _sorted_normalized(values, weights)
    alpha_grid = np.asarray(alpha_grid, dtype=np.float64)
    # Suffix sums let each grid point evaluate the hinge mean in O(log n).
    w_suffix = np.concatenate([np.cumsum((w)[::-1])[::-1], [0.0]])
    wv_suffix = np.concatenate([np.cumsum((w * v)[::-1])[::-1], [0.0]])
    idx = np.searchsorted(v, alpha_grid, side="right")
    hinge_mean = wv_suffix[idx] - alpha_grid * w_suffix[idx]
    return alpha_grid + hinge_mean / (1.0 - beta)


def risk_report(values, weights, beta, alpha, n_episodes, metric, delta):
    """Standard JSON-ready risk record for an evaluation batch.

    ``cvar_ub`` is the measured bound ``alpha + E[[c - alpha]_+] / (1-beta)``
    (the F curve at the reporting tolerance); ``delta`` is echoed from the
    penalty configuration.
    """
    alpha = float(np.atleast_1d(alpha)[0])
    return {
        "metric": metric,
        "beta": float(beta),
        "alpha": alpha,
        "delta": float(np.atleast_1d(delta)[0]),
        "var": empirical_var(values, weights, beta),
        "cvar": empirical_cvar(values, weights, beta),
        "cvar_ub": float(f_alpha_curve(values, weights, beta, np.array([alpha]))[0]),
        "prob_violation": empirical_violation_probability(values, weights, alpha),
        "n_episodes": int(n_episodes),
    }
