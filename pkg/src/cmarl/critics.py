"""Critic architectures and the multi-signal TD machinery.

Three value-estimator families are compared throughout:

* ``generic``          - one net on the global state, scalar output; must
  absorb the dual variable's effect into a single value.
* ``input_augmented``  - one net on (state, lambda), scalar output.
* ``structured``       - one net on the state with m+1 heads (reward head
  plus one head per constraint channel); the scalar value is composed as
  ``head_0(x) - lambda . heads_1..m(x)``, which is exactly affine in lambda
  with d(value)/d(lambda) = -constraint heads.

The structured critic is trained with a sum of squared TD errors over the
m+1 channels; n-step returns bootstrap from a (frozen) critic and are
treated as constants in the loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import NumericalAbort, ShapeError
from .nn import Mlp

VARIANTS = ("generic", "input_augmented", "structured")


class Critic:
    """One agent's value estimator; see module docstring for variants."""

    def __init__(self, variant, state_dim, m, hidden=(64, 64), rng=None, net=None):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.variant = variant
        self.state_dim = int(state_dim)
        self.m = int(m)
        if net is None:
            dims = (self.input_dim, *hidden, self.output_dim)
            net = Mlp.create(dims, rng)
        else:
            if net.in_dim != self.input_dim or net.out_dim != self.output_dim:
                raise ShapeError(
                    f"net dims ({net.in_dim}->{net.out_dim}) do not match "
                    f"variant {variant} ({self.input_dim}->{self.output_dim})"
                )
        self.net = net

    @property
    def input_dim(self):
        return self.state_dim + (self.m if self.variant == "input_augmented" else 0)

    @property
    def output_dim(self):
        return self.m + 1 if self.variant == "structured" else 1

    def copy(self):
        return Critic(self.variant, self.state_dim, self.m, net=self.net.copy())

    def inputs(self, states, lam):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if self.variant != "input_augmented":
            return states
        lam_tile = np.broadcast_to(np.asarray(lam, dtype=np.float64), (states.shape[0], self.m))
        return np.concatenate([states, lam_tile], axis=1)

    def heads(self, states):
        """(batch, m+1) channel values; structured variant only."""
        if self.variant != "structured":
            raise ShapeError(f"heads() requires the structured variant, not {self.variant}")
        return np.atleast_2d(self.net.forward(np.atleast_2d(states)))

    def values(self, states, lam):
        """Scalar values at a batch of states for the given dual variable."""
        squeeze = np.asarray(states).ndim == 1
        if self.variant == "structured":
            h = self.heads(states)
            out = h[:, 0] - h[:, 1:] @ np.asarray(lam, dtype=np.float64)
        else:
            out = self.net.forward(self.inputs(states, lam))[:, 0]
        return float(out[0]) if squeeze else out


def structured_value(critic, x, lam):
    """``head_0(x) - lam . heads_1..m(x)`` for a structured critic."""
    if critic.variant != "structured":
        raise ShapeError("structured_value requires a structured critic")
    return critic.values(x, lam)


@dataclass
class ValueTargets:
    """Per-timestep n-step returns: (T, m+1) for the structured variant,
    (T,) penalized scalars otherwise."""

    d: np.ndarray
    variant: str


@lru_cache(maxsize=None)
def _return_weights(T, kappa, gamma):
    """Matrices (Wd, Wv) with D = Wd @ d + Wv @ V for a length-T episode.

    Row t sums ``gamma**(n-t) d_n`` for n = t..N-1 and bootstraps
    ``gamma**(N-t) V(x_N)`` with N = min(T, t + kappa).
    """
    Wd = np.zeros((T, T))
    Wv = np.zeros((T, T + 1))
    for t in range(T):
        N = min(T, t + kappa)
        for n in range(t, N):
            Wd[t, n] = gamma ** (n - t)
        Wv[t, N] = gamma ** (N - t)
    return Wd, Wv


def nstep_returns(traj, critic, gamma, kappa, agent, lam):
    """n-step returns for one agent's critic over a complete episode.

    The per-step signal is ``[r_t, c~_t]`` (transformed constraint); the
    scalar variants collapse it with ``eta = [1, -lam]`` first. ``critic``
    supplies the bootstrap values (pass the target network).
    """
    if kappa < 1:
        raise ValueError(f"n-step horizon must be >= 1, got {kappa}")
    T = traj.T
    d = np.concatenate([traj.rewards[:T, agent : agent + 1], traj.c_transformed[:T]], axis=1)
    Wd, Wv = _return_weights(T, int(kappa), float(gamma))
    if critic.variant == "structured":
        V = critic.heads(traj.states)
        return ValueTargets(d=Wd @ d + Wv @ V, variant=critic.variant)
    lam = np.asarray(lam, dtype=np.float64)
    d_scalar = d[:, 0] - d[:, 1:] @ lam
    V = critic.values(traj.states, lam)
    return ValueTargets(d=Wd @ d_scalar + Wv @ V, variant=critic.variant)


def advantages(targets, critic, states, lam):
    """(T,) advantage values ``eta . (D_t - V(x_t))`` under the live critic.

    For scalar-critic variants this is the plain ``D_t - V(x_t)``.
    """
    if targets.variant != critic.variant:
        raise ShapeError(
            f"targets computed for {targets.variant!r}, critic is {critic.variant!r}"
        )
    T = targets.d.shape[0]
    states = np.asarray(states)[:T]
    lam = np.asarray(lam, dtype=np.float64)
    if critic.variant == "structured":
        eta = np.concatenate([[1.0], -lam])
        return (targets.d - critic.heads(states)) @ eta
    return targets.d - critic.values(states, lam)


def critic_loss_and_grad(critic, traj, targets, lam):
    """Sum of squared TD errors against constant targets, plus its gradient.

    Structured: ``sum_t sum_k (D_t[k] - head_k(x_t))^2``; scalar variants:
    ``sum_t (D_t - V(x_t))^2``.
    """
    if targets.variant != critic.variant:
        raise ShapeError(
            f"targets computed for {targets.variant!r}, critic is {critic.variant!r}"
        )
    T = targets.d.shape[0]
    inputs = critic.inputs(traj.states[:T], lam)
    pred = critic.net.forward(inputs)
    D = targets.d if critic.variant == "structured" else targets.d[:, None]
    resid = D - pred
    loss = float(np.sum(resid * resid))
    if not np.isfinite(loss):
        raise NumericalAbort("non-finite critic loss")
    grads = critic.net.backward(inputs, -2.0 * resid)
    return loss, grads


def mstde_gap_prediction(c_bar, sigma_c2, sigma_l2):
    """Predicted excess mean-square TD error of a dual-blind critic:
    ``Tr[sigma_l2 (sigma_c2 + c_bar c_bar^T)]``."""
    c_bar = np.atleast_1d(np.asarray(c_bar, dtype=np.float64))
    sigma_c2 = np.atleast_2d(np.asarray(sigma_c2, dtype=np.float64))
    sigma_l2 = np.atleast_2d(np.asarray(sigma_l2, dtype=np.float64))
    for name, s in (("sigma_c2", sigma_c2), ("sigma_l2", sigma_l2)):
        if s.shape[0] != s.shape[1] or not np.allclose(s, s.T, atol=1e-12):
            raise ValueError(f"{name} must be symmetric")
    if sigma_c2.shape != sigma_l2.shape or c_bar.shape[0] != sigma_c2.shape[0]:
        raise ShapeError("moment dimensions disagree")
    return float(np.trace(sigma_l2 @ (sigma_c2 + np.outer(c_bar, c_bar))))


# ---------------------------------------------------------------------------
# Polynomial function classes for the linear-quadratic policy-evaluation
# study: the same three families, but as linear-in-feature models so that
# convergence is a convex least-squares fact rather than a tuning exercise.
# ---------------------------------------------------------------------------


def quadratic_features(x):
    """[1, x_i, x_i x_j (i<=j)] feature map; x is (n,) or (batch, n)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    batch, n = x.shape
    cols = [np.ones((batch, 1)), x]
    for i in range(n):
        for j in range(i, n):
            cols.append((x[:, i] * x[:, j])[:, None])
    return np.concatenate(cols, axis=1)


def linear_features(x):
    """[1, x] feature map."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.concatenate([np.ones((x.shape[0], 1)), x], axis=1)


def n_quadratic_features(n):
    return 1 + n + n * (n + 1) // 2


class PolyCritic:
    """Linear-in-features value model for the policy-evaluation study.

    ``kind`` mirrors the net-based variants: ``generic`` uses quadratic
    features of the state; ``input_augmented`` quadratic features of
    (state, lambda); ``structured`` a quadratic reward head and linear
    constraint heads composed with the true lambda.
    """

    def __init__(self, kind, n, m):
        if kind not in VARIANTS:
            raise ValueError(f"kind must be one of {VARIANTS}, got {kind!r}")
        self.kind = kind
        self.n = n
        self.m = m
        if kind == "generic":
            self.w = np.zeros(n_quadratic_features(n))
        elif kind == "input_augmented":
            self.w = np.zeros(n_quadratic_features(n + m))
        else:
            self.w = np.zeros(n_quadratic_features(n) + m * (n + 1))

    def _split(self):
        nr = n_quadratic_features(self.n)
        return self.w[:nr], self.w[nr:].reshape(self.m, self.n + 1)

    def features(self, x, lam=None):
        if self.kind == "generic":
            return quadratic_features(x)
        if self.kind == "input_augmented":
            x = np.atleast_2d(np.asarray(x, dtype=np.float64))
            lam_tile = np.broadcast_to(
                np.asarray(lam, dtype=np.float64), (x.shape[0], self.m)
            )
            return quadratic_features(np.concatenate([x, lam_tile], axis=1))
        raise ShapeError("structured poly critic has per-channel features")

    def values(self, x, lam):
        """Scalar values; ``lam`` may be one m-vector or one row per state."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.kind == "structured":
            lam2 = np.broadcast_to(
                np.asarray(lam, dtype=np.float64), (x.shape[0], self.m)
            )
            wr, wc = self._split()
            vc = linear_features(x) @ wc.T
            return quadratic_features(x) @ wr - np.sum(vc * lam2, axis=1)
        return self.features(x, lam) @ self.w
