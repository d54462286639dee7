"""Environments: the two-agent constrained particle world, a linear-quadratic
policy-evaluation testbed, and a tabular Markov chain for oracle checks.

All dynamics are deterministic given (state, action); stochasticity lives in
resets and policy sampling, so trajectories are reproducible from the rng.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

N_PARTICLE_ACTIONS = 5
_ACTION_DIRS = np.array(
    [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
)


@dataclass(frozen=True)
class ParticleConfig:
    """Two-agent particle world: reach your landmark while the ensemble keeps
    the position-sum constraint satisfied.

    Dynamics constants follow the particle-environment lineage: per step
    ``v <- (1 - damping) v + (force * sensitivity / mass) * dt * dir`` and
    ``y <- y + v dt`` with 5 discrete actions {no-op, +x, -x, +y, -y}.
    ``constraint`` selects the constraint map: ``sum`` (sum of all position
    coordinates), ``zero``, or ``const:<v>``.
    """

    n_agents: int = 2
    dt: float = 0.1
    damping: float = 0.25
    mass: float = 1.0
    force: float = 1.0
    sensitivity: float = 5.0
    landmarks: tuple = ((0.75, 0.75), (0.75, 0.75))
    xi: tuple = (1.0, 1.0)
    init_low: float = -1.0
    init_high: float = 0.0
    episode_len: int = 25
    constraint: str = "sum"

    def __post_init__(self):
        if len(self.landmarks) != self.n_agents or len(self.xi) != self.n_agents:
            raise ValueError("need one landmark and one reward weight per agent")
        if any(x <= 0 for x in self.xi):
            raise ValueError("reward weights must be positive")
        if self.constraint == "sum" and sum(c for lm in self.landmarks for c in lm) <= 0:
            raise ValueError("landmarks must lie outside the safe set (coordinate sum > 0)")
        if self.constraint not in ("sum", "zero") and not self.constraint.startswith("const:"):
            raise ValueError(f"unknown constraint mode {self.constraint!r}")


class ParticleEnv:
    """State layout: per agent ``[y (2), v (2)]``, concatenated agent-major.

    Observations are strictly local: own position, own velocity, and the
    offset to the own landmark (6 numbers per agent). Critics consume the
    full joint state.
    """

    def __init__(self, config=None):
        self.config = config or ParticleConfig()
        c = self.config
        self._landmarks = np.asarray(c.landmarks, dtype=np.float64)
        self._xi = np.asarray(c.xi, dtype=np.float64)
        self._accel = c.force * c.sensitivity / c.mass
        if c.constraint.startswith("const:"):
            self._const_value = float(c.constraint.split(":", 1)[1])
        elif c.constraint == "zero":
            self._const_value = 0.0
        else:
            self._const_value = None

    @property
    def n_agents(self):
        return self.config.n_agents

    @property
    def n_actions(self):
        return N_PARTICLE_ACTIONS

    @property
    def state_dim(self):
        return 4 * self.n_agents

    @property
    def obs_dim(self):
        return 6

    @property
    def m(self):
        return 1

    def reset(self, rng):
        """Positions uniform on the init square, velocities zero."""
        c = self.config
        state = np.zeros(self.state_dim)
        for i in range(self.n_agents):
            state[4 * i : 4 * i + 2] = rng.uniform(c.init_low, c.init_high, size=2)
        return state, self.observations(state)

    def step(self, state, actions):
        """Deterministic transition; returns (next_state, next_observations)."""
        actions = np.asarray(actions)
        if actions.shape != (self.n_agents,):
            raise ShapeError(f"need {self.n_agents} actions, got shape {actions.shape}")
        if np.any(actions < 0) or np.any(actions >= N_PARTICLE_ACTIONS):
            raise ShapeError("action index out of range")
        c = self.config
        s = np.asarray(state, dtype=np.float64).reshape(self.n_agents, 4)
        v = s[:, 2:4] * (1.0 - c.damping) + self._accel * c.dt * _ACTION_DIRS[actions]
        y = s[:, :2] + v * c.dt
        nxt = np.concatenate([y, v], axis=1).reshape(-1)
        return nxt, self.observations(nxt)

    def positions(self, state):
        """(.., n_agents, 2) positions; accepts one state or a batch."""
        s = np.asarray(state, dtype=np.float64)
        return s.reshape(*s.shape[:-1], self.n_agents, 4)[..., :2]

    def rewards(self, state):
        """Per-agent reward ``-xi_i * ||y_i - landmark_i||^2``; batch-aware."""
        d = self.positions(state) - self._landmarks
        return -self._xi * np.sum(d * d, axis=-1)

    def constraint(self, state):
        """m-vector constraint evaluation; batch-aware ((N, m) for a batch)."""
        s = np.asarray(state, dtype=np.float64)
        batched = s.ndim == 2
        if self._const_value is not None:
            return np.full((s.shape[0], 1) if batched else (1,), self._const_value)
        total = self.positions(s).sum(axis=(-2, -1))
        return total[:, None] if batched else np.array([total])

    def observations(self, state):
        """(n_agents, 6) local observations: own state plus landmark offset."""
        s = np.asarray(state, dtype=np.float64).reshape(self.n_agents, 4)
        return np.concatenate([s, self._landmarks - s[:, :2]], axis=1)


@dataclass(frozen=True)
class Transition:
    """One environment step with raw and transformed constraint values."""

    state: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    c_raw: np.ndarray
    c_transformed: np.ndarray
    terminal: bool


@dataclass
class Trajectory:
    """One episode: T transitions plus the final state.

    Arrays cover states/rewards/constraints at t = 0..T (T+1 rows, the last
    row is the final state with no action) and observations/actions/log-probs
    at t = 0..T-1. The raw constraint column is never overwritten by the
    penalty transform.
    """

    states: np.ndarray  # (T+1, state_dim)
    observations: np.ndarray  # (T+1, n_agents, obs_dim)
    actions: np.ndarray  # (T, n_agents) int
    log_probs: np.ndarray  # (T, n_agents)
    rewards: np.ndarray  # (T+1, n_agents)
    c_raw: np.ndarray  # (T+1, m)
    c_transformed: np.ndarray  # (T+1, m)

    @property
    def T(self):
        return self.actions.shape[0]

    def transitions(self):
        for t in range(self.T):
            yield Transition(
                state=self.states[t],
                observations=self.observations[t],
                actions=self.actions[t],
                rewards=self.rewards[t],
                c_raw=self.c_raw[t],
                c_transformed=self.c_transformed[t],
                terminal=(t == self.T - 1),
            )


def trajectory_to_csv(traj, path):
    """Dump one episode: ``t, x1..xd, u1..un, r1..rn, c_raw, c_transformed``.

    The final row (t = T) is the terminal state; its action cells are empty.
    Multi-constraint trajectories get suffixed c columns.
    """
    T = traj.T
    d = traj.states.shape[1]
    n = traj.actions.shape[1]
    m = traj.c_raw.shape[1]
    c_cols = (
        ["c_raw", "c_transformed"]
        if m == 1
        else [f"c_raw_{j}" for j in range(1, m + 1)]
        + [f"c_transformed_{j}" for j in range(1, m + 1)]
    )
    header = (
        ["t"]
        + [f"x{i}" for i in range(1, d + 1)]
        + [f"u{i}" for i in range(1, n + 1)]
        + [f"r{i}" for i in range(1, n + 1)]
        + c_cols
    )
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for t in range(T + 1):
            cells = [str(t)]
            cells += [repr(float(v)) for v in traj.states[t]]
            cells += [str(int(a)) for a in traj.actions[t]] if t < T else [""] * n
            cells += [repr(float(v)) for v in traj.rewards[t]]
            cells += [repr(float(v)) for v in traj.c_raw[t]]
            cells += [repr(float(v)) for v in traj.c_transformed[t]]
            fh.write(",".join(cells) + "\n")


def _as_matrix(x, shape, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != shape:
        raise ShapeError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class LqConfig:
    """Linear dynamics x' = A x + B u + w under a fixed linear policy u = Kx,
    quadratic reward -x'Qx, linear constraint C_lin x, and a dual-variable
    sampler with mean ``lambda_mean`` and std ``lambda_std`` (clamped >= 0).
    """

    a: tuple = ((0.9, 0.1), (0.0, 0.9))
    b: tuple = ((1.0, 0.0), (0.0, 1.0))
    k: tuple = ((-0.2, 0.0), (0.0, -0.2))
    q: tuple = ((1.0, 0.0), (0.0, 1.0))
    c_lin: tuple = ((1.0, 1.0),)
    noise_std: float = 0.02
    lambda_mean: tuple = (1.0,)
    lambda_std: tuple = (0.2,)
    x0_mean: tuple = (1.0, 1.0)
    x0_std: float = 0.5
    horizon: int = 50
    gamma: float = 0.8


@dataclass
class LqEpisode:
    states: np.ndarray  # (T+1, n)
    rewards: np.ndarray  # (T+1,)
    constraints: np.ndarray  # (T+1, m)
    lam: np.ndarray  # (m,)


class LqPolicyEvalEnv:
    """Policy-evaluation testbed: rollouts of a stable closed loop with a
    per-episode random dual variable."""

    def __init__(self, config=None):
        self.config = config or LqConfig()
        c = self.config
        n = len(c.a)
        self.a = _as_matrix(c.a, (n, n), "a")
        self.b = _as_matrix(c.b, (n, n), "b")
        self.k = _as_matrix(c.k, (n, n), "k")
        self.q = _as_matrix(c.q, (n, n), "q")
        self.c_lin = np.asarray(c.c_lin, dtype=np.float64)
        if self.c_lin.ndim != 2 or self.c_lin.shape[1] != n:
            raise ShapeError(f"c_lin must be (m, {n}), got {self.c_lin.shape}")
        self.a_closed = self.a + self.b @ self.k
        radius = float(np.max(np.abs(np.linalg.eigvals(self.a_closed))))
        if radius >= 1.0:
            raise ValueError(f"closed loop unstable: spectral radius {radius:.4f} >= 1")
        self.lambda_mean = np.asarray(c.lambda_mean, dtype=np.float64)
        self.lambda_std = np.asarray(c.lambda_std, dtype=np.float64)
        self.x0_mean = np.asarray(c.x0_mean, dtype=np.float64)

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def m(self):
        return self.c_lin.shape[0]

    def sample_lambda(self, rng):
        lam = rng.normal(self.lambda_mean, self.lambda_std)
        return np.clip(lam, 0.0, None)

    def rollout(self, rng, horizon=None):
        """One episode under the fixed policy; lambda redrawn per episode."""
        c = self.config
        T = c.horizon if horizon is None else int(horizon)
        lam = self.sample_lambda(rng)
        states = np.empty((T + 1, self.n))
        x = self.x0_mean + c.x0_std * rng.standard_normal(self.n)
        for t in range(T + 1):
            states[t] = x
            if t < T:
                w = c.noise_std * rng.standard_normal(self.n)
                x = self.a_closed @ x + w
        rewards = -np.einsum("ti,ij,tj->t", states, self.q, states)
        constraints = states @ self.c_lin.T
        return LqEpisode(states=states, rewards=rewards, constraints=constraints, lam=lam)


@dataclass(frozen=True)
class TabularMDP:
    """Finite chain under a fixed policy: row-stochastic P, initial
    distribution p0, and a per-state constraint vector c (S,) or (S, m)."""

    P: np.ndarray
    p0: np.ndarray
    c: np.ndarray = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        p0 = np.asarray(self.p0, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ShapeError(f"P must be square, got {P.shape}")
        if p0.shape != (P.shape[0],):
            raise ShapeError(f"p0 must have shape ({P.shape[0]},), got {p0.shape}")
        if np.any(P < 0) or np.any(p0 < 0):
            raise ValueError("P and p0 must be nonnegative")
        if np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("each row of P must sum to 1 within 1e-12")
        if abs(p0.sum() - 1.0) > 1e-12:
            raise ValueError("p0 must sum to 1 within 1e-12")
        c = self.c if self.c is not None else np.zeros(P.shape[0])
        c = np.asarray(c, dtype=np.float64)
        if c.shape[0] != P.shape[0]:
            raise ShapeError("c must have one row per state")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "c", c)

    @property
    def n_states(self):
        return self.P.shape[0]


def tabular_rollout(mdp, horizon, rng):
    """Sample path x_0..x_T from p0 under P; returns int indices (T+1,)."""
    cum_p0 = np.cumsum(mdp.p0)
    cum_rows = np.cumsum(mdp.P, axis=1)
    path = np.empty(horizon + 1, dtype=np.int64)
    s = int(np.searchsorted(cum_p0, rng.random(), side="right"))
    path[0] = min(s, mdp.n_states - 1)
    for t in range(horizon):
        u = rng.random()
        s = int(np.searchsorted(cum_rows[path[t]], u, side="right"))
        path[t + 1] = min(s, mdp.n_states - 1)
    return path


def tabular_rollouts(mdp, horizon, n_paths, rng):
    """Vectorized sample paths, shape (n_paths, horizon+1)."""
    cum_p0 = np.cumsum(mdp.p0)
    cum_rows = np.cumsum(mdp.P, axis=1)
    paths = np.empty((n_paths, horizon + 1), dtype=np.int64)
    u = rng.random(n_paths)
    paths[:, 0] = np.minimum(
        np.searchsorted(cum_p0, u, side="right"), mdp.n_states - 1
    )
    for t in range(horizon):
        u = rng.random(n_paths)
        rows = cum_rows[paths[:, t]]
        nxt = (u[:, None] >= rows).sum(axis=1)
        paths[:, t + 1] = np.minimum(nxt, mdp.n_states - 1)
    return paths


def random_chain(n_states, rng, spread=1.0):
    """Dense random chain (Dirichlet rows) with standard-normal-ish state
    constraint values; ergodic with probability one."""
    P = rng.dirichlet(np.ones(n_states), size=n_states)
    p0 = rng.dirichlet(np.ones(n_states))
    c = spread * rng.standard_normal(n_states)
    return TabularMDP(P=P, p0=p0, c=c)
