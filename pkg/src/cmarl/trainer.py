"""Constrained multi-agent advantage actor-critic (C-MAA2C).

One training run is strictly sequential: per episode it rolls out the joint
policy, applies the configured penalty transform to the constraint signal,
computes n-step returns against a periodically refreshed target critic,
takes one optimizer step per actor and per critic, and finishes with a
projected dual ascent step on the discounted sum of the transformed signal.

A single dual vector is shared by all agents and updated once per episode by
the coordinator; actors act on local observations only while critics see the
global joint state.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import critics as critics_mod
from . import risk
from .envs import ParticleConfig, ParticleEnv, Trajectory
from .errors import ConfigError, NumericalAbort
from .nn import AdamState, CategoricalPolicy, Mlp, adam_step, sgd_step
from .occupation import DiscountSpec, discounted_sum


@dataclass
class TrainerConfig:
    """Training hyperparameters; defaults follow the published table."""

    gamma: float = 0.99
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    dual_lr: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    nstep: int = 5
    penalty: risk.PenaltySpec = field(default_factory=lambda: risk.PenaltySpec("average"))
    lambda_max: float = 10.0
    lambda_init: float = 0.0
    episode_len: int = 25
    episodes: int = 8000
    seed: int = 0
    critic: str = "structured"
    hidden: tuple = (64, 64)
    target_interval: int = 200
    optimizer: str = "adam"
    batch_episodes: int = 1
    entropy_coef: float = 0.0
    grad_clip: float = 0.0
    reward_norm: bool = False
    eval_interval: int = 200
    eval_episodes: int = 50
    eval_alpha: float | None = None
    eval_beta: float | None = None
    checkpoint_interval: int = 0
    dual_tolerance: float = 0.05
    env: ParticleConfig = field(default_factory=ParticleConfig)

    def validate(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must be in (0, 1), got {self.gamma}")
        for name in ("actor_lr", "critic_lr", "dual_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lambda_max <= 0:
            raise ConfigError("lambda_max must be positive")
        if self.nstep < 1:
            raise ConfigError(f"n-step horizon must be >= 1, got {self.nstep}")
        if self.episode_len < 1:
            raise ConfigError("episode_len must be >= 1")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if self.critic not in critics_mod.VARIANTS:
            raise ConfigError(f"critic must be one of {critics_mod.VARIANTS}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        if self.batch_episodes < 1:
            raise ConfigError("batch_episodes must be >= 1")
        if self.eval_interval < 1 or self.eval_episodes < 1:
            raise ConfigError("evaluation cadence values must be >= 1")
        return self

    def resolved_eval_alpha(self):
        """Reporting threshold for evaluation: explicit value, else the
        penalty tolerance, else 0 (the safe-set boundary)."""
        if self.eval_alpha is not None:
            return float(self.eval_alpha)
        if self.penalty.metric in ("chance", "cvar"):
            return float(self.penalty.alpha[0])
        return 0.0

    def resolved_eval_beta(self):
        return float(self.eval_beta) if self.eval_beta is not None else self.penalty.beta


class DualState:
    """Lagrange multipliers with cap, plus the stacked coefficient vector."""

    def __init__(self, m, lambda_max, lam=None):
        self.lambda_max = float(lambda_max)
        self.lam = np.full(m, 0.0) if lam is None else np.array(lam, dtype=np.float64)
        if self.lam.shape != (m,):
            raise ConfigError(f"lambda must have shape ({m},)")
        self.lam = np.clip(self.lam, 0.0, self.lambda_max)

    @property
    def m(self):
        return self.lam.shape[0]

    @property
    def eta(self):
        """[1, -lambda^T]^T, recomputed on access."""
        return np.concatenate([[1.0], -self.lam])


def dual_update(dual, c_transformed, gamma, lr):
    """Projected ascent on the discounted sum of the transformed signal:
    ``lam <- min([lam + lr * G c~]_+, lambda_max)``."""
    dsc = np.atleast_1d(discounted_sum(c_transformed, DiscountSpec(gamma)))
    dual.lam = np.clip(dual.lam + lr * dsc, 0.0, dual.lambda_max)
    return dual


def run_episode(env, actors, penalty, rng, episode_len=None):
    """Roll one episode; returns a Trajectory with raw and transformed
    constraint signals (the raw column is never overwritten)."""
    T = int(episode_len) if episode_len is not None else env.config.episode_len
    n = env.n_agents
    states = np.empty((T + 1, env.state_dim))
    observations = np.empty((T + 1, n, env.obs_dim))
    actions = np.empty((T, n), dtype=np.int64)
    log_probs = np.empty((T, n))
    rewards = np.empty((T + 1, n))
    c_raw = np.empty((T + 1, env.m))

    state, obs = env.reset(rng)
    for t in range(T):
        states[t] = state
        observations[t] = obs
        for i in range(n):
            actions[t, i], log_probs[t, i] = actors[i].sample(obs[i], rng)
        state, obs = env.step(state, actions[t])
    states[T] = state
    observations[T] = obs
    rewards[:] = env.rewards(states)
    c_raw[:] = env.constraint(states)

    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(rewards))):
        raise NumericalAbort(
            "non-finite state or reward during rollout",
            context={"last_state": states[min(T, len(states) - 1)].tolist()},
        )
    return Trajectory(
        states=states,
        observations=observations,
        actions=actions,
        log_probs=log_probs,
        rewards=rewards,
        c_raw=c_raw,
        c_transformed=risk.transform_penalty(c_raw, penalty),
    )


def policy_gradient(actor, traj, advs, agent):
    """Raw ascent direction ``sum_t A_t grad log pi(u_t | o_t)``."""
    T = traj.T
    return actor.weighted_log_prob_grads(
        traj.observations[:T, agent], traj.actions[:, agent], advs
    )


def actor_loss(traj, advs, agent):
    """Surrogate whose gradient is the negated policy gradient."""
    return float(-(advs * traj.log_probs[:, agent]).sum())


def _clip_grads(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm > 0:
        scale = max_norm / total
        return [g * scale for g in grads]
    return grads


def _opt_step(cfg, opt_state, params, grads):
    if cfg.grad_clip > 0:
        grads = _clip_grads(grads, cfg.grad_clip)
    if cfg.optimizer == "adam":
        adam_step(opt_state, params, grads)
    else:
        sgd_step(params, grads, opt_state.lr)


def actor_update(cfg, actor, opt_state, traj, advs, agent):
    """One optimizer step of policy-gradient ascent; returns the surrogate loss."""
    grads = policy_gradient(actor, traj, advs, agent)
    if cfg.entropy_coef > 0:
        _, ent_grads = actor.entropy_and_grad(traj.observations[: traj.T, agent])
        grads = [g + cfg.entropy_coef * eg for g, eg in zip(grads, ent_grads)]
    _opt_step(cfg, opt_state, actor.net.param_list(), [-g for g in grads])
    return actor_loss(traj, advs, agent)


class _RewardScaler:
    """Running per-agent standardization of the reward signal (optional)."""

    def __init__(self, n):
        self.count = 0
        self.mean = np.zeros(n)
        self.m2 = np.ones(n)

    def update(self, rewards):
        for row in rewards:
            self.count += 1
            delta = row - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (row - self.mean)

    def scale(self, rewards):
        std = np.sqrt(self.m2 / max(self.count, 1))
        return (rewards - self.mean) / np.maximum(std, 1e-8)


def evaluate(actors, env, n_episodes, gamma, penalty, rng,
             report_alpha=None, report_beta=None, episode_len=None):
    """Frozen-policy evaluation: risk report plus return report.

    Builds the discount-weighted empirical occupation sample over all visited
    states and reports VaR/CVaR/violation probability of the raw constraint
    at the reporting tolerance, the measured CVaR upper bound, and the mean
    original returns ``sum_i G r_i`` without penalty terms.
    """
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    alpha = float(report_alpha) if report_alpha is not None else float(penalty.alpha[0])
    beta = float(report_beta) if report_beta is not None else penalty.beta
    values, weights = [], []
    returns = np.zeros(len(actors))
    dsc_raw = 0.0
    dsc_transformed = 0.0
    for _ in range(n_episodes):
        traj = run_episode(env, actors, penalty, rng, episode_len=episode_len)
        w = risk.discount_weights(traj.T + 1, gamma)
        values.append(traj.c_raw[:, 0])
        weights.append(w)
        spec = DiscountSpec(gamma)
        returns += np.array([discounted_sum(traj.rewards[:, i], spec) for i in range(len(actors))])
        dsc_raw += float(np.atleast_1d(discounted_sum(traj.c_raw, spec))[0])
        dsc_transformed += float(np.atleast_1d(discounted_sum(traj.c_transformed, spec))[0])
    values = np.concatenate(values)
    weights = np.concatenate(weights) / n_episodes
    report = risk.risk_report(
        values, weights, beta, alpha, n_episodes, penalty.metric, penalty.delta
    )
    returns /= n_episodes
    return_report = {
        "mean_return_per_agent": returns.tolist(),
        "mean_return_total": float(returns.sum()),
        "mean_dsc_raw": dsc_raw / n_episodes,
        "mean_dsc_transformed": dsc_transformed / n_episodes,
    }
    return report, return_report


@dataclass
class TrainResult:
    config: TrainerConfig
    actors: list
    critics: list
    dual: DualState
    metrics_path: str
    risk_reports_path: str
    checkpoint_dirs: list


def _write_checkpoint(directory, actors, critics):
    os.makedirs(directory, exist_ok=True)
    for i, actor in enumerate(actors, start=1):
        actor.net.save(os.path.join(directory, f"actor_{i}.txt"))
    for i, critic in enumerate(critics, start=1):
        critic.net.save(os.path.join(directory, f"critic_{i}.txt"))


def load_actors(directory):
    """Load the actor policies from a checkpoint directory."""
    actors = []
    i = 1
    while os.path.exists(os.path.join(directory, f"actor_{i}.txt")):
        actors.append(CategoricalPolicy(Mlp.load(os.path.join(directory, f"actor_{i}.txt"))))
        i += 1
    if not actors:
        raise ConfigError(f"no actor checkpoints found in {directory}")
    return actors


def _fmt(x):
    return repr(float(x))


def train(config, run_dir, checkpoints_dirname=None):
    """Run Algorithm-1-style training; writes metrics.csv, risk_reports.jsonl
    and checkpoints under ``run_dir``; fully reproducible from the seed.

    Checkpoints land in ``run_dir/ckpt_<episode>`` (or under
    ``run_dir/<checkpoints_dirname>/`` when given). Returns a TrainResult.
    """
    config.validate()
    os.makedirs(run_dir, exist_ok=True)
    ckpt_root = run_dir if not checkpoints_dirname else os.path.join(run_dir, checkpoints_dirname)

    env = ParticleEnv(config.env)
    m = env.m
    n = env.n_agents
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))

    actors = [
        CategoricalPolicy(Mlp.create((env.obs_dim, *config.hidden, env.n_actions), rng))
        for _ in range(n)
    ]
    agent_critics = [
        critics_mod.Critic(config.critic, env.state_dim, m, hidden=config.hidden, rng=rng)
        for _ in range(n)
    ]
    target_critics = [c.copy() for c in agent_critics]
    actor_opt = [
        AdamState(a.net.param_list(), config.actor_lr, config.adam_betas, config.adam_eps)
        for a in actors
    ]
    critic_opt = [
        AdamState(c.net.param_list(), config.critic_lr, config.adam_betas, config.adam_eps)
        for c in agent_critics
    ]
    dual = DualState(m, config.lambda_max, lam=np.full(m, config.lambda_init))
    scaler = _RewardScaler(n) if config.reward_norm else None

    lam_cols = [f"lambda_{j}" for j in range(1, m + 1)]
    dsc_cols = ["dsc_raw", "dsc_transformed"] if m == 1 else [
        f"dsc_raw_{j}" for j in range(1, m + 1)
    ] + [f"dsc_transformed_{j}" for j in range(1, m + 1)]
    header = (
        ["episode"]
        + [f"return_agent{i}" for i in range(1, n + 1)]
        + dsc_cols
        + lam_cols
        + [f"actor_loss_{i}" for i in range(1, n + 1)]
        + [f"critic_loss_{i}" for i in range(1, n + 1)]
        + ["prob_violation_eval", "var_eval", "cvar_eval", "cvar_ub"]
    )
    metrics_path = os.path.join(run_dir, "metrics.csv")
    risk_path = os.path.join(run_dir, "risk_reports.jsonl")
    checkpoint_dirs = []

    def checkpoint(episode):
        path = os.path.join(ckpt_root, f"ckpt_{episode}")
        _write_checkpoint(path, actors, agent_critics)
        checkpoint_dirs.append(path)

    spec = DiscountSpec(config.gamma)
    eval_alpha = config.resolved_eval_alpha()
    eval_beta = config.resolved_eval_beta()

    checkpoint(0)
    batch_grads_a = None
    batch_grads_c = None
    batch_dsc = np.zeros(m)
    batch_losses_a = np.zeros(n)
    batch_losses_c = np.zeros(n)

    with open(metrics_path, "w") as metrics_fh, open(risk_path, "w") as risk_fh:
        metrics_fh.write(",".join(header) + "\n")
        try:
            for k in range(1, config.episodes + 1):
                traj = run_episode(env, actors, config.penalty, rng)
                if scaler is not None:
                    scaler.update(traj.rewards)
                    traj_for_update = replace_rewards(traj, scaler.scale(traj.rewards))
                else:
                    traj_for_update = traj
                lam = dual.lam.copy()
                eta = dual.eta

                if batch_grads_a is None:
                    batch_grads_a = [None] * n
                    batch_grads_c = [None] * n
                losses_a = np.zeros(n)
                losses_c = np.zeros(n)
                for i in range(n):
                    targets = critics_mod.nstep_returns(
                        traj_for_update, target_critics[i], config.gamma, config.nstep, i, lam
                    )
                    advs = critics_mod.advantages(targets, agent_critics[i], traj.states, lam)
                    a_grads = policy_gradient(actors[i], traj, advs, i)
                    if config.entropy_coef > 0:
                        _, ent = actors[i].entropy_and_grad(traj.observations[: traj.T, i])
                        a_grads = [g + config.entropy_coef * e for g, e in zip(a_grads, ent)]
                    losses_a[i] = actor_loss(traj, advs, i)
                    loss_c, c_grads = critics_mod.critic_loss_and_grad(
                        agent_critics[i], traj_for_update, targets, lam
                    )
                    losses_c[i] = loss_c
                    neg_a = [-g for g in a_grads]
                    if batch_grads_a[i] is None:
                        batch_grads_a[i] = neg_a
                        batch_grads_c[i] = c_grads
                    else:
                        batch_grads_a[i] = [s + g for s, g in zip(batch_grads_a[i], neg_a)]
                        batch_grads_c[i] = [s + g for s, g in zip(batch_grads_c[i], c_grads)]
                batch_losses_a += losses_a
                batch_losses_c += losses_c
                batch_dsc += np.atleast_1d(discounted_sum(traj.c_transformed, spec))

                stepped = k % config.batch_episodes == 0 or k == config.episodes
                if stepped:
                    for i in range(n):
                        _opt_step(config, actor_opt[i], actors[i].net.param_list(), batch_grads_a[i])
                        _opt_step(config, critic_opt[i], agent_critics[i].net.param_list(), batch_grads_c[i])
                    dual.lam = np.clip(dual.lam + config.dual_lr * batch_dsc, 0.0, dual.lambda_max)
                    batch_grads_a = None
                    batch_grads_c = None
                    batch_dsc = np.zeros(m)
                    step_losses_a, batch_losses_a = batch_losses_a, np.zeros(n)
                    step_losses_c, batch_losses_c = batch_losses_c, np.zeros(n)

                if k % config.target_interval == 0:
                    target_critics = [c.copy() for c in agent_critics]

                eval_cells = ["", "", "", ""]
                if k % config.eval_interval == 0 or k == config.episodes:
                    eval_rng = np.random.default_rng(np.random.SeedSequence([config.seed, k, 0xE]))
                    report, ret_report = evaluate(
                        actors, env, config.eval_episodes, config.gamma, config.penalty,
                        eval_rng, report_alpha=eval_alpha, report_beta=eval_beta,
                        episode_len=config.episode_len,
                    )
                    eval_cells = [
                        _fmt(report["prob_violation"]),
                        _fmt(report["var"]),
                        _fmt(report["cvar"]),
                        _fmt(report["cvar_ub"]),
                    ]
                    record = dict(report)
                    record["episode"] = k
                    record.update(ret_report)
                    risk_fh.write(json.dumps(record) + "\n")

                dsc_raw = np.atleast_1d(discounted_sum(traj.c_raw, spec))
                dsc_tr = np.atleast_1d(discounted_sum(traj.c_transformed, spec))
                row = (
                    [str(k)]
                    + [_fmt(discounted_sum(traj.rewards[:, i], spec)) for i in range(n)]
                    + ([_fmt(dsc_raw[0]), _fmt(dsc_tr[0])] if m == 1
                       else [_fmt(v) for v in dsc_raw] + [_fmt(v) for v in dsc_tr])
                    + [_fmt(v) for v in dual.lam]
                    + ([_fmt(v) for v in step_losses_a] if stepped else [""] * n)
                    + ([_fmt(v) for v in step_losses_c] if stepped else [""] * n)
                    + eval_cells
                )
                metrics_fh.write(",".join(row) + "\n")

                if config.checkpoint_interval > 0 and k % config.checkpoint_interval == 0:
                    checkpoint(k)
        except NumericalAbort as exc:
            exc.context.setdefault("episode", k)
            exc.context["lambda"] = dual.lam.tolist()
            with open(os.path.join(run_dir, "abort.json"), "w") as fh:
                json.dump({"error": str(exc), "context": exc.context}, fh, indent=2)
            raise

    if config.episodes > 0 and (
        config.checkpoint_interval <= 0 or config.episodes % config.checkpoint_interval != 0
    ):
        checkpoint(config.episodes)
    return TrainResult(
        config=config,
        actors=actors,
        critics=agent_critics,
        dual=dual,
        metrics_path=metrics_path,
        risk_reports_path=risk_path,
        checkpoint_dirs=checkpoint_dirs,
    )


def replace_rewards(traj, rewards):
    """Trajectory copy with a substituted reward array (reward scaling)."""
    return Trajectory(
        states=traj.states,
        observations=traj.observations,
        actions=traj.actions,
        log_probs=traj.log_probs,
        rewards=np.asarray(rewards, dtype=np.float64),
        c_raw=traj.c_raw,
        c_transformed=traj.c_transformed,
    )
