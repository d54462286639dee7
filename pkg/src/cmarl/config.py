"""Config-file handling: a line-oriented INI document with sections that
mirror the package modules.

Unknown sections or keys are hard errors so typos cannot silently fall back
to defaults. Every hyperparameter of the training table is present as a key
with its published default; a handful of structural rows (activations,
action selection, parameter sharing) are validated to their only supported
values rather than being switchable.
"""

from __future__ import annotations

import configparser
import io
import os

import numpy as np

from .envs import LqConfig, ParticleConfig
from .errors import ConfigError
from .risk import PenaltySpec
from .trainer import TrainerConfig

_PENALTY_DEFAULTS = {
    "average": (0.0, 0.0),
    "chance": (0.1, 0.1),
    "cvar": (0.2, 5e-3),
}


def _parse_bool(raw):
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_floats(raw):
    return tuple(float(v) for v in raw.replace(",", " ").split())


def _parse_ints(raw):
    return tuple(int(v) for v in raw.replace(",", " ").split())


def _parse_matrix(raw):
    rows = [r.strip() for r in raw.split(";") if r.strip()]
    return tuple(_parse_floats(r) for r in rows)


def _parse_pairs(raw):
    return tuple(tuple(p) for p in _parse_matrix(raw))


_PARSERS = {
    "float": float,
    "int": int,
    "str": lambda raw: raw.strip(),
    "bool": _parse_bool,
    "floats": _parse_floats,
    "ints": _parse_ints,
    "matrix": _parse_matrix,
    "pairs": _parse_pairs,
    "auto_float": lambda raw: None if raw.strip().lower() == "auto" else float(raw),
}

# section -> key -> (type, default string, help)
SCHEMA = {
    "trainer": {
        "gamma": ("float", "0.99", "discount factor"),
        "actor_lr": ("float", "3e-4", "actor learning rate"),
        "critic_lr": ("float", "3e-4", "critic learning rate"),
        "dual_lr": ("float", "1e-4", "dual ascent step size"),
        "adam_beta1": ("float", "0.9", "Adam first-moment decay"),
        "adam_beta2": ("float", "0.999", "Adam second-moment decay"),
        "adam_eps": ("float", "1e-8", "Adam stability epsilon"),
        "nstep": ("int", "5", "n-step return horizon"),
        "lambda_max": ("float", "10", "multiplier cap"),
        "lambda_init": ("float", "0", "initial multiplier value"),
        "episode_len": ("int", "25", "steps per episode"),
        "episodes": ("int", "8000", "training episodes (published scale: 40000-80000)"),
        "seed": ("int", "0", "run seed"),
        "critic": ("str", "structured", "generic | input_augmented | structured"),
        "hidden_widths": ("ints", "64, 64", "hidden layer widths"),
        "hidden_activation": ("str", "relu", "hidden activation (relu only)"),
        "output_activation": ("str", "linear", "output activation (linear only)"),
        "action_selection": ("str", "categorical", "action selection (categorical only)"),
        "parameter_sharing": ("bool", "false", "share parameters across agents (unsupported: false only)"),
        "target_interval": ("int", "200", "target-network refresh interval (episodes)"),
        "optimizer": ("str", "adam", "adam | sgd"),
        "batch_episodes": ("int", "1", "episodes per update batch"),
        "entropy_coef": ("float", "0", "entropy bonus coefficient (0 = off)"),
        "grad_clip": ("float", "0", "global gradient-norm clip (0 = off)"),
        "reward_norm": ("bool", "false", "running reward standardization"),
        "dual_tolerance": ("float", "0.05", "fixed-point band for the transformed DSC"),
        "checkpoint_interval": ("int", "0", "checkpoint cadence (0 = first/last only)"),
    },
    "penalty": {
        "metric": ("str", "average", "average | chance | cvar"),
        "alpha": ("auto_float", "auto", "violation threshold (auto: per-metric default)"),
        "delta": ("auto_float", "auto", "tolerance (auto: per-metric default)"),
        "beta": ("float", "0.9", "CVaR risk level"),
    },
    "environment": {
        "type": ("str", "particle", "environment family (particle only)"),
        "agents": ("int", "2", "agent count"),
        "dt": ("float", "0.1", "integration step"),
        "damping": ("float", "0.25", "per-step velocity damping"),
        "mass": ("float", "1.0", "agent mass"),
        "force": ("float", "1.0", "applied force magnitude"),
        "sensitivity": ("float", "5.0", "force scaling"),
        "landmarks": ("pairs", "0.75 0.75; 0.75 0.75", "one landmark per agent"),
        "xi": ("floats", "1.0, 1.0", "reward weights"),
        "init_low": ("float", "-1.0", "initial-position square lower bound"),
        "init_high": ("float", "0.0", "initial-position square upper bound"),
        "constraint": ("str", "sum", "sum | zero | const:<v>"),
    },
    "evaluation": {
        "interval": ("int", "200", "episodes between evaluation snapshots"),
        "episodes": ("int", "50", "episodes per evaluation snapshot"),
        "alpha": ("auto_float", "auto", "reporting violation threshold"),
        "beta": ("auto_float", "auto", "reporting risk level"),
    },
    "suite": {
        "trials": ("int", "5", "seeds per configuration"),
        "seeds": ("ints", "0, 1, 2, 3, 4", "explicit seed list (length = trials)"),
        "workers": ("int", "0", "parallel runs (0 = auto)"),
        "charts": ("bool", "false", "render static SVG charts from the CSVs"),
    },
    "lq": {
        "a": ("matrix", "0.9, 0.1; 0, 0.9", "open-loop dynamics"),
        "b": ("matrix", "1, 0; 0, 1", "input matrix"),
        "k": ("matrix", "-0.2, 0; 0, -0.2", "fixed linear policy"),
        "q": ("matrix", "1, 0; 0, 1", "reward weight matrix"),
        "c_lin": ("matrix", "1, 1", "constraint map rows"),
        "noise_std": ("float", "0.02", "process noise std"),
        "lambda_mean": ("floats", "1.0", "dual sampler mean"),
        "lambda_std": ("floats", "0.2", "dual sampler std"),
        "x0_mean": ("floats", "1.0, 1.0", "initial-state mean"),
        "x0_std": ("float", "0.5", "initial-state std"),
        "gamma": ("float", "0.8", "discount factor for the study"),
        "horizon": ("int", "50", "episode length"),
        "episodes_train": ("int", "400", "training episodes"),
        "episodes_eval": ("int", "4000", "held-out evaluation episodes"),
        "epochs": ("int", "150", "gradient epochs"),
        "batch_size": ("int", "512", "minibatch size"),
        "lr": ("float", "0.02", "optimizer step size"),
        "seed": ("int", "0", "study seed"),
        "solver": ("str", "sgd", "sgd | lstsq (exact cross-check)"),
    },
}

_FIXED_VALUES = {
    ("trainer", "hidden_activation"): "relu",
    ("trainer", "output_activation"): "linear",
    ("trainer", "action_selection"): "categorical",
    ("environment", "type"): "particle",
}


def default_parsed():
    """All-defaults parsed config."""
    out = {}
    for section, keys in SCHEMA.items():
        out[section] = {
            key: _PARSERS[typ](default) for key, (typ, default, _) in keys.items()
        }
    return out


def load_config(path=None, overrides=None):
    """Parse and validate a config file; unknown sections/keys are errors.

    ``overrides`` is an optional ``{(section, key): raw_string}`` mapping
    applied after the file (used for CLI flags like --seed).
    """
    parsed = default_parsed()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in cp.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                typ = SCHEMA[section][key][0]
                try:
                    parsed[section][key] = _PARSERS[typ](raw)
                except (ValueError, ConfigError) as exc:
                    raise ConfigError(f"{path}: [{section}] {key}: {exc}") from exc
    for (section, key), raw in (overrides or {}).items():
        typ = SCHEMA[section][key][0]
        parsed[section][key] = _PARSERS[typ](raw)
    for (section, key), expected in _FIXED_VALUES.items():
        if parsed[section][key] != expected:
            raise ConfigError(f"[{section}] {key}: only {expected!r} is supported")
    if parsed["trainer"]["parameter_sharing"]:
        raise ConfigError("[trainer] parameter_sharing: only 'false' is supported")
    return parsed


def penalty_from(parsed):
    pen = parsed["penalty"]
    metric = pen["metric"]
    if metric not in _PENALTY_DEFAULTS:
        raise ConfigError(f"[penalty] metric must be average|chance|cvar, got {metric!r}")
    d_alpha, d_delta = _PENALTY_DEFAULTS[metric]
    alpha = pen["alpha"] if pen["alpha"] is not None else d_alpha
    delta = pen["delta"] if pen["delta"] is not None else d_delta
    try:
        return PenaltySpec(metric, alpha=alpha, delta=delta, beta=pen["beta"])
    except ValueError as exc:
        raise ConfigError(f"[penalty]: {exc}") from exc


def particle_config_from(parsed):
    env = parsed["environment"]
    try:
        return ParticleConfig(
            n_agents=env["agents"],
            dt=env["dt"],
            damping=env["damping"],
            mass=env["mass"],
            force=env["force"],
            sensitivity=env["sensitivity"],
            landmarks=env["landmarks"],
            xi=env["xi"],
            init_low=env["init_low"],
            init_high=env["init_high"],
            episode_len=parsed["trainer"]["episode_len"],
            constraint=env["constraint"],
        )
    except ValueError as exc:
        raise ConfigError(f"[environment]: {exc}") from exc


def trainer_config_from(parsed, seed=None):
    tr = parsed["trainer"]
    ev = parsed["evaluation"]
    cfg = TrainerConfig(
        gamma=tr["gamma"],
        actor_lr=tr["actor_lr"],
        critic_lr=tr["critic_lr"],
        dual_lr=tr["dual_lr"],
        adam_betas=(tr["adam_beta1"], tr["adam_beta2"]),
        adam_eps=tr["adam_eps"],
        nstep=tr["nstep"],
        penalty=penalty_from(parsed),
        lambda_max=tr["lambda_max"],
        lambda_init=tr["lambda_init"],
        episode_len=tr["episode_len"],
        episodes=tr["episodes"],
        seed=tr["seed"] if seed is None else int(seed),
        critic=tr["critic"],
        hidden=tuple(tr["hidden_widths"]),
        target_interval=tr["target_interval"],
        optimizer=tr["optimizer"],
        batch_episodes=tr["batch_episodes"],
        entropy_coef=tr["entropy_coef"],
        grad_clip=tr["grad_clip"],
        reward_norm=tr["reward_norm"],
        eval_interval=ev["interval"],
        eval_episodes=ev["episodes"],
        eval_alpha=ev["alpha"],
        eval_beta=ev["beta"],
        checkpoint_interval=tr["checkpoint_interval"],
        dual_tolerance=tr["dual_tolerance"],
        env=particle_config_from(parsed),
    )
    return cfg.validate()


def lq_config_from(parsed):
    lq = parsed["lq"]
    return LqConfig(
        a=lq["a"],
        b=lq["b"],
        k=lq["k"],
        q=lq["q"],
        c_lin=lq["c_lin"],
        noise_std=lq["noise_std"],
        lambda_mean=lq["lambda_mean"],
        lambda_std=lq["lambda_std"],
        x0_mean=lq["x0_mean"],
        x0_std=lq["x0_std"],
        gamma=lq["gamma"],
        horizon=lq["horizon"],
    )


def _fmt_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "auto"
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return "; ".join(", ".join(repr(float(v)) for v in row) for row in value)
        return ", ".join(repr(float(v)) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def snapshot_text(trainer_cfg, suite=None):
    """Serialize a TrainerConfig back to the config-file format (full key
    set), for the config.snapshot written beside every run's outputs."""
    env = trainer_cfg.env
    pen = trainer_cfg.penalty
    sections = {
        "trainer": {
            "gamma": trainer_cfg.gamma,
            "actor_lr": trainer_cfg.actor_lr,
            "critic_lr": trainer_cfg.critic_lr,
            "dual_lr": trainer_cfg.dual_lr,
            "adam_beta1": trainer_cfg.adam_betas[0],
            "adam_beta2": trainer_cfg.adam_betas[1],
            "adam_eps": trainer_cfg.adam_eps,
            "nstep": trainer_cfg.nstep,
            "lambda_max": trainer_cfg.lambda_max,
            "lambda_init": trainer_cfg.lambda_init,
            "episode_len": trainer_cfg.episode_len,
            "episodes": trainer_cfg.episodes,
            "seed": trainer_cfg.seed,
            "critic": trainer_cfg.critic,
            "hidden_widths": trainer_cfg.hidden,
            "hidden_activation": "relu",
            "output_activation": "linear",
            "action_selection": "categorical",
            "parameter_sharing": False,
            "target_interval": trainer_cfg.target_interval,
            "optimizer": trainer_cfg.optimizer,
            "batch_episodes": trainer_cfg.batch_episodes,
            "entropy_coef": trainer_cfg.entropy_coef,
            "grad_clip": trainer_cfg.grad_clip,
            "reward_norm": trainer_cfg.reward_norm,
            "dual_tolerance": trainer_cfg.dual_tolerance,
            "checkpoint_interval": trainer_cfg.checkpoint_interval,
        },
        "penalty": {
            "metric": pen.metric,
            "alpha": float(pen.alpha[0]),
            "delta": float(pen.delta[0]),
            "beta": pen.beta,
        },
        "environment": {
            "type": "particle",
            "agents": env.n_agents,
            "dt": env.dt,
            "damping": env.damping,
            "mass": env.mass,
            "force": env.force,
            "sensitivity": env.sensitivity,
            "landmarks": env.landmarks,
            "xi": env.xi,
            "init_low": env.init_low,
            "init_high": env.init_high,
            "constraint": env.constraint,
        },
        "evaluation": {
            "interval": trainer_cfg.eval_interval,
            "episodes": trainer_cfg.eval_episodes,
            "alpha": trainer_cfg.eval_alpha,
            "beta": trainer_cfg.eval_beta,
        },
    }
    if suite:
        sections["suite"] = dict(suite)
    buf = io.StringIO()
    for section, keys in sections.items():
        buf.write(f"[{section}]\n")
        for key, value in keys.items():
            buf.write(f"{key} = {_fmt_value(value)}\n")
        buf.write("\n")
    return buf.getvalue()


def describe_keys(sections=None):
    """Human-readable key table (used by the CLI --help epilogs)."""
    lines = []
    for section, keys in SCHEMA.items():
        if sections is not None and section not in sections:
            continue
        lines.append(f"[{section}]")
        for key, (_, default, help_text) in keys.items():
            lines.append(f"  {key} = {default}  ({help_text})")
    return "\n".join(lines)


def roundtrip_check(trainer_cfg):
    """Snapshot -> parse -> TrainerConfig equality (sanity utility)."""
    text = snapshot_text(trainer_cfg)
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.read_string(text)
    overrides = {
        (section, key): cp.get(section, key)
        for section in cp.sections()
        for key in cp.options(section)
    }
    parsed = load_config(None, overrides=overrides)
    rebuilt = trainer_config_from(parsed)
    return np.all(
        [
            rebuilt.gamma == trainer_cfg.gamma,
            rebuilt.penalty.metric == trainer_cfg.penalty.metric,
            rebuilt.env == trainer_cfg.env,
        ]
    )
