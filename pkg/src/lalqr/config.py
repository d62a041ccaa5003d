"""Training configuration and the flat key-value config file.

A config file is flat YAML (one ``key: value`` per line).  Keys mirror the
fields of :class:`TrainConfig` and :class:`lalqr.expert.PlannerConfig`; the
planner keys carry a ``planner_`` prefix::

    episodes: 200
    epochs: 20
    latent_dim: 20
    structure: companion
    planner_horizon: 100
"""
from dataclasses import dataclass, fields, replace

import yaml

from lalqr.expert import PlannerConfig, default_planner_config

STRUCTURES = ("companion", "diagonal", "full")


@dataclass(frozen=True)
class TrainConfig:
    """Everything that shapes data collection and training.

    Attributes:
        episodes: expert episodes to collect.
        epochs: passes over the dataset.
        batch_size: minibatch size.
        learning_rate: AdamW step size.
        weight_decay: AdamW decoupled decay.
        seed: seeds data collection, initialization and shuffling.
        latent_dim: ``N``; ``None`` picks the per-environment default.
        consistency_weight: weight of the consistency loss.
        cost_weight: weight of the cost loss.
        structure: ``companion``, ``diagonal`` or ``full``.
        use_cost_loss: ``False`` trains on consistency only with ``Q = R = I``.
        diagnostic_every: steps between eigen-diagnostic evaluations (0 disables).
        il_holdout: held-out fraction for imitation learning.
        il_threshold: required held-out MSE for imitation learning.
        normalize: express states (and, unless ``control_scale`` is set,
            controls) in units of their dataset standard deviations inside
            the latent model.
        control_scale: fixed control unit for the latent model; ``None``
            picks the per-environment default (the data std when there is
            none).
    """

    episodes: int = 200
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    latent_dim: int = None
    consistency_weight: float = 1.0
    cost_weight: float = 1.0
    structure: str = "companion"
    use_cost_loss: bool = True
    diagnostic_every: int = 500
    il_holdout: float = 0.1
    il_threshold: float = 0.05
    normalize: bool = True
    control_scale: float = None

    def __post_init__(self):
        for name in ("episodes", "epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.latent_dim is not None and int(self.latent_dim) < 1:
            raise ValueError("latent_dim must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}, got {self.structure!r}")
        if self.diagnostic_every < 0:
            raise ValueError("diagnostic_every must be nonnegative")
        if self.control_scale is not None and not self.control_scale > 0:
            raise ValueError("control_scale must be positive")
        if not 0.0 < self.il_holdout < 1.0:
            raise ValueError("il_holdout must lie in (0, 1)")


LATENT_DEFAULTS = {"cartpole": 20, "pendulum": 8, "double_integrator": 3}
# cartpole: the force limit; the expert's controls have std ~1.5 N, and at that
# unit the fitted latent model stays too loose for the eigen diagnostic to fall
CONTROL_SCALE_DEFAULTS = {"cartpole": 10.0}


def latent_dim_for(config, env_name):
    if config.latent_dim is not None:
        return int(config.latent_dim)
    return LATENT_DEFAULTS.get(env_name, 20)


def control_scale_for(config, env_name):
    """Fixed control unit, or ``None`` to use the dataset's control std."""
    if config.control_scale is not None:
        return float(config.control_scale)
    return CONTROL_SCALE_DEFAULTS.get(env_name)


def _train_keys():
    return {f.name for f in fields(TrainConfig)}


def _planner_keys():
    return {f.name for f in fields(PlannerConfig)}


def parse_config(mapping, env_name="cartpole"):
    """Split a flat mapping into ``(TrainConfig, PlannerConfig, extras)``.

    ``extras`` holds recognised non-training keys (``env``, ``out``,
    ``noisy_expert``, ``init``, ``eval_episodes``).  Unknown keys raise.
    """
    mapping = dict(mapping or {})
    extras_keys = {"env", "out", "noisy_expert", "init", "eval_episodes"}
    train, planner, extras = {}, {}, {}
    for key, value in mapping.items():
        if key in _train_keys():
            train[key] = value
        elif key.startswith("planner_") and key[len("planner_"):] in _planner_keys():
            planner[key[len("planner_"):]] = value
        elif key in extras_keys:
            extras[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    if "line_search" in planner:
        planner["line_search"] = tuple(float(a) for a in planner["line_search"])
    env_name = extras.get("env", env_name)
    return TrainConfig(**train), replace(default_planner_config(env_name), **planner), extras


def load_config(path, env_name="cartpole"):
    with open(path) as fh:
        mapping = yaml.safe_load(fh) or {}
    if not isinstance(mapping, dict):
        raise ValueError(f"{path}: config must be a flat key-value mapping")
    for key, value in mapping.items():
        if isinstance(value, dict):
            raise ValueError(f"{path}: nested value under {key!r}; the schema is flat")
    return parse_config(mapping, env_name)
