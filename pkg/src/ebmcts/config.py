"""Run configuration: a flat TOML key/value file plus environment overrides.

Every key has a default; unknown keys are rejected with the offending name.
Environment variables named ``EBMMCTS_<KEY>`` (upper-cased key) override the
file, parsed as TOML values with a plain-string fallback.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .harness import ExpertParams, TaskSpec
from .mcts import MCTSConfig
from .nce import OptimizerConfig
from .noise import NoiseConfig

ENV_PREFIX = "EBMMCTS_"

DEFAULTS: dict[str, object] = {
    "out_dir": "runs/default",
    "seed": 0,
    # task
    "task_number_min": 0,
    "task_number_max": 99,
    "task_ops": ["add", "sub"],
    "task_steps_min": 2,
    "task_steps_max": 3,
    "task_step_weights": [0.6, 0.4],
    "task_start_min": 1,
    "task_start_max": 9,
    "task_operand_min": 2,
    "task_operand_max": 9,
    "task_n_train": 2000,
    "task_n_test": 200,
    # generator
    "generator_kind": "expert",  # expert | ngram | remote
    "ngram_order": 4,
    "ngram_alpha": 0.1,
    "expert_flip_rate": 0.15,
    "expert_correct_mass": 0.7,
    "expert_stop_mass": 0.1,
    "expert_flipped_stop_mass": 0.7,
    "remote_endpoint": "",
    # noise
    "noise_rejection_samples": 16,
    "noise_suboutput_samples": 8,
    "noise_max_segment_tokens": 32,
    "noise_k_min": 1,
    "noise_k_max": 2,
    "noise_temperature": 1.0,
    "noise_max_sentences": 12,
    "noise_include_unfiltered": False,
    # energy
    "energy_dim": 2048,
    "energy_hidden": 64,
    "energy_ngram_order": 3,
    "energy_hash_seed": 0,
    # optimizer
    "opt_learning_rate": 0.01,
    "opt_epochs": 5,
    "opt_batch_size": 64,
    "opt_weight_decay": 0.1,
    "opt_grad_clip": 1.0,
    "opt_schedule": "cosine",
    "opt_heldout_fraction": 0.1,
    # mcts
    "mcts_c": 1.0,
    "mcts_root_branch": 10,
    "mcts_branch": 2,
    "mcts_iterations": 20,
    "mcts_max_rollout_sentences": 12,
    "mcts_max_segment_tokens": 32,
    "mcts_reward_mode": "sigmoid",
    "mcts_selection": "uct",
    # eval
    "eval_n_paths": 10,
}

GENERATOR_KINDS = ("expert", "ngram", "remote")


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def out_dir(self) -> Path:
        return Path(self.values["out_dir"])

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def config_hash(self) -> str:
        payload = json.dumps(self.values, sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    # -- sub-config builders --------------------------------------------------

    def task_spec(self) -> TaskSpec:
        v = self.values
        return TaskSpec(
            number_range=(int(v["task_number_min"]), int(v["task_number_max"])),
            ops=tuple(v["task_ops"]),
            steps=(int(v["task_steps_min"]), int(v["task_steps_max"])),
            n_train=int(v["task_n_train"]),
            n_test=int(v["task_n_test"]),
            seed=self.seed,
            start_range=(int(v["task_start_min"]), int(v["task_start_max"])),
            operand_range=(int(v["task_operand_min"]), int(v["task_operand_max"])),
            step_weights=tuple(float(w) for w in v["task_step_weights"]),
        )

    def expert_params(self) -> ExpertParams:
        v = self.values
        return ExpertParams(
            flip_rate=float(v["expert_flip_rate"]),
            correct_mass=float(v["expert_correct_mass"]),
            stop_mass=float(v["expert_stop_mass"]),
            flipped_stop_mass=float(v["expert_flipped_stop_mass"]),
            seed=self.seed,
        )

    def noise_config(self, source: str) -> NoiseConfig:
        v = self.values
        per_instruction = (
            int(v["noise_rejection_samples"])
            if source == "rejection"
            else int(v["noise_suboutput_samples"])
        )
        return NoiseConfig(
            samples_per_instruction=per_instruction,
            max_segment_tokens=int(v["noise_max_segment_tokens"]),
            k_min=int(v["noise_k_min"]),
            k_max=int(v["noise_k_max"]),
            temperature=float(v["noise_temperature"]),
            max_sentences=int(v["noise_max_sentences"]),
        )

    def optimizer_config(self) -> OptimizerConfig:
        v = self.values
        return OptimizerConfig(
            learning_rate=float(v["opt_learning_rate"]),
            epochs=int(v["opt_epochs"]),
            batch_size=int(v["opt_batch_size"]),
            weight_decay=float(v["opt_weight_decay"]),
            grad_clip=float(v["opt_grad_clip"]),
            schedule=str(v["opt_schedule"]),
            heldout_fraction=float(v["opt_heldout_fraction"]),
            seed=self.seed,
        )

    def mcts_config(self) -> MCTSConfig:
        v = self.values
        return MCTSConfig(
            exploration_c=float(v["mcts_c"]),
            root_branch=int(v["mcts_root_branch"]),
            branch=int(v["mcts_branch"]),
            max_iterations=int(v["mcts_iterations"]),
            max_rollout_sentences=int(v["mcts_max_rollout_sentences"]),
            max_segment_tokens=int(v["mcts_max_segment_tokens"]),
            reward_mode=str(v["mcts_reward_mode"]),
            selection=str(v["mcts_selection"]),
            seed=self.seed,
        )


def _coerce(key: str, value: object) -> object:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"key {key!r} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key {key!r} expects an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"key {key!r} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key {key!r} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"key {key!r} expects a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"key {key!r} expects an array, got {value!r}")
        return value
    raise ConfigError(f"unhandled default type for key {key!r}")


def load_config(path, overrides: dict | None = None, environ: dict | None = None) -> RunConfig:
    """Load, merge (file < environment < explicit overrides), and validate."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        # tomllib error messages carry line and column information
        raise ConfigError(f"config file {path}: {exc}") from exc

    values = dict(DEFAULTS)
    for key, value in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r} in {path}")
        values[key] = _coerce(key, value)

    env = os.environ if environ is None else environ
    for key in DEFAULTS:
        env_name = ENV_PREFIX + key.upper()
        if env_name in env:
            text = env[env_name]
            try:
                parsed = tomllib.loads(f"value = {text}")["value"]
            except tomllib.TOMLDecodeError:
                parsed = text
            values[key] = _coerce(key, parsed)

    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown override key {key!r}")
        values[key] = _coerce(key, value)

    _validate(values)
    return RunConfig(values)


def _validate(values: dict) -> None:
    if values["generator_kind"] not in GENERATOR_KINDS:
        raise ConfigError(
            f"generator_kind must be one of {GENERATOR_KINDS}, got {values['generator_kind']!r}"
        )
    if values["generator_kind"] == "remote" and not values["remote_endpoint"]:
        raise ConfigError("generator_kind 'remote' requires remote_endpoint")
    if values["task_steps_min"] < 2 or values["task_steps_max"] > 8:
        raise ConfigError("task steps must lie within [2, 8]")
    weights = values["task_step_weights"]
    span = values["task_steps_max"] - values["task_steps_min"] + 1
    if len(weights) != span:
        raise ConfigError(
            f"task_step_weights needs {span} entries for steps "
            f"{values['task_steps_min']}..{values['task_steps_max']}"
        )
