"""Configuration models.

``ModelConfig`` is a flat key set covering every architectural and training
hyperparameter. Values come from the built-in defaults, then an optional JSON
file, then ``--set key=value`` overrides. Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Any, Literal, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from bondedit.errors import ConfigError
from bondedit.molgraph import NUM_ATOM_ATTRIBUTES

M = TypeVar("M", bound=BaseModel)

# factor, patience (optimizer steps), floor
LR_PROFILES: dict[str, tuple[float, int, float]] = {
    "small": (0.5, 1000, 5e-5),
    "large": (0.8, 500, 2e-5),
}

# Keys that change parameter shapes or the forward computation.
ARCHITECTURE_KEYS: tuple[str, ...] = (
    "atom_embed_dim",
    "bond_embed_dim",
    "state_dim",
    "message_passing_steps",
    "pair_hidden",
    "pair_score_hidden",
    "gru_hidden",
    "value_hidden",
    "head_hidden",
    "num_bond_types",
    "pair_network",
    "use_reagent_bit",
)


class ModelConfig(BaseModel):
    """Every hyperparameter of the model, its training and its decoding."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # Encoder
    atom_embed_dim: Annotated[int, Field(default=51, gt=0, description="Learned element embedding width")]
    bond_embed_dim: Annotated[int, Field(default=21, gt=0, description="Bond-type embedding width")]
    state_dim: Annotated[int, Field(default=99, gt=0, description="Node state and message width")]
    message_passing_steps: Annotated[int, Field(default=6, ge=0, description="Message passing steps at the first step")]

    # Pair scoring
    pair_network: Annotated[Literal["local", "global"], Field(default="global", description="Pair scorer")]
    pair_hidden: Annotated[int, Field(default=71, gt=0, description="Pair representation width")]
    pair_score_hidden: Annotated[int, Field(default=51, gt=0, description="Hidden width of the pair scorer")]
    use_reagent_bit: Annotated[bool, Field(default=True, description="Append a reagent flag to node states before pair scoring")]
    exclude_reagents: Annotated[bool, Field(default=True, description="Mask pairs that touch reagent atoms")]
    top_k: Annotated[int, Field(default=10, gt=0, description="Candidate pairs kept per step")]

    # Policy
    gru_hidden: Annotated[int, Field(default=101, gt=0, description="Recurrent state width")]
    value_hidden: Annotated[int, Field(default=99, gt=0, description="Hidden width of the value network")]
    head_hidden: Annotated[int, Field(default=81, gt=0, description="Hidden width of the signal and bond heads")]
    num_bond_types: Annotated[int, Field(default=5, ge=2, le=5, description="Bond types the bond head chooses from")]
    max_steps: Annotated[int, Field(default=8, gt=0, description="Maximum edits per episode")]

    # Rewards and losses
    step_reward: Annotated[float, Field(default=1.0, description="Immediate reward magnitude per sub-action")]
    final_reward: Annotated[float, Field(default=2.0, description="Delayed reward magnitude at episode end")]
    gamma: Annotated[float, Field(default=1.0, ge=0.0, le=1.0, description="Discount factor")]
    lambda_a2c: Annotated[float, Field(default=1.0, ge=0.0)]
    lambda_value: Annotated[float, Field(default=0.5, ge=0.0)]
    lambda_atom_pair: Annotated[float, Field(default=1.0, ge=0.0)]
    lambda_over_length: Annotated[float, Field(default=0.2, ge=0.0)]
    lambda_in_top_k: Annotated[float, Field(default=0.2, ge=0.0)]
    train_sampling: Annotated[Literal["sample", "argmax"], Field(default="sample", description="Sub-action selection during training")]

    # Optimisation
    learning_rate: Annotated[float, Field(default=0.001, gt=0.0)]
    adam_beta1: Annotated[float, Field(default=0.9, ge=0.0, lt=1.0)]
    adam_beta2: Annotated[float, Field(default=0.999, ge=0.0, lt=1.0)]
    adam_eps: Annotated[float, Field(default=1e-8, gt=0.0)]
    lr_profile: Annotated[Literal["small", "large"], Field(default="small", description="Plateau schedule profile")]
    batch_size: Annotated[int, Field(default=20, gt=0)]
    max_iterations: Annotated[int, Field(default=1_000_000, gt=0)]
    eval_every: Annotated[int, Field(default=100, gt=0, description="Iterations between validation passes")]
    checkpoint_every: Annotated[int, Field(default=1000, gt=0, description="Iterations between checkpoints")]

    # Decoding
    beam_width: Annotated[int, Field(default=20, gt=0)]

    # Runtime
    dtype: Annotated[Literal["float64", "float32"], Field(default="float64")]
    valence_table: Annotated[str | None, Field(default=None, description="JSON file of per-element valence overrides")]
    seed: Annotated[int, Field(default=0, ge=0)]

    @classmethod
    def desk(cls, **overrides: Any) -> ModelConfig:
        """Small configuration for toy data on one CPU core."""
        values: dict[str, Any] = {
            "atom_embed_dim": 8,
            "bond_embed_dim": 4,
            "state_dim": 16,
            "message_passing_steps": 3,
            "pair_hidden": 16,
            "pair_score_hidden": 16,
            "gru_hidden": 16,
            "value_hidden": 16,
            "head_hidden": 16,
            "top_k": 5,
            "beam_width": 5,
            "max_steps": 4,
            "batch_size": 8,
            "learning_rate": 0.005,
            "max_iterations": 2000,
            "eval_every": 50,
            "checkpoint_every": 500,
        }
        values.update(overrides)
        return cls.model_validate(values)

    @property
    def feature_dim(self) -> int:
        return self.atom_embed_dim + NUM_ATOM_ATTRIBUTES

    @property
    def lr_schedule(self) -> tuple[float, int, float]:
        return LR_PROFILES[self.lr_profile]

    def architecture(self) -> dict[str, Any]:
        return {key: getattr(self, key) for key in ARCHITECTURE_KEYS}

    def config_hash(self) -> str:
        """SHA-256 over the architectural keys only."""
        payload = json.dumps(self.architecture(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ToyTaskSpec(BaseModel):
    """Synthetic dataset generator settings."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    min_nodes: Annotated[int, Field(default=5, ge=2)]
    max_nodes: Annotated[int, Field(default=9, ge=2)]
    num_labels: Annotated[int, Field(default=3, ge=1, le=6, description="Element alphabet size")]
    rule: Annotated[Literal["degree_sum", "degree_sum_break"], Field(default="degree_sum")]
    min_changes: Annotated[int, Field(default=1, ge=0, le=3)]
    max_changes: Annotated[int, Field(default=2, ge=0, le=3)]
    train_size: Annotated[int, Field(default=1000, ge=0)]
    valid_size: Annotated[int, Field(default=100, ge=0)]
    test_size: Annotated[int, Field(default=200, ge=0)]
    seed: Annotated[int, Field(default=0, ge=0)]

    @model_validator(mode="after")
    def _check_ranges(self) -> ToyTaskSpec:
        if self.min_nodes > self.max_nodes:
            msg = "min_nodes must not exceed max_nodes"
            raise ValueError(msg)
        if self.min_changes > self.max_changes:
            msg = "min_changes must not exceed max_changes"
            raise ValueError(msg)
        return self


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _read_json(path: Path) -> dict[str, Any]:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        msg = f"config file not found: {path}"
        raise ConfigError(msg) from None
    except json.JSONDecodeError as exc:
        msg = f"config file {path} is not valid JSON: {exc}"
        raise ConfigError(msg) from exc
    if not isinstance(data, dict):
        msg = f"config file {path} must contain a JSON object"
        raise ConfigError(msg)
    return data


def parse_override(text: str) -> tuple[str, Any]:
    """Split ``key=value``; the value is JSON if it parses, else a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        msg = f"invalid override {text!r}, expected key=value"
        raise ConfigError(msg)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _validate(model: type[M], values: dict[str, Any], source: str) -> M:
    try:
        return model.model_validate(values)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()
        )
        msg = f"invalid configuration ({source}): {problems}"
        raise ConfigError(msg) from exc


def load_config(
    path: Path | None = None,
    overrides: list[str] | None = None,
    base: ModelConfig | None = None,
    seed: int | None = None,
) -> ModelConfig:
    """Defaults (or ``base``) < JSON file < ``key=value`` overrides < ``seed``."""
    values: dict[str, Any] = base.model_dump() if base is not None else {}
    if path is not None:
        values.update(_read_json(path))
    for item in overrides or []:
        key, value = parse_override(item)
        values[key] = value
    if seed is not None:
        values["seed"] = seed
    return _validate(ModelConfig, values, str(path) if path else "overrides")


def load_toy_spec(path: Path | None = None, overrides: list[str] | None = None) -> ToyTaskSpec:
    values: dict[str, Any] = _read_json(path) if path is not None else {}
    for item in overrides or []:
        key, value = parse_override(item)
        values[key] = value
    return _validate(ToyTaskSpec, values, str(path) if path else "toy spec")
