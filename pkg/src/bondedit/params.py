"""Named parameters, gradient accumulators, Adam moments and checkpoints.

Checkpoints are JSON: a header (format, version, config hash, dtype, step)
plus every tensor with its Adam moments, written with sorted keys so that
save -> load -> save gives a byte-identical file. The layout is documented in
``docs/CHECKPOINT_FORMAT.md``.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from bondedit.errors import CheckpointError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "bondedit-checkpoint"
CHECKPOINT_VERSION = 1

Init = Literal["glorot", "zeros"]


class ParamStore:
    """Every learnable tensor of a model, keyed by a stable dotted name."""

    def __init__(self, dtype: np.dtype | type | str = np.float64) -> None:
        self.dtype = np.dtype(dtype)
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def __contains__(self, name: object) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return sorted(self._values)

    def num_parameters(self) -> int:
        return sum(v.size for v in self._values.values())

    def add(self, name: str, shape: tuple[int, ...], rng: np.random.Generator, init: Init = "glorot") -> None:
        """Create a parameter: Glorot-uniform for matrices, zeros for vectors or ``init='zeros'``."""
        if name in self._values:
            msg = f"duplicate parameter name {name!r}"
            raise ValueError(msg)
        if init == "zeros" or len(shape) < 2:
            value = np.zeros(shape, dtype=self.dtype)
        else:
            fan_in, fan_out = shape[0], shape[-1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-limit, limit, size=shape).astype(self.dtype)
        self._install(name, value)

    def _install(self, name: str, value: np.ndarray) -> None:
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        self._m[name] = np.zeros_like(value)
        self._v[name] = np.zeros_like(value)

    def value(self, name: str) -> np.ndarray:
        try:
            return self._values[name]
        except KeyError:
            msg = f"unknown parameter {name!r}"
            raise KeyError(msg) from None

    def set_value(self, name: str, value: np.ndarray) -> None:
        current = self.value(name)
        if np.shape(value) != current.shape:
            msg = f"{name}: expected shape {current.shape}, got {np.shape(value)}"
            raise ShapeError(msg)
        self._values[name] = np.asarray(value, dtype=self.dtype).copy()

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def accumulate(self, name: str, g: np.ndarray) -> None:
        acc = self._grads[name]
        if g.shape != acc.shape:
            msg = f"{name}: gradient shape {g.shape} does not match parameter shape {acc.shape}"
            raise ShapeError(msg)
        acc += g

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def grads(self) -> dict[str, np.ndarray]:
        return {name: self._grads[name] for name in self.names()}

    def moments(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self._m[name], self._v[name]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: self._values[name].copy() for name in self.names()}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


class CheckpointHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: Literal["bondedit-checkpoint"]
    version: int
    config_hash: str
    dtype: Literal["float64", "float32"]
    step: int


def checkpoint_payload(store: ParamStore, config_hash: str, extra: dict[str, Any] | None = None) -> dict[str, Any]:
    header = CheckpointHeader(
        format=CHECKPOINT_FORMAT,
        version=CHECKPOINT_VERSION,
        config_hash=config_hash,
        dtype=store.dtype.name,
        step=store.step,
    )
    tensors = {}
    for name in store.names():
        m, v = store.moments(name)
        tensors[name] = {
            "shape": list(store.value(name).shape),
            "value": store.value(name).reshape(-1).tolist(),
            "m": m.reshape(-1).tolist(),
            "v": v.reshape(-1).tolist(),
        }
    return {"header": header.model_dump(), "tensors": tensors, "state": extra or {}}


def save_checkpoint(path: Path, store: ParamStore, config_hash: str, extra: dict[str, Any] | None = None) -> None:
    """Write a checkpoint atomically (temp file then rename)."""
    text = json.dumps(checkpoint_payload(store, config_hash, extra), sort_keys=True, separators=(",", ":"))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text + "\n", encoding="utf-8")
    tmp.replace(path)
    logger.info("wrote checkpoint %s (step %d)", path, store.step)


def load_checkpoint(
    path: Path,
    expected_hash: str | None = None,
    names: list[str] | None = None,
) -> tuple[ParamStore, dict[str, Any], CheckpointHeader]:
    """Read a checkpoint; check version, config hash and (optionally) the parameter names."""
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        msg = f"checkpoint not found: {path}"
        raise CheckpointError(msg) from None
    except json.JSONDecodeError as exc:
        msg = f"checkpoint {path} is not valid JSON: {exc}"
        raise CheckpointError(msg) from exc
    try:
        header = CheckpointHeader.model_validate(raw.get("header"))
    except ValidationError as exc:
        msg = f"checkpoint {path} has an invalid header: {exc.errors()[0]['msg']}"
        raise CheckpointError(msg) from exc
    if header.version != CHECKPOINT_VERSION:
        msg = f"checkpoint version {header.version} is not supported (expected {CHECKPOINT_VERSION})"
        raise CheckpointError(msg)
    if expected_hash is not None and header.config_hash != expected_hash:
        msg = "checkpoint was written for a different model configuration (config hash mismatch)"
        raise CheckpointError(msg)

    store = ParamStore(header.dtype)
    store.step = header.step
    tensors: dict[str, Any] = raw.get("tensors", {})
    for name in sorted(tensors):
        entry = tensors[name]
        shape = tuple(entry["shape"])
        try:
            value = np.asarray(entry["value"], dtype=store.dtype).reshape(shape)
            m = np.asarray(entry["m"], dtype=store.dtype).reshape(shape)
            v = np.asarray(entry["v"], dtype=store.dtype).reshape(shape)
        except (KeyError, ValueError) as exc:
            msg = f"checkpoint tensor {name!r} is malformed: {exc}"
            raise CheckpointError(msg) from exc
        store._install(name, value)
        store._m[name][...] = m
        store._v[name][...] = v
    if names is not None:
        missing = sorted(set(names) - set(tensors))
        if missing:
            msg = f"checkpoint is missing tensors: {', '.join(missing)}"
            raise CheckpointError(msg)
    return store, raw.get("state", {}), header
