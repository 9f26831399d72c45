"""Checkpoint persistence for trained parameters and optimizer state.

A checkpoint is one JSON document::

    {"format_version": "moment-rvos-ckpt/1", "config_hash", "config", "step", "build",
     "params": {name: {"shape", "data"}},
     "optimizer": {"step", "m": {name: {...}}, "v": {name: {...}}},
     "loss_curve": [[step, total, dice, focal], ...]}

``data`` fields are base64 of row-major little-endian float64 values.
"""

import os
import sys
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from shared import atomic_write_text, build_identifier
from config import CHECKPOINT_FORMAT_VERSION, RunConfig, RunConfigError, build_run_config, config_hash
from errors import DataError
from dataset_io import b64_decode_array, b64_encode_array
from model import ModelParams, ParameterStateError, SegmentationModel
from supervision_training import AdamOptimizer, LossRecord, SupervisionError

logger = logging.getLogger(__name__)


class CheckpointError(DataError):
    """Checkpoint cannot be read or does not fit the current run."""
    pass


class _ArrayDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")
    shape: List[int]
    data: str


class _OptimizerDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")
    step: int = Field(ge=0)
    m: Dict[str, _ArrayDoc]
    v: Dict[str, _ArrayDoc]


class _CheckpointDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")
    format_version: str
    config_hash: str
    config: Dict[str, Any]
    step: int = Field(ge=0)
    build: str = "unknown"
    params: Dict[str, _ArrayDoc]
    optimizer: _OptimizerDoc
    loss_curve: List[Tuple[int, float, float, float]] = Field(default_factory=list)

    @field_validator("format_version")
    @classmethod
    def _known_version(cls, value: str) -> str:
        if value != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported format_version {value!r}, expected {CHECKPOINT_FORMAT_VERSION!r}")
        return value


@dataclass
class Checkpoint:
    step: int
    config: RunConfig
    config_hash: str
    params: Dict[str, np.ndarray]
    optimizer: Dict[str, Any]
    loss_curve: List[LossRecord] = field(default_factory=list)
    build: str = "unknown"


def _encode(array: np.ndarray) -> Dict[str, Any]:
    array = np.asarray(array, dtype=np.float64)
    return {"shape": list(array.shape), "data": b64_encode_array(array, "float64")}


def _decode(name: str, doc: _ArrayDoc) -> np.ndarray:
    count = int(np.prod(doc.shape)) if doc.shape else 1
    try:
        return b64_decode_array(doc.data, "float64", count).reshape(doc.shape)
    except ValueError as e:
        raise CheckpointError(f"parameter {name!r}: {e}") from None


def save_checkpoint(path: Union[str, Path], config: RunConfig, params: ModelParams, optimizer: AdamOptimizer,
                    loss_curve: List[LossRecord], step: int) -> Path:
    """Write a checkpoint atomically; ``step`` counts completed optimizer steps."""
    state = optimizer.state_dict()
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_hash": config_hash(config),
        "config": config.model_dump(mode="json"),
        "step": int(step),
        "build": build_identifier(),
        "params": {name: _encode(value) for name, value in params.state_dict().items()},
        "optimizer": {
            "step": int(state["step"]),
            "m": {name: _encode(value) for name, value in state["m"].items()},
            "v": {name: _encode(value) for name, value in state["v"].items()},
        },
        "loss_curve": [[r.step, r.total, r.dice, r.focal] for r in loss_curve],
    }
    written = atomic_write_text(path, json.dumps(doc, sort_keys=True))
    logger.info("Saved checkpoint at step %d to %s", step, written)
    return written


def load_checkpoint(path: Union[str, Path], expected: Optional[RunConfig] = None,
                    allow_config_mismatch: bool = False) -> Checkpoint:
    """Read and check a checkpoint.

    Args:
        path: checkpoint file
        expected: config of the current run; its hash must match the stored one
        allow_config_mismatch: downgrade a hash mismatch to a warning
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    try:
        doc = _CheckpointDoc.model_validate_json(raw)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "<root>"
        raise CheckpointError(f"{path}: {where}: {first['msg']}") from None

    try:
        stored_config = build_run_config(doc.config)
    except RunConfigError as e:
        raise CheckpointError(f"{path}: stored config is invalid: {e}") from None
    if expected is not None and config_hash(expected) != doc.config_hash:
        message = f"config hash {config_hash(expected)} does not match checkpoint {doc.config_hash}"
        if not allow_config_mismatch:
            raise CheckpointError(message)
        logger.warning("%s (continuing as requested)", message)

    return Checkpoint(
        step=doc.step,
        config=stored_config,
        config_hash=doc.config_hash,
        params={name: _decode(name, a) for name, a in doc.params.items()},
        optimizer={
            "step": doc.optimizer.step,
            "m": {name: _decode(name, a) for name, a in doc.optimizer.m.items()},
            "v": {name: _decode(name, a) for name, a in doc.optimizer.v.items()},
        },
        loss_curve=[LossRecord(*row) for row in doc.loss_curve],
        build=doc.build,
    )


def restore_model(checkpoint: Checkpoint, config: Optional[RunConfig] = None) -> SegmentationModel:
    """A model carrying the checkpoint's parameters (built from ``config`` or the stored one)."""
    model = SegmentationModel(config or checkpoint.config)
    try:
        model.params.load_state_dict(checkpoint.params)
    except ParameterStateError as e:
        raise CheckpointError(f"checkpoint parameters do not fit the model: {e}") from None
    return model


def restore_training(checkpoint: Checkpoint,
                     config: Optional[RunConfig] = None) -> Tuple[SegmentationModel, AdamOptimizer]:
    """Model and optimizer ready to continue from ``checkpoint.step``."""
    config = config or checkpoint.config
    model = restore_model(checkpoint, config)
    optimizer = AdamOptimizer(model.params.named_parameters(), lr=config.training.lr)
    try:
        optimizer.load_state_dict(checkpoint.optimizer)
    except SupervisionError as e:
        raise CheckpointError(str(e)) from None
    return model, optimizer
