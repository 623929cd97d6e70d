"""Checkpoint files: an ``.npz`` archive with a JSON header and a named float64 parameter table."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ArBaselineModel, LasoConfig, LasoModel

CHECKPOINT_VERSION = 1
KINDS = {"laso": LasoModel, "ar": ArBaselineModel}


class ArchitectureMismatch(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


def model_kind(model) -> str:
    for kind, cls in KINDS.items():
        if isinstance(model, cls):
            return kind
    raise TypeError(f"unknown model type {type(model).__name__}")


def state_dict(model) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def load_state(model, state: dict[str, np.ndarray]) -> None:
    """Copy ``state`` into ``model``; names and shapes must match exactly."""
    params = dict(model.named_parameters())
    if set(params) != set(state):
        missing = sorted(set(params) - set(state))[:3]
        extra = sorted(set(state) - set(params))[:3]
        raise ArchitectureMismatch(f"parameter names differ (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        if p.data.shape != state[name].shape:
            raise ArchitectureMismatch(f"{name}: checkpoint shape {state[name].shape} vs model {p.data.shape}")
        p.data[...] = state[name]


def average_states(states: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Elementwise arithmetic mean of parameter tables."""
    if not states:
        raise ValueError("nothing to average")
    return {name: np.mean([s[name] for s in states], axis=0) for name in states[0]}


@dataclass
class Checkpoint:
    kind: str
    config: LasoConfig
    params: dict[str, np.ndarray]
    step: int = 0
    run_config: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    def build(self):
        model = KINDS[self.kind].init(self.config)
        load_state(model, self.params)
        return model


def save_checkpoint(path, model, step: int = 0, run_config: dict | None = None, optimizer: dict | None = None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": model_kind(model),
        "config": model.cfg.to_dict(),
        "step": int(step),
        "run_config": run_config or {},
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data
    for key, val in (optimizer or {}).items():
        arrays[f"opt/{key}"] = val
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["__header__"]).decode("utf-8"))
            params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
            opt = {k[4:]: z[k] for k in z.files if k.startswith("opt/")}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointFormatError(f"{path}: not a readable checkpoint ({exc})") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if header.get("kind") not in KINDS:
        raise CheckpointFormatError(f"{path}: unknown model kind {header.get('kind')!r}")
    return Checkpoint(
        kind=header["kind"],
        config=LasoConfig.from_dict(header["config"]),
        params=params,
        step=header["step"],
        run_config=header["run_config"],
        optimizer=opt,
    )


def load_model(path, expect: LasoConfig | None = None):
    ckpt = load_checkpoint(path)
    if expect is not None and ckpt.config != expect:
        raise ArchitectureMismatch(f"{path}: checkpoint architecture {ckpt.config} differs from {expect}")
    return ckpt.build()
