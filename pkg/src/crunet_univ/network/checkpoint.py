"""Checkpoint archive: parameters keyed by hierarchical name plus config and curriculum step."""

from __future__ import annotations

import pickle
from pathlib import Path

import torch

from .model import CRUNetMRUniv, ModelConfig

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: CRUNetMRUniv, path: str | Path, step: int | str | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": model.cfg.to_dict(),
            "step": step,
            "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
            "extra": extra or {},
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path, dtype: torch.dtype | None = None) -> tuple[CRUNetMRUniv, dict]:
    """Rebuild the model from the stored config and load it, validating every shape by name."""
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    try:
        cfg = ModelConfig(**blob["config"])
        state = blob["state_dict"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    model = CRUNetMRUniv(cfg)
    expected = model.state_dict()
    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    if missing or unexpected:
        raise CheckpointError(f"{path}: missing {missing[:5]} unexpected {unexpected[:5]}")
    bad = [(k, tuple(state[k].shape), tuple(v.shape)) for k, v in expected.items() if state[k].shape != v.shape]
    if bad:
        k, got, want = bad[0]
        raise CheckpointError(f"{path}: {k} has shape {got}, config expects {want} ({len(bad)} mismatches)")
    model.load_state_dict(state)
    if dtype is not None:
        model.to(dtype)
    return model, {"step": blob.get("step"), "extra": blob.get("extra", {})}
