"""Run configuration (YAML) with field-level validation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .network.model import ModelConfig
from .objectives import LossWeights
from .prompts import TEXT_ENCODERS
from .training import PlanError, Stage3Config, StagePlan, StepSpec, stage1_plan, stage2_plan

OUTPUT_ROOT_ENV = "CRUNET_OUTPUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


@dataclass
class RunConfig:
    data_dir: Path
    output_dir: Path
    checkpoint: Path | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    stage1: StagePlan = field(default_factory=stage1_plan)
    stage2: StagePlan = field(default_factory=stage2_plan)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    seed: int = 0
    crop_fraction: float = 0.5
    text_encoder: str = "hash"
    mixed_precision: bool = False
    threads: int = 1


def _build(cls, raw: Any, path: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown field")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        named = [f.name for f in fields(cls) if f.name in str(exc)]
        raise ConfigError(f"{path}.{named[0]}" if named else path, str(exc)) from exc


def _plan(raw: Any, path: str, preset) -> StagePlan:
    if raw is None:
        plan = preset()
    elif not isinstance(raw, dict):
        raise ConfigError(path, "expected a mapping")
    elif "steps" in raw:
        steps = raw["steps"]
        if not isinstance(steps, list) or not steps:
            raise ConfigError(f"{path}.steps", "expected a non-empty list")
        plan = StagePlan([_build(StepSpec, s, f"{path}.steps[{i}]") for i, s in enumerate(steps)])
    else:
        extra = sorted(set(raw) - {"epoch_divisor", "sample_divisor"})
        if extra:
            raise ConfigError(f"{path}.{extra[0]}", "unknown field")
        try:
            plan = preset(int(raw.get("epoch_divisor", 10)), int(raw.get("sample_divisor", 100)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(path, str(exc)) from exc
    try:
        plan.validate()
    except PlanError as exc:
        raise ConfigError(path, str(exc)) from exc
    return plan


def parse_config(raw: Any, base_dir: Path | None = None, require_data: bool = True) -> RunConfig:
    """Validate a raw mapping into a :class:`RunConfig`. Raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    allowed = {f.name for f in fields(RunConfig)} | {"paths"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    base_dir = base_dir or Path.cwd()
    paths = raw.get("paths") or {}
    if not isinstance(paths, dict):
        raise ConfigError("paths", "expected a mapping")

    def _path(key: str, required: bool):
        val = paths.get(key)
        if val is None:
            if required:
                raise ConfigError(f"paths.{key}", "required")
            return None
        p = Path(os.path.expandvars(str(val)))
        return p if p.is_absolute() else base_dir / p

    data_dir = _path("data_dir", True)
    if require_data and not data_dir.is_dir():
        raise ConfigError("paths.data_dir", f"directory {data_dir} does not exist")
    output_dir = _path("output_dir", True)
    if os.environ.get(OUTPUT_ROOT_ENV):
        output_dir = Path(os.environ[OUTPUT_ROOT_ENV]) / output_dir.name
    checkpoint = _path("checkpoint", False)
    if checkpoint is not None and not checkpoint.exists():
        raise ConfigError("paths.checkpoint", f"file {checkpoint} does not exist")

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed", "must be an integer")
    crop = raw.get("crop_fraction", 0.5)
    if not isinstance(crop, (int, float)) or not 0 < crop <= 1:
        raise ConfigError("crop_fraction", "must be in (0, 1]")
    encoder = raw.get("text_encoder", "hash")
    if encoder not in TEXT_ENCODERS:
        raise ConfigError("text_encoder", f"unknown encoder {encoder!r}")
    threads = raw.get("threads", 1)
    if not isinstance(threads, int) or threads < 1:
        raise ConfigError("threads", "must be a positive integer")

    return RunConfig(
        data_dir=data_dir,
        output_dir=output_dir,
        checkpoint=checkpoint,
        model=_build(ModelConfig, raw.get("model"), "model"),
        loss=_build(LossWeights, raw.get("loss"), "loss"),
        stage1=_plan(raw.get("stage1"), "stage1", stage1_plan),
        stage2=_plan(raw.get("stage2"), "stage2", stage2_plan),
        stage3=_build(Stage3Config, raw.get("stage3"), "stage3"),
        seed=seed,
        crop_fraction=float(crop),
        text_encoder=encoder,
        mixed_precision=bool(raw.get("mixed_precision", False)),
        threads=threads,
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError("<root>", f"invalid YAML ({exc})") from exc
    return parse_config(raw, base_dir=path.parent)
