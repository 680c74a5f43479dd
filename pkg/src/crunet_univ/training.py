"""Optimizer, learning-rate schedules and the three training regimes.

Stage 1 is a single flat run (clip12 windows, step decay). Stage 2 is the
four-step curriculum that grows the model 6 -> 10 -> 12 cascades while
shifting the acceleration mix. Stage 3 is a few-epoch, many-iteration
fine-tune. Every source of randomness is derived from ``(seed, step, epoch)``
so a run resumed from a step-boundary checkpoint replays exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import KSpaceCase, balanced_sampler, win5_window, window_frames
from .network.checkpoint import save_checkpoint
from .network.model import CRUNetMRUniv, grow_cascades
from .objectives import LossWeights, cls_loss, rec_loss, total_loss
from .prompts import TextEncoder
from .recon import make_input
from .sampling import ACCELS, cached_mask

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "iteration", "lr", "l_rec", "l_cls", "total")


class PlanError(ValueError):
    pass


# --------------------------------------------------------------------------- optimizer / schedules


def build_optimizer(params, lr: float = 2e-4, weight_decay: float = 0.1, betas=(0.9, 0.999), eps: float = 1e-8):
    return torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


def step_decay_schedule(epoch: int, lr: float = 2e-4, factor: float = 0.9, every: int = 2, min_lr: float = 2e-5) -> float:
    return max(lr * factor ** (epoch // every), min_lr)


def cosine_warmup_schedule(step: int, total_steps: int, warmup_steps: int, peak_lr: float, min_lr: float) -> float:
    """Linear warm-up from ``min_lr`` to ``peak_lr``, then cosine back to ``min_lr`` at the last step."""
    if step < warmup_steps:
        return min_lr + (peak_lr - min_lr) * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return peak_lr
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------- plans


@dataclass
class StepSpec:
    epochs: int
    samples_per_epoch: int
    accel_probs: dict[int, float]
    cascade_target: int
    schedule: str = "cosine_warmup"  # or "step_decay" / "constant"
    lr: float = 2e-4
    min_lr: float = 1e-5
    warmup_epochs: float = 0.0
    decay_factor: float = 0.9
    decay_every: int = 2
    final_epoch_lr: float | None = None
    window_policy: str = "win5"

    def __post_init__(self):
        self.accel_probs = {int(k): float(v) for k, v in self.accel_probs.items()}

    @property
    def total_iters(self) -> int:
        return self.epochs * self.samples_per_epoch

    def lr_at(self, epoch: int, it_in_step: int) -> float:
        if self.final_epoch_lr is not None and epoch == self.epochs - 1:
            return self.final_epoch_lr
        if self.schedule == "constant":
            return self.lr
        if self.schedule == "step_decay":
            return step_decay_schedule(epoch, self.lr, self.decay_factor, self.decay_every, self.min_lr)
        warmup = round(self.warmup_epochs * self.samples_per_epoch)
        return cosine_warmup_schedule(it_in_step, self.total_iters, warmup, self.lr, self.min_lr)


@dataclass
class StagePlan:
    steps: list[StepSpec]

    def validate(self) -> None:
        if not self.steps:
            raise PlanError("plan has no steps")
        prev = 0
        for i, s in enumerate(self.steps, 1):
            if s.epochs < 1 or s.samples_per_epoch < 1:
                raise PlanError(f"step {i}: epochs and samples_per_epoch must be >= 1")
            if not s.accel_probs or any(a not in ACCELS for a in s.accel_probs):
                raise PlanError(f"step {i}: accelerations must be drawn from {ACCELS}")
            if any(p < 0 for p in s.accel_probs.values()) or abs(sum(s.accel_probs.values()) - 1.0) > 1e-9:
                raise PlanError(f"step {i}: acceleration probabilities must be >= 0 and sum to 1")
            if s.cascade_target < prev:
                raise PlanError(f"step {i}: cascade_target {s.cascade_target} decreases from {prev}")
            if s.schedule not in ("cosine_warmup", "step_decay", "constant"):
                raise PlanError(f"step {i}: unknown schedule {s.schedule!r}")
            if s.window_policy not in ("win5", "clip12"):
                raise PlanError(f"step {i}: unknown window policy {s.window_policy!r}")
            prev = s.cascade_target


def _scale(n: int, divisor: int) -> int:
    return max(1, math.ceil(n / divisor))


def stage1_plan(epoch_divisor: int = 10, sample_divisor: int = 100) -> StagePlan:
    """Flat run: 6 cascades, 60 epochs x 6000 samples (scaled), clip12 windows, step decay."""
    return StagePlan(
        [
            StepSpec(
                epochs=_scale(60, epoch_divisor),
                samples_per_epoch=_scale(6000, sample_divisor),
                accel_probs={a: 1 / 3 for a in ACCELS},
                cascade_target=6,
                schedule="step_decay",
                lr=2e-4,
                min_lr=2e-5,
                decay_factor=0.9,
                decay_every=2,
                window_policy="clip12",
            )
        ]
    )


def stage2_plan(epoch_divisor: int = 10, sample_divisor: int = 100) -> StagePlan:
    """Four-step curriculum; divisors of 1 give the full budgets."""
    e, s = (lambda n: _scale(n, epoch_divisor)), (lambda n: _scale(n, sample_divisor))
    return StagePlan(
        [
            StepSpec(e(40), s(6000), {8: 1.0}, 6, lr=2e-4, min_lr=1e-5, warmup_epochs=6 / epoch_divisor),
            StepSpec(e(40), s(6000), {8: 0.2, 16: 0.8}, 10, lr=1e-4, min_lr=1e-5, warmup_epochs=6 / epoch_divisor),
            StepSpec(e(32), s(6000), {8: 0.1, 16: 0.1, 24: 0.8}, 12, lr=5e-5, min_lr=1e-6, warmup_epochs=5 / epoch_divisor),
            StepSpec(
                e(13),
                s(16000),
                {a: 1 / 3 for a in ACCELS},
                12,
                schedule="step_decay",
                lr=8e-5,
                min_lr=0.0,
                decay_factor=0.4,
                decay_every=2,
                final_epoch_lr=1e-7,
            ),
        ]
    )


@dataclass
class Stage3Config:
    epochs: int = 4
    iterations: int = 900
    lr: float = 1e-5
    accel_probs: dict[int, float] = field(default_factory=lambda: {a: 1 / 3 for a in ACCELS})

    def as_step(self, cascades: int) -> StepSpec:
        return StepSpec(self.epochs, self.iterations, self.accel_probs, cascades, schedule="constant", lr=self.lr)


@dataclass
class TrainSettings:
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    mixed_precision: bool = False
    log_every: int = 50


# --------------------------------------------------------------------------- loop


def draw_accels(probs: dict[int, float], n: int, rng: np.random.Generator) -> list[int]:
    keys = sorted(probs)
    idx = rng.choice(len(keys), size=n, p=[probs[k] for k in keys])
    return [keys[i] for i in idx]


def mask_seed(case_index: int, accel: int) -> int:
    return 7919 * case_index + accel


def _seed_all(*parts: int) -> np.random.Generator:
    seq = np.random.SeedSequence([int(p) for p in parts])
    torch.manual_seed(int(seq.generate_state(1)[0]))
    return np.random.default_rng(seq)


class LossLog:
    """Append-only CSV of per-iteration losses and learning rates."""

    def __init__(self, path: str | Path | None, fresh: bool = True):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path and (fresh or not self.path.exists()):
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_FIELDS])


def train_iteration(model, optimizer, case: KSpaceCase, case_index: int, accel: int, window, encoder, settings: TrainSettings):
    t, _, h, w = case.ksp.shape
    mask = cached_mask(case.meta.trajectory, accel, t, h, w, None, mask_seed(case_index, accel))
    dtype = next(model.parameters()).dtype
    inp = make_input(case, window, mask, encoder, dtype)
    gt = case.ground_truth[list(window.frames)].to(dtype).unsqueeze(0)
    if window.target_index is not None:
        gt = gt[:, window.target_index : window.target_index + 1]
    amp = torch.autocast("cpu", dtype=torch.bfloat16) if settings.mixed_precision else nullcontext()
    with amp:
        out = model(inp)
    scale = out.scale[:, None, None, None].to(dtype)
    l_rec = rec_loss(out.recon.to(dtype) / scale, gt / scale, settings.weights)
    labels = {"contrast": inp.contrast_idx, "trajectory": inp.trajectory_idx, "accel": inp.accel_idx}
    l_cls = cls_loss({k: v.float() for k, v in out.logits.items()}, labels)
    loss = total_loss(l_rec, l_cls, settings.weights)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return l_rec.item(), l_cls.item(), loss.item()


def run_step(
    model: CRUNetMRUniv,
    dataset: Sequence[KSpaceCase],
    step: StepSpec,
    step_id: int,
    encoder: TextEncoder | None,
    settings: TrainSettings,
    loss_log: LossLog,
    on_epoch_end: Callable[[int], None] | None = None,
) -> None:
    model.train()
    optimizer = build_optimizer(model.parameters(), lr=step.lr_at(0, 0))
    labels = [c.meta.contrast for c in dataset]
    it_in_step = 0
    for epoch in range(step.epochs):
        rng = _seed_all(settings.seed, step_id, epoch)
        order = list(balanced_sampler(labels, step.samples_per_epoch, int(rng.integers(2**31))))
        accels = draw_accels(step.accel_probs, step.samples_per_epoch, rng)
        for i, (idx, accel) in enumerate(zip(order, accels)):
            case = dataset[idx]
            t_len = case.ksp.shape[0]
            if step.window_policy == "win5":
                window = win5_window(t_len, int(rng.integers(t_len)))
            else:
                window = window_frames(t_len, "clip12", int(rng.integers(2**31)))[0]
            lr = step.lr_at(epoch, it_in_step)
            for g in optimizer.param_groups:
                g["lr"] = lr
            l_rec, l_cls, total = train_iteration(model, optimizer, case, idx, accel, window, encoder, settings)
            loss_log.append(
                {"step": step_id, "epoch": epoch, "iteration": it_in_step, "lr": lr, "l_rec": l_rec, "l_cls": l_cls, "total": total}
            )
            if settings.log_every and it_in_step % settings.log_every == 0:
                log.info("step %d epoch %d it %d lr %.3g rec %.4f cls %.4f", step_id, epoch, it_in_step, lr, l_rec, l_cls)
            it_in_step += 1
        if on_epoch_end:
            on_epoch_end(epoch)


def _snapshot(model) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def grow_checked(model: CRUNetMRUniv, n_new: int, seed: int, step_id: int) -> None:
    """Grow with seeded initialization and re-assert that existing parameters are untouched."""
    before = _snapshot(model)
    _seed_all(seed, step_id, 10_000)
    grow_cascades(model, n_new)
    after = model.state_dict()
    for k, v in before.items():
        if k.endswith("fc1.weight"):
            ok = torch.equal(after[k][:, : v.shape[1]], v) and not bool(after[k][:, v.shape[1] :].any())
        else:
            ok = torch.equal(after[k], v)
        if not ok:
            raise RuntimeError(f"cascade growth modified existing parameter {k}")


def run_curriculum(
    model: CRUNetMRUniv,
    dataset: Sequence[KSpaceCase],
    plan: StagePlan,
    seed: int = 0,
    out_dir: str | Path | None = None,
    encoder: TextEncoder | None = None,
    settings: TrainSettings | None = None,
    start_step: int = 0,
    prefix: str = "stage2",
) -> dict:
    """Run ``plan.steps[start_step:]``; checkpoint after every step.

    ``start_step`` is the number of steps already completed (the step id
    stored in the checkpoint being resumed from).
    """
    plan.validate()
    settings = settings or TrainSettings(seed=seed)
    settings.seed = seed
    if not 0 <= start_step < len(plan.steps):
        raise PlanError(f"start_step {start_step} outside plan of {len(plan.steps)} steps")
    expected = plan.steps[start_step - 1].cascade_target if start_step else plan.steps[0].cascade_target
    if model.num_cascades != expected:
        raise PlanError(f"model has {model.num_cascades} cascades, plan expects {expected} at step {start_step + 1}")
    if not dataset:
        raise PlanError("empty dataset")

    out = Path(out_dir) if out_dir else None
    loss_log = LossLog(out / f"{prefix}_log.csv" if out else None, fresh=start_step == 0)
    checkpoints, sizes = [], []
    for k in range(start_step, len(plan.steps)):
        step, step_id = plan.steps[k], k + 1
        if step.cascade_target > model.num_cascades:
            grow_checked(model, step.cascade_target - model.num_cascades, seed, step_id)
        run_step(model, dataset, step, step_id, encoder, settings, loss_log)
        sizes.append(model.num_cascades)
        if out:
            checkpoints.append(save_checkpoint(model, out / f"{prefix}_step{step_id}.pt", step=step_id))
    return {"checkpoints": checkpoints, "cascade_sizes": sizes, "log": loss_log}


def run_stage1(model, dataset, plan: StagePlan | None = None, seed: int = 0, out_dir=None, encoder=None, settings=None):
    return run_curriculum(model, dataset, plan or stage1_plan(), seed, out_dir, encoder, settings, prefix="stage1")


def run_stage3(model, dataset, cfg: Stage3Config | None = None, seed: int = 0, out_dir=None, encoder=None, settings=None) -> dict:
    """Few epochs, many iterations; one checkpoint per epoch."""
    cfg = cfg or Stage3Config()
    settings = settings or TrainSettings(seed=seed)
    settings.seed = seed
    out = Path(out_dir) if out_dir else None
    loss_log = LossLog(out / "stage3_log.csv" if out else None)
    checkpoints = []

    def _save(epoch: int) -> None:
        if out:
            checkpoints.append(save_checkpoint(model, out / f"stage3_epoch{epoch + 1}.pt", step=f"stage3-epoch{epoch + 1}"))

    run_step(model, dataset, cfg.as_step(model.num_cascades), 100, encoder, settings, loss_log, on_epoch_end=_save)
    return {"checkpoints": checkpoints, "log": loss_log}
