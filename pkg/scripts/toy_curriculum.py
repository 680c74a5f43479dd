"""Run the desk-budget stage-2 curriculum on a synthetic toy set.

    python3 scripts/toy_curriculum.py --cases 9 --out runs/toy9

Reports mean PSNR of the trained model and of zero-filling, plus the accuracy
of the merged trajectory head on every case.
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np
import torch

from crunet_univ.cli import set_determinism
from crunet_univ.data import SimulationSpec, simulate_dataset, win5_window
from crunet_univ.network import CRUNetMRUniv, ModelConfig
from crunet_univ.objectives import psnr
from crunet_univ.prompts import HashTextEncoder
from crunet_univ.recon import make_input, reconstruct_sequence, zero_filled
from crunet_univ.training import TrainSettings, run_curriculum, stage2_plan

TOY_MODEL = dict(channels=8, sme_channels=4, head_hidden=16, prompt_size=4, text_dim=32)


def toy_run(cases: int = 9, size: int = 32, frames: int = 5, coils: int = 2, seed: int = 0, crop: float = 0.5, out_dir=None) -> dict:
    set_determinism(1)
    data = simulate_dataset(SimulationSpec(cases, size, size, frames, coils, seed=seed))
    plan = stage2_plan()
    torch.manual_seed(seed)
    model = CRUNetMRUniv(ModelConfig(num_cascades=plan.steps[0].cascade_target, **TOY_MODEL))
    encoder = HashTextEncoder(TOY_MODEL["text_dim"])
    start = time.perf_counter()
    res = run_curriculum(model, data, plan, seed=seed, out_dir=out_dir, encoder=encoder, settings=TrainSettings(log_every=0))
    seconds = time.perf_counter() - start

    model.eval()
    trained, zf, hits = [], [], []
    with torch.no_grad():
        for case in data:
            trained.append(psnr(reconstruct_sequence(model, case, encoder), case.ground_truth, crop))
            zf.append(psnr(zero_filled(case), case.ground_truth, crop))
            inp = make_input(case, win5_window(frames, frames // 2), encoder=encoder)
            pred = int(model(inp).logits["trajectory"].argmax(-1))
            hits.append(pred == case.meta.trajectory_index)
    return {
        "cases": cases,
        "cascade_sizes": res["cascade_sizes"],
        "iterations": len(res["log"].rows),
        "psnr_trained": float(np.mean(trained)),
        "psnr_zf": float(np.mean(zf)),
        "trajectory_accuracy": float(np.mean(hits)),
        "seconds": seconds,
    }


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cases", type=int, default=9)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--coils", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    a = p.parse_args()
    out = Path(a.out) if a.out else None
    print(json.dumps(toy_run(a.cases, a.size, a.frames, a.coils, a.seed, out_dir=out), indent=2))


if __name__ == "__main__":
    main()
