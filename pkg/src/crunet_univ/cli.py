"""``crunet-univ`` command line: simulate, train, eval, recon.

Exit codes: 0 success, 2 configuration/validation error, 3 runtime failure.
``CRUNET_OUTPUT_ROOT`` redirects every output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("crunet_univ")


class UsageError(Exception):
    pass


def _out_path(p: str | Path) -> Path:
    p = Path(p)
    root = os.environ.get("CRUNET_OUTPUT_ROOT")
    return Path(root) / p.name if root else p


def set_determinism(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def _csv(value: str, cast=str) -> list:
    items = [v.strip() for v in value.split(",") if v.strip()]
    try:
        return [cast(v) for v in items]
    except ValueError as exc:
        raise UsageError(f"cannot parse {value!r}: {exc}") from exc


def encoder_for(name: str, text_dim: int):
    """Text encoder whose output width matches the model's ``text_dim``."""
    from .prompts import build_text_encoder

    enc = build_text_encoder(name, dim=text_dim) if name == "hash" else build_text_encoder(name)
    if enc.dim != text_dim:
        raise UsageError(f"text encoder {name!r} has width {enc.dim}, model expects text_dim={text_dim}")
    return enc


# --------------------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    from .data import CONTRASTS, SimulationSpec, save_case, simulate_dataset, validate_case
    from .sampling import ACCELS, TRAJECTORIES

    try:
        h, w = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like 64x64, got {args.size!r}") from None
    contrasts = _csv(args.contrasts)
    trajectories = _csv(args.trajectories)
    accels = _csv(args.accels, int)
    for name, vals, allowed in (("--contrasts", contrasts, CONTRASTS), ("--trajectories", trajectories, TRAJECTORIES), ("--accels", accels, ACCELS)):
        bad = [v for v in vals if v not in allowed]
        if bad or not vals:
            raise UsageError(f"{name}: invalid values {bad or vals}; allowed {list(allowed)}")
    if args.cases < 1 or min(h, w, args.frames, args.coils) < 1 or args.noise_std < 0:
        raise UsageError("--cases, --size, --frames and --coils must be positive; --noise-std >= 0")

    out = _out_path(args.out)
    spec = SimulationSpec(args.cases, h, w, args.frames, args.coils, contrasts, trajectories, accels, args.noise_std, args.seed)
    cases = simulate_dataset(spec)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": args.seed, "n_cases": len(cases), "cases": []}
    for case in cases:
        validate_case(case)
        save_case(case, out / case.case_id)
        t, c, hh, ww = case.ksp.shape
        manifest["cases"].append(
            {"case_id": case.case_id, "contrast": case.meta.contrast, "trajectory": case.meta.trajectory,
             "accel": case.meta.accel, "center_id": case.meta.center_id, "shape": [t, c, hh, ww]}
        )
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (out / "manifest.json").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------- train


def cmd_train(args) -> int:
    from .config import load_config
    from .data import load_dataset
    from .network import CRUNetMRUniv, load_checkpoint
    from .training import TrainSettings, run_curriculum, run_stage1, run_stage3

    cfg = load_config(args.config)
    resume = Path(args.resume) if args.resume else cfg.checkpoint
    if resume is not None and not resume.exists():
        raise UsageError(f"--resume: {resume} does not exist")
    if args.stage == 3 and resume is None:
        raise UsageError("stage 3 fine-tunes an existing model: pass --resume or paths.checkpoint")
    set_determinism(cfg.threads)
    dataset = load_dataset(cfg.data_dir)
    settings = TrainSettings(seed=cfg.seed, weights=cfg.loss, mixed_precision=cfg.mixed_precision)

    start = 0
    if resume is not None:
        model, info = load_checkpoint(resume)
        step = info.get("step")
        if args.stage == 2:
            if not isinstance(step, int):
                raise UsageError(f"{resume} is not a stage-2 step-boundary checkpoint (step={step!r})")
            start = step
            if start >= len(cfg.stage2.steps):
                print(f"checkpoint already completed all {start} steps; nothing to do")
                return EXIT_OK
    else:
        torch.manual_seed(cfg.seed)
        model = CRUNetMRUniv(cfg.model)

    encoder = encoder_for(cfg.text_encoder, model.cfg.text_dim)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    if args.stage == 1:
        result = run_stage1(model, dataset, cfg.stage1, cfg.seed, out, encoder, settings)
    elif args.stage == 2:
        result = run_curriculum(model, dataset, cfg.stage2, cfg.seed, out, encoder, settings, start_step=start)
    else:
        result = run_stage3(model, dataset, cfg.stage3, cfg.seed, out, encoder, settings)
    for p in result["checkpoints"]:
        print(p)
    return EXIT_OK


# --------------------------------------------------------------------------- eval / recon


def _load_model(path):
    from .network import load_checkpoint

    if path is None or not Path(path).exists():
        raise UsageError(f"--ckpt: {path} does not exist")
    model, _ = load_checkpoint(path)
    return model.eval()


def cmd_eval(args) -> int:
    from dataclasses import asdict

    from .data import load_dataset
    from .objectives import case_metrics, metric_report, write_report
    from .recon import reconstruct_sequence, zero_filled

    if not 0 < args.crop <= 1:
        raise UsageError("--crop must be in (0, 1]")
    if args.baseline is None and args.ckpt is None:
        raise UsageError("--ckpt is required unless --baseline is given")
    data = Path(args.data)
    if not data.is_dir():
        raise UsageError(f"--data: {data} is not a directory")
    model = _load_model(args.ckpt) if args.baseline is None else None
    set_determinism(1)
    encoder = encoder_for(args.text_encoder, model.cfg.text_dim) if model else None
    cases = load_dataset(data)

    def entries():
        for case in cases:
            if args.baseline == "zf":
                rec = zero_filled(case)
            elif args.baseline == "gt":
                rec = case.ground_truth
            else:
                rec = reconstruct_sequence(model, case, encoder)
            yield case.case_id, asdict(case.meta), case_metrics(rec, case.ground_truth, args.crop)

    report = metric_report(entries(), args.crop)
    write_report(report, _out_path(args.report))
    o = report["overall"]
    print(f"Overall Mean  PSNR {o['psnr']}  SSIM {o['ssim']}  NMSE {o['nmse']}")
    return EXIT_OK


def write_recon(recon: torch.Tensor, out: Path, case_id: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    arr = recon.detach().cpu().numpy().astype("<f4")
    t, h, w = arr.shape
    header = {"case_id": case_id, "shape": {"T": t, "H": h, "W": w}, "dtype": "<f4", "payload": "recon.bin"}
    (out / "meta").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "recon.bin").write_bytes(np.ascontiguousarray(arr).tobytes())
    return out


def read_recon(path: Path) -> np.ndarray:
    header = json.loads((Path(path) / "meta").read_text(encoding="utf-8"))
    s = header["shape"]
    return np.frombuffer((Path(path) / "recon.bin").read_bytes(), dtype="<f4").reshape(s["T"], s["H"], s["W"])


def cmd_recon(args) -> int:
    from .data import load_case
    from .recon import reconstruct_sequence

    case_dir = Path(args.case)
    if not (case_dir / "meta").exists():
        raise UsageError(f"--case: {case_dir} is not a case directory")
    model = _load_model(args.ckpt)
    set_determinism(1)
    case = load_case(case_dir)
    rec = reconstruct_sequence(model, case, encoder_for(args.text_encoder, model.cfg.text_dim))
    print(write_recon(rec, _out_path(args.out), case.case_id))
    return EXIT_OK


# --------------------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crunet-univ", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write synthetic cases")
    s.add_argument("--out", required=True)
    s.add_argument("--cases", type=int, default=9)
    s.add_argument("--size", default="64x64")
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--coils", type=int, default=4)
    s.add_argument("--contrasts", default="cine")
    s.add_argument("--trajectories", default="uniform,gaussian,pseudo_radial")
    s.add_argument("--accels", default="8,16,24")
    s.add_argument("--noise-std", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="run a training regime")
    t.add_argument("--config", required=True)
    t.add_argument("--stage", type=int, choices=(1, 2, 3), default=2)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="reconstruct every case and write a metric report")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--crop", type=float, default=0.5)
    e.add_argument("--baseline", choices=("zf", "gt"), default=None)
    e.add_argument("--text-encoder", default="hash")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("recon", help="sliding-window reconstruction of one case")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--case", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--text-encoder", default="hash")
    r.set_defaults(func=cmd_recon)
    return p


def main(argv: list[str] | None = None) -> int:
    from .config import ConfigError
    from .data import CaseFormatError
    from .network import CheckpointError
    from .prompts import PromptError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CaseFormatError, CheckpointError, PromptError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level runtime boundary
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
