"""Operator entry point: train / infer / render / eval / selftest / generate.

Every command writes a manifest (command, config echo, seed, input digests,
output paths, wall clock) sufficient to re-run it, and uses the exit codes
0 = success, 1 = usage, 2 = data error, 3 = numerical fault. The environment
variable FRAMESPLAT_OUT overrides the default output root (./runs).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import resource
import sys
import time
from pathlib import Path

import torch

from . import __version__, dualquat, evalmetrics, gsplat, scenegen, trainer
from .model import Model, ModelConfig, model_from_checkpoint
from .numerics import ContractViolation, NumericalFault

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

ABLATIONS = {
    "no_modulation": ("modulation", False),
    "no_cna": ("cna", False),
    "full_camera_attention": ("causal_mask", False),
    "no_dq_align": ("dq_align_loss", False),
    "quat_trans": ("pose_parameterization", "quat_trans"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_root() -> Path:
    return Path(os.environ.get("FRAMESPLAT_OUT", "runs"))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_inputs(paths: list[Path]) -> dict[str, str]:
    out = {}
    for p in paths:
        if p.is_file():
            out[str(p)] = _sha256(p)
        elif p.is_dir():
            files = sorted(q for q in p.rglob("*") if q.is_file())
            h = hashlib.sha256()
            for q in files:
                h.update(q.name.encode())
                h.update(_sha256(q).encode())
            out[str(p)] = h.hexdigest()
    return out


def write_manifest(out_dir: Path, command: str, args: dict, *, config: dict | None = None,
                   seed: int | None = None, inputs: list[Path] = (), outputs: list[str] = (),
                   started: float = 0.0, extra: dict | None = None) -> Path:
    doc = {
        "command": command,
        "args": {k: str(v) for k, v in args.items()},
        "config": config or {},
        "seed": seed,
        "code_version": __version__,
        "input_digests": _digest_inputs(list(inputs)),
        "output_paths": [str(o) for o in outputs],
        "wall_clock_sec": round(time.time() - started, 3) if started else None,
    }
    if extra:
        doc.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _apply_ablations(model_cfg: ModelConfig, flags: str | None) -> ModelConfig:
    if not flags:
        return model_cfg
    updates = {}
    for raw in flags.split(","):
        name = raw.strip()
        if not name:
            continue
        if name not in ABLATIONS:
            raise UsageError(f"unknown ablation '{name}'; valid: {', '.join(sorted(ABLATIONS))}")
        field, value = ABLATIONS[name]
        updates[field] = value
    return dataclasses.replace(model_cfg, **updates)


# --- commands ------------------------------------------------------------------

def cmd_train(args) -> int:
    started = time.time()
    cfgs = trainer.load_config_file(args.config)
    model_cfg = _apply_ablations(cfgs["model"], args.ablate)
    train_cfg = cfgs["train"]
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    out_dir = Path(args.out) if args.out else _out_root() / "train"
    if args.resume and not Path(args.resume).exists():
        raise scenegen.DataError(f"resume checkpoint not found: {args.resume}")

    torch.manual_seed(train_cfg.seed)
    model = Model(model_cfg)
    result = trainer.train(model, cfgs["schedule"], cfgs["data"], train_cfg, out_dir,
                           resume_from=args.resume)
    write_manifest(out_dir, "train", vars(args),
                   config={"model": dataclasses.asdict(model_cfg),
                           "data": dataclasses.asdict(cfgs["data"]),
                           "train": dataclasses.asdict(train_cfg),
                           "schedule": dataclasses.asdict(cfgs["schedule"])},
                   seed=train_cfg.seed, inputs=[Path(args.config)],
                   outputs=[result["final_checkpoint"], result["log_path"]], started=started)
    print(f"trained {result['steps_run']} steps -> {result['final_checkpoint']}")
    return EXIT_OK


def _load_input_frames(path: Path, image_size: int) -> scenegen.FrameSequence:
    if (path / "frames").is_dir():
        seq, _ = scenegen.load_scene_dir(path, image_size=image_size)
        return seq
    return scenegen.ingest_image_folder(path, image_size)


def cmd_infer(args) -> int:
    started = time.time()
    model, payload = model_from_checkpoint(args.checkpoint)
    model.eval()
    cfg: ModelConfig = model.config
    views = args.views
    if views > cfg.max_views:
        raise UsageError(f"--views={views} exceeds the checkpoint's maximum of "
                         f"{cfg.max_views} (model config max_views)")
    seq = _load_input_frames(Path(args.input), cfg.image_size)
    if len(seq) < views:
        raise scenegen.DataError(f"input provides {len(seq)} frames, need {views}")
    frames = seq.frames[:views].unsqueeze(0)
    intr = seq.intrinsics[:views].unsqueeze(0) if seq.intrinsics is not None else None

    t0 = time.time()
    with torch.no_grad():
        out = model(frames, intr, phase="nvs")
    latency = time.time() - t0
    peak_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0

    out_dir = Path(args.out) if args.out else _out_root() / "infer"
    out_dir.mkdir(parents=True, exist_ok=True)
    ply_path = out_dir / "gaussians.ply"
    ply_path.write_bytes(gsplat.export_ply(out.gaussian_set(0, sh_degree=cfg.sh_degree)))
    pose_path = out_dir / "poses.txt"
    dualquat.write_pose_file(pose_path, out.poses[0])
    write_manifest(out_dir, "infer", vars(args), config=payload["config"], seed=payload["seed"],
                   inputs=[Path(args.checkpoint), Path(args.input)],
                   outputs=[str(ply_path), str(pose_path)], started=started,
                   extra={"latency_sec": round(latency, 4), "peak_memory_mb": round(peak_mb, 1)})
    print(f"{out.gaussian_count} gaussians -> {ply_path} ({latency:.2f}s, peak {peak_mb:.0f} MB)")
    return EXIT_OK


def parse_camera_spec(path: Path) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """One camera per line: `fx fy cx cy | q_r(4) q_d(4)` (pose camera-to-world)."""
    cameras = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "|" not in line:
            raise scenegen.DataError(f"camera spec line {ln}: missing '|' separator")
        left, right = line.split("|", 1)
        intr = [float(v) for v in left.split()]
        pose = [float(v) for v in right.split()]
        if len(intr) != 4 or len(pose) != 8:
            raise scenegen.DataError(f"camera spec line {ln}: expected 4 intrinsics | 8 pose values")
        cameras.append((torch.tensor(intr), torch.tensor(pose)))
    if not cameras:
        raise scenegen.DataError(f"camera spec {path} contains no cameras")
    return cameras


def cmd_render(args) -> int:
    started = time.time()
    try:
        width, height = (int(v) for v in args.size.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"--size must be WxH, got '{args.size}'") from exc
    gaussians = gsplat.import_ply(Path(args.ply).read_bytes())
    cameras = parse_camera_spec(Path(args.cameras))
    out_dir = Path(args.out) if args.out else _out_root() / "render"
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    with torch.no_grad():
        for i, (intr, pose) in enumerate(cameras):
            pose = dualquat.normalize_raw_dq(pose)  # tolerate lightly quantized input
            cam = gsplat.camera_from_pose(pose, intr, width, height)
            res = gsplat.render(gaussians, cam)
            rgb_path = out_dir / f"render_{i:03d}.png"
            depth_path = out_dir / f"depth_{i:03d}.png"
            gsplat.save_image_png(rgb_path, res.image)
            gsplat.save_depth_png16(depth_path, res.depth)
            outputs += [str(rgb_path), str(depth_path)]
    write_manifest(out_dir, "render", vars(args), inputs=[Path(args.ply), Path(args.cameras)],
                   outputs=outputs, started=started)
    print(f"rendered {len(cameras)} views -> {out_dir}")
    return EXIT_OK


EVAL_REPORT_SCHEMA = "framesplat-eval-report/1"


def validate_eval_report(doc: dict) -> None:
    if doc.get("schema") != EVAL_REPORT_SCHEMA:
        raise ContractViolation("wrong report schema tag")
    for key in ("config_digest", "views", "align", "scenes", "aggregate"):
        if key not in doc:
            raise ContractViolation(f"report missing '{key}'")
    for row in doc["scenes"]:
        for key in ("seed", "psnr", "ssim", "ate", "rpe_trans", "rpe_rot_deg"):
            if key not in row:
                raise ContractViolation(f"scene row missing '{key}'")


def cmd_eval(args) -> int:
    started = time.time()
    model, payload = model_from_checkpoint(args.checkpoint)
    model.eval()
    cfg = model.config
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise UsageError("--seeds must list at least one scene seed")
    if args.views > cfg.max_views:
        raise UsageError(f"--views={args.views} exceeds model maximum {cfg.max_views}")
    scene_cfg = scenegen.SceneGenConfig(image_size=cfg.image_size)
    if "scene_config" in payload:
        scene_cfg = scenegen.SceneGenConfig(**payload["scene_config"])

    align = None if args.align == "none" else args.align
    rows = []
    size = scene_cfg.image_size
    with torch.no_grad():
        for seed in seeds:
            scene = scenegen.generate_scene(seed, scene_cfg)
            clip = scenegen.sample_training_clip(scene, args.views, args.interval, n_targets=2)
            out = model(clip.frames.frames.unsqueeze(0), clip.frames.intrinsics.unsqueeze(0),
                        phase="nvs")
            gaussians = out.gaussian_set(0, sh_degree=cfg.sh_degree)
            psnrs, ssims = [], []
            for tv in clip.target_views:
                pose = tv.pose
                if align == "photometric":
                    with torch.enable_grad():
                        pose, _ = evalmetrics.photometric_align_pose(
                            gaussians, tv.image, tv.intrinsics, pose, iters=args.align_iters)
                cam = gsplat.camera_from_pose(pose, tv.intrinsics, size, size)
                img = gsplat.render(gaussians, cam).image
                psnrs.append(evalmetrics.psnr(img, tv.image.permute(1, 2, 0)))
                ssims.append(evalmetrics.ssim(img, tv.image.permute(1, 2, 0)))
            pose_align = "similarity" if align == "similarity" else None
            report = evalmetrics.evaluate_pose_sets(out.poses[0], clip.gt_poses, align=pose_align)
            rows.append({"seed": seed, "psnr": sum(psnrs) / len(psnrs),
                         "ssim": sum(ssims) / len(ssims), **report.to_dict()})

    config_digest = hashlib.sha256(json.dumps(payload["config"], sort_keys=True).encode()).hexdigest()
    doc = {"schema": EVAL_REPORT_SCHEMA, "config_digest": config_digest,
           "views": args.views, "align": args.align, "scenes": rows,
           "aggregate": {k: sum(r[k] for r in rows) / len(rows)
                         for k in ("psnr", "ssim", "ate", "rpe_trans", "rpe_rot_deg")}}
    validate_eval_report(doc)
    out_dir = Path(args.out) if args.out else _out_root() / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(doc, indent=2) + "\n")
    write_manifest(out_dir, "eval", vars(args), config=payload["config"], seed=payload["seed"],
                   inputs=[Path(args.checkpoint)], outputs=[str(report_path)], started=started)
    print(json.dumps(doc["aggregate"], indent=2))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest

    started = time.time()
    ok, lines = selftest.run_all(grad_seeds=args.grad_seeds)
    print("\n".join(lines))
    print(f"selftest {'PASS' if ok else 'FAIL'} in {time.time() - started:.1f}s")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_generate(args) -> int:
    started = time.time()
    scene_cfg = scenegen.SceneGenConfig(image_size=args.image_size, n_frames=args.frames)
    sample = scenegen.generate_scene(args.seed, scene_cfg)
    out_dir = Path(args.out) if args.out else _out_root() / f"scene{args.seed:08d}"
    scenegen.save_scene_dir(sample, out_dir, config=scene_cfg)
    write_manifest(out_dir, "generate", vars(args), config=dataclasses.asdict(scene_cfg),
                   seed=args.seed, outputs=[str(out_dir)], started=started)
    print(f"scene {sample.scene_id} -> {out_dir}")
    return EXIT_OK


# --- argument wiring -------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="framesplat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the staged training schedule")
    t.add_argument("config", help="INI config file ([model] [data] [train] [schedule])")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--ablate", default=None,
                   help="comma list: " + ",".join(sorted(ABLATIONS)))
    t.add_argument("--out", default=None)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="one forward pass: frames -> splats + poses")
    i.add_argument("checkpoint")
    i.add_argument("input", help="scene directory or image folder")
    i.add_argument("--views", type=int, default=2)
    i.add_argument("--out", default=None)
    i.set_defaults(fn=cmd_infer)

    r = sub.add_parser("render", help="render a PLY from a camera spec file")
    r.add_argument("ply")
    r.add_argument("cameras", help="text file, `fx fy cx cy | q_r(4) q_d(4)` per line")
    r.add_argument("--size", required=True, help="WxH output resolution")
    r.add_argument("--out", default=None)
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="metrics on held-out synthetic scenes")
    e.add_argument("checkpoint")
    e.add_argument("--seeds", required=True, help="comma list of scene seeds")
    e.add_argument("--views", type=int, default=4)
    e.add_argument("--interval", type=int, default=3)
    e.add_argument("--align", choices=("none", "similarity", "photometric"), default="none")
    e.add_argument("--align-iters", type=int, default=60)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("selftest", help="gradient, mask, algebra and renderer suites")
    s.add_argument("--grad-seeds", type=int, default=3)
    s.set_defaults(fn=cmd_selftest)

    g = sub.add_parser("generate", help="write a synthetic scene directory")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--frames", type=int, default=25)
    g.add_argument("--out", default=None)
    g.set_defaults(fn=cmd_generate)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (scenegen.DataError, gsplat.PlyParseError, FileNotFoundError, ContractViolation) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFault as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
