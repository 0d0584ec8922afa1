"""Three-stage training driver: two-view geometry distillation, two-view
novel-view synthesis with pose supervision, then progressive growth of the
input view count with a frame-interval warmup whose spans nest across stages.

Everything consumed during a step is a pure function of (run seed, step
index), so checkpoint-resume and same-seed reruns are bit-identical in
deterministic mode. Metric logs carry no wall-clock fields for the same
reason.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import evalmetrics, losses, scenegen
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import ContractViolation, NumericalFault, set_deterministic

log = logging.getLogger(__name__)

PHASES = ("distill", "nvs")


@dataclass
class Stage:
    phase: str
    view_count: int
    interval_start: int
    interval_end: int
    steps: int
    lam: float = 0.1
    lr: float = 3e-4

    def span(self, interval: int) -> int:
        return (self.view_count - 1) * interval

    def interval_at(self, step_in_stage: int) -> int:
        if self.steps <= 1:
            return self.interval_end
        frac = step_in_stage / (self.steps - 1)
        return int(round(self.interval_start + (self.interval_end - self.interval_start) * frac))


@dataclass
class TrainingSchedule:
    stages: list[Stage]
    n_views: int

    def validate(self) -> None:
        if not self.stages:
            raise ContractViolation("schedule has no stages")
        nvs_counts = []
        for st in self.stages:
            if st.phase not in PHASES:
                raise ContractViolation(f"unknown phase '{st.phase}'")
            if st.steps < 1 or st.view_count < 2:
                raise ContractViolation("stages need at least one step and two views")
            if not (1 <= st.interval_start <= st.interval_end):
                raise ContractViolation("stage interval ramp must be positive and nondecreasing")
            if st.phase == "nvs":
                nvs_counts.append(st.view_count)
        if nvs_counts != sorted(nvs_counts):
            raise ContractViolation("view counts must be nondecreasing across nvs stages")
        if nvs_counts and nvs_counts[-1] != self.n_views:
            raise ContractViolation(f"last nvs stage has {nvs_counts[-1]} views, schedule targets {self.n_views}")
        for prev, nxt in zip(self.stages, self.stages[1:]):
            if nxt.span(nxt.interval_start) > prev.span(prev.interval_end):
                raise ContractViolation(
                    f"stage span {nxt.span(nxt.interval_start)} is not encapsulated by the previous "
                    f"stage's final span {prev.span(prev.interval_end)}")

    @property
    def total_steps(self) -> int:
        return sum(st.steps for st in self.stages)

    def stage_at(self, global_step: int) -> tuple[int, Stage, int]:
        acc = 0
        for i, st in enumerate(self.stages):
            if global_step < acc + st.steps:
                return i, st, global_step - acc
            acc += st.steps
        raise ContractViolation(f"step {global_step} beyond schedule of {self.total_steps}")


DEFAULT_STEP_BUDGETS = {"distill": 5000, "nvs2": 10000, "nvs4": 5000, "nvs8": 5000}


def build_default_schedule(n_views: int, *, step_budgets: dict[str, int] | None = None,
                           lam: float = 0.1, lr: float = 3e-4) -> TrainingSchedule:
    """Distillation at two views, then novel-view stages growing 2 -> 4 -> 8,
    truncated at `n_views`, with interval ramps whose spans nest."""
    if n_views not in (2, 4, 8):
        raise ContractViolation(f"n_views must be one of 2, 4, 8, got {n_views}")
    budgets = dict(DEFAULT_STEP_BUDGETS)
    budgets.update(step_budgets or {})
    stages = [Stage("distill", 2, 1, 4, budgets["distill"], lam=0.0, lr=lr),
              Stage("nvs", 2, 2, 8, budgets["nvs2"], lam=lam, lr=lr)]
    if n_views >= 4:
        stages.append(Stage("nvs", 4, 2, 4, budgets["nvs4"], lam=lam, lr=lr))
    if n_views >= 8:
        stages.append(Stage("nvs", 8, 1, 2, budgets["nvs8"], lam=lam, lr=lr))
    schedule = TrainingSchedule(stages=stages, n_views=n_views)
    schedule.validate()
    return schedule


@dataclass
class TrainerConfig:
    batch_size: int = 4
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 1000
    validate_every: int = 0
    n_validation_scenes: int = 2
    log_every: int = 25
    n_target_views: int = 2
    render_input_views: int = 0
    pixel_sample: int = 256
    fixed_scene_seeds: tuple[int, ...] | None = None  # overfit mode when set
    dataset_scenes: int = 256  # size of the procedural scene pool in streaming mode


def _derive_seed(*parts: int) -> int:
    h = 0x345678
    for p in parts:
        h = (h ^ (p + 0x9E3779B9)) * 0x85EBCA6B % (2 ** 31 - 1)
    return int(h)


class _SceneCache:
    def __init__(self, config: scenegen.SceneGenConfig, cap: int = 32):
        self.config = config
        self.cap = cap
        self._store: dict[int, scenegen.SceneSample] = {}

    def get(self, seed: int) -> scenegen.SceneSample:
        if seed not in self._store:
            if len(self._store) >= self.cap:
                self._store.pop(next(iter(self._store)))
            self._store[seed] = scenegen.generate_scene(seed, self.config)
        return self._store[seed]


def _lr_at(stage: Stage, step_in_stage: int, warmup_frac: float) -> float:
    warmup = max(1, int(math.ceil(warmup_frac * stage.steps)))
    if step_in_stage < warmup:
        return stage.lr * (step_in_stage + 1) / warmup
    frac = (step_in_stage - warmup) / max(1, stage.steps - warmup)
    return stage.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def _param_norm_report(model: Model, top: int = 5) -> str:
    norms = sorted(((float(p.detach().norm()), n) for n, p in model.named_parameters()),
                   reverse=True)
    lines = [f"{n}={v:.3e}" for v, n in norms[:top]]
    return ", ".join(lines)


def _assemble_batch(cache: _SceneCache, cfg: TrainerConfig, stage: Stage, interval: int,
                    global_step: int) -> list[scenegen.SceneSample]:
    n_frames = cache.config.n_frames
    span = stage.span(interval)
    if span > n_frames - 1:
        raise ContractViolation(
            f"stage span {span} exceeds trajectory length {n_frames} (lower the interval ramp)")
    n_targets = cfg.n_target_views if stage.phase == "nvs" else 0
    batch = []
    for i in range(cfg.batch_size):
        if cfg.fixed_scene_seeds:
            seed = cfg.fixed_scene_seeds[(global_step * cfg.batch_size + i) % len(cfg.fixed_scene_seeds)]
            start = 0
        else:
            k = global_step * cfg.batch_size + i
            pool = _derive_seed(cfg.seed, 0xDA7A, k % cfg.dataset_scenes) if cfg.dataset_scenes \
                else _derive_seed(cfg.seed, global_step, i)
            seed = pool
            start = _derive_seed(cfg.seed, global_step, i, 1) % (n_frames - span)
        scene = cache.get(seed)
        batch.append(scenegen.sample_training_clip(scene, stage.view_count, interval,
                                                   start=start, n_targets=n_targets))
    return batch


def train(model: Model, schedule: TrainingSchedule, scene_config: scenegen.SceneGenConfig,
          cfg: TrainerConfig, out_dir: str | Path, *, resume_from: str | Path | None = None,
          perceptual=None) -> dict:
    """Run the schedule, streaming checkpoints and a JSON-lines metric log.

    Weights carry across stage transitions; the distillation heads freeze at
    the first nvs stage. A NaN loss halts with a diagnostic naming the step,
    the offending components, and the largest parameter norms.
    """
    schedule.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    set_deterministic(cfg.deterministic)

    opt = torch.optim.AdamW(model.parameters(), lr=schedule.stages[0].lr,
                            weight_decay=cfg.weight_decay)
    start_step = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        model.load_state_dict(payload["model_state"])
        opt.load_state_dict(payload["optimizer_state"])
        start_step = int(payload["global_step"])
        torch.set_rng_state(payload["torch_rng"])
    else:
        torch.manual_seed(_derive_seed(cfg.seed, 0xC0FFEE))

    cache = _SceneCache(scene_config,
                        cap=max(32, len(cfg.fixed_scene_seeds or ()), cfg.dataset_scenes))
    log_path = out / "metrics.jsonl"
    log_file = open(log_path, "a")
    align_term = model.config.dq_align_loss
    best_psnr = -1.0

    def checkpoint(path: Path, step: int, phase: str) -> None:
        save_checkpoint(path, model, phase=phase, seed=cfg.seed, extra={
            "optimizer_state": opt.state_dict(),
            "global_step": step,
            "torch_rng": torch.get_rng_state(),
            "schedule": dataclasses.asdict(schedule),
            "trainer_config": dataclasses.asdict(cfg),
            "scene_config": dataclasses.asdict(scene_config),
            "best_psnr": best_psnr,
        })

    frozen = False
    total_steps = schedule.total_steps
    for global_step in range(start_step, total_steps):
        stage_idx, stage, step_in_stage = schedule.stage_at(global_step)
        if stage.phase == "nvs" and not frozen:
            model.freeze_distillation_heads()
            frozen = True
        interval = stage.interval_at(step_in_stage)
        batch = _assemble_batch(cache, cfg, stage, interval, global_step)
        frames = torch.stack([b.frames.frames for b in batch])
        intr = torch.stack([b.frames.intrinsics for b in batch])

        lr = _lr_at(stage, step_in_stage, cfg.warmup_frac)
        for group in opt.param_groups:
            group["lr"] = lr

        weights = losses.LossWeights(lambda_camera=stage.lam,
                                     render_input_views=cfg.render_input_views,
                                     pixel_sample=cfg.pixel_sample)
        pixel_gen = torch.Generator().manual_seed(_derive_seed(cfg.seed, global_step, 0xF1))
        opt.zero_grad(set_to_none=True)
        out_model = model(frames, intr, phase=stage.phase)
        reports = [losses.total_loss(out_model, batch[b], stage.phase, weights, batch_index=b,
                                     align_term=align_term,
                                     pose_parameterization=model.config.pose_parameterization,
                                     perceptual=perceptual, pixel_gen=pixel_gen)
                   for b in range(len(batch))]
        total = reports[0].total
        for r in reports[1:]:
            total = total + r.total
        total = total / len(reports)

        if not torch.isfinite(total):
            comp = {k: sum(r.components.get(k, 0.0) for r in reports) / len(reports)
                    for k in reports[0].components}
            log_file.close()
            raise NumericalFault(
                f"non-finite loss at step {global_step} (stage {stage_idx}, components {comp}); "
                f"largest parameter norms: {_param_norm_report(model)}",
                op_name="train_step")
        total.backward()
        opt.step()

        if global_step % cfg.log_every == 0 or global_step == total_steps - 1:
            comp = {k: sum(r.components.get(k, 0.0) for r in reports) / len(reports)
                    for k in reports[0].components}
            record = {"step": global_step, "stage": stage_idx, "phase": stage.phase,
                      "interval": interval, "lr": lr, "total": float(total.detach()),
                      "components": comp,
                      "weights": reports[0].weights}
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

        if cfg.validate_every and (global_step + 1) % cfg.validate_every == 0:
            val_seeds = [_derive_seed(cfg.seed, 0x7A1, k) for k in range(cfg.n_validation_scenes)]
            summary = validate(model, val_seeds, stage.view_count, scene_config,
                               interval=stage.interval_end)
            log_file.write(json.dumps({"step": global_step, "validation": summary}) + "\n")
            log_file.flush()
            if summary["psnr"] > best_psnr:
                best_psnr = summary["psnr"]
                checkpoint(out / "ckpt_best.pt", global_step + 1, stage.phase)

        boundary = (global_step + 1 == total_steps or
                    schedule.stage_at(min(global_step + 1, total_steps - 1))[0] != stage_idx)
        if (global_step + 1) % cfg.checkpoint_every == 0 or boundary:
            checkpoint(out / f"ckpt_step{global_step + 1:07d}.pt", global_step + 1, stage.phase)

    final = out / "ckpt_final.pt"
    last_phase = schedule.stages[-1].phase
    checkpoint(final, total_steps, last_phase)
    log_file.close()
    return {"final_checkpoint": str(final), "log_path": str(log_path),
            "steps_run": total_steps - start_step, "best_psnr": best_psnr}


@torch.no_grad()
def validate(model: Model, seeds: list[int], view_count: int,
             scene_config: scenegen.SceneGenConfig, *, interval: int = 3,
             n_targets: int = 2, align: str | None = "similarity",
             inject_oracle: bool = False) -> dict:
    """Held-out metrics: mean PSNR/SSIM on target views, ATE/RPE on poses.

    `inject_oracle` swaps the predicted Gaussians for the generator's ground
    truth set, which self-tests the rendering/metric harness.
    """
    from . import gsplat

    model.eval()
    rows = []
    for seed in seeds:
        scene = scenegen.generate_scene(seed, scene_config)
        clip = scenegen.sample_training_clip(scene, view_count, interval, n_targets=n_targets)
        out = model(clip.frames.frames.unsqueeze(0), clip.frames.intrinsics.unsqueeze(0), phase="nvs")
        gaussians = (scenegen.oracle_gaussians(seed, scene_config, sample=clip) if inject_oracle
                     else out.gaussian_set(0, sh_degree=model.config.sh_degree))
        psnrs, ssims = [], []
        H = W = scene_config.image_size
        for tv in clip.target_views:
            cam = gsplat.camera_from_pose(tv.pose, tv.intrinsics, W, H)
            img = gsplat.render(gaussians, cam).image
            ref = tv.image.permute(1, 2, 0)
            psnrs.append(evalmetrics.psnr(img, ref))
            ssims.append(evalmetrics.ssim(img, ref))
        pose_report = evalmetrics.evaluate_pose_sets(out.poses[0], clip.gt_poses, align=align)
        rows.append({"seed": seed, "psnr": sum(psnrs) / len(psnrs), "ssim": sum(ssims) / len(ssims),
                     **pose_report.to_dict()})
    model.train()
    agg = {k: sum(r[k] for r in rows) / len(rows) for k in ("psnr", "ssim", "ate", "rpe_trans", "rpe_rot_deg")}
    agg["rows"] = rows
    return agg


# --- config file ---------------------------------------------------------------

def _cast(value: str, ftype) -> object:
    import types
    import typing

    origin = typing.get_origin(ftype)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in typing.get_args(ftype) if a is not type(None)]
        return _cast(value, inner[0])
    if ftype is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    if ftype is int:
        return int(value)
    if ftype is float:
        return float(value)
    if ftype is str:
        return value.strip()
    if origin in (tuple, list):
        parts = [p for p in value.replace(",", " ").split() if p]
        if not parts:
            return None
        args = typing.get_args(ftype)
        elem = args[0] if args else float
        return tuple(elem(p) if elem in (int, float) else float(p) for p in parts)
    raise ContractViolation(f"cannot parse config value '{value}' as {ftype}")


def _fill_dataclass(cls, section) -> object:
    import typing

    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in section:
            kwargs[f.name] = _cast(section[f.name], hints[f.name])
    return cls(**kwargs)


def load_config_file(path: str | Path) -> dict:
    """Sectioned key=value config: [model], [data], [train], [schedule]."""
    parser = configparser.ConfigParser()
    read = parser.read(str(path))
    if not read:
        raise ContractViolation(f"config file not found: {path}")
    model_cfg = _fill_dataclass(ModelConfig, parser["model"] if parser.has_section("model") else {})
    scene_cfg = _fill_dataclass(scenegen.SceneGenConfig, parser["data"] if parser.has_section("data") else {})
    train_cfg = _fill_dataclass(TrainerConfig, parser["train"] if parser.has_section("train") else {})

    sched = parser["schedule"] if parser.has_section("schedule") else {}
    n_views = int(sched.get("views", 4))
    budgets = {}
    for key in ("distill", "nvs2", "nvs4", "nvs8"):
        if f"{key}_steps" in sched:
            budgets[key] = int(sched[f"{key}_steps"])
    lam = float(sched.get("lam", 0.1))
    lr = float(sched.get("lr", 3e-4))
    schedule = build_default_schedule(n_views, step_budgets=budgets, lam=lam, lr=lr)
    if scene_cfg.image_size != model_cfg.image_size:
        scene_cfg = dataclasses.replace(scene_cfg, image_size=model_cfg.image_size)
    return {"model": model_cfg, "data": scene_cfg, "train": train_cfg, "schedule": schedule}
