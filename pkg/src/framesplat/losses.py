"""Training objectives: photometric, pose, distillation, and their weighted total.

The total is a phase switch: the distillation phase trains only the point and
confidence heads against the geometry teacher; afterwards the loss is the
photometric term on views rendered from the predicted Gaussians at
ground-truth cameras (expressed in the canonical frame) plus a weighted pose
term. Teacher values and ground-truth cameras never receive gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import torch

from . import dualquat, gsplat
from .model import ModelOutput
from .numerics import ContractViolation

# Optional differentiable image-pair functional, (rendered, target) -> scalar.
# Off by default: pretrained feature extractors are out of scope here, but a
# backend supplied by the caller is honored at the standard 0.05 weight.
PerceptualBackend = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class LossWeights:
    img_mse: float = 1.0
    img_perceptual: float = 0.05
    lambda_camera: float = 0.1
    render_input_views: int = 0  # how many input frames to re-render for supervision
    pixel_sample: int = 0        # pixels rendered per supervised view; 0 = full image


@dataclass
class LossReport:
    """Total plus named components; total is the weighted sum of components."""

    total: torch.Tensor
    components: dict[str, float]
    weights: dict[str, float]

    def to_json(self) -> str:
        return json.dumps({"total": float(self.total.detach()),
                           "components": self.components, "weights": self.weights})


def photometric_loss(rendered: torch.Tensor, target: torch.Tensor,
                     perceptual: PerceptualBackend | None = None
                     ) -> tuple[torch.Tensor, torch.Tensor | None]:
    """MSE plus an optional perceptual term; images are (..., H, W, C) in [0,1]."""
    if rendered.shape != target.shape:
        raise ContractViolation(f"image shape mismatch: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    mse = ((rendered - target) ** 2).mean()
    perc = perceptual(rendered, target) if perceptual is not None else None
    return mse, perc


def distill_loss(pred_points: torch.Tensor, pred_conf: torch.Tensor,
                 teacher_points: torch.Tensor, teacher_conf: torch.Tensor,
                 valid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Confidence-weighted point regression plus confidence regression.

    Point term: sum over valid pixels of teacher_conf * |dp|_2 with no
    normalization. Confidence term: L1 over all pixels, which pulls predicted
    confidence to zero wherever the teacher marks background. No gradient
    flows into the teacher.
    """
    if pred_points.shape != teacher_points.shape:
        raise ContractViolation("point map shape mismatch between prediction and teacher")
    teacher_points = teacher_points.detach()
    teacher_conf = teacher_conf.detach()
    dist = torch.linalg.vector_norm(pred_points - teacher_points, dim=-1)
    point_term = (teacher_conf * dist * valid.to(dist.dtype)).sum()
    conf_term = (pred_conf - teacher_conf).abs().sum()
    return point_term, conf_term


def total_loss(output: ModelOutput, sample, phase: str, weights: LossWeights,
               *, batch_index: int = 0, align_term: bool = True,
               pose_parameterization: str = "dq",
               perceptual: PerceptualBackend | None = None,
               pixel_gen: torch.Generator | None = None,
               sort_overrides: list[torch.Tensor] | None = None,
               sh_degree: int = 0) -> LossReport:
    """Assemble the phase-appropriate objective for one sample.

    `sample` is a SceneSample providing ground truth; in the rendering phase
    every target view (and optionally the first `render_input_views` input
    frames) is rendered from the predicted Gaussians at its ground-truth
    camera relative to the canonical frame. `sort_overrides` pins the
    renderer's compositing order per rendered view (gradient verification
    probes near sort ties use it; normal training leaves it unset).
    """
    components: dict[str, float] = {}
    wmap: dict[str, float] = {}
    terms: list[torch.Tensor] = []

    def add(name: str, value: torch.Tensor, weight: float):
        components[name] = float(value.detach())
        wmap[name] = weight
        terms.append(weight * value)

    if phase == "distill":
        if output.pointmap is None or output.confidence is None:
            raise ContractViolation("distillation loss requested without distillation outputs")
        point, conf = distill_loss(output.pointmap[batch_index], output.confidence[batch_index],
                                   sample.gt_pointmaps, sample.gt_confidence, sample.gt_valid)
        add("distill_point", point, 1.0)
        add("distill_conf", conf, 1.0)
    elif phase == "nvs":
        T, _, H, W = sample.frames.frames.shape
        views = [(tv.image, tv.pose, tv.intrinsics) for tv in sample.target_views]
        if weights.render_input_views > 0:
            intr = sample.frames.intrinsics
            if intr is None:
                raise ContractViolation("input-view rendering needs per-frame intrinsics")
            for t in range(min(weights.render_input_views, T)):
                views.append((sample.frames.frames[t], sample.gt_poses[t], intr[t]))
        if not views:
            raise ContractViolation("no views available for the photometric loss")
        gaussians = output.gaussian_set(batch_index, sh_degree=sh_degree)
        subsample = 0 < weights.pixel_sample < H * W and perceptual is None
        mse_acc = 0.0
        perc_acc = 0.0
        for view_i, (image, pose, intrinsics) in enumerate(views):
            cam = gsplat.camera_from_pose(pose.detach(), intrinsics, W, H)
            order = sort_overrides[view_i] if sort_overrides is not None else None
            if subsample:
                idx = torch.randperm(H * W, generator=pixel_gen)[:weights.pixel_sample]
                rgb, _, _ = gsplat.render_pixels(gaussians, cam, idx, sort_override=order)
                target = image.permute(1, 2, 0).reshape(-1, 3)[idx]
                mse = ((rgb - target) ** 2).mean()
                perc = None
            else:
                rendered = gsplat.render(gaussians, cam, sort_override=order).image
                mse, perc = photometric_loss(rendered, image.permute(1, 2, 0), perceptual)
            mse_acc = mse_acc + mse
            if perc is not None:
                perc_acc = perc_acc + perc
        add("img_mse", mse_acc / len(views), weights.img_mse)
        if perceptual is not None:
            add("img_perceptual", perc_acc / len(views), weights.img_perceptual)

        pred_poses = output.poses[batch_index]
        gt_poses = sample.gt_poses.detach()
        if pose_parameterization == "quat_trans":
            add("camera_mse", dualquat.quat_trans_loss(pred_poses, gt_poses), weights.lambda_camera)
        else:
            mse_pose = ((pred_poses[1:] - gt_poses[1:]) ** 2).mean()
            add("camera_mse", mse_pose, weights.lambda_camera)
            if align_term:
                add("camera_align", dualquat.dq_align_loss(pred_poses, gt_poses), weights.lambda_camera)
    else:
        raise ContractViolation(f"unknown phase '{phase}'")

    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return LossReport(total=total, components=components, weights=wmap)
