"""Quantitative evaluation: image metrics (PSNR, SSIM) and trajectory metrics
(ATE, RPE) under the package's normalization conventions, plus optional
evaluation-time pose alignment.

Trajectories are camera-to-world pose sets. Before any metric both are
normalized: left-composed into the first camera's frame and scaled so the
last pose's translation has unit norm. ATE is the RMSE of per-frame
translation differences; RPE compares consecutive-frame relative motions at
stride 1 and aggregates by RMSE (translation norm, rotation angle in
degrees).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from . import dualquat, gsplat
from .numerics import ContractViolation

PSNR_CAP_DB = 99.0


@dataclass
class PoseMetricReport:
    ate: float
    rpe_trans: float
    rpe_rot_deg: float
    aligned: bool
    alignment_mode: str | None = None
    alignment_fallback: bool = False

    def to_dict(self) -> dict:
        return {"ate": self.ate, "rpe_trans": self.rpe_trans, "rpe_rot_deg": self.rpe_rot_deg,
                "aligned": self.aligned, "alignment_mode": self.alignment_mode,
                "alignment_fallback": self.alignment_fallback}


# --- trajectory normalization and errors --------------------------------------

def normalize_trajectory(poses: torch.Tensor) -> torch.Tensor:
    """Express all poses relative to frame 1 and scale the trajectory so the
    last pose's translation has unit norm. Idempotent; degenerate final
    translation is an error (the metric is undefined)."""
    if poses.ndim != 2 or poses.shape[-1] != 8:
        raise ContractViolation(f"expected (T,8) pose set, got {tuple(poses.shape)}")
    inv_first = dualquat.dq_inverse(poses[0])
    rel = dualquat.dq_mul(inv_first.expand_as(poses), poses, validate=False)
    norm = dualquat.dq_translation(rel[-1]).norm()
    if float(norm) < 1e-8:
        raise ContractViolation("degenerate trajectory: last pose translation is (near) zero")
    out = dualquat.dq_scale_translation(rel, 1.0 / norm)
    out = torch.cat((dualquat.dq_identity(dtype=out.dtype, device=out.device).unsqueeze(0), out[1:]))
    return out


def ate(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """RMSE of per-frame translation differences on normalized trajectories."""
    if pred.shape != gt.shape:
        raise ContractViolation("trajectory length mismatch")
    dp = dualquat.dq_translation(pred) - dualquat.dq_translation(gt)
    return float(torch.sqrt((dp ** 2).sum(-1).mean()))


def _rotation_angle_deg(R: torch.Tensor) -> torch.Tensor:
    cos = ((R.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0) / 2.0).clamp(-1.0, 1.0)
    return torch.rad2deg(torch.acos(cos))


def rpe(pred: torch.Tensor, gt: torch.Tensor) -> tuple[float, float]:
    """Consecutive-frame relative-motion errors: (trans RMSE, rot RMSE deg)."""
    if pred.shape != gt.shape:
        raise ContractViolation("trajectory length mismatch")
    if pred.shape[0] < 2:
        return 0.0, 0.0
    dg = dualquat.dq_mul(dualquat.dq_inverse(gt[:-1]), gt[1:], validate=False)
    dp = dualquat.dq_mul(dualquat.dq_inverse(pred[:-1]), pred[1:], validate=False)
    delta = dualquat.dq_mul(dualquat.dq_inverse(dg), dp, validate=False)
    t_err = dualquat.dq_translation(delta).norm(dim=-1)
    r_err = _rotation_angle_deg(dualquat.quat_to_rotmat(delta[:, :4]))
    return float(torch.sqrt((t_err ** 2).mean())), float(torch.sqrt((r_err ** 2).mean()))


# --- alignment ------------------------------------------------------------------

def _umeyama(src: torch.Tensor, dst: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, float, bool]:
    """Least-squares similarity (R, t, s) mapping src points onto dst.

    Falls back to a translation+scale fit (identity rotation, flagged) when
    the point configuration cannot pin down a rotation.
    """
    n = src.shape[0]
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs ** 2).sum() / n
    cov = xd.t() @ xs / n
    U, S, Vh = torch.linalg.svd(cov)
    rank = int((S > 1e-9 * max(float(S[0]), 1e-12)).sum()) if float(S[0]) > 0 else 0
    if n < 3 or rank < 2 or float(var_s) < 1e-16:
        var_d = (xd ** 2).sum() / n
        s = math.sqrt(float(var_d) / float(var_s)) if float(var_s) > 1e-16 else 1.0
        R = torch.eye(3, dtype=src.dtype)
        return R, mu_d - s * (R @ mu_s), s, True
    d = torch.eye(3, dtype=src.dtype)
    if torch.det(U) * torch.det(Vh) < 0:
        d[2, 2] = -1.0
    R = U @ d @ Vh
    s = float((S @ d.diagonal()) / var_s)
    t = mu_d - s * (R @ mu_s)
    return R, t, s, False


def apply_similarity(poses: torch.Tensor, R: torch.Tensor, t: torch.Tensor, s: float) -> torch.Tensor:
    """Re-express camera-to-world poses after a similarity change of the world
    frame: orientations rotate, positions map through the full similarity."""
    Rp, tp = dualquat.dq_to_se3(poses)
    new_R = R.unsqueeze(0) @ Rp
    new_t = s * (tp @ R.t()) + t
    return dualquat.se3_to_dq(new_R, new_t)


def align_eval_poses(pred: torch.Tensor, gt: torch.Tensor, mode: str = "similarity", *,
                     gaussians: gsplat.GaussianSet | None = None,
                     target_images: list[torch.Tensor] | None = None,
                     target_intrinsics: list[torch.Tensor] | None = None,
                     iters: int = 60, lr: float = 2e-3
                     ) -> tuple[torch.Tensor, bool]:
    """Fit predicted poses onto ground truth for evaluation.

    Similarity mode is the closed-form fit over camera centers; photometric
    mode refines the given poses by gradient descent on rendering error with
    the Gaussians frozen. Returns (aligned poses, fallback flag).
    """
    if mode == "similarity":
        src = dualquat.dq_translation(pred).double()
        dst = dualquat.dq_translation(gt).double()
        R, t, s, fallback = _umeyama(src, dst)
        aligned = apply_similarity(pred.double(), R, t, s).to(pred.dtype)
        aligned = torch.cat((dualquat.dq_identity(dtype=pred.dtype).unsqueeze(0), aligned[1:]))
        return aligned, fallback
    if mode == "photometric":
        if gaussians is None or not target_images or not target_intrinsics:
            raise ContractViolation("photometric alignment needs gaussians and target views")
        out = [pred[0]]
        for pose0, image, intr in zip(pred[1:], target_images, target_intrinsics):
            refined, _ = photometric_align_pose(gaussians, image, intr, pose0, iters=iters, lr=lr)
            out.append(refined)
        return torch.stack(out), False
    raise ContractViolation(f"unknown alignment mode '{mode}'")


def photometric_align_pose(gaussians: gsplat.GaussianSet, target_image: torch.Tensor,
                           intrinsics: torch.Tensor, init_pose: torch.Tensor, *,
                           iters: int = 60, lr: float = 2e-3
                           ) -> tuple[torch.Tensor, list[float]]:
    """Refine one camera pose against a target image with frozen Gaussians.

    Accepts the best iterate rather than the last, so the reported error is
    non-increasing over the run. Returns (pose, per-iteration MSE history).
    """
    H, W = target_image.shape[-2:]
    target = target_image.permute(1, 2, 0) if target_image.shape[0] == 3 else target_image
    frozen = gaussians.detach()
    raw = init_pose.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([raw], lr=lr)
    history: list[float] = []
    best = (float("inf"), init_pose.detach().clone())
    for _ in range(iters):
        opt.zero_grad()
        pose = dualquat.normalize_raw_dq(raw)
        cam = _camera_from_pose_tensors(pose, intrinsics, W, H)
        mse = ((gsplat.render(frozen, cam).image - target) ** 2).mean()
        mse.backward()
        opt.step()
        val = float(mse.detach())
        history.append(min(val, history[-1]) if history else val)
        if val < best[0]:
            best = (val, pose.detach().clone())
    return best[1], history


def _camera_from_pose_tensors(pose: torch.Tensor, intrinsics, width: int, height: int) -> gsplat.CameraModel:
    R_c2w, t_c2w = dualquat.dq_to_se3(pose)
    R = R_c2w.transpose(-1, -2)
    return gsplat.CameraModel(*[float(v) for v in intrinsics], width=width, height=height,
                              R=R, t=-R @ t_c2w)


def evaluate_pose_sets(pred: torch.Tensor, gt: torch.Tensor,
                       align: str | None = None) -> PoseMetricReport:
    pred_n = normalize_trajectory(pred)
    gt_n = normalize_trajectory(gt)
    fallback = False
    if align == "similarity":
        pred_n, fallback = align_eval_poses(pred_n, gt_n, mode="similarity")
    elif align is not None:
        raise ContractViolation(f"unsupported trajectory alignment '{align}'")
    trans, rot = rpe(pred_n, gt_n)
    return PoseMetricReport(ate=ate(pred_n, gt_n), rpe_trans=trans, rpe_rot_deg=rot,
                            aligned=align is not None, alignment_mode=align,
                            alignment_fallback=fallback)


# --- image metrics ---------------------------------------------------------------

def psnr(image: torch.Tensor, ref: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 99."""
    if image.shape != ref.shape:
        raise ContractViolation(f"image shape mismatch: {tuple(image.shape)} vs {tuple(ref.shape)}")
    mse = float(((image.double() - ref.double()) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    xs = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(xs ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g.outer(g)


def ssim(image: torch.Tensor, ref: torch.Tensor, *, k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5),
    averaged over channels and the valid (unpadded) region. Inputs are
    channels-last (H, W, C) in [0,1]."""
    if image.shape != ref.shape:
        raise ContractViolation(f"image shape mismatch: {tuple(image.shape)} vs {tuple(ref.shape)}")
    if image.ndim == 2:
        image, ref = image.unsqueeze(-1), ref.unsqueeze(-1)
    a = image.double().permute(2, 0, 1).unsqueeze(0)
    b = ref.double().permute(2, 0, 1).unsqueeze(0)
    C = a.shape[1]
    w = _gaussian_window().reshape(1, 1, 11, 11).repeat(C, 1, 1, 1)

    def filt(x):
        return torch.nn.functional.conv2d(x, w, groups=C)

    c1, c2 = k1 ** 2, k2 ** 2
    mu_a, mu_b = filt(a), filt(b)
    sa = filt(a * a) - mu_a * mu_a
    sb = filt(b * b) - mu_b * mu_b
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (sa + sb + c2)
    return float((num / den).mean())
