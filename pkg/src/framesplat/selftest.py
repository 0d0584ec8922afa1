"""Self-contained verification suites behind the `selftest` command: gradient
checks over the primitive registry, mask/causality properties, dual-quaternion
algebra, and renderer round trips. Each suite returns (passed, report lines);
the CLI prints the lines and exits nonzero on any failure.
"""

from __future__ import annotations

import torch

from . import dualquat, evalmetrics, gsplat, numerics, scenegen
from .attention import TokenState, VideoCameraAttention, build_blocked_causal_mask


def run_gradient_suite(seeds: int = 3, tol: float = 1e-4, eps: float = 1e-5
                       ) -> tuple[bool, list[str]]:
    from . import gradsuite  # noqa: F401  (populates the registry)

    reports = numerics.check_registered(seeds=range(seeds), tol=tol, eps=eps)
    lines = [str(r) for r in reports]
    return all(r.passed for r in reports), lines


def _mask_matches_definition(T: int, L: int) -> bool:
    mask = build_blocked_causal_mask(T, L)
    block = 1 + L
    for row in range(T * block):
        frame, offset = divmod(row, block)
        for col in range(T * block):
            col_frame = col // block
            want = True if offset != 0 else col_frame <= frame
            if bool(mask[row, col]) != want:
                return False
    return True


def run_mask_suite() -> tuple[bool, list[str]]:
    lines = []
    ok = True
    shape_ok = all(_mask_matches_definition(T, L) for T in range(1, 9) for L in (1, 2, 3, 4, 9, 16))
    lines.append(f"[{'pass' if shape_ok else 'FAIL'}] blocked causal mask matches definition (T<=8, L<=16)")
    ok &= shape_ok

    torch.manual_seed(0)
    T, L, C = 4, 4, 16
    vca = VideoCameraAttention(C, 2)
    visual = torch.randn(1, T, L, C)
    camera = torch.randn(1, T, C)
    mask = build_blocked_causal_mask(T, L)
    base = vca(TokenState(visual=visual, camera=camera, grid_h=2, grid_w=2), mask)
    causal_ok = True
    for t in range(T - 1):
        v2, c2 = visual.clone(), camera.clone()
        v2[:, t + 1:] += torch.randn_like(v2[:, t + 1:])
        c2[:, t + 1:] += torch.randn_like(c2[:, t + 1:])
        out = vca(TokenState(visual=v2, camera=c2, grid_h=2, grid_w=2), mask)
        if not torch.equal(out.camera[:, :t + 1], base.camera[:, :t + 1]):
            causal_ok = False
    lines.append(f"[{'pass' if causal_ok else 'FAIL'}] camera-token causality bit-exact under future-frame perturbation")
    return ok and causal_ok, lines


def run_dualquat_suite() -> tuple[bool, list[str]]:
    lines = []
    ok = True
    gen = torch.Generator().manual_seed(11)

    def raws(n):
        r = torch.randn(n, 8, generator=gen, dtype=torch.float64)
        r[:, 0] += torch.sign(r[:, 0]) + 0.5
        return r

    p = dualquat.normalize_raw_dq(raws(500))
    q = dualquat.normalize_raw_dq(raws(500))
    prod = dualquat.dq_mul(p, q)
    closure = float((prod[:, :4].norm(dim=-1) - 1).abs().max() + (prod[:, :4] * prod[:, 4:]).sum(-1).abs().max())
    ok &= closure < 1e-6
    lines.append(f"[{'pass' if closure < 1e-6 else 'FAIL'}] closure of the unit manifold under composition ({closure:.2e})")

    ident = dualquat.dq_identity(dtype=torch.float64)
    conj_err = float((dualquat.dq_mul(p, dualquat.dq_conjugate(p)) - ident).abs().max())
    ok &= conj_err < 1e-6
    lines.append(f"[{'pass' if conj_err < 1e-6 else 'FAIL'}] conjugate product is the identity element ({conj_err:.2e})")

    R, t = dualquat.dq_to_se3(dualquat.normalize_raw_dq(raws(1000)))
    back = dualquat.se3_to_dq(R, t)
    R2, t2 = dualquat.dq_to_se3(back)
    rot_err = float(evalmetrics._rotation_angle_deg(R.transpose(-1, -2) @ R2).max()) * torch.pi / 180
    tr_err = float((t - t2).norm(dim=-1).max())
    rt_ok = rot_err < 1e-6 and tr_err < 1e-6
    ok &= rt_ok
    lines.append(f"[{'pass' if rt_ok else 'FAIL'}] se3 round trip (rot {rot_err:.2e} rad, trans {tr_err:.2e})")

    gt = dualquat.with_identity_first(p[:3])
    zero = float(dualquat.dq_align_loss(gt, gt))
    flip = gt.clone()
    flip[2] = -flip[2]
    flipped = float(dualquat.dq_align_loss(dualquat.dq_canonicalize(flip), gt))
    dc_ok = zero < 1e-9 and flipped < 1e-9
    ok &= dc_ok
    lines.append(f"[{'pass' if dc_ok else 'FAIL'}] loss at truth and under sign flips ({zero:.1e}, {flipped:.1e})")

    converged, steps = align_loss_toy_optimization()
    ok &= converged
    lines.append(f"[{'pass' if converged else 'FAIL'}] alignment-loss toy optimization < 1e-6 in {steps} steps")
    return ok, lines


def align_loss_toy_optimization(max_steps: int = 500, seed: int = 5) -> tuple[bool, int]:
    """Gradient-descend a single raw pose onto a fixed ground truth.

    The alignment penalty behaves like a norm near the optimum (unit-scale
    gradient), so the step size decays exponentially to push the residual
    under 1e-6.
    """
    gen = torch.Generator().manual_seed(seed)
    raw_gt = torch.randn(1, 8, generator=gen, dtype=torch.float64)
    raw_gt[:, 0] += 1.5
    gt = dualquat.with_identity_first(dualquat.normalize_raw_dq(raw_gt * 0.5))
    raw = torch.zeros(1, 8, dtype=torch.float64)
    raw[:, 0] = 1.0
    raw.requires_grad_(True)
    opt = torch.optim.Adam([raw], lr=0.1)
    for step in range(max_steps):
        for g in opt.param_groups:
            g["lr"] = 0.1 * 0.96 ** step
        opt.zero_grad()
        loss = dualquat.dq_align_loss(dualquat.with_identity_first(dualquat.normalize_raw_dq(raw)), gt)
        if float(loss.detach()) < 1e-6:
            return True, step
        loss.backward()
        opt.step()
    return False, max_steps


def run_renderer_suite() -> tuple[bool, list[str]]:
    lines = []
    ok = True
    cfg = scenegen.SceneGenConfig(n_frames=9)
    sample = scenegen.generate_scene(17, cfg)
    gs = scenegen.oracle_gaussians(17, cfg)
    size = cfg.image_size

    psnrs = []
    for t in (0, 4, 8):
        cam = gsplat.camera_from_pose(sample.gt_poses[t], sample.frames.intrinsics[t], size, size)
        img = gsplat.render(gs, cam).image
        psnrs.append(evalmetrics.psnr(img, sample.frames.frames[t].permute(1, 2, 0)))
    rt_ok = min(psnrs) > 30.0
    ok &= rt_ok
    lines.append(f"[{'pass' if rt_ok else 'FAIL'}] oracle re-render PSNR > 30 (min {min(psnrs):.1f} dB)")

    gen = torch.Generator().manual_seed(23)
    raw = torch.randn(8, generator=gen, dtype=torch.float64)
    raw[0] += 1.5
    motion = dualquat.normalize_raw_dq(raw * 0.3)
    R, t = dualquat.dq_to_se3(motion)
    gs64 = gsplat.GaussianSet(gs.means.double(), gs.opacity.double(), gs.rotation.double(),
                              gs.scale.double(), gs.color.double())
    cam = gsplat.camera_from_pose(sample.gt_poses[4].double(), sample.frames.intrinsics[4], size, size)
    base = gsplat.render(gs64, cam).image
    moved_gs = gsplat.transform_gaussians(gs64, R, t)
    pose_moved = dualquat.dq_mul(motion, sample.gt_poses[4].double(), validate=False)
    cam_moved = gsplat.camera_from_pose(pose_moved, sample.frames.intrinsics[4], size, size)
    moved = gsplat.render(moved_gs, cam_moved).image
    eq_err = float((moved - base).abs().max())
    eq_ok = eq_err < 1e-5
    ok &= eq_ok
    lines.append(f"[{'pass' if eq_ok else 'FAIL'}] rigid-motion equivariance ({eq_err:.2e} per channel)")

    cam32 = gsplat.camera_from_pose(sample.gt_poses[4], sample.frames.intrinsics[4], size, size)
    base32 = gsplat.render(gs, cam32).image
    merged = gsplat.GaussianSet(
        means=torch.cat((gs.means, torch.randn(5, 3) + torch.tensor([0.0, 0.0, 2.0]))),
        opacity=torch.cat((gs.opacity, torch.zeros(5))),
        rotation=torch.cat((gs.rotation, torch.tensor([[1.0, 0, 0, 0]]).repeat(5, 1))),
        scale=torch.cat((gs.scale, torch.full((5, 3), 0.2))),
        color=torch.cat((gs.color, torch.rand(5, 3))))
    noop_ok = torch.equal(gsplat.render(merged, cam32).image, base32)
    ok &= noop_ok
    lines.append(f"[{'pass' if noop_ok else 'FAIL'}] zero-opacity Gaussians change no pixel (bit-exact)")

    weights = gsplat.composite_weights(gs, cam32, torch.arange(size * size))
    w_ok = bool((weights >= 0).all() and (weights <= 1).all() and (weights.sum(1) <= 1 + 1e-6).all())
    ok &= w_ok
    lines.append(f"[{'pass' if w_ok else 'FAIL'}] compositing weights in [0,1], per-pixel sum <= 1")
    return ok, lines


def run_all(grad_seeds: int = 3) -> tuple[bool, list[str]]:
    all_ok = True
    out = []
    for title, suite in (("gradient checks", lambda: run_gradient_suite(seeds=grad_seeds)),
                         ("mask / causality", run_mask_suite),
                         ("dual-quaternion algebra", run_dualquat_suite),
                         ("renderer", run_renderer_suite)):
        ok, lines = suite()
        all_ok &= ok
        out.append(f"== {title}: {'PASS' if ok else 'FAIL'}")
        out.extend("   " + ln for ln in lines)
    return all_ok, out
