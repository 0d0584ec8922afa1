"""Registry of differentiable primitives for the central-difference suite.

Every op on the training path is registered with an input factory that
samples float64 inputs inside the op's smooth region: quaternion real parts
away from zero norm, Gaussian depths spread away from sort ties, teacher and
ground-truth tensors marked non-differentiable. The two end-to-end entries
check the full model loss on a 2-frame 16x16 toy, with the renderer's
compositing order frozen at the probe point (the documented exclusion of
sort ties).
"""

from __future__ import annotations

import torch
from torch.func import functional_call

from . import attention, dualquat, gsplat, losses, scenegen
from .attention import TokenState, build_blocked_causal_mask
from .model import Model, ModelConfig
from .numerics import PrimitiveSpec, register_primitive, registered_primitives, uniform_inputs


def _rand(gen, *shape, scale=0.5, offset=0.0):
    return (torch.randn(shape, generator=gen, dtype=torch.float64) * scale + offset)


def _safe_raw_dq(gen, *lead) -> torch.Tensor:
    """Raw 8-vectors whose real part has norm in [0.8, 2]: inside
    normalize_raw_dq's contract with margin for finite-difference probes."""
    raw = torch.randn(*lead, 8, generator=gen, dtype=torch.float64)
    r = raw[..., :4]
    target = 0.8 + 1.2 * torch.rand(*lead, 1, generator=gen, dtype=torch.float64)
    raw = torch.cat((r / r.norm(dim=-1, keepdim=True) * target, raw[..., 4:]), dim=-1)
    return raw


def _module_params(template: torch.nn.Module, gen: torch.Generator) -> list[torch.Tensor]:
    params = []
    for name, p in template.named_parameters():
        base = _rand(gen, *p.shape, scale=0.4)
        if name.endswith("norm.weight"):
            base = base * 0.3 + 1.0
        params.append(base.requires_grad_(True))
    return params


def _functional(template: torch.nn.Module):
    names = [n for n, _ in template.named_parameters()]

    def call(tensors, *args, **kwargs):
        return functional_call(template, dict(zip(names, tensors[:len(names)])), args, kwargs)

    return names, call


def _flat_state(state: TokenState) -> torch.Tensor:
    return torch.cat((state.visual.reshape(-1), state.camera.reshape(-1)))


def register_all() -> None:
    """Populate the primitive registry; importing this module is enough."""
    if "softmax" in registered_primitives():
        return

    register_primitive(PrimitiveSpec(
        "softmax", lambda x: torch.softmax(x, dim=-1), uniform_inputs((8,), low=-2, high=2),
        max_probes_per_input=8))
    register_primitive(PrimitiveSpec(
        "layernorm",
        lambda x, w, b: torch.nn.functional.layer_norm(x, (8,), w, b),
        lambda gen: [_rand(gen, 3, 8).requires_grad_(True),
                     (_rand(gen, 8, scale=0.3) + 1.0).requires_grad_(True),
                     _rand(gen, 8, scale=0.3).requires_grad_(True)]))
    register_primitive(PrimitiveSpec(
        "gelu", torch.nn.functional.gelu, uniform_inputs((16,), low=-3, high=3)))
    register_primitive(PrimitiveSpec(
        "linear",
        lambda x, w, b: torch.nn.functional.linear(x, w, b),
        lambda gen: [_rand(gen, 4, 6).requires_grad_(True), _rand(gen, 5, 6).requires_grad_(True),
                     _rand(gen, 5).requires_grad_(True)]))

    rope_cos, rope_sin = attention.mixed_sequence_rope(2, 2, 2, 8)
    register_primitive(PrimitiveSpec(
        "rotary_phases",
        lambda x: attention.apply_rope(x, rope_cos, rope_sin),
        uniform_inputs((1, 2, 10, 8), low=-1, high=1), max_probes_per_input=4))

    # --- attention sublayers (parameters randomized through functional_call) ---
    vca = attention.VideoCameraAttention(8, 2).double()
    vca_names, vca_call = _functional(vca)
    vca_mask = build_blocked_causal_mask(2, 4)

    def vca_fn(*tensors):
        visual = tensors[len(vca_names)]
        camera = tensors[len(vca_names) + 1]
        state = TokenState(visual=visual, camera=camera, grid_h=2, grid_w=2)
        return _flat_state(vca_call(tensors, state, vca_mask))

    register_primitive(PrimitiveSpec(
        "video_camera_attention", vca_fn,
        lambda gen: _module_params(vca, gen) + [_rand(gen, 1, 2, 4, 8).requires_grad_(True),
                                                _rand(gen, 1, 2, 8).requires_grad_(True)],
        max_probes_per_input=3))

    cna = attention.CrossNeighborAttention(8, 2).double()
    cna_names, cna_call = _functional(cna)
    register_primitive(PrimitiveSpec(
        "cross_neighbor_attention",
        lambda *ts: cna_call(ts, ts[len(cna_names)]).reshape(-1),
        lambda gen: _module_params(cna, gen) + [_rand(gen, 1, 3, 4, 8).requires_grad_(True)],
        max_probes_per_input=3))

    mod = attention.FrameModulation(8).double()
    mod_names, mod_call = _functional(mod)

    def mod_fn(*tensors):
        visual = tensors[len(mod_names)]
        camera = tensors[len(mod_names) + 1]
        scale, shift, gate = mod_call(tensors, camera)
        out = visual + (1.0 + gate.unsqueeze(2)) * torch.tanh(
            visual * (1.0 + scale.unsqueeze(2)) + shift.unsqueeze(2))
        return out.reshape(-1)

    register_primitive(PrimitiveSpec(
        "framewise_modulation", mod_fn,
        lambda gen: _module_params(mod, gen) + [_rand(gen, 1, 2, 4, 8).requires_grad_(True),
                                                _rand(gen, 1, 2, 8).requires_grad_(True)],
        max_probes_per_input=3))

    ffn = attention.FeedForward(8, ratio=2).double()
    ffn_names, ffn_call = _functional(ffn)
    register_primitive(PrimitiveSpec(
        "feed_forward",
        lambda *ts: ffn_call(ts, ts[len(ffn_names)]).reshape(-1),
        lambda gen: _module_params(ffn, gen) + [_rand(gen, 2, 5, 8).requires_grad_(True)],
        max_probes_per_input=3))

    block = attention.DecoderBlock(8, 2, modulation=True, cna=True, ffn_ratio=2).double()
    block_names, block_call = _functional(block)
    block_mask = build_blocked_causal_mask(2, 4)

    def block_fn(*tensors):
        visual = tensors[len(block_names)]
        camera = tensors[len(block_names) + 1]
        state = TokenState(visual=visual, camera=camera, grid_h=2, grid_w=2)
        return _flat_state(block_call(tensors, state, block_mask))

    register_primitive(PrimitiveSpec(
        "decoder_block", block_fn,
        lambda gen: _module_params(block, gen) + [_rand(gen, 1, 2, 4, 8).requires_grad_(True),
                                                  _rand(gen, 1, 2, 8).requires_grad_(True)],
        max_probes_per_input=2))

    enc = attention.EncoderBlock(8, 2, ffn_ratio=2).double()
    enc_names, enc_call = _functional(enc)
    register_primitive(PrimitiveSpec(
        "encoder_block",
        lambda *ts: enc_call(ts, ts[len(enc_names)], 2, 2).reshape(-1),
        lambda gen: _module_params(enc, gen) + [_rand(gen, 2, 4, 8).requires_grad_(True)],
        max_probes_per_input=2))

    # --- pose algebra ---
    register_primitive(PrimitiveSpec(
        "normalize_raw_dq", dualquat.normalize_raw_dq,
        lambda gen: [_safe_raw_dq(gen).requires_grad_(True)], max_probes_per_input=8))
    register_primitive(PrimitiveSpec(
        "dq_conjugate", dualquat.dq_conjugate,
        lambda gen: [_safe_raw_dq(gen).requires_grad_(True)], max_probes_per_input=8))
    register_primitive(PrimitiveSpec(
        "dq_mul",
        lambda a, b: dualquat.dq_mul(dualquat.normalize_raw_dq(a), dualquat.normalize_raw_dq(b)),
        lambda gen: [_safe_raw_dq(gen).requires_grad_(True), _safe_raw_dq(gen).requires_grad_(True)],
        max_probes_per_input=4))
    register_primitive(PrimitiveSpec(
        "quat_to_rotmat",
        lambda raw: dualquat.quat_to_rotmat(raw / raw.norm(dim=-1, keepdim=True)),
        lambda gen: [(_safe_raw_dq(gen)[:4]).requires_grad_(True)], max_probes_per_input=4))

    def _pose_set(raw):
        return dualquat.with_identity_first(dualquat.normalize_raw_dq(raw))

    register_primitive(PrimitiveSpec(
        "dq_align_loss",
        lambda p, g: dualquat.dq_align_loss(_pose_set(p), _pose_set(g)),
        lambda gen: [_safe_raw_dq(gen, 3).requires_grad_(True), _safe_raw_dq(gen, 3).requires_grad_(True)],
        max_probes_per_input=4))
    register_primitive(PrimitiveSpec(
        "camera_loss",
        lambda p, g: dualquat.camera_loss(_pose_set(p), _pose_set(g)),
        lambda gen: [_safe_raw_dq(gen, 3).requires_grad_(True), _safe_raw_dq(gen, 3).requires_grad_(True)],
        max_probes_per_input=4))

    # --- splatting ---
    _cam = dict(fx=8.0, fy=8.0, cx=4.0, cy=4.0, width=8, height=8)

    def _spread_means(gen, g=3):
        xy = _rand(gen, g, 2, scale=0.25)
        z = torch.tensor([1.2, 1.7, 2.2], dtype=torch.float64)[:g] + 0.08 * torch.rand(
            g, generator=gen, dtype=torch.float64)
        return torch.cat((xy, z.unsqueeze(-1)), dim=-1)

    def project_fn(means, raw_quat, log_scale):
        q = raw_quat / raw_quat.norm(dim=-1, keepdim=True)
        cam = gsplat.CameraModel(**_cam, R=torch.eye(3, dtype=torch.float64),
                                 t=torch.zeros(3, dtype=torch.float64))
        mean2d, cov2d, depth, _ = gsplat.project(means, q, torch.exp(log_scale), cam)
        return torch.cat((mean2d.reshape(-1), cov2d.reshape(-1), depth))

    register_primitive(PrimitiveSpec(
        "project", project_fn,
        lambda gen: [_spread_means(gen).requires_grad_(True),
                     _safe_raw_dq(gen, 3)[:, :4].requires_grad_(True),
                     _rand(gen, 3, 3, scale=0.4, offset=-1.6).requires_grad_(True)],
        max_probes_per_input=4))

    def render_fn(means, opac_raw, raw_quat, log_scale, color_raw, cam_t):
        g = gsplat.GaussianSet(
            means=means, opacity=torch.sigmoid(opac_raw),
            rotation=raw_quat / raw_quat.norm(dim=-1, keepdim=True),
            scale=torch.exp(log_scale), color=torch.sigmoid(color_raw))
        cam = gsplat.CameraModel(**_cam, R=torch.eye(3, dtype=torch.float64), t=cam_t)
        res = gsplat.render(g, cam)
        return torch.cat((res.image.reshape(-1), res.alpha.reshape(-1), res.depth.reshape(-1)))

    register_primitive(PrimitiveSpec(
        "render", render_fn,
        lambda gen: [_spread_means(gen).requires_grad_(True),
                     _rand(gen, 3, scale=1.0).requires_grad_(True),
                     _safe_raw_dq(gen, 3)[:, :4].requires_grad_(True),
                     _rand(gen, 3, 3, scale=0.3, offset=-1.3).requires_grad_(True),
                     _rand(gen, 3, 3, scale=1.0).requires_grad_(True),
                     _rand(gen, 3, scale=0.05).requires_grad_(True)],
        max_probes_per_input=3,
        note="two+ overlapping Gaussians; depths spread away from sort ties"))

    # --- losses ---
    register_primitive(PrimitiveSpec(
        "photometric_mse",
        lambda a, b: losses.photometric_loss(torch.sigmoid(a), torch.sigmoid(b))[0],
        uniform_inputs((4, 4, 3), (4, 4, 3), low=-2, high=2), max_probes_per_input=4))

    def distill_fn(pred_pts, conf_raw, teacher_pts, teacher_conf, valid):
        point, conf = losses.distill_loss(pred_pts, torch.nn.functional.softplus(conf_raw),
                                          teacher_pts, teacher_conf, valid)
        return point + conf

    def distill_inputs(gen):
        valid = torch.rand(2, 4, 4, generator=gen, dtype=torch.float64) > 0.3
        return [_rand(gen, 2, 4, 4, 3).requires_grad_(True),
                _rand(gen, 2, 4, 4).requires_grad_(True),
                _rand(gen, 2, 4, 4, 3),
                valid.double(),
                valid]

    register_primitive(PrimitiveSpec(
        "distill_loss", distill_fn, distill_inputs, max_probes_per_input=4,
        note="teacher tensors are non-differentiable by contract"))

    _register_end_to_end()


_TOY_CONFIG = ModelConfig(image_size=16, patch_size=8, width=16, encoder_depth=1,
                          decoder_depth=1, heads=2, max_views=2, init_log_scale=-1.8)


def _toy_sample(gen: torch.Generator, image_size: int = 16) -> scenegen.SceneSample:
    """Hand-built float64 ground truth for the end-to-end loss checks."""
    hw = image_size
    frames = torch.rand(2, 3, hw, hw, generator=gen, dtype=torch.float64)
    intr = torch.tensor([1.1 * hw, 1.1 * hw, hw / 2, hw / 2], dtype=torch.float64)
    poses = dualquat.with_identity_first(dualquat.normalize_raw_dq(_safe_raw_dq(gen, 1) * 0.4))
    target_pose = dualquat.normalize_raw_dq(_safe_raw_dq(gen) * 0.4)
    valid = torch.rand(2, hw, hw, generator=gen, dtype=torch.float64) > 0.3
    target = scenegen.TargetView(image=torch.rand(3, hw, hw, generator=gen, dtype=torch.float64),
                                 pose=target_pose, intrinsics=intr)
    return scenegen.SceneSample(
        frames=scenegen.FrameSequence(frames=frames, intrinsics=intr.unsqueeze(0).repeat(2, 1)),
        gt_poses=poses,
        gt_pointmaps=_rand(gen, 2, hw, hw, 3, scale=0.5, offset=0.0) + torch.tensor([0., 0., 2.]),
        gt_valid=valid,
        gt_confidence=valid.double(),
        target_views=[target],
        scene_id="toy", seed=0)


def _register_end_to_end() -> None:
    template = Model(_TOY_CONFIG).double()
    names = [n for n, _ in template.named_parameters()]
    weights = losses.LossWeights(pixel_sample=0)

    def draw_params(gen):
        params = []
        for name, p in template.named_parameters():
            base = _rand(gen, *p.shape, scale=0.25)
            if "norm.weight" in name:
                base = base * 0.2 + 1.0
            if name == "camera_head.bias":
                base = base * 0.2
                base[0] = base[0] + 1.0
            params.append(base.requires_grad_(True))
        return params

    for phase in ("nvs", "distill"):
        # factory and fn share per-seed context: the ground-truth sample and,
        # for the rendering loss, the compositing order frozen at the base point
        ctx: dict = {}

        def make(gen, _ctx=ctx, _phase=phase):
            params = draw_params(gen)
            sample = _toy_sample(gen)
            _ctx["sample"] = sample
            frames = sample.frames.frames.unsqueeze(0)
            intr = sample.frames.intrinsics.unsqueeze(0)
            _ctx["orders"] = None
            if _phase == "nvs":
                with torch.no_grad():
                    p0 = dict(zip(names, [t.detach() for t in params]))
                    out = functional_call(template, p0, (frames, intr), {"phase": "nvs"})
                    tv = sample.target_views[0]
                    cam = gsplat.camera_from_pose(tv.pose, tv.intrinsics, 16, 16)
                    _ctx["orders"] = [gsplat.sort_order_for(out.gaussian_set(0), cam)]
            return params + [frames, intr]

        def fn(*tensors, _ctx=ctx, _phase=phase):
            params = dict(zip(names, tensors[:len(names)]))
            frames, intr = tensors[len(names):]
            out = functional_call(template, params, (frames, intr), {"phase": _phase})
            return losses.total_loss(out, _ctx["sample"], _phase, weights, batch_index=0,
                                     sort_overrides=_ctx["orders"]).total

        register_primitive(PrimitiveSpec(
            f"model_{phase}_loss", fn, make, max_probes_per_input=2,
            note="full toy-model loss; compositing order frozen at the probe point"))


register_all()
