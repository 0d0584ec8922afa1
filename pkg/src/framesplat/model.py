"""Single-forward-pass predictor: encoder, decoder stack, prediction heads.

Given T unposed frames the model returns one Gaussian per input pixel,
expressed in the canonical space (the camera space of frame 1), plus a
camera-to-world pose per frame as a unit dual quaternion. Frame 1's pose is
the identity by construction and is never predicted. During the distillation
phase two extra heads emit a per-pixel point map and a positive confidence
map.

Heads are linear-plus-pixel-unshuffle at this scale; richer dense heads can
be swapped in behind the same config without touching the decoder.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .attention import DecoderBlock, EncoderBlock, TokenState, build_blocked_causal_mask
from .dualquat import dq_canonicalize, normalize_raw_dq, quat_mul, with_identity_first
from .gsplat import GaussianSet
from .numerics import ContractViolation

CHECKPOINT_VERSION = 1

PHASES = ("distill", "nvs")


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    width: int = 64
    encoder_depth: int = 2
    decoder_depth: int = 2
    heads: int = 4
    sh_degree: int = 0
    max_views: int = 8
    intrinsics_conditioning: bool = True
    modulation: bool = True
    cna: bool = True
    causal_mask: bool = True
    pose_parameterization: str = "dq"  # "dq" | "quat_trans"
    dq_align_loss: bool = True
    ffn_ratio: int = 4
    rope_base: float = 10000.0
    init_log_scale: float = -2.5
    init_depth: float = 2.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ContractViolation(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.max_views < 2:
            raise ContractViolation("max_views must be at least 2")
        if self.pose_parameterization not in ("dq", "quat_trans"):
            raise ContractViolation(f"unknown pose parameterization '{self.pose_parameterization}'")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens_per_frame(self) -> int:
        return self.grid * self.grid

    @property
    def color_channels(self) -> int:
        return 3 * (self.sh_degree + 1) ** 2


@dataclass
class ModelOutput:
    """Per-pixel Gaussian fields, per-frame poses, and (in the distillation
    phase) point and confidence maps. All image-shaped tensors are
    (B, T, H, W, ...)."""

    means: torch.Tensor
    opacity: torch.Tensor
    rotation: torch.Tensor
    scale: torch.Tensor
    color: torch.Tensor
    poses: torch.Tensor  # (B, T, 8), poses[:, 0] exactly identity
    pointmap: torch.Tensor | None = None
    confidence: torch.Tensor | None = None

    @property
    def gaussian_count(self) -> int:
        b, t, h, w = self.opacity.shape
        return t * h * w

    def gaussian_set(self, batch_index: int = 0, sh_degree: int = 0) -> GaussianSet:
        """Flatten one batch element into a pixel-aligned GaussianSet."""
        t, h, w = self.opacity.shape[1:]
        frame = torch.arange(t).repeat_interleave(h * w)
        pixel = torch.arange(h * w).repeat(t)
        return GaussianSet(
            means=self.means[batch_index].reshape(-1, 3),
            opacity=self.opacity[batch_index].reshape(-1),
            rotation=self.rotation[batch_index].reshape(-1, 4),
            scale=self.scale[batch_index].reshape(-1, 3),
            color=self.color[batch_index].reshape(t * h * w, -1),
            sh_degree=sh_degree,
            source_frame=frame,
            source_pixel=pixel,
        )


def _unshuffle(tokens: torch.Tensor, grid: int, patch: int, channels: int) -> torch.Tensor:
    """(B, T, L, s*s*ch) patch predictions to dense (B, T, H, W, ch)."""
    B, T, L, _ = tokens.shape
    x = tokens.reshape(B, T, grid, grid, patch, patch, channels)
    x = x.permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(B, T, grid * patch, grid * patch, channels)


class Model(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c, s, k = config.width, config.patch_size, config.sh_degree

        self.patch_embed = nn.Linear(s * s * 3, c)
        self.intrinsics_embed = nn.Linear(4, c)
        self.encoder = nn.ModuleList(
            EncoderBlock(c, config.heads, ffn_ratio=config.ffn_ratio, rope_base=config.rope_base)
            for _ in range(config.encoder_depth))

        self.camera_token = nn.Parameter(torch.zeros(c))
        self.camera_pos = nn.Parameter(torch.zeros(config.max_views, c))
        nn.init.normal_(self.camera_token, std=0.02)
        nn.init.normal_(self.camera_pos, std=0.02)

        self.decoder = nn.ModuleList(
            DecoderBlock(c, config.heads, modulation=config.modulation, cna=config.cna,
                         ffn_ratio=config.ffn_ratio, rope_base=config.rope_base)
            for _ in range(config.decoder_depth))
        self.final_norm = nn.LayerNorm(c)

        self.center_head = nn.Linear(c, s * s * 3)
        with torch.no_grad():
            self.center_head.bias.view(s, s, 3)[..., 2] = config.init_depth

        gauss_ch = 1 + 4 + 3 + self.config.color_channels
        self.gauss_head = nn.Linear(c, s * s * gauss_ch)
        with torch.no_grad():
            bias = self.gauss_head.bias.view(s, s, gauss_ch)
            bias.zero_()
            bias[..., 1] = 1.0  # identity quaternion
            bias[..., 5:8] = config.init_log_scale

        pose_dim = 8 if config.pose_parameterization == "dq" else 7
        self.camera_head = nn.Linear(c, pose_dim)
        with torch.no_grad():
            self.camera_head.weight.zero_()
            self.camera_head.bias.zero_()
            self.camera_head.bias[0] = 1.0  # identity pose at init

        self.pointmap_head = nn.Linear(c, s * s * 3)
        with torch.no_grad():
            self.pointmap_head.bias.view(s, s, 3)[..., 2] = config.init_depth
        self.conf_head = nn.Linear(c, s * s)

    # --- stages ---------------------------------------------------------

    def encode(self, frames: torch.Tensor, intrinsics: torch.Tensor | None = None) -> torch.Tensor:
        """Frames (B, T, 3, H, W) in [0,1] to visual tokens (B, T, L, C).

        Each frame is patchified and encoded independently; when intrinsics
        conditioning is on and per-frame intrinsics are given, a learned
        embedding of (fx/W, fy/H, cx/W, cy/H) is added to that frame's tokens.
        """
        B, T, ch, H, W = frames.shape
        s, g = self.config.patch_size, self.config.grid
        if H != self.config.image_size or W != self.config.image_size or ch != 3:
            raise ContractViolation(
                f"expected (B,T,3,{self.config.image_size},{self.config.image_size}), got {tuple(frames.shape)}")
        patches = frames.reshape(B, T, 3, g, s, g, s).permute(0, 1, 3, 5, 4, 6, 2)
        patches = patches.reshape(B * T, g * g, s * s * 3)
        tokens = self.patch_embed(patches)
        if self.config.intrinsics_conditioning and intrinsics is not None:
            norm = torch.stack((intrinsics[..., 0] / W, intrinsics[..., 1] / H,
                                intrinsics[..., 2] / W, intrinsics[..., 3] / H), dim=-1)
            tokens = tokens + self.intrinsics_embed(norm.to(tokens.dtype)).reshape(B * T, 1, -1)
        for block in self.encoder:
            tokens = block(tokens, g, g)
        return tokens.reshape(B, T, g * g, -1)

    def decode(self, visual: torch.Tensor) -> TokenState:
        """Expand the learned camera token across frames and run the decoder stack."""
        B, T, L, C = visual.shape
        if T > self.config.max_views:
            raise ContractViolation(f"{T} views exceed the model's maximum of {self.config.max_views}")
        camera = (self.camera_token + self.camera_pos[:T]).unsqueeze(0).expand(B, T, C)
        state = TokenState(visual=visual, camera=camera, grid_h=self.config.grid, grid_w=self.config.grid)
        mask = build_blocked_causal_mask(T, L, full_attention_for_camera=not self.config.causal_mask,
                                         device=visual.device)
        for block in self.decoder:
            state = block(state, mask)
        return state

    def predict_heads(self, state: TokenState, frames: torch.Tensor, phase: str = "nvs") -> ModelOutput:
        if phase not in PHASES:
            raise ContractViolation(f"unknown phase '{phase}', expected one of {PHASES}")
        cfg = self.config
        s, g = cfg.patch_size, cfg.grid
        B, T = state.camera.shape[:2]
        visual = self.final_norm(state.visual)
        camera = self.final_norm(state.camera)

        means = _unshuffle(self.center_head(visual), g, s, 3)

        gauss_ch = 1 + 4 + 3 + cfg.color_channels
        params = _unshuffle(self.gauss_head(visual), g, s, gauss_ch)
        opacity = torch.sigmoid(params[..., 0])
        quat = params[..., 1:5]
        quat = quat / quat.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        scale = torch.exp(params[..., 5:8].clamp(-10.0, 3.0))

        rgb = frames.permute(0, 1, 3, 4, 2)
        base = torch.logit(rgb.clamp(1e-4, 1.0 - 1e-4))
        raw_color = params[..., 8:]
        dc = torch.sigmoid(raw_color[..., :3] + base)
        color = torch.cat((dc, 0.1 * raw_color[..., 3:]), dim=-1) if cfg.color_channels > 3 else dc

        poses = self._pose_from_camera_tokens(camera)

        pointmap = confidence = None
        if phase == "distill":
            pointmap = _unshuffle(self.pointmap_head(visual), g, s, 3)
            confidence = torch.nn.functional.softplus(
                _unshuffle(self.conf_head(visual), g, s, 1).squeeze(-1)) + 1e-6

        return ModelOutput(means=means, opacity=opacity, rotation=quat, scale=scale, color=color,
                           poses=poses, pointmap=pointmap, confidence=confidence)

    def _pose_from_camera_tokens(self, camera: torch.Tensor) -> torch.Tensor:
        """Camera tokens of frames 2..T to a full (B, T, 8) pose set."""
        B, T, _ = camera.shape
        raw = self.camera_head(camera[:, 1:])
        if self.config.pose_parameterization == "dq":
            rest = normalize_raw_dq(raw)
        else:
            q = raw[..., :4]
            q = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            t = raw[..., 4:]
            t_quat = torch.cat((torch.zeros_like(t[..., :1]), t), dim=-1)
            rest = dq_canonicalize(torch.cat((q, 0.5 * quat_mul(t_quat, q)), dim=-1))
        return torch.stack([with_identity_first(rest[b]) for b in range(B)])

    def forward(self, frames: torch.Tensor, intrinsics: torch.Tensor | None = None,
                phase: str = "nvs") -> ModelOutput:
        state = self.decode(self.encode(frames, intrinsics))
        return self.predict_heads(state, frames, phase=phase)

    def freeze_distillation_heads(self) -> None:
        """Distillation heads stop training once the geometry stage is done."""
        for p in list(self.pointmap_head.parameters()) + list(self.conf_head.parameters()):
            p.requires_grad_(False)


# --- checkpoint container ----------------------------------------------------

def save_checkpoint(path: str | Path, model: Model, *, phase: str, seed: int,
                    extra: dict | None = None) -> None:
    """Self-describing container: versioned header, config echo, named
    parameter tensors, training-phase tag, and seed."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.config),
        "phase": phase,
        "seed": int(seed),
        "model_state": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {version}")
    return payload


def model_from_checkpoint(path: str | Path) -> tuple[Model, dict]:
    payload = load_checkpoint(path)
    model = Model(ModelConfig(**payload["config"]))
    model.load_state_dict(payload["model_state"])
    return model, payload
