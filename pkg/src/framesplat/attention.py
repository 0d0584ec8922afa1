"""Decoder building blocks: mixed visual+camera token sequences, blocked
causal masking, rotary phases, cross-neighbor attention, and frame-wise
modulation.

Token layout conventions:

* visual tokens: ``(B, T, L, C)`` with ``L = (H/s) * (W/s)`` patch tokens per
  frame, row-major over the patch grid;
* camera tokens: ``(B, T, C)``, one query token per frame;
* the mixed sequence prepends each frame's camera token to its visual tokens:
  ``[cam_1, vis_1..., cam_2, vis_2..., ...]`` of length ``T * (1 + L)``.

Camera tokens are restricted by a blocked causal mask (a camera token sees
only camera and visual tokens of frames up to its own); visual tokens attend
globally. Rotary phases are 1D by frame index for camera tokens and 2D by
patch row/column (frame-agnostic) for visual tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .numerics import ContractViolation


@dataclass
class TokenState:
    """Visual and camera tokens flowing through the decoder."""

    visual: torch.Tensor  # (B, T, L, C)
    camera: torch.Tensor  # (B, T, C)
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.visual.ndim != 4 or self.camera.ndim != 3:
            raise ContractViolation("TokenState expects visual (B,T,L,C) and camera (B,T,C)")
        if self.visual.shape[:2] != self.camera.shape[:2] or self.visual.shape[-1] != self.camera.shape[-1]:
            raise ContractViolation("visual and camera tokens disagree on (B, T, C)")
        if self.visual.shape[2] != self.grid_h * self.grid_w:
            raise ContractViolation(
                f"token count {self.visual.shape[2]} != grid {self.grid_h}x{self.grid_w}")

    @property
    def frames(self) -> int:
        return self.visual.shape[1]

    @property
    def tokens_per_frame(self) -> int:
        return self.visual.shape[2]

    @property
    def width(self) -> int:
        return self.visual.shape[-1]


def build_mixed_sequence(state: TokenState) -> torch.Tensor:
    """Interleave camera and visual tokens into (B, T*(1+L), C)."""
    B, T, L, C = state.visual.shape
    mixed = torch.cat((state.camera.unsqueeze(2), state.visual), dim=2)
    return mixed.reshape(B, T * (1 + L), C)


def split_mixed_sequence(mixed: torch.Tensor, state: TokenState) -> TokenState:
    """Inverse of :func:`build_mixed_sequence`; bit-exact round trip."""
    B, T, L, C = state.visual.shape
    grouped = mixed.reshape(B, T, 1 + L, C)
    return TokenState(visual=grouped[:, :, 1:], camera=grouped[:, :, 0],
                      grid_h=state.grid_h, grid_w=state.grid_w)


def camera_token_index(t: int, tokens_per_frame: int) -> int:
    return t * (1 + tokens_per_frame)


def build_blocked_causal_mask(T: int, tokens_per_frame: int, *,
                              full_attention_for_camera: bool = False,
                              device=None) -> torch.Tensor:
    """Boolean (S, S) mask over the mixed sequence, True = may attend.

    Visual rows are all-True (global scope). The row of camera token t is True
    exactly on the columns of frames 1..t (their camera and visual tokens).
    With `full_attention_for_camera` the restriction is lifted entirely.
    """
    if T < 1:
        raise ContractViolation(f"need at least one frame, got T={T}")
    block = 1 + tokens_per_frame
    S = T * block
    mask = torch.ones(S, S, dtype=torch.bool, device=device)
    if full_attention_for_camera:
        return mask
    for t in range(T):
        mask[camera_token_index(t, tokens_per_frame), (t + 1) * block:] = False
    return mask


# --- rotary phases ----------------------------------------------------------

def _rope_angles(positions: torch.Tensor, dim: int, base: float) -> torch.Tensor:
    """(N,) integer positions -> (N, dim/2) rotation angles."""
    freqs = base ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    return positions.double().unsqueeze(-1) * freqs


def mixed_sequence_rope(T: int, grid_h: int, grid_w: int, head_dim: int,
                        base: float = 10000.0, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-token (cos, sin) tables of shape (S, head_dim/2) for the mixed sequence.

    Camera tokens rotate by their frame index over the full head dim; visual
    tokens rotate half the pair budget by patch row and half by patch column,
    with no frame component.
    """
    if head_dim % 4 != 0:
        raise ContractViolation(f"head dim must be divisible by 4 for 2D rotary phases, got {head_dim}")
    L = grid_h * grid_w
    cam = _rope_angles(torch.arange(T, device=device), head_dim, base)  # (T, d/2)
    rows = torch.arange(grid_h, device=device).repeat_interleave(grid_w)
    cols = torch.arange(grid_w, device=device).repeat(grid_h)
    vis = torch.cat((_rope_angles(rows, head_dim // 2, base),
                     _rope_angles(cols, head_dim // 2, base)), dim=-1)  # (L, d/2)
    angles = torch.cat((cam.unsqueeze(1), vis.unsqueeze(0).expand(T, L, head_dim // 2)), dim=1)
    angles = angles.reshape(T * (1 + L), head_dim // 2)
    return angles.cos(), angles.sin()


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate half-split pairs of the last dim: element i pairs with i + d/2."""
    d2 = x.shape[-1] // 2
    x1, x2 = x[..., :d2], x[..., d2:]
    cos = cos.to(x.dtype)
    sin = sin.to(x.dtype)
    return torch.cat((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)


def _heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    B, S, C = x.shape
    return x.reshape(B, S, n_heads, C // n_heads).transpose(1, 2)  # (B, h, S, d)


def _unheads(x: torch.Tensor) -> torch.Tensor:
    B, h, S, d = x.shape
    return x.transpose(1, 2).reshape(B, S, h * d)


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
            mask: torch.Tensor | None = None) -> torch.Tensor:
    scale = q.shape[-1] ** -0.5
    logits = (q @ k.transpose(-1, -2)) * scale
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=-1) @ v


class VideoCameraAttention(nn.Module):
    """Masked multi-head self-attention over the mixed token sequence.

    Pre-norm and residual live inside the module: camera tokens and visual
    tokens communicate in one sequence, with rotary phases applied to Q/K and
    the blocked causal mask restricting camera-token rows.
    """

    def __init__(self, width: int, n_heads: int, rope_base: float = 10000.0):
        super().__init__()
        if width % n_heads != 0:
            raise ContractViolation(f"width {width} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.rope_base = rope_base
        self.norm = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width, bias=False)
        self.proj = nn.Linear(width, width, bias=False)

    def forward(self, state: TokenState, mask: torch.Tensor) -> TokenState:
        mixed = build_mixed_sequence(state)
        S = mixed.shape[1]
        if mask.shape != (S, S):
            raise ContractViolation(f"mask shape {tuple(mask.shape)} does not match sequence length {S}")
        h = self.norm(mixed)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q, k, v = (_heads(t, self.n_heads) for t in (q, k, v))
        cos, sin = mixed_sequence_rope(state.frames, state.grid_h, state.grid_w,
                                       q.shape[-1], base=self.rope_base, device=mixed.device)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        out = self.proj(_unheads(_attend(q, k, v, mask)))
        return split_mixed_sequence(mixed + out, state)


class CrossNeighborAttention(nn.Module):
    """Visual tokens cross-attend to the concatenated K/V of adjacent frames.

    Returns the sublayer output only (no residual, camera tokens untouched);
    the caller owns the residual, optionally gated by frame-wise modulation.
    A single frame has no neighbor, so the sublayer output is exactly zero.
    """

    def __init__(self, width: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width, bias=False)
        self.proj = nn.Linear(width, width, bias=False)

    def forward(self, visual: torch.Tensor) -> torch.Tensor:
        B, T, L, C = visual.shape
        if T == 1:
            return torch.zeros_like(visual)
        h = self.norm(visual)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        outs = []
        for t in range(T):
            nbrs = [i for i in (t - 1, t + 1) if 0 <= i < T]
            kt = torch.cat([k[:, i] for i in nbrs], dim=1)
            vt = torch.cat([v[:, i] for i in nbrs], dim=1)
            qt = _heads(q[:, t], self.n_heads)
            out = _attend(qt, _heads(kt, self.n_heads), _heads(vt, self.n_heads))
            outs.append(_unheads(out))
        return self.proj(torch.stack(outs, dim=1))


class FrameModulation(nn.Module):
    """Zero-initialized affine map from a camera token to per-frame
    dimension-wise (scale, shift, gate) factors."""

    def __init__(self, width: int):
        super().__init__()
        self.proj = nn.Linear(width, 3 * width)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, camera: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        scale, shift, gate = self.proj(camera).chunk(3, dim=-1)
        return scale, shift, gate


def framewise_modulate(visual: torch.Tensor, camera: torch.Tensor, sublayer,
                       regressor: FrameModulation) -> torch.Tensor:
    """x_t + (1 + gate_t) * f(x_t * (1 + scale_t) + shift_t), per frame.

    At initialization the regressor outputs exact zeros, so this reduces to
    the plain residual sublayer x + f(x), bit for bit.
    """
    scale, shift, gate = regressor(camera)
    scale = scale.unsqueeze(2)
    shift = shift.unsqueeze(2)
    gate = gate.unsqueeze(2)
    return visual + (1.0 + gate) * sublayer(visual * (1.0 + scale) + shift)


class FeedForward(nn.Module):
    """Pre-norm token-wise MLP; returns the sublayer output only."""

    def __init__(self, width: int, ratio: int = 4):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, ratio * width)
        self.fc2 = nn.Linear(ratio * width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(self.norm(x))))


class DecoderBlock(nn.Module):
    """One decoder block: video-camera attention, then modulated
    cross-neighbor attention, then a modulated feed-forward.

    Camera tokens skip cross-neighbor attention entirely and pass through the
    shared feed-forward without modulation. Ablation switches disable
    modulation, cross-neighbor attention, or the causal restriction.
    """

    def __init__(self, width: int, n_heads: int, *, modulation: bool = True,
                 cna: bool = True, ffn_ratio: int = 4, rope_base: float = 10000.0):
        super().__init__()
        self.use_modulation = modulation
        self.use_cna = cna
        self.vca = VideoCameraAttention(width, n_heads, rope_base=rope_base)
        self.cna = CrossNeighborAttention(width, n_heads) if cna else None
        self.ffn = FeedForward(width, ratio=ffn_ratio)
        if modulation:
            self.mod_cna = FrameModulation(width) if cna else None
            self.mod_ffn = FrameModulation(width)

    def forward(self, state: TokenState, mask: torch.Tensor) -> TokenState:
        state = self.vca(state, mask)
        visual, camera = state.visual, state.camera
        if self.use_cna:
            if self.use_modulation:
                visual = framewise_modulate(visual, camera, self.cna, self.mod_cna)
            else:
                visual = visual + self.cna(visual)
        if self.use_modulation:
            visual = framewise_modulate(visual, camera, self.ffn, self.mod_ffn)
        else:
            visual = visual + self.ffn(visual)
        camera = camera + self.ffn(camera)
        return TokenState(visual=visual, camera=camera, grid_h=state.grid_h, grid_w=state.grid_w)


class EncoderBlock(nn.Module):
    """Per-frame pre-norm self-attention block with 2D rotary phases."""

    def __init__(self, width: int, n_heads: int, ffn_ratio: int = 4, rope_base: float = 10000.0):
        super().__init__()
        if width % n_heads != 0:
            raise ContractViolation(f"width {width} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.rope_base = rope_base
        self.norm = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width, bias=False)
        self.proj = nn.Linear(width, width, bias=False)
        self.ffn = FeedForward(width, ratio=ffn_ratio)

    def forward(self, tokens: torch.Tensor, grid_h: int, grid_w: int) -> torch.Tensor:
        # tokens: (N, L, C) with frames folded into the batch dim.
        h = self.norm(tokens)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q, k, v = (_heads(t, self.n_heads) for t in (q, k, v))
        cos, sin = _grid_rope(grid_h, grid_w, q.shape[-1], self.rope_base, tokens.device)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        tokens = tokens + self.proj(_unheads(_attend(q, k, v)))
        return tokens + self.ffn(tokens)


def _grid_rope(grid_h: int, grid_w: int, head_dim: int, base: float, device):
    if head_dim % 4 != 0:
        raise ContractViolation(f"head dim must be divisible by 4 for 2D rotary phases, got {head_dim}")
    rows = torch.arange(grid_h, device=device).repeat_interleave(grid_w)
    cols = torch.arange(grid_w, device=device).repeat(grid_h)
    angles = torch.cat((_rope_angles(rows, head_dim // 2, base),
                        _rope_angles(cols, head_dim // 2, base)), dim=-1)
    return angles.cos(), angles.sin()
