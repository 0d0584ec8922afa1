"""Procedural synthetic scenes: dataset, geometry teacher, and oracle.

A scene is a set of colored, lightly decorated ellipsoidal primitives inside
a bounded volume, observed by a smooth camera trajectory (a spline through
random keyposes with a bounded total arc). Every asset is a pure function of
(seed, config): rendered frames, exact first-surface point maps (ray-ellipsoid
intersection against the primitive surfaces), binary hit confidence, and
ground-truth poses.

Conventions carried by every emitted sample: poses are camera-to-world with
frame 1 as the canonical space and are scaled so the last frame's translation
has unit norm; point maps live in that same normalized canonical frame.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dualquat, gsplat
from .numerics import ContractViolation

log = logging.getLogger(__name__)


class DataError(RuntimeError):
    """Unusable external input or an unsatisfiable generation config."""


@dataclass
class FrameSequence:
    """Model input: T frames (3, H, W) in [0,1] with optional intrinsics."""

    frames: torch.Tensor                       # (T, 3, H, W)
    intrinsics: torch.Tensor | None = None     # (T, 4) as (fx, fy, cx, cy)
    frame_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ContractViolation(f"frames must be (T,3,H,W), got {tuple(self.frames.shape)}")
        if not self.frame_indices:
            self.frame_indices = list(range(self.frames.shape[0]))

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class TargetView:
    image: torch.Tensor      # (3, H, W)
    pose: torch.Tensor       # (8,) camera-to-world in the sample's canonical frame
    intrinsics: torch.Tensor  # (4,)
    frame_index: int = -1


@dataclass
class SceneSample:
    """One training/evaluation datum with exact ground truth."""

    frames: FrameSequence
    gt_poses: torch.Tensor       # (T, 8), first exactly identity, unit-norm last translation
    gt_pointmaps: torch.Tensor   # (T, H, W, 3) in the normalized canonical frame
    gt_valid: torch.Tensor       # (T, H, W) bool, True where a surface was hit
    gt_confidence: torch.Tensor  # (T, H, W), 1.0 on hits, 0.0 on background
    target_views: list[TargetView]
    scene_id: str
    seed: int
    # location of this sample inside its parent scene, for oracle lookups
    parent_pose: torch.Tensor | None = None  # pose of this sample's frame 1 in parent canonical frame
    parent_scale: float = 1.0                # translation scale relative to the parent sample

    @property
    def view_count(self) -> int:
        return len(self.frames)


@dataclass
class SceneGenConfig:
    image_size: int = 32
    n_frames: int = 25
    min_primitives: int = 50
    max_primitives: int = 110
    decor_per_primitive: int = 3
    volume_radius: float = 1.3
    scale_range: tuple[float, float] = (0.12, 0.40)
    opacity_range: tuple[float, float] = (0.9, 0.99)
    camera_distance: tuple[float, float] = (2.6, 3.4)
    arc_deg_range: tuple[float, float] = (14.0, 30.0)
    surface_level: float = 1.0    # Mahalanobis level treated as the solid surface
    focal_factor: float = 1.1
    keyposes: int = 4
    max_retries: int = 8
    min_coverage: float = 0.05

    def __post_init__(self):
        if not (1 <= self.min_primitives <= self.max_primitives):
            raise ContractViolation("invalid primitive count range")
        if self.n_frames < 2:
            raise ContractViolation("a scene needs at least two frames")

    @property
    def intrinsics(self) -> torch.Tensor:
        s = self.image_size
        f = self.focal_factor * s
        return torch.tensor([f, f, s / 2.0, s / 2.0], dtype=torch.float32)


# --- internal scene description ---------------------------------------------

@dataclass
class _SceneSpec:
    centers: np.ndarray     # (n, 3) primitive centers (world units)
    scales: np.ndarray      # (n, 3)
    rotations: np.ndarray   # (n, 4) unit quaternions (w, x, y, z)
    colors: np.ndarray      # (n, 3)
    opacities: np.ndarray   # (n,)
    decor_centers: np.ndarray
    decor_scales: np.ndarray
    decor_rotations: np.ndarray
    decor_colors: np.ndarray
    decor_opacities: np.ndarray
    cam_to_world: np.ndarray  # (F, 4, 4)


def _random_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def _quat_rotmats(q: np.ndarray) -> np.ndarray:
    return dualquat.quat_to_rotmat(torch.from_numpy(q)).numpy()

def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    out = np.choose(i[:, None] * 0 + i[:, None], [np.stack([v, t, p], -1), np.stack([q, v, p], -1),
                                                  np.stack([p, v, t], -1), np.stack([p, q, v], -1),
                                                  np.stack([t, p, v], -1), np.stack([v, p, q], -1)])
    return out


def _catmull_rom(points: np.ndarray, n: int) -> np.ndarray:
    """Centripetal-free uniform Catmull-Rom through all points, n samples."""
    k = points.shape[0]
    if k == 1:
        return np.repeat(points, n, axis=0)
    padded = np.concatenate([points[:1], points, points[-1:]], axis=0)
    ts = np.linspace(0.0, k - 1.0, n)
    out = np.empty((n, points.shape[1]))
    for idx, t in enumerate(ts):
        seg = min(int(np.floor(t)), k - 2)
        u = t - seg
        p0, p1, p2, p3 = padded[seg], padded[seg + 1], padded[seg + 2], padded[seg + 3]
        out[idx] = 0.5 * ((2 * p1) + (-p0 + p2) * u + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u ** 2
                          + (-p0 + 3 * p1 - 3 * p2 + p3) * u ** 3)
    return out


def _look_at(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation: +z toward the target, right-handed frame."""
    z = target - position
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 1.0, 0.0])
    if abs(np.dot(up, z)) > 0.98:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _build_scene(seed: int, config: SceneGenConfig) -> _SceneSpec:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.min_primitives, config.max_primitives + 1))

    radii = config.volume_radius * rng.uniform(0.1, 1.0, size=n) ** (1.0 / 3.0)
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    centers = radii[:, None] * dirs
    lo, hi = config.scale_range
    scales = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(n, 3)))
    rotations = _random_quats(rng, n)
    colors = _hsv_to_rgb(rng.uniform(0, 1, n), rng.uniform(0.55, 1.0, n), rng.uniform(0.65, 1.0, n))
    opacities = rng.uniform(*config.opacity_range, size=n)

    # decorations: small flattened blobs pinned to the parent surface
    d = config.decor_per_primitive
    if d > 0:
        u = rng.normal(size=(n, d, 3))
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        R = _quat_rotmats(rotations)  # (n, 3, 3)
        surface = config.surface_level * np.einsum("nij,ndj->ndi", R, scales[:, None, :] * u)
        decor_centers = centers[:, None, :] + surface
        decor_scale = 0.25 * scales.min(axis=-1)
        decor_scales = np.repeat(decor_scale[:, None, None], d, axis=1) * np.ones((1, 1, 3))
        decor_rotations = _random_quats(rng, n * d).reshape(n, d, 4)
        jitter = rng.uniform(0.35, 1.45, size=(n, d, 1))
        decor_colors = np.clip(colors[:, None, :] * jitter, 0.0, 1.0)
        decor_opacities = rng.uniform(0.85, 0.98, size=(n, d))
        spec_decor = (decor_centers.reshape(-1, 3), decor_scales.reshape(-1, 3),
                      decor_rotations.reshape(-1, 4), decor_colors.reshape(-1, 3),
                      decor_opacities.reshape(-1))
    else:
        spec_decor = (np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0))

    # trajectory: keypose positions on a bounded arc around the volume
    base = rng.normal(size=3)
    base /= np.linalg.norm(base)
    axis = np.cross(base, rng.normal(size=3))
    axis /= np.linalg.norm(axis)
    arc = np.deg2rad(rng.uniform(*config.arc_deg_range))
    d0 = rng.uniform(*config.camera_distance)
    k = config.keyposes
    key_pos = np.empty((k, 3))
    key_tgt = np.empty((k, 3))
    for i, frac in enumerate(np.linspace(0.0, 1.0, k)):
        ang = arc * frac
        c, s = np.cos(ang), np.sin(ang)
        direction = c * base + s * np.cross(axis, base) + (1 - c) * np.dot(axis, base) * axis
        dist = d0 * (1.0 + rng.uniform(-0.08, 0.08))
        key_pos[i] = direction * dist + rng.normal(scale=0.05, size=3)
        key_tgt[i] = rng.normal(scale=0.12, size=3)
    positions = _catmull_rom(key_pos, config.n_frames)
    targets = _catmull_rom(key_tgt, config.n_frames)
    cam_to_world = np.zeros((config.n_frames, 4, 4))
    for t in range(config.n_frames):
        cam_to_world[t, :3, :3] = _look_at(positions[t], targets[t])
        cam_to_world[t, :3, 3] = positions[t]
        cam_to_world[t, 3, 3] = 1.0

    return _SceneSpec(centers=centers, scales=scales, rotations=rotations, colors=colors,
                      opacities=opacities, decor_centers=spec_decor[0], decor_scales=spec_decor[1],
                      decor_rotations=spec_decor[2], decor_colors=spec_decor[3],
                      decor_opacities=spec_decor[4], cam_to_world=cam_to_world)


def _world_gaussians(spec: _SceneSpec) -> gsplat.GaussianSet:
    means = np.concatenate([spec.centers, spec.decor_centers], axis=0)
    scales = np.concatenate([spec.scales, spec.decor_scales], axis=0)
    rots = np.concatenate([spec.rotations, spec.decor_rotations], axis=0)
    colors = np.concatenate([spec.colors, spec.decor_colors], axis=0)
    opac = np.concatenate([spec.opacities, spec.decor_opacities], axis=0)
    return gsplat.GaussianSet(
        means=torch.from_numpy(means).float(),
        opacity=torch.from_numpy(opac).float(),
        rotation=torch.from_numpy(rots).float(),
        scale=torch.from_numpy(scales).float(),
        color=torch.from_numpy(colors).float(),
    )


def _raycast_pointmaps(spec: _SceneSpec, config: SceneGenConfig
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Exact first-surface camera-local points per frame.

    Returns (points (F, H, W, 3) in each camera's own frame, hit (F, H, W)).
    Only the solid primitives define the surface; decorations sit on it.
    """
    size = config.image_size
    rays = gsplat.pixel_rays(config.intrinsics, size, size, dtype=torch.float64).numpy().reshape(-1, 3)
    kappa = config.surface_level
    R_prim = _quat_rotmats(spec.rotations)  # (n, 3, 3)
    A = R_prim.transpose(0, 2, 1) / (kappa * spec.scales)[:, :, None]  # (n, 3, 3), rows scaled

    F = spec.cam_to_world.shape[0]
    points = np.zeros((F, size * size, 3))
    hits = np.zeros((F, size * size), dtype=bool)
    for t in range(F):
        Rcw = spec.cam_to_world[t, :3, :3]
        origin = spec.cam_to_world[t, :3, 3]
        d_world = rays @ Rcw.T  # (P, 3)
        y0 = np.einsum("nij,nj->ni", A, origin - spec.centers)  # (n, 3)
        U = np.einsum("nij,pj->npi", A, d_world)  # (n, P, 3)
        a = (U * U).sum(-1)
        b = 2.0 * np.einsum("npi,ni->np", U, y0)
        c = ((y0 * y0).sum(-1) - 1.0)[:, None]
        disc = b * b - 4.0 * a * c
        ok = disc > 0
        tau = (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2.0 * a)
        tau = np.where(ok & (tau > gsplat.NEAR_PLANE), tau, np.inf)
        tau_best = tau.min(axis=0)
        hit = np.isfinite(tau_best)
        tau_fin = np.where(hit, tau_best, 0.0)
        points[t] = tau_fin[:, None] * rays  # camera-local: rays have unit depth
        hits[t] = hit
    return points.reshape(F, size, size, 3), hits.reshape(F, size, size)


def _relative_poses(cam_to_world: np.ndarray, first: int, indices: list[int]) -> np.ndarray:
    inv_first = np.linalg.inv(cam_to_world[first])
    return np.stack([inv_first @ cam_to_world[i] for i in indices])


class SceneGenerationError(DataError):
    pass


def _accepted_scene(seed: int, config: SceneGenConfig
                    ) -> tuple[_SceneSpec, np.ndarray, np.ndarray]:
    """Draw (with bounded redraws) until the first frame sees enough geometry."""
    for attempt in range(config.max_retries + 1):
        draw_seed = seed + 1_000_003 * attempt
        spec = _build_scene(draw_seed, config)
        cam_points, hits = _raycast_pointmaps(spec, config)
        if hits[0].mean() >= config.min_coverage:
            return spec, cam_points, hits
        log.warning("scene seed %d attempt %d: coverage %.3f below %.3f, redrawing",
                    seed, attempt, hits[0].mean(), config.min_coverage)
    raise SceneGenerationError(
        f"seed {seed}: no draw reached frustum coverage {config.min_coverage} "
        f"after {config.max_retries + 1} attempts")


def generate_scene(seed: int, config: SceneGenConfig) -> SceneSample:
    """Deterministically build the full scene sample for a seed.

    The sample spans all generated frames, canonicalized to frame 1 and
    normalized to a unit last-frame translation. Degenerate draws (no visible
    geometry in the first frame) retry with derived seeds a bounded number of
    times before raising.
    """
    spec, cam_points, hits = _accepted_scene(seed, config)

    size = config.image_size
    world_gs = _world_gaussians(spec)
    frames = []
    with torch.no_grad():
        for t in range(config.n_frames):
            pose_mat = torch.from_numpy(spec.cam_to_world[t]).float()
            R = pose_mat[:3, :3].transpose(0, 1)
            cam = gsplat.CameraModel(*[float(v) for v in config.intrinsics],
                                     width=size, height=size, R=R, t=-R @ pose_mat[:3, 3])
            frames.append(gsplat.render(world_gs, cam).image.permute(2, 0, 1))
    frames_t = torch.stack(frames)

    rel = _relative_poses(spec.cam_to_world, 0, list(range(config.n_frames)))  # (F,4,4)
    sigma = float(np.linalg.norm(rel[-1, :3, 3]))
    if sigma < 1e-8:
        raise SceneGenerationError(f"seed {seed}: degenerate trajectory (no net camera motion)")

    poses = _poses_to_dq(rel, 1.0 / sigma)
    points_canon = np.einsum("fij,fhwj->fhwi", rel[:, :3, :3], cam_points) + rel[:, None, None, :3, 3]
    points_canon = points_canon / sigma
    points_canon[~hits] = 0.0

    intr = config.intrinsics.unsqueeze(0).repeat(config.n_frames, 1)
    return SceneSample(
        frames=FrameSequence(frames=frames_t, intrinsics=intr, frame_indices=list(range(config.n_frames))),
        gt_poses=poses,
        gt_pointmaps=torch.from_numpy(points_canon).float(),
        gt_valid=torch.from_numpy(hits.copy()),
        gt_confidence=torch.from_numpy(hits.astype(np.float32)),
        target_views=[],
        scene_id=f"scene{seed:08d}",
        seed=seed,
        parent_pose=dualquat.dq_identity(),
        parent_scale=1.0,
    )


def _poses_to_dq(rel: np.ndarray, translation_scale: float) -> torch.Tensor:
    R = torch.from_numpy(rel[:, :3, :3].copy())
    t = torch.from_numpy(rel[:, :3, 3].copy()) * translation_scale
    poses = dualquat.se3_to_dq(R, t).float()
    poses[0] = dualquat.dq_identity()
    return poses


def oracle_gaussians(seed: int, config: SceneGenConfig,
                     sample: SceneSample | None = None) -> gsplat.GaussianSet:
    """Ground-truth Gaussians in a sample's normalized canonical frame.

    Without a sample this is the full scene's frame; with a clip sample the
    set is additionally moved into the clip's canonical frame and rescaled.
    Redraws mirror :func:`generate_scene`, so the oracle matches what the
    sample actually rendered.
    """
    spec, _, _ = _accepted_scene(seed, config)
    world_gs = _world_gaussians(spec)
    inv_first = np.linalg.inv(spec.cam_to_world[0])
    sigma = float(np.linalg.norm((inv_first @ spec.cam_to_world[-1])[:3, 3]))
    R0 = torch.from_numpy(inv_first[:3, :3].copy()).float()
    t0 = torch.from_numpy(inv_first[:3, 3].copy()).float()
    gs = gsplat.transform_gaussians(world_gs, R0, t0, scale_factor=1.0 / sigma)
    if sample is not None and sample.parent_pose is not None:
        R, t = dualquat.dq_to_se3(sample.parent_pose)
        # move into the clip frame: inverse of the clip's first pose, then rescale
        Ri = R.transpose(0, 1)
        gs = gsplat.transform_gaussians(gs, Ri.float(), (-Ri @ t).float(),
                                        scale_factor=1.0 / sample.parent_scale)
    return gs


# --- clip sampling ------------------------------------------------------------

def clip_indices(view_count: int, interval: int, start: int = 0) -> list[int]:
    return [start + i * interval for i in range(view_count)]


def sample_training_clip(sample: SceneSample, view_count: int, interval: int, *,
                         start: int = 0, n_targets: int = 2) -> SceneSample:
    """Slice an evenly spaced clip plus in-span target views out of a sample.

    The clip is re-canonicalized to its own first frame and re-normalized to a
    unit last-frame translation; point maps and target poses move with it.
    """
    if view_count < 1 or interval < 1:
        raise ContractViolation("view_count and interval must be positive")
    total = sample.view_count
    inputs = clip_indices(view_count, interval, start)
    if inputs[-1] >= total or start < 0:
        raise ContractViolation(
            f"clip span [{start}, {inputs[-1]}] overflows trajectory of length {total}")

    in_span = [i for i in range(inputs[0], inputs[-1] + 1) if i not in inputs]
    candidates = in_span if in_span else [i for i in range(total) if i not in inputs]
    n_t = min(n_targets, len(candidates))
    picks = [candidates[round(j * (len(candidates) - 1) / max(1, n_t - 1))] for j in range(n_t)] if n_t else []
    picks = sorted(dict.fromkeys(picks))

    first = inputs[0]
    p_first_inv = dualquat.dq_inverse(sample.gt_poses[first])
    rel = dualquat.dq_mul(p_first_inv.expand(len(inputs), 8), sample.gt_poses[inputs], validate=False)
    sigma = float(dualquat.dq_translation(rel[-1]).norm())
    if sigma < 1e-8:
        raise ContractViolation("degenerate clip: last input frame has no net motion")
    poses = dualquat.dq_scale_translation(rel, 1.0 / sigma)
    poses = torch.cat((dualquat.dq_identity().unsqueeze(0), poses[1:]), dim=0)

    R_first, t_first = dualquat.dq_to_se3(sample.gt_poses[first])
    Ri = R_first.transpose(0, 1)
    pts = sample.gt_pointmaps[inputs]
    pts = (pts @ Ri.transpose(0, 1) + (Ri @ -t_first)) / sigma
    valid = sample.gt_valid[inputs]
    pts = pts * valid.unsqueeze(-1)

    targets = []
    for idx in picks:
        rel_t = dualquat.dq_mul(p_first_inv, sample.gt_poses[idx], validate=False)
        pose_t = dualquat.dq_scale_translation(rel_t, 1.0 / sigma)
        targets.append(TargetView(image=sample.frames.frames[idx], pose=pose_t,
                                  intrinsics=sample.frames.intrinsics[idx],
                                  frame_index=sample.frames.frame_indices[idx]))

    parent_pose = sample.gt_poses[first]
    if sample.parent_pose is not None:
        parent_pose = dualquat.dq_mul(
            sample.parent_pose,
            dualquat.dq_scale_translation(sample.gt_poses[first], sample.parent_scale),
            validate=False)

    intr = sample.frames.intrinsics[inputs] if sample.frames.intrinsics is not None else None
    return SceneSample(
        frames=FrameSequence(frames=sample.frames.frames[inputs], intrinsics=intr,
                             frame_indices=[sample.frames.frame_indices[i] for i in inputs]),
        gt_poses=poses,
        gt_pointmaps=pts,
        gt_valid=valid,
        gt_confidence=sample.gt_confidence[inputs],
        target_views=targets,
        scene_id=f"{sample.scene_id}/clip{start}+{interval}x{view_count}",
        seed=sample.seed,
        parent_pose=parent_pose,
        parent_scale=sample.parent_scale * sigma,
    )


# --- external inputs ----------------------------------------------------------

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}


def ingest_image_folder(path: str | Path, image_size: int,
                        intrinsics: torch.Tensor | None = None) -> FrameSequence:
    """Decode a folder of equally sized images, lexicographic frame order.

    Images are center-cropped to square and resized to the configured
    resolution. Non-image files are skipped with a warning; unreadable or
    mixed-size inputs fail naming the offending file.
    """
    from PIL import Image

    folder = Path(path)
    if not folder.is_dir():
        raise DataError(f"not a directory: {folder}")
    frames = []
    base_size = None
    for f in sorted(folder.iterdir()):
        if not f.is_file():
            continue
        if f.suffix.lower() not in _IMAGE_SUFFIXES:
            log.warning("skipping non-image file %s", f)
            continue
        try:
            with Image.open(f) as im:
                im = im.convert("RGB")
                if base_size is None:
                    base_size = im.size
                elif im.size != base_size:
                    raise DataError(f"mixed image sizes: {f} is {im.size}, expected {base_size}")
                w, h = im.size
                side = min(w, h)
                left, top = (w - side) // 2, (h - side) // 2
                im = im.crop((left, top, left + side, top + side)).resize(
                    (image_size, image_size), Image.LANCZOS)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"unreadable image {f}: {exc}") from exc
        frames.append(torch.from_numpy(arr).permute(2, 0, 1))
    if not frames:
        raise DataError(f"no images found in {folder}")
    if intrinsics is not None and intrinsics.ndim == 1:
        intrinsics = intrinsics.unsqueeze(0).repeat(len(frames), 1)
    return FrameSequence(frames=torch.stack(frames), intrinsics=intrinsics)


# --- scene directory serialization ---------------------------------------------

def save_scene_dir(sample: SceneSample, path: str | Path, config: SceneGenConfig | None = None) -> None:
    """One directory per scene: frames/NNN.png, poses.txt, intrinsics.txt, meta.json."""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for i in range(sample.view_count):
        gsplat.save_image_png(root / "frames" / f"{i:03d}.png",
                              sample.frames.frames[i].permute(1, 2, 0))
    dualquat.write_pose_file(root / "poses.txt", sample.gt_poses)
    if sample.frames.intrinsics is not None:
        lines = [" ".join(f"{float(v):.17g}" for v in row) for row in sample.frames.intrinsics]
        (root / "intrinsics.txt").write_text("\n".join(lines) + "\n")
    meta = {"scene_id": sample.scene_id, "seed": sample.seed,
            "n_frames": sample.view_count,
            "image_size": sample.frames.frames.shape[-1]}
    if config is not None:
        meta["config"] = dataclasses.asdict(config)
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_scene_dir(path: str | Path, image_size: int | None = None
                   ) -> tuple[FrameSequence, torch.Tensor | None]:
    root = Path(path)
    frames_dir = root / "frames"
    if not frames_dir.is_dir():
        raise DataError(f"{root} is not a scene directory (missing frames/)")
    intr = None
    intr_file = root / "intrinsics.txt"
    if intr_file.exists():
        rows = [[float(v) for v in line.split()] for line in intr_file.read_text().splitlines() if line.strip()]
        intr = torch.tensor(rows, dtype=torch.float32)
    if image_size is None:
        meta_file = root / "meta.json"
        image_size = json.loads(meta_file.read_text())["image_size"] if meta_file.exists() else 32
    seq = ingest_image_folder(frames_dir, image_size, intrinsics=intr)
    poses = None
    if (root / "poses.txt").exists():
        poses = dualquat.read_pose_file(root / "poses.txt")
    return seq, poses
