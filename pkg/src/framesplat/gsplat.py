"""3D Gaussian primitives and a brute-force differentiable splat renderer.

The renderer projects every Gaussian with the standard EWA approximation
(3D covariance from rotation+scale, perspective Jacobian to 2D), depth-sorts
once per camera, and alpha-composites front to back per pixel. No tiling or
sigma-radius culling: the dense pixel-by-Gaussian evaluation keeps gradients
smooth everywhere except depth-order ties, which are broken by Gaussian
index.

Coordinate conventions: cameras look down +z in their own frame; the pixel
(row i, col j) has center (j + 0.5, i + 0.5) in image coordinates, and its
ray is ((j + 0.5 - cx) / fx, (i + 0.5 - cy) / fy, 1).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dualquat import dq_to_se3, quat_mul, quat_to_rotmat, rotmat_to_quat
from .numerics import ContractViolation

NEAR_PLANE = 1e-3
COV2D_EPS = 1e-6
ALPHA_CLAMP = 0.999
SH_C1 = 0.48860251190291992


class PlyParseError(ValueError):
    """Malformed or truncated PLY input; carries the failing byte offset."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class GaussianSet:
    """Flat set of 3D Gaussians with per-primitive provenance.

    `color` holds ``3 * (sh_degree + 1)**2`` coefficients per Gaussian,
    grouped as [dc_rgb, then one rgb triple per higher basis function];
    at degree 0 it is plain RGB in [0, 1].
    """

    means: torch.Tensor      # (G, 3)
    opacity: torch.Tensor    # (G,)
    rotation: torch.Tensor   # (G, 4) unit quaternion
    scale: torch.Tensor      # (G, 3) positive
    color: torch.Tensor      # (G, 3 * (sh_degree+1)**2)
    sh_degree: int = 0
    source_frame: torch.Tensor = None  # (G,) int64
    source_pixel: torch.Tensor = None  # (G,) int64

    def __post_init__(self):
        g = self.means.shape[0]
        if self.source_frame is None:
            self.source_frame = torch.zeros(g, dtype=torch.int64)
        if self.source_pixel is None:
            self.source_pixel = torch.arange(g, dtype=torch.int64)
        expected = 3 * (self.sh_degree + 1) ** 2
        if self.color.shape != (g, expected):
            raise ContractViolation(
                f"color shape {tuple(self.color.shape)} != ({g}, {expected}) for degree {self.sh_degree}")

    def __len__(self) -> int:
        return self.means.shape[0]

    def validate(self, tol: float = 1e-6) -> None:
        if (self.rotation.norm(dim=-1) - 1).abs().max().item() > tol:
            raise ContractViolation("non-unit Gaussian rotation quaternion")
        if (self.scale <= 0).any():
            raise ContractViolation("non-positive Gaussian scale")
        if ((self.opacity <= 0) | (self.opacity >= 1)).any():
            raise ContractViolation("opacity outside (0, 1)")

    def detach(self) -> "GaussianSet":
        return GaussianSet(self.means.detach(), self.opacity.detach(), self.rotation.detach(),
                           self.scale.detach(), self.color.detach(), self.sh_degree,
                           self.source_frame, self.source_pixel)


@dataclass
class CameraModel:
    """Pinhole camera: intrinsics in pixels, extrinsics world(canonical)->camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: torch.Tensor  # (3, 3)
    t: torch.Tensor  # (3,)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractViolation("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ContractViolation("principal point outside image bounds")

    @property
    def center(self) -> torch.Tensor:
        """Camera center in world coordinates."""
        return -self.R.transpose(0, 1) @ self.t


def camera_from_pose(pose_dq: torch.Tensor, intrinsics: torch.Tensor, width: int, height: int) -> CameraModel:
    """Build a render camera from a camera-to-world pose and (fx fy cx cy)."""
    R_c2w, t_c2w = dq_to_se3(pose_dq)
    R = R_c2w.transpose(-1, -2)
    t = -R @ t_c2w
    fx, fy, cx, cy = (float(v) for v in intrinsics)
    return CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height, R=R, t=t)


def pixel_rays(intrinsics: torch.Tensor, height: int, width: int,
               dtype=torch.float32, device=None) -> torch.Tensor:
    """(H, W, 3) unit-depth ray directions in the camera frame."""
    fx, fy, cx, cy = (float(v) for v in intrinsics)
    ys = torch.arange(height, dtype=dtype, device=device) + 0.5
    xs = torch.arange(width, dtype=dtype, device=device) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack(((gx - cx) / fx, (gy - cy) / fy, torch.ones_like(gx)), dim=-1)


def covariance3d(rotation: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Sigma = R diag(s^2) R^T per Gaussian."""
    R = quat_to_rotmat(rotation)
    return R @ torch.diag_embed(scale ** 2) @ R.transpose(-1, -2)


def project(means: torch.Tensor, rotation: torch.Tensor, scale: torch.Tensor,
            cam: CameraModel) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """EWA projection of world-frame Gaussians into 2D image space.

    Returns (mean2d (G,2), cov2d (G,3) packed as (a, b, c) of [[a,b],[b,c]],
    depth (G,), in_front (G,) bool). Gaussians behind the near plane are
    flagged, not raised.
    """
    R = cam.R.to(means.dtype)
    t = cam.t.to(means.dtype)
    p_cam = means @ R.transpose(0, 1) + t
    x, y, z = p_cam.unbind(-1)
    in_front = z > NEAR_PLANE
    zs = torch.where(in_front, z, torch.ones_like(z))  # keep the math finite for culled entries
    mean2d = torch.stack((cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy), dim=-1)

    cov_cam = R @ covariance3d(rotation, scale) @ R.transpose(0, 1)
    zero = torch.zeros_like(zs)
    J = torch.stack((
        torch.stack((cam.fx / zs, zero, -cam.fx * x / zs ** 2), dim=-1),
        torch.stack((zero, cam.fy / zs, -cam.fy * y / zs ** 2), dim=-1),
    ), dim=-2)  # (G, 2, 3)
    cov2 = J @ cov_cam @ J.transpose(-1, -2)
    a = cov2[..., 0, 0] + COV2D_EPS
    b = 0.5 * (cov2[..., 0, 1] + cov2[..., 1, 0])
    c = cov2[..., 1, 1] + COV2D_EPS
    return mean2d, torch.stack((a, b, c), dim=-1), z, in_front


def _view_colors(gaussians: GaussianSet, cam_center: torch.Tensor) -> torch.Tensor:
    """Per-Gaussian RGB for this view; degree-1 coefficients add a linear
    direction term, degree 0 is the stored RGB directly."""
    c = gaussians.color
    if gaussians.sh_degree == 0:
        return c
    if gaussians.sh_degree == 1:
        d = gaussians.means.detach() - cam_center.to(gaussians.means.dtype)
        d = d / d.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        dx, dy, dz = d.unbind(-1)
        dc, c1, c2, c3 = c[:, 0:3], c[:, 3:6], c[:, 6:9], c[:, 9:12]
        rgb = dc + SH_C1 * (-dy.unsqueeze(-1) * c1 + dz.unsqueeze(-1) * c2 - dx.unsqueeze(-1) * c3)
        return rgb.clamp(0.0, 1.0)
    raise ContractViolation(f"sh_degree {gaussians.sh_degree} rendering not supported (max 1)")


@dataclass
class RenderResult:
    image: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W)


def _composite(gaussians: GaussianSet, cam: CameraModel, px: torch.Tensor, py: torch.Tensor,
               background: torch.Tensor, sort_override: torch.Tensor | None = None
               ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Front-to-back compositing at the given pixel centers.

    The per-pixel Gaussian exponent is a quadratic in (px, py), so it is
    evaluated as one (P,6)x(6,G) matmul over the pixel features
    [px^2, py^2, px*py, px, py, 1] against per-Gaussian coefficients.
    `sort_override` replaces the depth-derived compositing order (a
    permutation of the visible Gaussians); gradient verification uses it to
    pin the order while probing near sort ties.
    """
    mean2d, cov2d, depth, in_front = project(gaussians.means, gaussians.rotation, gaussians.scale, cam)
    # zero-opacity primitives are culled with the frustum so they cannot
    # perturb reduction order; they contribute nothing regardless
    keep = (in_front & (gaussians.opacity > 0)).nonzero(as_tuple=True)[0]
    P = px.shape[0]
    dtype = px.dtype
    if keep.numel() == 0:
        zero = torch.zeros(P, dtype=dtype, device=px.device)
        return background.unsqueeze(0).expand(P, 3).clone(), zero, zero.clone()

    colors = _view_colors(gaussians, cam.center)
    mean2d, cov2d, depth = mean2d[keep], cov2d[keep], depth[keep]
    opacity, colors = gaussians.opacity[keep], colors[keep]

    if sort_override is not None:
        order = sort_override
    else:
        order = torch.argsort(depth.detach(), stable=True)  # ties break by index
    mean2d, cov2d, depth = mean2d[order], cov2d[order], depth[order]
    opacity, colors = opacity[order], colors[order]

    a, b, c = cov2d.unbind(-1)
    det = a * c - b * b
    A1 = -0.5 * c / det
    A2 = b / det
    A3 = -0.5 * a / det
    mx, my = mean2d[:, 0], mean2d[:, 1]
    coeff = torch.stack((
        A1, A3, A2,
        -2.0 * A1 * mx - A2 * my,
        -2.0 * A3 * my - A2 * mx,
        A1 * mx * mx + A3 * my * my + A2 * mx * my,
    ), dim=0)  # (6, G)
    feats = torch.stack((px * px, py * py, px * py, px, py, torch.ones_like(px)), dim=1)  # (P, 6)
    power = feats @ coeff
    alpha = (opacity.unsqueeze(0) * torch.exp(power)).clamp(max=ALPHA_CLAMP)

    trans = torch.cumprod(1.0 - alpha, dim=1)
    trans = torch.cat((torch.ones_like(trans[:, :1]), trans[:, :-1]), dim=1)
    weights = alpha * trans  # per-pixel in [0,1], summing to <= 1

    rgb = weights @ colors
    wsum = weights.sum(dim=1)
    rgb = rgb + background.unsqueeze(0) * (1.0 - wsum).unsqueeze(-1)
    return rgb, wsum, weights @ depth


def composite_weights(gaussians: GaussianSet, cam: CameraModel,
                      pixel_index: torch.Tensor) -> torch.Tensor:
    """Per-pixel compositing weights (P, G_in_front) in depth order, for
    verification of the weight invariants."""
    dtype = gaussians.means.dtype
    px = (pixel_index % cam.width).to(dtype) + 0.5
    py = torch.div(pixel_index, cam.width, rounding_mode="floor").to(dtype) + 0.5
    mean2d, cov2d, depth, in_front = project(gaussians.means, gaussians.rotation, gaussians.scale, cam)
    keep = (in_front & (gaussians.opacity > 0)).nonzero(as_tuple=True)[0]
    mean2d, cov2d, depth = mean2d[keep], cov2d[keep], depth[keep]
    opacity = gaussians.opacity[keep]
    order = torch.argsort(depth.detach(), stable=True)
    mean2d, cov2d, opacity = mean2d[order], cov2d[order], opacity[order]
    a, b, c = cov2d.unbind(-1)
    det = a * c - b * b
    dx = px.unsqueeze(1) - mean2d[:, 0].unsqueeze(0)
    dy = py.unsqueeze(1) - mean2d[:, 1].unsqueeze(0)
    power = -0.5 * (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    alpha = (opacity.unsqueeze(0) * torch.exp(power)).clamp(max=ALPHA_CLAMP)
    trans = torch.cumprod(1.0 - alpha, dim=1)
    trans = torch.cat((torch.ones_like(trans[:, :1]), trans[:, :-1]), dim=1)
    return alpha * trans


def render_pixels(gaussians: GaussianSet, cam: CameraModel, pixel_index: torch.Tensor,
                  background: torch.Tensor | None = None,
                  sort_override: torch.Tensor | None = None
                  ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Composite only the given flat pixel indices (row-major over H x W).

    Returns (rgb (P,3), alpha (P,), depth (P,)). Used by training losses to
    supervise a pixel subset without paying for the full image.
    """
    dtype = gaussians.means.dtype if len(gaussians) else torch.float32
    device = gaussians.means.device if len(gaussians) else None
    if background is None:
        background = torch.zeros(3, dtype=dtype, device=device)
    px = (pixel_index % cam.width).to(dtype) + 0.5
    py = torch.div(pixel_index, cam.width, rounding_mode="floor").to(dtype) + 0.5
    if len(gaussians) == 0:
        zero = torch.zeros(px.shape[0], dtype=dtype, device=device)
        return background.to(dtype).unsqueeze(0).expand(px.shape[0], 3).clone(), zero, zero.clone()
    return _composite(gaussians, cam, px, py, background.to(dtype), sort_override)


def render(gaussians: GaussianSet, cam: CameraModel,
           background: torch.Tensor | None = None,
           sort_override: torch.Tensor | None = None) -> RenderResult:
    """Depth-sorted front-to-back alpha compositing of all Gaussians.

    Differentiable w.r.t. every Gaussian field and the camera extrinsics away
    from depth-order ties. An empty set renders the background with zero
    alpha and depth.
    """
    H, W = cam.height, cam.width
    dtype = gaussians.means.dtype if len(gaussians) else torch.float32
    device = gaussians.means.device if len(gaussians) else None
    if background is None:
        background = torch.zeros(3, dtype=dtype, device=device)
    background = background.to(dtype)

    if len(gaussians) == 0:
        img = background.expand(H, W, 3).clone()
        zero = torch.zeros(H, W, dtype=dtype, device=device)
        return RenderResult(image=img, alpha=zero, depth=zero.clone())

    ys = torch.arange(H, dtype=dtype, device=device) + 0.5
    xs = torch.arange(W, dtype=dtype, device=device) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    rgb, wsum, depth_map = _composite(gaussians, cam, gx.reshape(-1), gy.reshape(-1), background,
                                      sort_override)
    return RenderResult(image=rgb.reshape(H, W, 3), alpha=wsum.reshape(H, W),
                        depth=depth_map.reshape(H, W))


def sort_order_for(gaussians: GaussianSet, cam: CameraModel) -> torch.Tensor:
    """The compositing permutation render() would use, computed without grad;
    feed back as `sort_override` to freeze the order across nearby inputs."""
    with torch.no_grad():
        _, _, depth, in_front = project(gaussians.means, gaussians.rotation, gaussians.scale, cam)
        keep = (in_front & (gaussians.opacity > 0)).nonzero(as_tuple=True)[0]
        return torch.argsort(depth[keep], stable=True)


def transform_gaussians(gaussians: GaussianSet, R: torch.Tensor, t: torch.Tensor,
                        scale_factor: float = 1.0) -> GaussianSet:
    """Apply a rigid motion (optionally with uniform scaling) to a set.

    Higher-order color coefficients are carried unchanged (their frame
    rotation is out of scope); positions, rotations and scales transform.
    """
    means = (gaussians.means @ R.transpose(0, 1) + t) * scale_factor
    q = rotmat_to_quat(R.to(gaussians.rotation.dtype))
    rot = quat_mul(q.expand_as(gaussians.rotation), gaussians.rotation)
    rot = rot / rot.norm(dim=-1, keepdim=True)
    return GaussianSet(means=means, opacity=gaussians.opacity, rotation=rot,
                       scale=gaussians.scale * scale_factor, color=gaussians.color,
                       sh_degree=gaussians.sh_degree, source_frame=gaussians.source_frame,
                       source_pixel=gaussians.source_pixel)


# --- PLY serialization -------------------------------------------------------
#
# Binary little-endian PLY, one vertex per Gaussian. Scalar fields are raw
# float32 values (no activation encoding), so export -> import round trips
# bit-exactly. Field order:
#   float32: x y z opacity rot_w rot_x rot_y rot_z scale_x scale_y scale_z
#   float32: c{i}_r c{i}_g c{i}_b   for i in 0 .. (sh_degree+1)^2 - 1
#   int32:   source_frame source_pixel

def _ply_property_names(sh_degree: int) -> list[str]:
    names = ["x", "y", "z", "opacity", "rot_w", "rot_x", "rot_y", "rot_z",
             "scale_x", "scale_y", "scale_z"]
    for i in range((sh_degree + 1) ** 2):
        names += [f"c{i}_r", f"c{i}_g", f"c{i}_b"]
    return names


def export_ply(gaussians: GaussianSet) -> bytes:
    g = len(gaussians)
    float_names = _ply_property_names(gaussians.sh_degree)
    header = ["ply", "format binary_little_endian 1.0",
              f"comment framesplat gaussian set, sh_degree {gaussians.sh_degree}",
              f"element vertex {g}"]
    header += [f"property float {n}" for n in float_names]
    header += ["property int source_frame", "property int source_pixel", "end_header"]
    head = ("\n".join(header) + "\n").encode("ascii")

    floats = torch.cat((gaussians.means, gaussians.opacity.unsqueeze(-1), gaussians.rotation,
                        gaussians.scale, gaussians.color), dim=-1)
    f32 = floats.detach().cpu().to(torch.float32).numpy()
    ints = torch.stack((gaussians.source_frame, gaussians.source_pixel), dim=-1)
    i32 = ints.detach().cpu().to(torch.int32).numpy()

    dtype = np.dtype([(n, "<f4") for n in float_names] +
                     [("source_frame", "<i4"), ("source_pixel", "<i4")])
    rows = np.empty(g, dtype=dtype)
    for j, n in enumerate(float_names):
        rows[n] = f32[:, j]
    rows["source_frame"] = i32[:, 0]
    rows["source_pixel"] = i32[:, 1]
    return head + rows.tobytes()


def import_ply(data: bytes) -> GaussianSet:
    end_marker = b"end_header\n"
    end = data.find(end_marker)
    if end < 0:
        raise PlyParseError("missing end_header", offset=len(data))
    body_start = end + len(end_marker)
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()
    if not header_lines or header_lines[0].strip() != "ply":
        raise PlyParseError("not a PLY file", offset=0)

    count = None
    sh_degree = 0
    props: list[tuple[str, str]] = []
    for line in header_lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "comment" and "sh_degree" in parts:
            sh_degree = int(parts[-1])
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise PlyParseError(f"unsupported element '{parts[1]}'", offset=0)
            count = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[1], parts[2]))
        elif parts[0] == "format" and parts[1] != "binary_little_endian":
            raise PlyParseError(f"unsupported format '{parts[1]}'", offset=0)
    if count is None:
        raise PlyParseError("header missing vertex element", offset=0)

    expected = ([("float", n) for n in _ply_property_names(sh_degree)] +
                [("int", "source_frame"), ("int", "source_pixel")])
    if props != expected:
        raise PlyParseError(f"unexpected property layout {props}", offset=0)

    row_size = struct.calcsize("<" + "f" * (len(props) - 2) + "ii")
    body = data[body_start:]
    if len(body) != count * row_size:
        raise PlyParseError(
            f"vertex count {count} inconsistent with body size {len(body)} "
            f"(expected {count * row_size} bytes)", offset=body_start + min(len(body), count * row_size))

    dtype = np.dtype([(n, "<f4") for _, n in expected[:-2]] +
                     [("source_frame", "<i4"), ("source_pixel", "<i4")])
    rows = np.frombuffer(body, dtype=dtype, count=count)
    names = _ply_property_names(sh_degree)
    f32 = torch.from_numpy(np.stack([rows[n] for n in names], axis=-1).copy()) if count else \
        torch.zeros(0, len(names))
    n_color = 3 * (sh_degree + 1) ** 2
    return GaussianSet(
        means=f32[:, 0:3], opacity=f32[:, 3], rotation=f32[:, 4:8], scale=f32[:, 8:11],
        color=f32[:, 11:11 + n_color], sh_degree=sh_degree,
        source_frame=torch.from_numpy(rows["source_frame"].astype(np.int64)) if count else torch.zeros(0, dtype=torch.int64),
        source_pixel=torch.from_numpy(rows["source_pixel"].astype(np.int64)) if count else torch.zeros(0, dtype=torch.int64),
    )


# --- image output ------------------------------------------------------------

DEPTH_PNG_SCALE = 1000.0  # fixed-point scale for 16-bit depth output


def save_image_png(path: str | Path, image: torch.Tensor) -> None:
    """(H, W, 3) float in [0,1] to an 8-bit PNG."""
    from PIL import Image

    arr = (image.detach().cpu().clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(str(path))


def save_depth_png16(path: str | Path, depth: torch.Tensor) -> None:
    """(H, W) depth to 16-bit PNG, fixed point at DEPTH_PNG_SCALE units."""
    from PIL import Image

    arr = (depth.detach().cpu().numpy() * DEPTH_PNG_SCALE).clip(0, 65535).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(str(path))


def load_image(path: str | Path) -> torch.Tensor:
    """PNG/JPEG to (3, H, W) float in [0,1]."""
    from PIL import Image

    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)
