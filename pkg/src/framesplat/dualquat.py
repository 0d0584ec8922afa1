"""Unit dual-quaternion algebra for rigid camera poses, plus the pose losses.

A pose is stored as an 8-vector ``[q_r | q_d]``: a unit real quaternion
``q_r = (w, x, y, z)`` carrying rotation and a dual quaternion
``q_d = 0.5 * (0, t) * q_r`` carrying translation. Unit constraints:
``|q_r| = 1`` and ``<q_r, q_d> = 0``.

Pose convention used throughout the package: a pose maps camera-local
coordinates of frame t into the canonical space (the camera space of the
first frame), i.e. camera-to-world with the first camera as world. Frame 1
is therefore always the identity.

All functions are pure torch and differentiable; they accept arbitrary
leading batch dimensions.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .numerics import ContractViolation

UNIT_TOL = 1e-6  # type-level unit/orthogonality tolerance
_OP_TOL = 1e-3   # per-call validation slack (covers finite-difference probes)


def quat_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product of (w, x, y, z) quaternions."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        (
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ),
        dim=-1,
    )


def quat_conjugate(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack((w, -x, -y, -z), dim=-1)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternion to 3x3 rotation matrix."""
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack((1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)), dim=-1)
    row1 = torch.stack((2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)), dim=-1)
    row2 = torch.stack((2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)), dim=-1)
    return torch.stack((row0, row1, row2), dim=-2)


def rotmat_to_quat(R: torch.Tensor) -> torch.Tensor:
    """Rotation matrix to unit quaternion, stable across all trace regimes."""
    if R.shape[-2:] != (3, 3):
        raise ContractViolation(f"expected (...,3,3) rotation, got {tuple(R.shape)}")
    batch = R.shape[:-2]
    Rf = R.reshape(-1, 3, 3)
    m00, m01, m02 = Rf[:, 0, 0], Rf[:, 0, 1], Rf[:, 0, 2]
    m10, m11, m12 = Rf[:, 1, 0], Rf[:, 1, 1], Rf[:, 1, 2]
    m20, m21, m22 = Rf[:, 2, 0], Rf[:, 2, 1], Rf[:, 2, 2]
    trace = m00 + m11 + m22
    q = torch.empty(Rf.shape[0], 4, dtype=R.dtype, device=R.device)

    c0 = trace > 0
    s = torch.sqrt(torch.clamp(trace + 1.0, min=1e-12)) * 2
    q0 = torch.stack((0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s), dim=-1)
    c1 = (~c0) & (m00 > m11) & (m00 > m22)
    s = torch.sqrt(torch.clamp(1.0 + m00 - m11 - m22, min=1e-12)) * 2
    q1 = torch.stack(((m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s), dim=-1)
    c2 = (~c0) & (~c1) & (m11 > m22)
    s = torch.sqrt(torch.clamp(1.0 + m11 - m00 - m22, min=1e-12)) * 2
    q2 = torch.stack(((m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s), dim=-1)
    s = torch.sqrt(torch.clamp(1.0 + m22 - m00 - m11, min=1e-12)) * 2
    q3 = torch.stack(((m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s), dim=-1)

    q = torch.where(c0.unsqueeze(-1), q0, torch.where(c1.unsqueeze(-1), q1, torch.where(c2.unsqueeze(-1), q2, q3)))
    q = q / q.norm(dim=-1, keepdim=True)
    return canonical_quat_sign(q).reshape(*batch, 4)


def canonical_quat_sign(q: torch.Tensor) -> torch.Tensor:
    """Fix the double cover: scalar part >= 0, first nonzero component > 0 when it is 0."""
    sign = torch.zeros_like(q[..., 0])
    for i in range(4):
        comp = q[..., i]
        sign = torch.where(sign == 0, torch.sign(comp), sign)
    sign = torch.where(sign == 0, torch.ones_like(sign), sign)
    return q * sign.detach().unsqueeze(-1)


def dq_identity(dtype: torch.dtype = torch.float32, device=None) -> torch.Tensor:
    out = torch.zeros(8, dtype=dtype, device=device)
    out[0] = 1.0
    return out


def dq_canonicalize(p: torch.Tensor) -> torch.Tensor:
    """Apply the canonical sign of the real part to the whole 8-vector."""
    sign = torch.zeros_like(p[..., 0])
    for i in range(4):
        comp = p[..., i]
        sign = torch.where(sign == 0, torch.sign(comp), sign)
    sign = torch.where(sign == 0, torch.ones_like(sign), sign)
    return p * sign.detach().unsqueeze(-1)


def validate_unit_dq(p: torch.Tensor, tol: float = _OP_TOL, what: str = "dual quaternion") -> None:
    if p.shape[-1] != 8:
        raise ContractViolation(f"{what}: expected (...,8), got {tuple(p.shape)}")
    qr, qd = p[..., :4], p[..., 4:]
    norm_err = (qr.norm(dim=-1) - 1.0).abs().max().item()
    orth_err = (qr * qd).sum(-1).abs().max().item()
    if norm_err > tol or orth_err > tol:
        raise ContractViolation(
            f"{what} violates unit constraints: |q_r| off by {norm_err:.2e}, <q_r,q_d>={orth_err:.2e}")


def dq_mul(a: torch.Tensor, b: torch.Tensor, validate: bool = True) -> torch.Tensor:
    """Compose two rigid motions; result is sign-canonicalized."""
    if validate:
        validate_unit_dq(a, what="dq_mul lhs")
        validate_unit_dq(b, what="dq_mul rhs")
    ar, ad = a[..., :4], a[..., 4:]
    br, bd = b[..., :4], b[..., 4:]
    rr = quat_mul(ar, br)
    rd = quat_mul(ar, bd) + quat_mul(ad, br)
    return dq_canonicalize(torch.cat((rr, rd), dim=-1))


def dq_conjugate(p: torch.Tensor) -> torch.Tensor:
    return torch.cat((quat_conjugate(p[..., :4]), quat_conjugate(p[..., 4:])), dim=-1)


def dq_inverse(p: torch.Tensor) -> torch.Tensor:
    """Inverse rigid motion (conjugate, for a unit dual quaternion)."""
    return dq_canonicalize(dq_conjugate(p))


def normalize_raw_dq(raw: torch.Tensor) -> torch.Tensor:
    """Project a raw 8-vector (e.g. a linear head output) onto the unit manifold.

    Real part is normalized, dual part has its component along the real part
    removed, and the sign is canonicalized. Differentiable.
    """
    if raw.shape[-1] != 8:
        raise ContractViolation(f"expected (...,8) raw dual quaternion, got {tuple(raw.shape)}")
    raw_r, raw_d = raw[..., :4], raw[..., 4:]
    norm = raw_r.norm(dim=-1, keepdim=True)
    if (norm < 1e-8).any():
        raise ContractViolation("near-zero real part in raw dual quaternion (diverged or uninitialized head)")
    qr = raw_r / norm
    qd = raw_d - (raw_d * qr).sum(-1, keepdim=True) * qr
    return dq_canonicalize(torch.cat((qr, qd), dim=-1))


def dq_translation(p: torch.Tensor) -> torch.Tensor:
    """Translation vector of the rigid motion: t = 2 * q_d * conj(q_r)."""
    t_quat = 2.0 * quat_mul(p[..., 4:], quat_conjugate(p[..., :4]))
    return t_quat[..., 1:]


def dq_scale_translation(p: torch.Tensor, factor: torch.Tensor | float) -> torch.Tensor:
    """Scale the translation of a pose while keeping its rotation."""
    if not torch.is_tensor(factor):
        factor = torch.as_tensor(factor, dtype=p.dtype, device=p.device)
    qd = p[..., 4:] * factor.unsqueeze(-1) if factor.ndim == p.ndim - 1 else p[..., 4:] * factor
    return torch.cat((p[..., :4], qd), dim=-1)


def se3_to_dq(R: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Rotation matrix + translation to a canonical unit dual quaternion."""
    _validate_rotation(R)
    qr = rotmat_to_quat(R)
    t_quat = torch.cat((torch.zeros_like(t[..., :1]), t), dim=-1)
    qd = 0.5 * quat_mul(t_quat, qr)
    return dq_canonicalize(torch.cat((qr, qd), dim=-1))


def dq_to_se3(p: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    validate_unit_dq(p, what="dq_to_se3 input")
    return quat_to_rotmat(p[..., :4]), dq_translation(p)


def dq_to_matrix(p: torch.Tensor) -> torch.Tensor:
    """4x4 homogeneous matrix export."""
    R, t = dq_to_se3(p)
    batch = p.shape[:-1]
    M = torch.zeros(*batch, 4, 4, dtype=p.dtype, device=p.device)
    M[..., :3, :3] = R
    M[..., :3, 3] = t
    M[..., 3, 3] = 1.0
    return M


def _validate_rotation(R: torch.Tensor, tol: float = _OP_TOL) -> None:
    if R.shape[-2:] != (3, 3):
        raise ContractViolation(f"expected (...,3,3) rotation, got {tuple(R.shape)}")
    eye = torch.eye(3, dtype=R.dtype, device=R.device).expand_as(R)
    orth = (R.transpose(-1, -2) @ R - eye).abs().max().item()
    det = torch.linalg.det(R)
    if orth > tol or (det - 1.0).abs().max().item() > tol:
        raise ContractViolation(f"degenerate rotation matrix: orthogonality error {orth:.2e}, det {det}")


# --- pose sets -------------------------------------------------------------

def validate_pose_set(poses: torch.Tensor) -> None:
    """A pose set is (T, 8) unit dual quaternions with frame 1 exactly identity."""
    if poses.ndim != 2 or poses.shape[-1] != 8:
        raise ContractViolation(f"pose set must be (T,8), got {tuple(poses.shape)}")
    validate_unit_dq(poses, what="pose set")
    ident = dq_identity(dtype=poses.dtype, device=poses.device)
    if not torch.equal(poses[0], ident):
        raise ContractViolation("first pose of a pose set must be the identity")


def with_identity_first(rest: torch.Tensor) -> torch.Tensor:
    """Prepend the fixed identity pose of frame 1 to predicted poses (T-1, 8)."""
    ident = dq_identity(dtype=rest.dtype, device=rest.device).unsqueeze(0)
    return torch.cat((ident, rest), dim=0)


def dq_align_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Two-sided alignment penalty between predicted and reference pose sets.

    Sums, over frames 2..T, the L2 distance (over the 8 coefficients) between
    the identity element and both conjugate products pred*conj(gt) and
    gt*conj(pred). Zero exactly when the two sets describe the same motions.
    Both inputs must be sign-canonicalized; frame 1 (identity on both sides)
    contributes nothing and is skipped.
    """
    if pred.shape != gt.shape:
        raise ContractViolation(f"pose set length mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    p, g = pred[1:], gt[1:]
    ident = dq_identity(dtype=pred.dtype, device=pred.device)
    a = dq_mul(g, dq_conjugate(p), validate=False)
    b = dq_mul(p, dq_conjugate(g), validate=False)
    la = torch.linalg.vector_norm(ident - a, dim=-1).sum()
    lb = torch.linalg.vector_norm(ident - b, dim=-1).sum()
    return la + lb


def camera_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Coefficient-wise MSE over frames 2..T plus the alignment penalty."""
    if pred.shape != gt.shape:
        raise ContractViolation(f"pose set length mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    mse = ((pred[1:] - gt[1:]) ** 2).mean()
    return mse + dq_align_loss(pred, gt)


def quat_trans_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Ablation pose loss: MSE on (canonical unit quaternion, translation).

    Used when the camera head regresses quaternion+translation instead of a
    dual quaternion; inputs are still pose sets in dual-quaternion form.
    """
    if pred.shape != gt.shape:
        raise ContractViolation(f"pose set length mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    pq = canonical_quat_sign(pred[1:, :4])
    gq = canonical_quat_sign(gt[1:, :4])
    pt = dq_translation(pred[1:])
    gtt = dq_translation(gt[1:])
    return ((torch.cat((pq, pt), -1) - torch.cat((gq, gtt), -1)) ** 2).mean()


# --- serialization ---------------------------------------------------------

def format_pose_lines(poses: torch.Tensor) -> str:
    """One line per frame: `frame_index q_r(4) q_d(4)` in decimal text."""
    lines = []
    for i, p in enumerate(poses.detach().cpu().double()):
        coeffs = " ".join(f"{v.item():.17g}" for v in p)
        lines.append(f"{i} {coeffs}")
    return "\n".join(lines) + "\n"


def write_pose_file(path: str | Path, poses: torch.Tensor) -> None:
    Path(path).write_text(format_pose_lines(poses))


def read_pose_file(path: str | Path, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 9:
            raise ContractViolation(f"pose file line {ln}: expected 9 fields, got {len(parts)}")
        rows.append((int(parts[0]), [float(v) for v in parts[1:]]))
    rows.sort(key=lambda r: r[0])
    return torch.tensor([r[1] for r in rows], dtype=dtype)
