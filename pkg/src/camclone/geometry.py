"""SE(3) camera geometry: poses, pinhole projection, trajectory containers,
camera-trajectory metrics, and pose recovery from 2d-3d correspondences.

Conventions (used everywhere in this package):

- Poses map world to camera: ``x_cam = R @ x_world + t``.
- Camera axes: +x right, +y up, +z forward (right-handed).  A pinhole camera
  projects ``u = fx * x/z + cx``, ``v = fy * y/z + cy``; the renderer flips
  rows at image assembly so that screen-up equals +v.
- Quaternions are ``[w, x, y, z]``, unit norm, renormalized after every
  composition so drift stays below 1e-9 over long chains.
- World up is +y; the ground plane is y = 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Intrinsics",
    "RigidPose",
    "Trajectory",
    "PoseEstimate",
    "EstimationFailed",
    "compose",
    "inverse",
    "relative",
    "look_at_pose",
    "align_to_first",
    "project",
    "sphere_image_center",
    "rot_err",
    "trans_err",
    "cam_mc",
    "recover_pose",
    "quat_from_axis_angle",
    "quat_to_matrix",
    "matrix_to_quat",
]


class EstimationFailed(RuntimeError):
    """Pose recovery could not produce an estimate (too few points or a
    degenerate system)."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")


# ---------------------------------------------------------------------------
# quaternion helpers ([w, x, y, z])

def _quat_normalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(q @ q))
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    return q / n

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])

def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])

def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ValueError("zero axis")
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis / n])

def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])

def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method: pick the largest diagonal combination for stability."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return _quat_normalize(q)


# ---------------------------------------------------------------------------
# poses

class RigidPose:
    """World-to-camera rigid transform stored as unit quaternion + translation."""

    __slots__ = ("q", "t")

    def __init__(self, q, t):
        q = np.asarray(q, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise ValueError("pose needs q[4] and t[3]")
        self.q = _quat_normalize(q)
        self.t = t.copy()

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R, t) -> "RigidPose":
        return cls(matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates: c = -R^T t."""
        return -(self.R.T @ self.t)

    def to_matrix(self) -> np.ndarray:
        """3x4 [R | t]."""
        return np.concatenate([self.R, self.t[:, None]], axis=1)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """World -> camera for one point [3] or a batch [n, 3]."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.t

    def __repr__(self):
        return f"RigidPose(q={np.round(self.q, 4)}, t={np.round(self.t, 4)})"


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """a then b reading right-to-left: (a∘b)(x) = a(b(x))."""
    q = quat_mul(a.q, b.q)
    t = a.R @ b.t + a.t
    return RigidPose(q, t)


def inverse(p: RigidPose) -> RigidPose:
    Rt = p.R.T
    return RigidPose(quat_conj(p.q), -(Rt @ p.t))


def relative(a: RigidPose, b: RigidPose) -> RigidPose:
    """Transform taking a's camera frame to b's: inverse(a) ∘ b."""
    return compose(inverse(a), b)


def look_at_pose(eye, target, up=(0.0, 1.0, 0.0)) -> RigidPose:
    """Pose of a camera at ``eye`` whose +z axis points at ``target`` with a
    level horizon (camera x stays perpendicular to ``up``)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    right = np.cross(up, fwd)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise ValueError("view direction parallel to up")
    right = right / rn
    cam_up = np.cross(fwd, right)
    R = np.stack([right, cam_up, fwd])  # rows: world-to-camera
    return RigidPose(matrix_to_quat(R), -(R @ eye))


def project(point, pose: RigidPose, k: Intrinsics) -> np.ndarray | None:
    """Pixel coordinates of a world point, or None when the point sits at or
    behind the near plane (camera z <= 0.01)."""
    pc = pose.apply(np.asarray(point, dtype=np.float64))
    if pc[2] <= 0.01:
        return None
    return np.array([k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy])


def sphere_image_center(center_cam, r: float, k: Intrinsics) -> np.ndarray | None:
    """Center of the ellipse that is the perspective silhouette of a sphere.

    Off the optical axis this differs from projecting the sphere's center
    (the silhouette ellipse sits slightly outward), so centroids measured
    from a rendered disc estimate this point rather than the center
    projection.  ``center_cam`` is the sphere center in camera coordinates.
    """
    p = np.asarray(center_cam, dtype=np.float64)
    s = p @ p - r * r
    if p[2] <= 0.01 or s <= 0.0:  # camera inside or behind the sphere
        return None
    # tangent-ray cone d^T (p p^T - s I) d = 0 with d = (x, y, 1); the
    # silhouette conic's center solves the 2x2 linear system below
    M = np.array([[p[0] * p[0] - s, p[0] * p[1]],
                  [p[0] * p[1], p[1] * p[1] - s]])
    rhs = -np.array([p[0] * p[2], p[1] * p[2]])
    try:
        m = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        return None
    return np.array([k.fx * m[0] + k.cx, k.fy * m[1] + k.cy])


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class Trajectory:
    """A camera path: one pose per frame plus the frame rate."""

    poses: list[RigidPose]
    fps: float

    def __post_init__(self):
        if len(self.poses) < 1:
            raise ValueError("trajectory needs at least one pose")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def __len__(self):
        return len(self.poses)

    def centers(self) -> np.ndarray:
        return np.stack([p.center for p in self.poses])

    def save(self, path) -> None:
        doc = {
            "fps": self.fps,
            "frames": [{"q": [float(v) for v in p.q], "t": [float(v) for v in p.t]}
                       for p in self.poses],
        }
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path) -> "Trajectory":
        doc = json.loads(Path(path).read_text())
        poses = [RigidPose(np.array(f["q"]), np.array(f["t"])) for f in doc["frames"]]
        return cls(poses, float(doc["fps"]))


def align_to_first(traj: Trajectory) -> Trajectory:
    """Re-express every pose relative to frame 0 (frame 0 becomes identity).

    Each aligned pose maps frame-0 camera coordinates to frame-i camera
    coordinates, so a change of world frame (the same rigid transform
    composed on the world side of every pose) cancels exactly and the
    aligned translation norm equals the camera-center displacement."""
    inv0 = inverse(traj.poses[0])
    return Trajectory([compose(p, inv0) for p in traj.poses], traj.fps)


# ---------------------------------------------------------------------------
# metrics
#
# All three expect trajectories already aligned to their first frame and with
# equal frame counts.  Translations are normalized per trajectory by the max
# norm over its frames (skipped when the max is < 1e-8, e.g. a static camera),
# so translation-based metrics are scale-free.

def _check_pair(gt: Trajectory, gen: Trajectory) -> None:
    if len(gt) != len(gen):
        raise ValueError(f"frame counts differ: {len(gt)} vs {len(gen)}")

def _normalized_translations(traj: Trajectory) -> np.ndarray:
    ts = np.stack([p.t for p in traj.poses])
    m = np.linalg.norm(ts, axis=1).max()
    if m < 1e-8:
        return ts
    return ts / m

def _rot_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    tr = float(np.trace(Ra @ Rb.T))
    c = min(1.0, max(-1.0, (tr - 1.0) / 2.0))
    return math.degrees(math.acos(c))


def rot_err(gt: Trajectory, gen: Trajectory) -> float:
    """Summed geodesic rotation distance per frame, in degrees."""
    _check_pair(gt, gen)
    return sum(_rot_angle_deg(a.R, b.R) for a, b in zip(gt.poses, gen.poses))


def trans_err(gt: Trajectory, gen: Trajectory) -> float:
    """Summed distance between per-frame translations after per-trajectory
    max-norm normalization (unitless)."""
    _check_pair(gt, gen)
    ta = _normalized_translations(gt)
    tb = _normalized_translations(gen)
    return float(np.linalg.norm(ta - tb, axis=1).sum())


def cam_mc(gt: Trajectory, gen: Trajectory) -> float:
    """Summed Frobenius distance between [R | t] matrices (translations
    normalized as in trans_err)."""
    _check_pair(gt, gen)
    ta = _normalized_translations(gt)
    tb = _normalized_translations(gen)
    total = 0.0
    for i, (a, b) in enumerate(zip(gt.poses, gen.poses)):
        Ma = np.concatenate([a.R, ta[i][:, None]], axis=1)
        Mb = np.concatenate([b.R, tb[i][:, None]], axis=1)
        total += float(np.linalg.norm(Ma - Mb))
    return total


# ---------------------------------------------------------------------------
# pose recovery (2d-3d correspondences -> world-to-camera pose)

@dataclass(frozen=True)
class PoseEstimate:
    pose: RigidPose
    reproj_err_px: float  # mean reprojection error over the input points


def _nearest_rotation(M: np.ndarray) -> tuple[np.ndarray, float]:
    """Closest rotation to M (special orthogonal Procrustes) and the mean
    positive scale of M's singular values."""
    U, S, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    if d == 0:
        raise EstimationFailed("degenerate rotation estimate")
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    scale = (S[0] + S[1] + d * S[2]) / 3.0
    return R, scale


def _gauss_newton(R: np.ndarray, t: np.ndarray, pts3d: np.ndarray,
                  px: np.ndarray, k: Intrinsics, steps: int = 20):
    """Refine (R, t) by minimizing pixel reprojection error.  Left rotation
    perturbation R <- exp([w]x) R, additive translation."""
    for _ in range(steps):
        pc = pts3d @ R.T + t
        z = pc[:, 2]
        if np.any(z <= 1e-6):
            raise EstimationFailed("point collapsed onto the camera plane during refinement")
        u = k.fx * pc[:, 0] / z + k.cx
        v = k.fy * pc[:, 1] / z + k.cy
        r = np.stack([u, v], axis=1) - px  # [n, 2]
        n = pts3d.shape[0]
        J = np.zeros((n, 2, 6))
        inv_z = 1.0 / z
        # d(pixel)/d(camera point)
        duv = np.zeros((n, 2, 3))
        duv[:, 0, 0] = k.fx * inv_z
        duv[:, 0, 2] = -k.fx * pc[:, 0] * inv_z * inv_z
        duv[:, 1, 1] = k.fy * inv_z
        duv[:, 1, 2] = -k.fy * pc[:, 1] * inv_z * inv_z
        # d(camera point)/d(w) = -[pc - t]x ; d/d(dt) = I
        q = pc - t
        skew = np.zeros((n, 3, 3))
        skew[:, 0, 1] = -q[:, 2]
        skew[:, 0, 2] = q[:, 1]
        skew[:, 1, 0] = q[:, 2]
        skew[:, 1, 2] = -q[:, 0]
        skew[:, 2, 0] = -q[:, 1]
        skew[:, 2, 1] = q[:, 0]
        J[:, :, :3] = -np.einsum("nij,njk->nik", duv, skew)
        J[:, :, 3:] = duv
        Jf = J.reshape(-1, 6)
        rf = r.reshape(-1)
        H = Jf.T @ Jf + 1e-12 * np.eye(6)
        g = Jf.T @ rf
        try:
            delta = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError as e:
            raise EstimationFailed("singular normal equations") from e
        w, dt = delta[:3], delta[3:]
        angle = np.linalg.norm(w)
        if angle > 1e-15:
            dq = quat_from_axis_angle(w / angle, angle)
            R = quat_to_matrix(dq) @ R
        t = t + dt
        if np.linalg.norm(delta) < 1e-14:
            break
    return R, t


def _reproj_residuals(R, t, pts3d, px, k: Intrinsics) -> np.ndarray:
    pc = pts3d @ R.T + t
    z = np.maximum(pc[:, 2], 1e-9)
    u = k.fx * pc[:, 0] / z + k.cx
    v = k.fy * pc[:, 1] / z + k.cy
    return np.linalg.norm(np.stack([u, v], 1) - px, axis=1)


def recover_pose(points3d, pixels, k: Intrinsics) -> PoseEstimate:
    """Direct linear transform + orthonormalization + Gauss-Newton refinement.

    ``points3d``: [n, 3] world coordinates; ``pixels``: [n, 2] observed pixel
    positions.  Requires n >= 6 and a non-degenerate (non-coplanar enough)
    configuration, otherwise raises EstimationFailed.
    """
    pts3d = np.asarray(points3d, dtype=np.float64)
    px = np.asarray(pixels, dtype=np.float64)
    if pts3d.ndim != 2 or pts3d.shape[1] != 3 or px.shape != (pts3d.shape[0], 2):
        raise ValueError("need [n,3] points and [n,2] pixels")
    n = pts3d.shape[0]
    if n < 6:
        raise EstimationFailed(f"need at least 6 correspondences, got {n}")

    # normalized image coordinates
    xn = (px[:, 0] - k.cx) / k.fx
    yn = (px[:, 1] - k.cy) / k.fy

    A = np.zeros((2 * n, 12))
    A[0::2, 0:3] = pts3d
    A[0::2, 3] = 1.0
    A[0::2, 8:11] = -xn[:, None] * pts3d
    A[0::2, 11] = -xn
    A[1::2, 4:7] = pts3d
    A[1::2, 7] = 1.0
    A[1::2, 8:11] = -yn[:, None] * pts3d
    A[1::2, 11] = -yn

    U, S, Vt = np.linalg.svd(A)
    # rank 11 needed for a unique (up to scale) solution
    if S[10] < 1e-10 * max(S[0], 1e-300):
        raise EstimationFailed("degenerate correspondence system")
    P = Vt[-1].reshape(3, 4)

    best = None
    for sign in (1.0, -1.0):
        M = sign * P[:, :3]
        p4 = sign * P[:, 3]
        try:
            R, scale = _nearest_rotation(M)
        except EstimationFailed:
            continue
        if scale <= 1e-12:
            continue
        t = p4 / scale
        z = (pts3d @ R.T + t)[:, 2]
        in_front = int((z > 0).sum())
        if best is None or in_front > best[0]:
            best = (in_front, R, t)
    if best is None or best[0] < n // 2 + 1:
        raise EstimationFailed("no cheirality-consistent solution")
    _, R, t = best

    R, t = _gauss_newton(R, t, pts3d, px, k)

    # one trimmed re-fit: a grossly wrong observation (e.g. a partially
    # occluded marker disc) stands out against the median residual
    res = _reproj_residuals(R, t, pts3d, px, k)
    keep = res <= max(3.0 * float(np.median(res)), 1e-9)
    if keep.sum() >= 6 and not keep.all():
        pts3d, px = pts3d[keep], px[keep]
        R, t = _gauss_newton(R, t, pts3d, px, k)

    err = float(_reproj_residuals(R, t, pts3d, px, k).mean())
    return PoseEstimate(RigidPose.from_matrix(R, t), err)
