"""Software rasterizer and dataset materialization.

Renders scenes through camera trajectories into uint8 video tensors,
deterministically (pure numpy, no threads, no time-dependent state).  Spheres
are rasterized as screen-space discs with per-pixel ray-sphere depth, boxes as
12 triangles with perspective-correct depth, the ground plane analytically.
Shading is Lambertian (ambient + directional); marker spheres are emissive and
write their palette color exactly.

Image convention: projection's v axis points up, so frames are assembled
bottom-up and flipped once at the end.  Array pixel (row, col) therefore saw
the projected point (u, v) = (col + 0.5, height - row - 0.5).

Video container (all integers little-endian u32):

    magic  4 bytes  b"CCMV"
    f, h, w
    data   f*h*w*3 bytes, uint8 RGB, frame-major C order
"""

from __future__ import annotations

import math
import struct
from functools import lru_cache
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, RigidPose, Trajectory
from .scene import (
    FIDUCIAL_PALETTE,
    FIDUCIAL_POSITIONS,
    FIDUCIAL_RADIUS,
    DatasetManifest,
    GroupSpec,
    SceneSpec,
    TripleIndex,
    animate,
)
from .trajectory import arc_look_at, synthesize

__all__ = [
    "rasterize",
    "render_video",
    "render_triple",
    "group_trajectory",
    "save_video",
    "load_video",
    "emit_dataset",
    "VIDEO_MAGIC",
    "VideoFormatError",
]

VIDEO_MAGIC = b"CCMV"
_NEAR = 0.01


class VideoFormatError(ValueError):
    pass


@lru_cache(maxsize=8)
def _ray_grid(fx, fy, cx, cy, width, height):
    """Camera-space ray directions through every pixel center, row-major in v
    (v = 0 at the bottom).  Shape [h, w, 3], z component 1."""
    u = (np.arange(width) + 0.5 - cx) / fx
    v = (np.arange(height) + 0.5 - cy) / fy
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


def _shade(albedo, normal_w, light_dir, ambient):
    diff = max(0.0, float(normal_w @ light_dir))
    return np.asarray(albedo) * (ambient + (1.0 - ambient) * diff)


def _shade_px(albedo, normals_w, light_dir, ambient):
    diff = np.maximum(0.0, normals_w @ light_dir)
    return np.asarray(albedo)[None, :] * (ambient + (1.0 - ambient) * diff)[:, None]


def rasterize(scene: SceneSpec, pose: RigidPose, k: Intrinsics, t: float) -> np.ndarray:
    """One frame, uint8 [height, width, 3]."""
    h, w = k.height, k.width
    color = np.broadcast_to(scene.sky, (h, w, 3)).copy()
    depth = np.full((h, w), np.inf)
    R = pose.R
    cam_center = pose.center
    rays = _ray_grid(k.fx, k.fy, k.cx, k.cy, w, h)

    _raster_ground(scene, rays, R, cam_center, color, depth)

    for b in scene.boxes:
        _raster_box(b, pose, k, scene, color, depth, cam_center)

    subj_centers = animate(scene, t)
    sphere_args = []
    for s, c in zip(scene.subjects, subj_centers):
        sphere_args.append((c, s.radius, np.asarray(s.albedo), False))
    for s in scene.spheres:
        sphere_args.append((np.asarray(s.center, dtype=np.float64), s.radius,
                            np.asarray(s.albedo), False))
    for pos, rgb in zip(FIDUCIAL_POSITIONS, FIDUCIAL_PALETTE):
        sphere_args.append((pos, FIDUCIAL_RADIUS, rgb.astype(np.float64) / 255.0, True))
    for center, radius, albedo, emissive in sphere_args:
        _raster_sphere(center, radius, albedo, emissive, pose, k, scene, color, depth)

    img = np.rint(np.clip(color, 0.0, 1.0) * 255.0).astype(np.uint8)
    return img[::-1]  # v axis points up; arrays index rows downward


def _raster_ground(scene, rays, R, cam_center, color, depth):
    # row-vector form of R.T @ d: camera rays to world-space directions
    dirs = rays @ R  # [h, w, 3]
    dy = dirs[:, :, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -cam_center[1] / dy
    hit = (np.abs(dy) > 1e-12) & (s > _NEAR)
    if not hit.any():
        return
    sv = np.where(hit, s, np.inf)
    sf = np.where(hit, s, 0.0)
    px = cam_center[0] + sf * dirs[:, :, 0]
    pz = cam_center[2] + sf * dirs[:, :, 2]
    checker = ((np.floor(px / scene.ground.checker) + np.floor(pz / scene.ground.checker))
               .astype(np.int64) & 1).astype(bool)
    albedo = np.where(checker[:, :, None], scene.ground.albedo_b, scene.ground.albedo_a)
    normal = np.array([0.0, 1.0, 0.0])
    shade = scene.ambient + (1.0 - scene.ambient) * max(0.0, float(normal @ scene.light_dir))
    mask = hit & (sv < depth)
    depth[mask] = sv[mask]
    color[mask] = albedo[mask] * shade


def _raster_sphere(center_w, radius, albedo, emissive, pose: RigidPose, k: Intrinsics,
                   scene, color, depth):
    pc = pose.apply(center_w)
    if pc[2] + radius <= _NEAR:
        return
    h, w = k.height, k.width
    if pc[2] - radius > _NEAR:
        zmin = pc[2] - radius
        ru = k.fx * radius / zmin + 1.0
        rv = k.fy * radius / zmin + 1.0
        u0 = k.fx * pc[0] / pc[2] + k.cx
        v0 = k.fy * pc[1] / pc[2] + k.cy
        lo_u, hi_u = int(math.floor(u0 - ru)), int(math.ceil(u0 + ru))
        lo_v, hi_v = int(math.floor(v0 - rv)), int(math.ceil(v0 + rv))
    else:
        lo_u, hi_u, lo_v, hi_v = 0, w, 0, h  # camera inside the bound: no useful bbox
    lo_u, hi_u = max(lo_u, 0), min(hi_u, w)
    lo_v, hi_v = max(lo_v, 0), min(hi_v, h)
    if lo_u >= hi_u or lo_v >= hi_v:
        return
    rays = _ray_grid(k.fx, k.fy, k.cx, k.cy, w, h)[lo_v:hi_v, lo_u:hi_u]
    d = rays.reshape(-1, 3)
    a = np.einsum("ij,ij->i", d, d)
    b = -2.0 * (d @ pc)
    c = float(pc @ pc) - radius * radius
    disc = b * b - 4.0 * a * c
    ok = disc >= 0.0
    if not ok.any():
        return
    sq = np.sqrt(np.where(ok, disc, 0.0))
    s = (-b - sq) / (2.0 * a)
    ok &= s > _NEAR
    if not ok.any():
        return
    sub_depth = depth[lo_v:hi_v, lo_u:hi_u].reshape(-1)
    win = ok & (s < sub_depth)
    if not win.any():
        return
    if emissive:
        px_color = np.broadcast_to(albedo, (int(win.sum()), 3))
    else:
        hit_cam = d[win] * s[win, None]
        normals_cam = (hit_cam - pc) / radius
        normals_w = normals_cam @ pose.R  # R^T applied row-wise
        px_color = _shade_px(albedo, normals_w, scene.light_dir, scene.ambient)
    sub_color = color[lo_v:hi_v, lo_u:hi_u].reshape(-1, 3)
    sub_color[win] = px_color
    sub_depth[win] = s[win]
    color[lo_v:hi_v, lo_u:hi_u] = sub_color.reshape(hi_v - lo_v, hi_u - lo_u, 3)
    depth[lo_v:hi_v, lo_u:hi_u] = sub_depth.reshape(hi_v - lo_v, hi_u - lo_u)


def _box_triangles(b) -> np.ndarray:
    sx, sy, sz = (v / 2.0 for v in b.size)
    corners = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    cy, sy_ = math.cos(b.yaw), math.sin(b.yaw)
    Ry = np.array([[cy, 0, sy_], [0, 1, 0], [-sy_, 0, cy]])
    corners = corners @ Ry.T + np.asarray(b.center)
    # index bits: (x, y, z); faces as two triangles each
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
        (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
        (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
    ]
    tris = []
    for a, bq, c, d in quads:
        tris.append(corners[[a, bq, c]])
        tris.append(corners[[a, c, d]])
    return np.stack(tris)  # [12, 3, 3]


def _raster_box(box, pose: RigidPose, k: Intrinsics, scene, color, depth, cam_center):
    for tri_w in _box_triangles(box):
        n = np.cross(tri_w[1] - tri_w[0], tri_w[2] - tri_w[0])
        nn = np.linalg.norm(n)
        if nn < 1e-12:
            continue
        n = n / nn
        if n @ (tri_w[0] - cam_center) > 0:
            n = -n  # face the camera
        tri_c = pose.apply(tri_w)
        if np.any(tri_c[:, 2] <= _NEAR):
            continue  # crude near clip: drop the triangle
        z = tri_c[:, 2]
        u = k.fx * tri_c[:, 0] / z + k.cx
        v = k.fy * tri_c[:, 1] / z + k.cy
        area = (u[1] - u[0]) * (v[2] - v[0]) - (v[1] - v[0]) * (u[2] - u[0])
        if abs(area) < 1e-12:
            continue
        lo_u = max(int(math.floor(u.min())), 0)
        hi_u = min(int(math.ceil(u.max())) + 1, k.width)
        lo_v = max(int(math.floor(v.min())), 0)
        hi_v = min(int(math.ceil(v.max())) + 1, k.height)
        if lo_u >= hi_u or lo_v >= hi_v:
            continue
        uu, vv = np.meshgrid(np.arange(lo_u, hi_u) + 0.5, np.arange(lo_v, hi_v) + 0.5)
        w0 = (u[2] - u[1]) * (vv - v[1]) - (v[2] - v[1]) * (uu - u[1])
        w1 = (u[0] - u[2]) * (vv - v[2]) - (v[0] - v[2]) * (uu - u[2])
        w2 = (u[1] - u[0]) * (vv - v[0]) - (v[1] - v[0]) * (uu - u[0])
        inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
        if not inside.any():
            continue
        l0, l1, l2 = w0 / area, w1 / area, w2 / area
        inv_z = l0 / z[0] + l1 / z[1] + l2 / z[2]
        with np.errstate(divide="ignore"):
            zpix = 1.0 / inv_z
        sub_depth = depth[lo_v:hi_v, lo_u:hi_u]
        win = inside & (zpix > _NEAR) & (zpix < sub_depth)
        if not win.any():
            continue
        shaded = _shade(box.albedo, n, scene.light_dir, scene.ambient)
        sub_color = color[lo_v:hi_v, lo_u:hi_u]
        sub_color[win] = shaded
        sub_depth[win] = zpix[win]


def render_video(scene: SceneSpec, traj: Trajectory, k: Intrinsics) -> np.ndarray:
    """uint8 [frames, height, width, 3]."""
    frames = [rasterize(scene, p, k, i / traj.fps) for i, p in enumerate(traj.poses)]
    return np.stack(frames)


def group_trajectory(group: GroupSpec, traj_idx: int, frames: int, fps: float) -> Trajectory:
    """The shared ground-truth trajectory for one rule of a group."""
    rule = group.rules[traj_idx]
    return synthesize(rule, frames, fps, group.anchor,
                      look_at=arc_look_at(rule, group.anchor))


def render_triple(group: GroupSpec, triple: TripleIndex, frames: int, fps: float,
                  k: Intrinsics):
    """(V_cam, V_cont, V): camera reference from the sibling location, content
    reference from the target's own location on another trajectory, target.
    All three share the time base, so V and V_cont depict the same world state
    per frame from different viewpoints."""
    t_loc, t_traj = triple.target
    target_scene = group.locations[t_loc]
    cam_scene = group.locations[triple.cam_ref[0]]
    t_trajectory = group_trajectory(group, t_traj, frames, fps)
    cont_trajectory = group_trajectory(group, triple.cont_ref[1], frames, fps)
    v = render_video(target_scene, t_trajectory, k)
    v_cont = render_video(target_scene, cont_trajectory, k)
    v_cam = render_video(cam_scene, t_trajectory, k)
    return v_cam, v_cont, v


# ---------------------------------------------------------------------------
# video container

def save_video(path, video: np.ndarray) -> None:
    video = np.asarray(video)
    if video.dtype != np.uint8 or video.ndim != 4 or video.shape[3] != 3:
        raise VideoFormatError(f"expected uint8 [f, h, w, 3], got {video.dtype} {video.shape}")
    f, h, w, _ = video.shape
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(struct.pack("<III", f, h, w))
        fh.write(np.ascontiguousarray(video).tobytes())


def load_video(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != VIDEO_MAGIC:
        raise VideoFormatError(f"bad magic {buf[:4]!r} in {path}")
    f, h, w = struct.unpack_from("<III", buf, 4)
    need = 16 + f * h * w * 3
    if len(buf) != need:
        raise VideoFormatError(f"size mismatch in {path}: {len(buf)} != {need}")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(f, h, w, 3).copy()


# ---------------------------------------------------------------------------
# dataset materialization

def emit_dataset(manifest: DatasetManifest, out_dir) -> dict:
    """Write manifest, trajectory files, and every video.  Deterministic:
    re-running with the same manifest reproduces identical bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest.save(out / "manifest.json")
    n_videos = 0
    for g in manifest.groups:
        trajs = []
        for i in range(len(g.rules)):
            traj = group_trajectory(g, i, manifest.frames, manifest.fps)
            tp = out / manifest.trajectory_path(g.group_id, i)
            tp.parent.mkdir(parents=True, exist_ok=True)
            traj.save(tp)
            trajs.append(traj)
        for loc, scene in enumerate(g.locations):
            for i, traj in enumerate(trajs):
                video = render_video(scene, traj, manifest.intrinsics)
                save_video(out / manifest.video_path(g.group_id, loc, i), video)
                n_videos += 1
    return {"groups": len(manifest.groups), "videos": n_videos,
            "trajectories": manifest.trajectory_count(), "triples": len(manifest.triples)}
