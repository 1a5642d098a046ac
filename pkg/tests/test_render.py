"""Rasterizer correctness, video container, and dataset materialization."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from camclone.geometry import RigidPose, look_at_pose, project, quat_mul, quat_conj, recover_pose
from camclone.render import (
    VIDEO_MAGIC,
    VideoFormatError,
    emit_dataset,
    group_trajectory,
    load_video,
    rasterize,
    render_triple,
    render_video,
    save_video,
)
from camclone.scene import (
    DEFAULT_INTRINSICS,
    FIDUCIAL_PALETTE,
    FIDUCIAL_POSITIONS,
    FIDUCIAL_RADIUS,
    SCENE_CENTER,
    GroundPlane,
    SceneSpec,
    StaticSphere,
    Subject,
    build_group,
    build_scene,
    pairing,
    plan_dataset,
    scaled_intrinsics,
)
from camclone.trajectory import Easing, RuleKind, TrajectoryRule, synthesize


def _bare_scene(**overrides):
    base = dict(
        scene_id="test",
        seed=0,
        ground=GroundPlane((0.5, 0.5, 0.4), (0.3, 0.3, 0.25)),
        boxes=[],
        spheres=[],
        subjects=[],
        light_dir=np.array([0.0, 0.0, -1.0]),
        ambient=0.3,
        sky=np.array([0.5, 0.55, 0.6]),
    )
    base.update(overrides)
    return SceneSpec(**base)


def test_empty_scene_uniform_background():
    scene = _bare_scene()
    # straight up from high altitude: ground behind every ray, markers culled
    pose = look_at_pose(np.array([0.0, 50.0, 0.0]), np.array([0.0, 100.0, 0.0]),
                        up=(0.0, 0.0, 1.0))
    img = rasterize(scene, pose, DEFAULT_INTRINSICS, 0.0)
    sky = np.rint(scene.sky * 255).astype(np.uint8)
    assert img.shape == (48, 84, 3)
    assert np.all(img == sky)


def test_rasterize_deterministic():
    scene = build_scene(11)
    pose = look_at_pose(np.array([0.0, 3.4, 5.5]), SCENE_CENTER)
    a = rasterize(scene, pose, DEFAULT_INTRINSICS, 0.25)
    b = rasterize(scene, pose, DEFAULT_INTRINSICS, 0.25)
    assert np.array_equal(a, b)


def _marker_centroids(img, height):
    """Exact-color centroid of each palette entry, in projection (u, v) coords."""
    out = {}
    for i, rgb in enumerate(FIDUCIAL_PALETTE):
        mask = np.all(img == rgb, axis=-1)
        if not mask.any():
            continue
        rows, cols = np.nonzero(mask)
        out[i] = np.array([cols.mean() + 0.5, height - rows.mean() - 0.5])
    return out


def _clean_marker_pose(k, y=3.4, dist=5.5):
    """A viewpoint from which the eight marker discs are pairwise disjoint."""
    for az_deg in range(0, 360, 15):
        az = np.radians(az_deg)
        eye = SCENE_CENTER + dist * np.array([np.sin(az), 0.0, np.cos(az)])
        eye[1] = y
        pose = look_at_pose(eye, SCENE_CENTER)
        uv, rad = [], []
        for p in FIDUCIAL_POSITIONS:
            z = pose.apply(p)[2]
            uv.append(project(p, pose, k))
            rad.append(k.fx * FIDUCIAL_RADIUS / z)
        ok = all(
            np.linalg.norm(uv[i] - uv[j]) > rad[i] + rad[j] + 3.0
            for i in range(8) for j in range(i + 1, 8)
        )
        if ok:
            return pose
    raise AssertionError("no clean viewpoint found")


def test_fiducial_centroid_matches_projection():
    scene = _bare_scene()
    k = scaled_intrinsics(DEFAULT_INTRINSICS, 4.0)
    pose = _clean_marker_pose(k)
    img = rasterize(scene, pose, k, 0.0)
    found = _marker_centroids(img, k.height)
    assert len(found) == 8
    for i, uv in found.items():
        ref = project(FIDUCIAL_POSITIONS[i], pose, k)
        assert ref is not None
        assert np.linalg.norm(uv - ref) < 0.7, f"marker {i}: {uv} vs {ref}"


def test_fiducial_round_trip_pose():
    scene = _bare_scene()
    k = scaled_intrinsics(DEFAULT_INTRINSICS, 4.0)
    pose = _clean_marker_pose(k, y=3.6, dist=5.0)
    img = rasterize(scene, pose, k, 0.0)
    found = _marker_centroids(img, k.height)
    assert len(found) >= 6
    ids = sorted(found)
    est = recover_pose(FIDUCIAL_POSITIONS[ids], np.stack([found[i] for i in ids]), k)
    dq = quat_mul(quat_conj(pose.q), est.pose.q)
    ang = np.degrees(2.0 * np.arccos(min(1.0, abs(dq[0]))))
    assert ang < 0.5
    assert np.linalg.norm(est.pose.t - pose.t) / np.linalg.norm(pose.t) < 0.02


def test_sphere_projected_radius():
    scene = _bare_scene(spheres=[StaticSphere((0.0, 0.0, 4.0), 0.5, (0.8, 0.2, 0.2))])
    pose = RigidPose.identity()
    k = DEFAULT_INTRINSICS
    img = rasterize(scene, pose, k, 0.0)
    sky = np.rint(scene.sky * 255).astype(np.uint8)
    row = img[23]  # pixel centers at v = 24.5, just off the disc equator
    hit = np.any(row != sky, axis=-1)
    est_radius = hit.sum() / 2.0
    assert abs(est_radius - k.fx * 0.5 / 4.0) < 1.0


@pytest.mark.parametrize("seed", range(20))
def test_occlusion_near_sphere_wins(seed):
    rng = np.random.default_rng(seed)
    z1 = rng.uniform(2.0, 4.0)
    z2 = z1 + rng.uniform(0.5, 3.0)
    r1 = rng.uniform(0.2, 0.5)
    r2 = rng.uniform(0.6, 1.0)
    near = StaticSphere((0.0, 0.0, float(z1)), float(r1), (0.9, 0.1, 0.1))
    far = StaticSphere((0.0, 0.0, float(z2)), float(r2), (0.1, 0.9, 0.1))
    order = [near, far] if seed % 2 == 0 else [far, near]
    scene = _bare_scene(spheres=order)
    img = rasterize(scene, RigidPose.identity(), DEFAULT_INTRINSICS, 0.0)
    center = img[23, 42].astype(float) / 255.0
    d_near = np.linalg.norm(center - near.albedo)
    d_far = np.linalg.norm(center - far.albedo)
    assert d_near < 0.15 and d_far > 0.5


def test_render_video_shape_and_static_rule():
    scene = build_scene(3)
    scene.subjects = [Subject(0.15, (0.5, 0.4, 0.3),
                              ((0.2, 0.8, 0.1),) * 4, 3.0)]  # constant spline
    anchor = look_at_pose(np.array([0.0, 3.3, 5.0]), SCENE_CENTER)
    rule = TrajectoryRule(kind=RuleKind.STATIC, speed=0.0, easing=Easing.LINEAR)
    traj = synthesize(rule, 5, 8.0, anchor)
    video = render_video(scene, traj, DEFAULT_INTRINSICS)
    assert video.shape == (5, 48, 84, 3) and video.dtype == np.uint8
    for i in range(1, 5):
        assert np.array_equal(video[i], video[0])


def test_render_triple_synchronization():
    rng = np.random.default_rng(2)
    group = build_group(rng, "g0000")
    triple = pairing(group, np.random.default_rng(5), per_target=1)[7]
    v_cam, v_cont, v = render_triple(group, triple, 5, 8.0, DEFAULT_INTRINSICS)
    assert v_cam.shape == v_cont.shape == v.shape == (5, 48, 84, 3)
    # every trajectory starts at the shared anchor, and V/V_cont share a scene
    assert np.array_equal(v[0], v_cont[0])
    assert not np.array_equal(v[0], v_cam[0])
    # V_cam shares the target's ground-truth trajectory by construction
    t_traj = group_trajectory(group, triple.target[1], 5, 8.0)
    c_traj = group_trajectory(group, triple.cam_ref[1], 5, 8.0)
    for a, b in zip(t_traj.poses, c_traj.poses):
        assert np.array_equal(a.q, b.q) and np.array_equal(a.t, b.t)


def test_video_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    video = rng.integers(0, 256, size=(3, 8, 12, 3), dtype=np.uint8)
    p = tmp_path / "clip.ccmv"
    save_video(p, video)
    assert p.read_bytes()[:4] == VIDEO_MAGIC
    back = load_video(p)
    assert np.array_equal(back, video)


def test_video_rejects_bad_input(tmp_path):
    with pytest.raises(VideoFormatError):
        save_video(tmp_path / "x.ccmv", np.zeros((3, 8, 12, 3), dtype=np.float32))
    p = tmp_path / "y.ccmv"
    save_video(p, np.zeros((2, 4, 4, 3), dtype=np.uint8))
    raw = p.read_bytes()
    (tmp_path / "bad_magic.ccmv").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(VideoFormatError):
        load_video(tmp_path / "bad_magic.ccmv")
    (tmp_path / "short.ccmv").write_bytes(raw[:-5])
    with pytest.raises(VideoFormatError):
        load_video(tmp_path / "short.ccmv")


def _tree_digest(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.mark.slow
def test_emit_dataset_counts_and_idempotent(tmp_path):
    manifest = plan_dataset(seed=13, n_groups=1)
    counts = emit_dataset(manifest, tmp_path / "d")
    assert counts == {"groups": 1, "videos": 40, "trajectories": 10, "triples": 120}
    videos = list((tmp_path / "d").rglob("*.ccmv"))
    trajs = list((tmp_path / "d").rglob("traj_*.json"))
    assert len(videos) == 40 and len(trajs) == 10
    assert (tmp_path / "d" / "manifest.json").exists()
    first = _tree_digest(tmp_path / "d")
    emit_dataset(manifest, tmp_path / "d")
    assert _tree_digest(tmp_path / "d") == first
    shape = load_video(videos[0]).shape
    assert shape == (17, 48, 84, 3)
