"""Trajectory recovery from video, pixel metrics, reports, preference ranking."""

import json
import math

import numpy as np
import pytest

from camclone.evaluate import (
    CSV_COLUMNS,
    RankingCase,
    SampleResult,
    detect_fiducials,
    estimate_trajectory,
    eval_camera,
    eval_pixel,
    evaluate_samples,
    ranking_check,
    read_samples_csv,
    report,
)
from camclone.geometry import EstimationFailed, align_to_first, cam_mc, project, rot_err, trans_err
from camclone.render import group_trajectory, render_video
from camclone.scene import (
    DEFAULT_INTRINSICS,
    FIDUCIAL_POSITIONS,
    build_group,
    scaled_intrinsics,
)

FPS = 8.0


def _group(seed=0):
    return build_group(np.random.default_rng(seed), f"g{seed}")


def _render(group, traj_idx=1, frames=17, k=DEFAULT_INTRINSICS, loc=0):
    traj = group_trajectory(group, traj_idx, frames, FPS)
    return render_video(group.locations[loc], traj, k), traj


# ---------------------------------------------------------------------------
# detection

def test_detect_validation_and_empty():
    with pytest.raises(ValueError):
        detect_fiducials(np.zeros((8, 8, 3), np.float32))
    assert detect_fiducials(np.zeros((8, 8, 3), np.uint8)) == {}


def test_detect_centroids_match_projection():
    g = _group(3)
    k = scaled_intrinsics(DEFAULT_INTRINSICS, 4.0)
    video, traj = _render(g, k=k, frames=3)
    pose = traj.poses[0]
    found = detect_fiducials(video[0])
    assert len(found) >= 6
    for i, uv in found.items():
        exp = project(FIDUCIAL_POSITIONS[i], pose, k)
        assert exp is not None
        assert np.linalg.norm(uv - exp) < 0.7, f"marker {i}"


def test_detect_deterministic():
    g = _group(4)
    video, _ = _render(g, frames=2)
    a = detect_fiducials(video[0])
    b = detect_fiducials(video[0])
    assert a.keys() == b.keys()
    for i in a:
        assert np.array_equal(a[i], b[i])


# ---------------------------------------------------------------------------
# trajectory estimation

def test_estimate_matches_ground_truth():
    g = _group(1)
    k = scaled_intrinsics(DEFAULT_INTRINSICS, 16.0)
    video, traj = _render(g, traj_idx=2, k=k)
    est = estimate_trajectory(video, k, FPS)
    assert est.valid_frames == 17
    assert all(c >= 6 for c in est.marker_counts)
    assert est.reproj_px < 0.5
    a, b = align_to_first(traj), align_to_first(est.trajectory)
    assert rot_err(a, b) < 0.5
    assert trans_err(a, b) < 0.02


def test_estimate_tolerates_and_fills_invalid_frames():
    g = _group(2)
    video, traj = _render(g, frames=17)
    video = video.copy()
    video[5] = 0  # one blacked-out frame: invalid but under the 25% budget
    est = estimate_trajectory(video, DEFAULT_INTRINSICS, FPS)
    assert est.valid == [True] * 5 + [False] + [True] * 11
    assert len(est.trajectory) == 17
    # the invalid frame inherits the previous valid pose
    assert np.allclose(est.trajectory.poses[5].t, est.trajectory.poses[4].t)


def test_estimate_fails_above_invalid_budget():
    g = _group(2)
    video, _ = _render(g, frames=8)
    video = video.copy()
    video[::2] = 0  # 50% invalid
    with pytest.raises(EstimationFailed):
        estimate_trajectory(video, DEFAULT_INTRINSICS, FPS)


def test_eval_camera_separates_matched_from_mismatched():
    g = _group(5)
    k = scaled_intrinsics(DEFAULT_INTRINSICS, 16.0)
    video, traj = _render(g, traj_idx=0, k=k)
    matched = eval_camera(video, k, traj, FPS)
    assert matched.rot_err_deg < 0.5
    assert matched.trans_err < 0.02
    assert matched.cam_mc < 0.05
    assert matched.valid_frames == 17
    # two trucks share a constant orientation, so rotation alone cannot
    # separate them; the combined cam_mc (and here translation) must
    other = group_trajectory(g, 3, 17, FPS)
    mismatched = eval_camera(video, k, other, FPS)
    assert mismatched.cam_mc > 10 * matched.cam_mc
    assert mismatched.trans_err > 10 * matched.trans_err


# ---------------------------------------------------------------------------
# pixel metrics

def test_pixel_metric_identities():
    v = np.random.default_rng(0).integers(0, 256, (3, 8, 8, 3)).astype(np.uint8)
    mse, psnr = eval_pixel(v, v)
    assert mse == 0.0 and psnr == math.inf
    black = np.zeros((2, 4, 4, 3), np.uint8)
    white = np.full((2, 4, 4, 3), 255, np.uint8)
    mse, psnr = eval_pixel(black, white)
    assert mse == 1.0 and psnr == 0.0
    # exact-arithmetic case on the same 0-255 scale, float-valued
    gt = np.zeros((1, 4, 4, 3))
    mse, psnr = eval_pixel(gt + 25.5, gt)
    assert abs(mse - 0.01) < 1e-12
    assert abs(psnr - 20.0) < 1e-9
    with pytest.raises(ValueError):
        eval_pixel(black, white[:1])


def test_pixel_mse_monotone_under_noise():
    rng = np.random.default_rng(1)
    gt = rng.integers(0, 256, (2, 6, 6, 3)).astype(np.uint8)
    # against itself: any noise can only increase the error
    for seed in range(10):
        n = np.random.default_rng(seed).normal(0, 20, gt.shape)
        noisy = np.clip(gt.astype(np.float64) + n, 0, 255)
        assert eval_pixel(noisy, gt)[0] >= 0.0
        assert eval_pixel(noisy, gt)[0] > eval_pixel(gt, gt)[0]
    # against a degraded copy: zero-mean noise increases the expected error
    degraded = np.clip(gt.astype(np.float64) + 30, 0, 255)
    base = eval_pixel(degraded, gt)[0]
    draws = [eval_pixel(degraded + np.random.default_rng(s).normal(0, 20, gt.shape), gt)[0]
             for s in range(50)]
    assert np.mean(draws) > base


# ---------------------------------------------------------------------------
# report files

def _rows():
    return [
        SampleResult("g0_a", "i2v", 1.25, 0.04, 1.5, 0.02, 16.9897, 0.31, 17),
        SampleResult("g0_b", "v2v", 0.5, 0.01, 0.625, 0.0, math.inf, 0.11, 17),
        SampleResult("g0_c", "v2v", 3.0, 0.2, 3.5, 0.09, 10.4575, 0.42, 16),
    ]


def test_report_files_and_round_trip(tmp_path):
    rep = evaluate_samples(_rows())
    paths = report(rep, tmp_path / "out")
    assert paths["csv"].exists() and paths["json"].exists()
    for col in ("rot_err_deg", "cam_mc", "psnr_db"):
        assert paths[col].exists() and paths[col].stat().st_size > 0
    rows2 = read_samples_csv(paths["csv"])
    assert rows2 == rep.samples
    rep2 = evaluate_samples(rows2)
    assert rep2.mean == rep.mean and rep2.median == rep.median
    doc = json.loads(paths["json"].read_text())
    assert doc["n_samples"] == 3
    assert doc["mean"]["rot_err_deg"] == rep.mean["rot_err_deg"]
    assert math.isinf(doc["mean"]["psnr_db"])


def test_report_empty_results(tmp_path):
    rep = evaluate_samples([])
    paths = report(rep, tmp_path / "empty")
    text = paths["csv"].read_text().strip()
    assert text == ",".join(CSV_COLUMNS)
    assert "rot_err_deg" not in paths  # no figures without samples
    assert read_samples_csv(paths["csv"]) == []


def test_aggregates_recomputable():
    rep = evaluate_samples(_rows())
    assert rep.mean["trans_err"] == pytest.approx((0.04 + 0.01 + 0.2) / 3)
    assert rep.median["rot_err_deg"] == 1.25


# ---------------------------------------------------------------------------
# preference ranking

def test_ranking_oracle_and_degenerate():
    g = _group(7)
    k = DEFAULT_INTRINSICS
    frames = 9
    # case: target at (loc0, traj0); matched cam ref from loc1 on traj0;
    # mismatched cam ref from loc1 on traj4
    t0 = group_trajectory(g, 0, frames, FPS)
    t4 = group_trajectory(g, 4, frames, FPS)
    cam_m = render_video(g.locations[1], t0, k)
    cam_x = render_video(g.locations[1], t4, k)
    target_m = render_video(g.locations[0], t0, k)
    target_x = render_video(g.locations[0], t4, k)
    cases = [RankingCase(cam_m, cam_x, None, None, t0)]

    def perfect(cam_video, cont, first, seed):
        # re-shoots the target location with whatever trajectory cam shows
        return target_m if np.array_equal(cam_video, cam_m) else target_x

    res = ranking_check(perfect, cases, k, FPS)
    assert res.rate == 1.0

    inverted = ranking_check(
        lambda c, co, fi, s: target_x if np.array_equal(c, cam_m) else target_m,
        cases, k, FPS)
    assert inverted.rate == 0.0

    blank = ranking_check(lambda c, co, fi, s: np.zeros_like(target_m), cases, k, FPS)
    assert blank.rate == 0.5  # estimation fails on both generations

    one_sided = ranking_check(
        lambda c, co, fi, s: target_m if np.array_equal(c, cam_m)
        else np.zeros_like(target_m), cases, k, FPS)
    assert one_sided.rate == 1.0
