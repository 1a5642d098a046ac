"""Camera-accuracy and pixel evaluation harness.

Trajectories are recovered from rendered or generated videos by detecting the
emissive marker constellation (exact colors, known 3D positions) and solving
each frame's pose from the 2D-3D correspondences.  Camera metrics compare the
recovered trajectory to a reference after aligning both to their first pose.
Pixel metrics (MSE on [0,1]-scaled values, PSNR) compare against the
renderable ground-truth target.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    EstimationFailed,
    Intrinsics,
    PoseEstimate,
    RigidPose,
    Trajectory,
    align_to_first,
    cam_mc,
    project,
    quat_from_axis_angle,
    quat_to_matrix,
    recover_pose,
    rot_err,
    sphere_image_center,
    trans_err,
)
from .scene import FIDUCIAL_PALETTE, FIDUCIAL_POSITIONS, FIDUCIAL_RADIUS

__all__ = [
    "CSV_COLUMNS",
    "CameraScores",
    "EvalReport",
    "RankingCase",
    "RankingResult",
    "SampleResult",
    "TrajectoryEstimate",
    "detect_fiducials",
    "estimate_trajectory",
    "eval_camera",
    "eval_pixel",
    "evaluate_samples",
    "ranking_check",
    "read_samples_csv",
    "report",
]

# Matching tolerance per color channel.  The marker palette keeps pairwise
# (r, g) L-inf distance >= 95 with blue pinned at 255, so a tolerance of 40
# can never assign one pixel to two markers, and shaded scene content (blue
# capped well below 183 - 40) can never reach any marker color.
DETECT_TOL = 40
MIN_MARKERS = 6
MAX_INVALID_FRACTION = 0.25


def _chord_line(keys: np.ndarray, vals: np.ndarray, length: int):
    """Span midpoint of ``vals`` per distinct key, fit midpoint = p + q*key.

    Returns (p, q) or None when any span has holes (the disc is partially
    occluded), fewer than 4 usable chords exist, or a midpoint strays from
    the fitted line by more than quantization allows (a clean chord midpoint
    carries at most 0.5 px of span-endpoint rounding).
    """
    lo = np.full(length, np.iinfo(np.int64).max)
    hi = np.full(length, -1)
    cnt = np.zeros(length, dtype=np.int64)
    np.minimum.at(lo, keys, vals)
    np.maximum.at(hi, keys, vals)
    np.add.at(cnt, keys, 1)
    used = cnt > 0
    lo, hi, cnt = lo[used], hi[used], cnt[used]
    if np.any(cnt != hi - lo + 1):
        return None
    long_enough = hi > lo
    if long_enough.sum() < 4:
        return None
    ks = np.nonzero(used)[0][long_enough].astype(np.float64)
    mid = (lo[long_enough] + hi[long_enough]) / 2.0
    q, p = np.polyfit(ks, mid, 1)
    if np.max(np.abs(p + q * ks - mid)) > 0.6:
        return None
    return p, q


def _disc_center(rows: np.ndarray, cols: np.ndarray, h: int, w: int):
    """Continuous (row, col) center of a rasterized disc.

    Midpoints of parallel chords of a conic are collinear, so two chord-line
    fits (per-row and per-column spans) intersect at the ellipse center with
    far less quantization noise than a plain pixel centroid.  Falls back to
    the centroid for discs too small to fit, and returns None for masks that
    fail the chord model (partial occlusion by another object).
    """
    small = len(rows) < 24
    fit_h = _chord_line(rows, cols, h)   # mid-col as a function of row
    fit_v = _chord_line(cols, rows, w)   # mid-row as a function of col
    if fit_h is None or fit_v is None:
        if small:
            return rows.mean(), cols.mean()
        return None
    (ph, qh), (pv, qv) = fit_h, fit_v
    denom = 1.0 - qh * qv
    if abs(denom) < 0.1:
        return rows.mean(), cols.mean()
    row_c = (pv + qv * ph) / denom
    col_c = ph + qh * row_c
    return row_c, col_c


def _detect(frame: np.ndarray, tol: int) -> dict[int, tuple[np.ndarray | None, np.ndarray, np.ndarray]]:
    """Marker id -> (center [u, v] or None, mask rows, mask cols).

    A pixel belongs to marker i when each channel is within ``tol`` of the
    marker color.  Centers come from chord-midpoint conic fits (see
    _disc_center); v counts up from the bottom edge (the renderer's vertical
    convention).  Discs touching the frame border are dropped outright; a
    disc partially hidden behind another object keeps its pixel mask but
    gets no center (the mask still supports template-based measurement).
    """
    if frame.ndim != 3 or frame.shape[2] != 3 or frame.dtype != np.uint8:
        raise ValueError("expected [h, w, 3] uint8 frame")
    h, w = frame.shape[:2]
    px = frame.astype(np.int16)
    out: dict[int, tuple[np.ndarray | None, np.ndarray, np.ndarray]] = {}
    # the palette pins blue at 255, so one blue-channel pass finds every
    # candidate pixel and the per-marker tests run on that subset only
    cand_r, cand_c = np.nonzero(np.abs(px[..., 2] - 255) <= tol)
    if len(cand_r) == 0:
        return out
    cand = px[cand_r, cand_c]
    for i, color in enumerate(FIDUCIAL_PALETTE):
        m = np.all(np.abs(cand - color.astype(np.int16)) <= tol, axis=1)
        if not m.any():
            continue
        rows, cols = cand_r[m], cand_c[m]
        if rows.min() == 0 or rows.max() == h - 1 or cols.min() == 0 or cols.max() == w - 1:
            continue
        center = _disc_center(rows, cols, h, w)
        uv = None if center is None else np.array([center[1] + 0.5, h - center[0] - 0.5])
        out[i] = (uv, rows, cols)
    return out


def detect_fiducials(frame: np.ndarray, tol: int = DETECT_TOL) -> dict[int, np.ndarray]:
    """Marker id -> clean disc center [u, v] in v-up pixel coordinates.

    Only cleanly visible discs appear; see _detect for the full story.
    """
    return {i: c for i, (c, _, _) in _detect(frame, tol).items() if c is not None}


@dataclass
class TrajectoryEstimate:
    trajectory: Trajectory
    valid: list[bool]          # per-frame: pose solved from detections
    reproj_px: float           # mean reprojection error over valid frames
    marker_counts: list[int]

    @property
    def valid_frames(self) -> int:
        return sum(self.valid)


def _dilate(m: np.ndarray, r: int = 2) -> np.ndarray:
    p = np.zeros((m.shape[0] + 2 * r, m.shape[1] + 2 * r), dtype=bool)
    p[r:-r, r:-r] = m
    out = np.zeros_like(m)
    for dr in range(2 * r + 1):
        for dc in range(2 * r + 1):
            out |= p[dr:dr + m.shape[0], dc:dc + m.shape[1]]
    return out


def _best_shift(dx, dy, obs, pc, s, fx, fy, du, dv):
    """Mismatch-minimizing conic shift over candidate offsets (du, dv) in px.

    A pixel with ray direction (dx, dy, 1) lies on the silhouette when
    (d.pc)^2 - s*|d|^2 > 0 on the camera-facing side; shifting the conic by
    (du, dv) pixels is the same as shifting the rays the other way.
    """
    su, sv = du / fx, dv / fy
    A = dx * pc[0] + dy * pc[1] + pc[2]
    N = dx * dx + dy * dy + 1.0
    A2 = A[:, None] - (su * pc[0] + sv * pc[1])[None, :]
    N2 = N[:, None] - 2.0 * (dx[:, None] * su[None, :] + dy[:, None] * sv[None, :]) \
        + (su * su + sv * sv)[None, :]
    inside = (A2 * A2 - s * N2 > 0.0) & (A2 > 0.0)
    mism = (inside != obs[:, None]).sum(axis=0)
    best = mism == mism.min()
    return float(du[best].mean()), float(dv[best].mean())


def _refine_center(rows, cols, pc, k: Intrinsics, h: int, w: int) -> np.ndarray | None:
    """Sub-pixel silhouette center by sliding the predicted conic over the mask.

    The current pose estimate fixes the silhouette's shape, leaving only its
    2D image position unknown.  Grid-search the offset that minimizes
    membership mismatches between the shifted conic and the binary marker
    mask (averaging over ties), once coarse and once fine.  Every boundary
    pixel constrains the offset, so this measures the center far below the
    single-pixel quantization of any centroid or chord statistic.
    """
    s = float(pc @ pc) - FIDUCIAL_RADIUS * FIDUCIAL_RADIUS
    if pc[2] <= 0.01 or s <= 0.0:
        return None
    ell = sphere_image_center(pc, FIDUCIAL_RADIUS, k)
    if ell is None:
        return None
    pad = 3
    r0, r1 = max(rows.min() - pad, 0), min(rows.max() + pad + 1, h)
    c0, c1 = max(cols.min() - pad, 0), min(cols.max() + pad + 1, w)
    sub = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    sub[rows - r0, cols - c0] = True
    band = _dilate(sub) & _dilate(~sub)  # within 2 px of the disc boundary
    br, bc = np.nonzero(band)
    if len(br) < 8:
        return None
    obs = sub[br, bc]
    dx = ((bc + c0) + 0.5 - k.cx) / k.fx
    dy = ((h - (br + r0) - 0.5) - k.cy) / k.fy

    # coarse -> medium -> fine; the coarse pass absorbs prediction error from
    # a pose solved against partially occluded discs
    u0, v0 = 0.0, 0.0
    for half, n in ((2.4, 9), (0.6, 21), (0.066, 13)):
        g = np.linspace(-half, half, n)
        du, dv = (a.ravel() for a in np.meshgrid(g + u0, g + v0))
        u0, v0 = _best_shift(dx, dy, obs, pc, s, k.fx, k.fy, du, dv)
    return ell + np.array([u0, v0])


MIN_MASK_PIXELS = 24  # an occluded sliver below this carries no usable signal

# The marker constellation subtends a narrow cone from the camera, so marker
# noise is amplified into the pose roughly twentyfold along the weakly
# constrained directions.  The ground checker fills exactly that gap: its grid
# lines lie at integer world coordinates, project to straight image lines
# spanning the near and far field, and their step edges are exact (two flat
# colors, no anti-aliasing).  Pose refinement on marker centers plus checker
# edge samples cuts camera-center noise about threefold.
GROUND_RANGE = 12.0  # ignore checker structure farther than this, units
_CORNER_GUARD = 0.08  # skip scanlines this close to a cell corner, units
_EDGE_SIGMA = 0.3  # quantization noise of one edge sample, px
_MARKER_SIGMA = 0.015  # measured center noise of one marker, px
_MIN_EDGE_SAMPLES = 8  # per line; fewer gives no stable direction


def _ground_grid(frame_shape, pose: RigidPose, k: Intrinsics, step: int = 8):
    """Back-project a sparse pixel grid onto the y = 0 plane.

    Returns (rows, cols, px, pz, ok) where ok marks rays that descend onto
    the plane within GROUND_RANGE of the camera."""
    h, w = frame_shape[:2]
    rows = np.arange(step // 2, h, step)
    cols = np.arange(step // 2, w, step)
    uu, vv = np.meshgrid(cols + 0.5, h - rows - 0.5)
    d = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], -1)
    dw = d @ pose.R  # row form of R.T @ d
    c = pose.center
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -c[1] / dw[..., 1]
    ok = (dw[..., 1] < -1e-9) & (s > 0.01)
    px = c[0] + s * dw[..., 0]
    pz = c[2] + s * dw[..., 2]
    ok &= np.hypot(px - c[0], pz - c[2]) < GROUND_RANGE
    return rows, cols, px, pz, ok


def _ground_colors(frame: np.ndarray, pose: RigidPose, k: Intrinsics):
    """The two rendered checker colors, inferred by cell-parity vote.

    Samples pixels predicted to be ground and safely inside a cell, and takes
    the most common exact color per parity class (occluders lose the vote).
    Returns (color_even, color_odd) or None when the ground is barely visible
    or the two classes do not separate."""
    rows, cols, px, pz, ok = _ground_grid(frame.shape, pose, k)
    ok &= (np.abs(px - np.round(px)) > 0.2) & (np.abs(pz - np.round(pz)) > 0.2)
    if ok.sum() < 60:
        return None
    par = ((np.floor(px) + np.floor(pz)).astype(np.int64) & 1).astype(bool)
    pix = frame[rows[:, None], cols[None, :]]
    out = []
    for want in (False, True):
        sel = ok & (par == want)
        if sel.sum() < 30:
            return None
        colors, counts = np.unique(pix[sel].reshape(-1, 3), axis=0, return_counts=True)
        out.append(colors[counts.argmax()])
    if (out[0] == out[1]).all():
        return None
    return out[0], out[1]


def _scan_crossings(frame, ca, cb, fixed, pred, horizontal):
    """Locate one color step per scanline near its predicted position.

    fixed: integer row (horizontal scan) or column indices; pred: predicted
    crossing coordinate along the scan.  A window of 10 pixels around the
    prediction must contain only the two checker colors with exactly one
    transition; everything else (occluders, extra edges) is dropped.
    Returns (kept indices into fixed, sub-pixel crossing coordinates)."""
    h, w = frame.shape[:2]
    off = np.arange(-4, 6)
    base = (pred - 0.5).astype(int) if horizontal else pred.astype(int)
    span = base[:, None] + off[None, :]
    limit = w if horizontal else h
    good = (span[:, 0] >= 0) & (span[:, -1] < limit)
    if not good.any():
        return np.array([], dtype=int), np.array([])
    idx = np.nonzero(good)[0]
    win = frame[fixed[idx][:, None], span[idx]] if horizontal else frame[span[idx], fixed[idx][:, None]]
    a = (win == ca).all(-1)
    pure = (a | (win == cb).all(-1)).all(1)
    flips = a[:, :-1] != a[:, 1:]
    sel = pure & (flips.sum(1) == 1)
    if not sel.any():
        return np.array([], dtype=int), np.array([])
    pos = span[idx[sel], 0] + flips[sel].argmax(1) + 1.0
    return idx[sel], pos


def _checker_edges(frame: np.ndarray, pose: RigidPose, k: Intrinsics, colors):
    """Edge samples along visible checker grid lines.

    For each world grid line (x = m or z = m) predicted within GROUND_RANGE,
    scan the image rows or columns it crosses (whichever the line cuts more
    steeply) and collect sub-pixel step positions.  Scanlines near cell
    corners are skipped so a crossing cannot belong to the perpendicular
    family.  Returns a list of (world_a, world_b, samples[n, 2], weight):
    world endpoints of the scanned span plus a per-sample weight that caps
    the line's total vote at its number of distinct quantization steps.  A
    nearly axis-parallel line can put hundreds of scanlines on the same
    staircase step; those share one rounding error and must not be counted
    as independent measurements."""
    ca, cb = colors
    h, w = frame.shape[:2]
    c = pose.center
    _, _, px, pz, ok = _ground_grid(frame.shape, pose, k)
    if ok.sum() < 50:
        return []
    ranges = {"x": (px[ok].min(), px[ok].max()), "z": (pz[ok].min(), pz[ok].max())}
    lines = []
    for fam in ("x", "z"):
        mlo, mhi = ranges[fam]
        alo, ahi = ranges["z" if fam == "x" else "x"]
        for m in range(int(np.ceil(mlo)), int(np.floor(mhi)) + 1):
            ss = np.linspace(alo, ahi, 400)
            pts = (np.stack([np.full_like(ss, float(m)), np.zeros_like(ss), ss], 1)
                   if fam == "x" else
                   np.stack([ss, np.zeros_like(ss), np.full_like(ss, float(m))], 1))
            pc = pts @ pose.R.T + pose.t
            vis = pc[:, 2] > 0.01
            uv = np.full((len(ss), 2), np.nan)
            uv[vis, 0] = k.fx * pc[vis, 0] / pc[vis, 2] + k.cx
            uv[vis, 1] = k.fy * pc[vis, 1] / pc[vis, 2] + k.cy
            vis &= (uv[:, 0] >= 6) & (uv[:, 0] <= w - 6) \
                & (uv[:, 1] >= 6) & (uv[:, 1] <= h - 6) \
                & (np.hypot(pts[:, 0] - c[0], pts[:, 2] - c[2]) < GROUND_RANGE)
            if vis.sum() < 10:
                continue
            uvv, ssv = uv[vis], ss[vis]
            span = uvv.max(0) - uvv.min(0)
            if span[1] >= span[0]:  # steep in the image: scan along rows
                o = np.argsort(uvv[:, 1])
                uvv, ssv = uvv[o], ssv[o]
                rows = np.arange(int(h - 0.5 - uvv[-1, 1]) + 1, int(h - 0.5 - uvv[0, 1]) + 1)
                rows = rows[(rows >= 0) & (rows < h)]
                if len(rows) == 0:
                    continue
                vq = h - rows - 0.5
                pred = np.interp(vq, uvv[:, 1], uvv[:, 0])
                along = np.interp(vq, uvv[:, 1], ssv)
                guard = np.abs(along - np.round(along)) > _CORNER_GUARD
                rows, pred, vq = rows[guard], pred[guard], vq[guard]
                if len(rows) == 0:
                    continue
                keep, pos = _scan_crossings(frame, ca, cb, rows, pred, True)
                obs = np.stack([pos, vq[keep]], 1) if len(keep) else np.empty((0, 2))
            else:  # shallow: scan along columns
                o = np.argsort(uvv[:, 0])
                uvv, ssv = uvv[o], ssv[o]
                cols = np.arange(int(uvv[0, 0] - 0.5) + 1, int(uvv[-1, 0] - 0.5) + 1)
                cols = cols[(cols >= 0) & (cols < w)]
                if len(cols) == 0:
                    continue
                uq = cols + 0.5
                vp = np.interp(uq, uvv[:, 0], uvv[:, 1])
                along = np.interp(uq, uvv[:, 0], ssv)
                guard = np.abs(along - np.round(along)) > _CORNER_GUARD
                cols, uq, vp = cols[guard], uq[guard], vp[guard]
                if len(cols) == 0:
                    continue
                rowp = h - 0.5 - vp
                keep, pos = _scan_crossings(frame, ca, cb, cols, rowp, False)
                obs = np.stack([uq[keep], h - pos], 1) if len(keep) else np.empty((0, 2))
            if len(obs) < _MIN_EDGE_SAMPLES:
                continue
            # distinct staircase steps along the scan = independent samples
            n_eff = np.clip(pos.max() - pos.min() + 1.0, 1.0, len(obs))
            weight = np.sqrt(n_eff / len(obs))
            pa = np.array([m, 0.0, ssv[0]]) if fam == "x" else np.array([ssv[0], 0.0, m])
            pb = np.array([m, 0.0, ssv[-1]]) if fam == "x" else np.array([ssv[-1], 0.0, m])
            lines.append((pa, pb, obs, weight))
    return lines


def _edge_residuals(R, t, k: Intrinsics, lines):
    """Distances of observed edge samples to their projected world lines, px."""
    res = []
    for pa, pb, obs, _ in lines:
        qa, qb = R @ pa + t, R @ pb + t
        if qa[2] <= 0.01 or qb[2] <= 0.01:
            res.append(np.full(len(obs), 1e3))
            continue
        ua = np.array([k.fx * qa[0] / qa[2] + k.cx, k.fy * qa[1] / qa[2] + k.cy])
        ub = np.array([k.fx * qb[0] / qb[2] + k.cx, k.fy * qb[1] / qb[2] + k.cy])
        d = ub - ua
        n = np.array([-d[1], d[0]]) / max(np.linalg.norm(d), 1e-12)
        res.append(obs @ n - n @ ua)
    return res


def _marker_residuals(R, t, k: Intrinsics, pts3d, px):
    pc = pts3d @ R.T + t
    z = np.maximum(pc[:, 2], 1e-9)
    u = k.fx * pc[:, 0] / z + k.cx
    v = k.fy * pc[:, 1] / z + k.cy
    return (np.stack([u, v], 1) - px).ravel()


def _refine_with_edges(pose: RigidPose, k: Intrinsics, pts3d, marker_px, lines):
    """Joint pose refinement on marker centers plus checker edge samples.

    Gauss-Newton over a left rotation perturbation (numeric Jacobian).
    Residuals are scaled by the measured per-sample noise, each line's vote
    is capped at its count of distinct staircase steps, and a wide Huber
    reweighting guards against the occasional 3-sigma marker or a
    contaminated scanline.  Falls back to the input pose if the result
    degrades marker reprojection, which marker-only solves keep tiny."""
    R0, t0 = pose.R, pose.t
    wline = np.concatenate([np.full(len(obs), wl) for _, _, obs, wl in lines])
    wfull = np.concatenate([np.ones(2 * len(pts3d)), wline])

    def stacked(R, t):
        m = _marker_residuals(R, t, k, pts3d, marker_px) / _MARKER_SIGMA
        e = np.concatenate(_edge_residuals(R, t, k, lines)) / _EDGE_SIGMA
        return np.concatenate([m, e])

    R, t = R0, t0
    for _ in range(5):
        r0 = stacked(R, t)
        hub = wfull * np.sqrt(np.minimum(1.0, 3.0 / np.maximum(np.abs(r0), 1e-12)))
        J = np.empty((len(r0), 6))
        eps = 1e-6
        for i in range(3):
            wv = np.zeros(3)
            wv[i] = eps
            dR = quat_to_matrix(quat_from_axis_angle(wv / eps, eps))
            J[:, i] = (stacked(dR @ R, dR @ t) - r0) / eps
        for i in range(3):
            dt = np.zeros(3)
            dt[i] = eps
            J[:, 3 + i] = (stacked(R, t + dt) - r0) / eps
        Jw = J * hub[:, None]
        rw = r0 * hub
        try:
            delta = np.linalg.solve(Jw.T @ Jw + 1e-12 * np.eye(6), -(Jw.T @ rw))
        except np.linalg.LinAlgError:
            return pose
        ang = np.linalg.norm(delta[:3])
        if ang > 1e-15:
            dR = quat_to_matrix(quat_from_axis_angle(delta[:3] / ang, ang))
            R, t = dR @ R, dR @ t
        t = t + delta[3:]
        if np.linalg.norm(delta) < 1e-10:
            break
    before = np.abs(_marker_residuals(R0, t0, k, pts3d, marker_px)).mean()
    after = np.abs(_marker_residuals(R, t, k, pts3d, marker_px)).mean()
    if after > max(3.0 * before, 0.08):
        return pose
    return RigidPose.from_matrix(R, t)


def _checker_refine(frame: np.ndarray, k: Intrinsics, est, pts3d, marker_px):
    """Refine a marker-based pose against the ground checker, when usable."""
    colors = _ground_colors(frame, est.pose, k)
    if colors is None:
        return est
    lines = _checker_edges(frame, est.pose, k, colors)
    if not lines:
        return est
    pose = _refine_with_edges(est.pose, k, pts3d, marker_px, lines)
    return PoseEstimate(pose, est.reproj_err_px)


def _frame_pose(frame: np.ndarray, k: Intrinsics, tol: int):
    found = _detect(frame, tol)
    ids = [i for i, (c, rows, _) in sorted(found.items())
           if c is not None or len(rows) >= MIN_MASK_PIXELS]
    if len(ids) < MIN_MARKERS:
        return None
    pts3d = FIDUCIAL_POSITIONS[ids]
    h, w = frame.shape[:2]
    # partially occluded discs start from their mask centroid; the outlier
    # trim inside recover_pose keeps that bias out of the initial solve
    px = np.stack([
        found[i][0] if found[i][0] is not None
        else np.array([found[i][2].mean() + 0.5, h - found[i][1].mean() - 0.5])
        for i in ids
    ])
    try:
        est = recover_pose(pts3d, px, k)
        # iterate: predict each disc's silhouette from the current pose,
        # re-measure its center against the mask, and remove the offset
        # between silhouette center and center projection
        for _ in range(2):
            obs = px.copy()
            for j, i in enumerate(ids):
                x_world = FIDUCIAL_POSITIONS[i]
                pc = est.pose.apply(x_world)
                ctr = project(x_world, est.pose, k)
                ell = sphere_image_center(pc, FIDUCIAL_RADIUS, k)
                if ctr is None or ell is None:
                    continue
                ref = _refine_center(found[i][1], found[i][2], pc, k, h, w)
                base = px[j] if ref is None else ref
                obs[j] = base - (ell - ctr)
            est = recover_pose(pts3d, obs, k)
        est = _checker_refine(frame, k, est, pts3d, obs)
    except EstimationFailed:
        return None
    return est, len(ids)


def estimate_trajectory(video: np.ndarray, k: Intrinsics,
                        fps: float = 8.0, tol: int = DETECT_TOL) -> TrajectoryEstimate:
    """Recover the camera trajectory of a rendered/generated video.

    Frames where fewer than 6 markers are detected (or the solve fails) are
    invalid; if more than 25% of frames are invalid the whole estimation
    fails.  Invalid frames inherit the nearest earlier valid pose (the first
    valid pose for a leading run) so the result always has one pose per frame.
    """
    if video.ndim != 4 or video.shape[3] != 3:
        raise ValueError("expected [f, h, w, 3] video")
    n = video.shape[0]
    poses: list[RigidPose | None] = []
    valid: list[bool] = []
    counts: list[int] = []
    errs: list[float] = []
    for f in range(n):
        got = _frame_pose(video[f], k, tol)
        if got is None:
            poses.append(None)
            valid.append(False)
            counts.append(0)
        else:
            est, n_markers = got
            poses.append(est.pose)
            valid.append(True)
            counts.append(n_markers)
            errs.append(est.reproj_err_px)
    n_invalid = n - sum(valid)
    if n_invalid > MAX_INVALID_FRACTION * n:
        raise EstimationFailed(
            f"{n_invalid}/{n} frames had fewer than {MIN_MARKERS} detectable markers")
    first_valid = next(p for p in poses if p is not None)
    filled: list[RigidPose] = []
    last = first_valid
    for p in poses:
        if p is not None:
            last = p
        filled.append(last)
    return TrajectoryEstimate(Trajectory(_snap_static_center(filled), fps), valid,
                              float(np.mean(errs)), counts)


# Camera-center motion below this, summed over a whole clip, is two orders of
# magnitude under the smallest real trajectory move and indistinguishable from
# estimator noise.
STATIC_CENTER_EPS = 2e-3


def _snap_static_center(poses: list[RigidPose]) -> list[RigidPose]:
    """Collapse sub-noise camera-center drift to an exactly fixed center.

    The translation metric normalizes each trajectory by its own maximum
    frame displacement, so for a camera that only rotates in place (pan,
    tilt) any nonzero center noise would be blown up to unit scale.  Pinning
    near-static centers to frame 0's center keeps those comparisons
    meaningful and is lossless for every real camera move.
    """
    c0 = poses[0].center
    if max(np.linalg.norm(p.center - c0) for p in poses) >= STATIC_CENTER_EPS:
        return poses
    return [RigidPose(p.q, -(p.R @ c0)) for p in poses]


# ---------------------------------------------------------------------------
# metrics

@dataclass
class CameraScores:
    rot_err_deg: float
    trans_err: float
    cam_mc: float
    reproj_px: float
    valid_frames: int


def eval_camera(gen_video: np.ndarray, k: Intrinsics, ref: Trajectory,
                fps: float = 8.0) -> CameraScores:
    """Estimate the generated video's trajectory and score it against the
    reference trajectory (both aligned to their first pose)."""
    est = estimate_trajectory(gen_video, k, fps)
    a = align_to_first(ref)
    b = align_to_first(est.trajectory)
    return CameraScores(rot_err(a, b), trans_err(a, b), cam_mc(a, b),
                        est.reproj_px, est.valid_frames)


def eval_pixel(gen_video: np.ndarray, gt_video: np.ndarray) -> tuple[float, float]:
    """(mse, psnr_db) on [0,1]-scaled values; identical videos give (0, inf)."""
    if gen_video.shape != gt_video.shape:
        raise ValueError(f"shape mismatch {gen_video.shape} vs {gt_video.shape}")
    a = gen_video.astype(np.float64) / 255.0
    b = gt_video.astype(np.float64) / 255.0
    mse = float(np.mean((a - b) ** 2))
    psnr = math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)
    return mse, psnr


# ---------------------------------------------------------------------------
# per-sample rows and aggregate report

CSV_COLUMNS = ["sample_id", "task", "rot_err_deg", "trans_err", "cam_mc",
               "pixel_mse", "psnr_db", "reproj_px", "valid_frames"]

_METRIC_COLUMNS = CSV_COLUMNS[2:]


@dataclass
class SampleResult:
    sample_id: str
    task: str
    rot_err_deg: float
    trans_err: float
    cam_mc: float
    pixel_mse: float
    psnr_db: float
    reproj_px: float
    valid_frames: int


@dataclass
class EvalReport:
    samples: list[SampleResult]
    mean: dict[str, float]
    median: dict[str, float]


def _aggregate(rows: list[SampleResult]) -> tuple[dict, dict]:
    mean, median = {}, {}
    for col in _METRIC_COLUMNS:
        vals = [float(getattr(r, col)) for r in rows]
        mean[col] = statistics.fmean(vals) if vals else math.nan
        median[col] = statistics.median(vals) if vals else math.nan
    return mean, median


def evaluate_samples(rows: list[SampleResult]) -> EvalReport:
    mean, median = _aggregate(rows)
    return EvalReport(rows, mean, median)


def report(rep: EvalReport, out_dir) -> dict[str, Path]:
    """Write samples.csv (fixed columns), aggregates.json, and one line plot
    per metric.  Returns the created paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    csv_path = out / "samples.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rep.samples:
            w.writerow([getattr(r, c) for c in CSV_COLUMNS])
    paths["csv"] = csv_path

    json_path = out / "aggregates.json"
    doc = {"n_samples": len(rep.samples), "mean": rep.mean, "median": rep.median}
    json_path.write_text(json.dumps(doc, indent=1))
    paths["json"] = json_path

    if rep.samples:
        paths.update(_metric_figures(rep, out))
    return paths


def _metric_figures(rep: EvalReport, out: Path) -> dict[str, Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = {}
    xs = np.arange(len(rep.samples))
    for col in _METRIC_COLUMNS:
        vals = [float(getattr(r, col)) for r in rep.samples]
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(xs, vals, marker="o", lw=1)
        finite = [v for v in vals if math.isfinite(v)]
        if finite:
            ax.axhline(statistics.fmean(finite), color="tab:red", lw=0.8, ls="--",
                       label="mean")
            ax.legend(loc="best", fontsize=8)
        ax.set_xlabel("sample")
        ax.set_ylabel(col)
        ax.set_title(col)
        fig.tight_layout()
        p = out / f"{col}.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        paths[col] = p
    return paths


def read_samples_csv(path) -> list[SampleResult]:
    """Parse a samples.csv back into rows (floats round-trip exactly via repr)."""
    rows = []
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        if r.fieldnames != CSV_COLUMNS:
            raise ValueError(f"unexpected columns {r.fieldnames}")
        types = typing.get_type_hints(SampleResult)
        for rec in r:
            kw = {}
            for col in CSV_COLUMNS:
                ty = types[col]
                kw[col] = rec[col] if ty is str else (
                    int(rec[col]) if ty is int else float(rec[col]))
            rows.append(SampleResult(**kw))
    return rows


# ---------------------------------------------------------------------------
# preference ranking

@dataclass
class RankingCase:
    """One held-out triple plus a mismatched camera reference from the same
    group (different trajectory)."""
    cam_video: np.ndarray
    alt_cam_video: np.ndarray
    cont_video: np.ndarray | None
    first_frame: np.ndarray | None
    ref_traj: Trajectory


@dataclass
class RankingResult:
    rate: float
    decisions: list[float]     # per case: 1 matched wins, 0 loses, 0.5 tie/undecidable


def ranking_check(generate, cases: list[RankingCase], k: Intrinsics,
                  fps: float = 8.0, seed: int = 0) -> RankingResult:
    """Fraction of cases where conditioning on the matched camera reference
    yields lower CamMC against the target's ground-truth trajectory than
    conditioning on a mismatched reference.

    ``generate(cam_video, cont_video, first_frame, seed) -> uint8 video``.
    Both generations of a case share the seed, so they start from identical
    noise and differ only in the camera reference.  If trajectory estimation
    fails for one sample the other wins; if for both, the case scores 0.5.
    """
    decisions: list[float] = []
    for i, case in enumerate(cases):
        vm = generate(case.cam_video, case.cont_video, case.first_frame, seed + i)
        vx = generate(case.alt_cam_video, case.cont_video, case.first_frame, seed + i)
        ref = align_to_first(case.ref_traj)

        def _score(video):
            try:
                est = estimate_trajectory(video, k, fps)
            except EstimationFailed:
                return None
            return cam_mc(ref, align_to_first(est.trajectory))

        mc_m, mc_x = _score(vm), _score(vx)
        if mc_m is None and mc_x is None:
            decisions.append(0.5)
        elif mc_m is None:
            decisions.append(0.0)
        elif mc_x is None:
            decisions.append(1.0)
        elif mc_m == mc_x:
            decisions.append(0.5)
        else:
            decisions.append(1.0 if mc_m < mc_x else 0.0)
    return RankingResult(float(np.mean(decisions)) if decisions else math.nan,
                         decisions)
