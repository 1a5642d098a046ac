"""Procedural scene construction and dataset planning.

A *scene* (one "location") is a ground plane, a few static boxes and spheres,
1-3 animated subject spheres riding periodic Catmull-Rom splines, a
directional light, and the marker constellation.

The eight marker spheres sit at CANONICAL world positions shared by every
scene in a dataset: two rings floating above the content region, below every
camera the trajectory sampler can produce.  Because marker positions, the
group anchor, and the trajectory rule are all shared within a group, a camera
reference clip and its paired target show the markers tracing identical pixel
tracks, which is the signal the generator is supposed to clone.  Marker colors
come from a reserved palette (blue channel 255); scene albedos keep their blue
channel at or below 0.62 and the sky below 0.65, so a tolerant color match
cannot confuse content with markers.

A *group* is one anchor pose, ten trajectory rules, and four scenes
("locations").  Every (location, trajectory) cell of the 4 x 10 grid is a
video; triples pair each video as target with a camera reference (sibling
location, same trajectory) and a content reference (same location, different
trajectory).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, RigidPose, look_at_pose
from .trajectory import (
    DEFAULT_RULE_CONFIG,
    RuleConfig,
    RuleKind,
    TrajectoryRule,
    rule_from_dict,
    rule_to_dict,
    sample_rule,
)

__all__ = [
    "FIDUCIAL_PALETTE",
    "FIDUCIAL_POSITIONS",
    "FIDUCIAL_RADIUS",
    "DEFAULT_INTRINSICS",
    "scaled_intrinsics",
    "GroundPlane",
    "Box",
    "StaticSphere",
    "Subject",
    "SceneSpec",
    "build_scene",
    "animate",
    "catmull_rom",
    "GroupSpec",
    "build_group",
    "TripleIndex",
    "pairing",
    "DatasetManifest",
    "plan_dataset",
]

# markers: two rings above the content region, below all cameras.  Ring radii
# and the marker size are tuned so that from every pose the trajectory sampler
# can reach, at least 6 of 8 markers are fully in frame and their projected
# discs are pairwise disjoint (verified by adversarial max-speed sweeps).
_RING_A = [(2.00, 2.20, math.radians(a)) for a in (0.0, 90.0, 180.0, 270.0)]
_RING_B = [(1.35, 3.00, math.radians(a)) for a in (45.0, 135.0, 225.0, 315.0)]
FIDUCIAL_POSITIONS = np.array(
    [[r * math.cos(az), y, r * math.sin(az)] for r, y, az in _RING_A + _RING_B]
)
FIDUCIAL_RADIUS = 0.14
# reserved colors: blue = 255, (r, g) pairwise L-inf separation >= 95
FIDUCIAL_PALETTE = np.array([
    [255, 64, 255],
    [64, 255, 255],
    [255, 255, 255],
    [64, 64, 255],
    [160, 255, 255],
    [255, 160, 255],
    [64, 160, 255],
    [160, 64, 255],
], dtype=np.uint8)

# desk-scale camera: 4:7 aspect, half-FOV 42 degrees horizontal / 34 vertical
DEFAULT_INTRINSICS = Intrinsics(fx=46.6, fy=35.6, cx=42.0, cy=24.0, width=84, height=48)

SCENE_CENTER = np.array([0.0, 1.9, 0.0])  # anchor look target

_MAX_ALBEDO_BLUE = 0.62  # keeps shaded content far from the marker palette


def scaled_intrinsics(k: Intrinsics, s: float) -> Intrinsics:
    """Uniformly rescale the image plane (same field of view)."""
    return Intrinsics(fx=k.fx * s, fy=k.fy * s, cx=k.cx * s, cy=k.cy * s,
                      width=int(round(k.width * s)), height=int(round(k.height * s)))


# ---------------------------------------------------------------------------
# scene primitives

@dataclass(frozen=True)
class GroundPlane:
    albedo_a: tuple[float, float, float]
    albedo_b: tuple[float, float, float]
    checker: float = 1.0  # checker square edge, units


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # full extents
    yaw: float  # rotation about world y, radians
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class StaticSphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class Subject:
    """Animated sphere on a closed Catmull-Rom loop."""

    radius: float
    albedo: tuple[float, float, float]
    control_points: tuple[tuple[float, float, float], ...]  # 4-8 points
    period_s: float


@dataclass
class SceneSpec:
    scene_id: str
    seed: int
    ground: GroundPlane
    boxes: list[Box]
    spheres: list[StaticSphere]
    subjects: list[Subject]
    light_dir: np.ndarray  # unit vector pointing toward the light
    ambient: float
    sky: np.ndarray  # RGB in [0, 1]

    def static_count(self) -> int:
        return 1 + len(self.boxes) + len(self.spheres)

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "seed": self.seed,
            "ground": {"albedo_a": list(self.ground.albedo_a),
                       "albedo_b": list(self.ground.albedo_b),
                       "checker": self.ground.checker},
            "boxes": [{"center": list(b.center), "size": list(b.size),
                       "yaw": b.yaw, "albedo": list(b.albedo)} for b in self.boxes],
            "spheres": [{"center": list(s.center), "radius": s.radius,
                         "albedo": list(s.albedo)} for s in self.spheres],
            "subjects": [{"radius": s.radius, "albedo": list(s.albedo),
                          "control_points": [list(p) for p in s.control_points],
                          "period_s": s.period_s} for s in self.subjects],
            "light_dir": [float(v) for v in self.light_dir],
            "ambient": self.ambient,
            "sky": [float(v) for v in self.sky],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            scene_id=d["scene_id"],
            seed=int(d["seed"]),
            ground=GroundPlane(tuple(d["ground"]["albedo_a"]), tuple(d["ground"]["albedo_b"]),
                               float(d["ground"]["checker"])),
            boxes=[Box(tuple(b["center"]), tuple(b["size"]), float(b["yaw"]), tuple(b["albedo"]))
                   for b in d["boxes"]],
            spheres=[StaticSphere(tuple(s["center"]), float(s["radius"]), tuple(s["albedo"]))
                     for s in d["spheres"]],
            subjects=[Subject(float(s["radius"]), tuple(s["albedo"]),
                              tuple(tuple(p) for p in s["control_points"]), float(s["period_s"]))
                      for s in d["subjects"]],
            light_dir=np.array(d["light_dir"]),
            ambient=float(d["ambient"]),
            sky=np.array(d["sky"]),
        )


def _sample_albedo(rng) -> tuple[float, float, float]:
    return (float(rng.uniform(0.15, 0.9)), float(rng.uniform(0.15, 0.9)),
            float(rng.uniform(0.10, _MAX_ALBEDO_BLUE)))


# subject envelope: keeps subjects (including spline overshoot and radius)
# under the marker sight lines and inside the camera's content view
_SUBJECT_R_MAX = 1.0
_SUBJECT_Y = (0.35, 1.90)


def build_scene(seed: int, scene_id: str | None = None) -> SceneSpec:
    """Deterministic scene from a seed: 3-8 static primitives (ground
    included), 1-3 subjects, fixed marker constellation."""
    rng = np.random.default_rng(seed)
    ground = GroundPlane(_sample_albedo(rng), _sample_albedo(rng))
    n_static = int(rng.integers(3, 9))
    boxes: list[Box] = []
    spheres: list[StaticSphere] = []
    for _ in range(n_static - 1):
        az = rng.uniform(0, 2 * math.pi)
        r = rng.uniform(1.3, 2.6)
        x, z = r * math.cos(az), r * math.sin(az)
        if rng.random() < 0.5:
            size = rng.uniform(0.3, 0.9, size=3)
            size[1] = min(size[1], 1.7)  # keep tops under the marker sight lines
            boxes.append(Box((x, float(size[1] / 2), z), tuple(float(v) for v in size),
                             float(rng.uniform(0, math.pi / 2)), _sample_albedo(rng)))
        else:
            rad = float(rng.uniform(0.2, 0.5))
            spheres.append(StaticSphere((x, rad, z), rad, _sample_albedo(rng)))

    subjects: list[Subject] = []
    for _ in range(int(rng.integers(1, 4))):
        radius = float(rng.uniform(0.12, 0.22))
        k = int(rng.integers(4, 9))
        pts = np.stack([
            rng.uniform(-0.6, 0.6, size=k),
            rng.uniform(0.6, 1.6, size=k),
            rng.uniform(-0.6, 0.6, size=k),
        ], axis=1)
        pts = _fit_to_envelope(pts, radius)
        subjects.append(Subject(radius, _sample_albedo(rng),
                                tuple(tuple(float(v) for v in p) for p in pts),
                                float(rng.uniform(2.0, 6.0))))

    el = rng.uniform(math.radians(35), math.radians(75))
    az = rng.uniform(0, 2 * math.pi)
    light = np.array([math.cos(el) * math.cos(az), math.sin(el), math.cos(el) * math.sin(az)])
    sky = np.array([rng.uniform(0.48, 0.56), rng.uniform(0.52, 0.60), rng.uniform(0.55, 0.64)])
    return SceneSpec(
        scene_id=scene_id or f"scene{seed}",
        seed=int(seed),
        ground=ground,
        boxes=boxes,
        spheres=spheres,
        subjects=subjects,
        light_dir=light,
        ambient=float(rng.uniform(0.25, 0.4)),
        sky=sky,
    )


def _fit_to_envelope(pts: np.ndarray, radius: float) -> np.ndarray:
    """Shrink a control polygon toward its centroid until the whole periodic
    spline (plus the sphere radius) fits the subject envelope."""
    centroid = pts.mean(axis=0)
    for _ in range(20):
        dense = np.stack([catmull_rom(pts, u) for u in np.linspace(0, 1, 64, endpoint=False)])
        r_flat = np.hypot(dense[:, 0], dense[:, 2]).max() + radius
        y_lo, y_hi = dense[:, 1].min() - radius, dense[:, 1].max() + radius
        if r_flat <= _SUBJECT_R_MAX and y_lo >= _SUBJECT_Y[0] and y_hi <= _SUBJECT_Y[1]:
            return pts
        pts = centroid + 0.85 * (pts - centroid)
    return pts


def catmull_rom(points: np.ndarray, u: float) -> np.ndarray:
    """Closed uniform Catmull-Rom loop through ``points`` at phase u in [0, 1)."""
    pts = np.asarray(points, dtype=np.float64)
    k = len(pts)
    if k < 4:
        raise ValueError("need at least 4 control points")
    s = (u % 1.0) * k
    i = int(s)
    t = s - i
    p0 = pts[(i - 1) % k]
    p1 = pts[i % k]
    p2 = pts[(i + 1) % k]
    p3 = pts[(i + 2) % k]
    m1 = 0.5 * (p2 - p0)
    m2 = 0.5 * (p3 - p1)
    t2, t3 = t * t, t * t * t
    return ((2 * t3 - 3 * t2 + 1) * p1 + (t3 - 2 * t2 + t) * m1
            + (-2 * t3 + 3 * t2) * p2 + (t3 - t2) * m2)


def animate(scene: SceneSpec, t: float) -> np.ndarray:
    """Subject centers at time ``t`` seconds, shape [n_subjects, 3]."""
    if t < 0:
        raise ValueError("time must be non-negative")
    out = []
    for s in scene.subjects:
        u = (t / s.period_s) % 1.0
        out.append(catmull_rom(np.asarray(s.control_points), u))
    return np.stack(out) if out else np.zeros((0, 3))


# ---------------------------------------------------------------------------
# groups, triples, manifest

@dataclass
class GroupSpec:
    group_id: str
    anchor: RigidPose
    rules: list[TrajectoryRule]  # shared by all locations
    locations: list[SceneSpec]

    def to_dict(self) -> dict:
        return {
            "id": self.group_id,
            "scene": {"anchor": {"q": [float(v) for v in self.anchor.q],
                                 "t": [float(v) for v in self.anchor.t]}},
            "locations": [s.to_dict() for s in self.locations],
            "rules": [rule_to_dict(r) for r in self.rules],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupSpec":
        a = d["scene"]["anchor"]
        return cls(
            group_id=d["id"],
            anchor=RigidPose(np.array(a["q"]), np.array(a["t"])),
            rules=[rule_from_dict(r) for r in d["rules"]],
            locations=[SceneSpec.from_dict(s) for s in d["locations"]],
        )


def build_group(rng: np.random.Generator, group_id: str,
                trajectories_per_group: int = 10, locations_per_group: int = 4,
                rule_config: RuleConfig = DEFAULT_RULE_CONFIG) -> GroupSpec:
    """One anchor, ``trajectories_per_group`` rules, and
    ``locations_per_group`` scenes drawn from ``rng``."""
    az = rng.uniform(0, 2 * math.pi)
    dist = rng.uniform(4.75, 6.25)
    eye = np.array([dist * math.cos(az), rng.uniform(3.2, 3.7), dist * math.sin(az)])
    anchor = look_at_pose(eye, SCENE_CENTER)
    rules = [_anchor_rule(sample_rule(rng, rule_config), anchor, rule_config)
             for _ in range(trajectories_per_group)]
    scenes = [build_scene(int(rng.integers(0, 2**63)), f"{group_id}_loc{j}")
              for j in range(locations_per_group)]
    return GroupSpec(group_id, anchor, rules, scenes)


def _anchor_rule(rule: TrajectoryRule, anchor: RigidPose,
                 config: RuleConfig) -> TrajectoryRule:
    """Specialize a sampled rule to a group anchor.  Arcs orbit the anchor's
    look target (the scene center), so the orbit radius is the anchor's
    distance to it and the sweep is re-clamped to the peak-speed cap for that
    radius.  Other kinds pass through unchanged."""
    if rule.kind is not RuleKind.ARC:
        return rule
    radius = float(np.linalg.norm(anchor.center - SCENE_CENTER))
    cap = math.degrees(config.arc_peak_speed * config.ref_duration / (3.0 * radius))
    sweep = min(rule.arc_sweep_deg, cap)
    return replace(rule, arc_radius=radius, arc_sweep_deg=sweep)


@dataclass(frozen=True)
class TripleIndex:
    """(camera reference, content reference, target) video pointers.
    Videos are addressed as (location index, trajectory index) within a group.

    Invariants: target and cont_ref share the location; target and cam_ref
    share the trajectory index; cam_ref comes from a different location."""

    group_id: str
    target: tuple[int, int]
    cam_ref: tuple[int, int]
    cont_ref: tuple[int, int]

    def __post_init__(self):
        if self.cam_ref[1] != self.target[1] or self.cam_ref[0] == self.target[0]:
            raise ValueError("cam_ref must share the trajectory index, not the location")
        if self.cont_ref[0] != self.target[0] or self.cont_ref[1] == self.target[1]:
            raise ValueError("cont_ref must share the location, not the trajectory")


def pairing(group: GroupSpec, rng: np.random.Generator, per_target: int = 3,
            keep=None) -> list[TripleIndex]:
    """Enumerate triples for one group.

    Every video is a target; its camera references are drawn without
    replacement from the other locations at the same trajectory index
    (``per_target`` of them, default all 3), and each triple's content
    reference is drawn uniformly from the target location's other
    trajectories.  ``keep``, if given, filters triples after construction.
    """
    n_loc = len(group.locations)
    n_traj = len(group.rules)
    if not 1 <= per_target <= n_loc - 1:
        raise ValueError(f"per_target must be in [1, {n_loc - 1}]")
    triples: list[TripleIndex] = []
    for loc in range(n_loc):
        for traj in range(n_traj):
            others = [j for j in range(n_loc) if j != loc]
            cams = rng.permutation(others)[:per_target] if per_target < len(others) else others
            for cam_loc in cams:
                cont = int(rng.integers(n_traj - 1))
                if cont >= traj:
                    cont += 1
                triples.append(TripleIndex(group.group_id, (loc, traj),
                                           (int(cam_loc), traj), (loc, cont)))
    if keep is not None:
        triples = [t for t in triples if keep(t)]
    return triples


@dataclass
class DatasetManifest:
    seed: int
    frames: int
    fps: float
    width: int
    height: int
    intrinsics: Intrinsics
    groups: list[GroupSpec]
    triples: list[TripleIndex]

    def video_count(self) -> int:
        return sum(len(g.locations) * len(g.rules) for g in self.groups)

    def trajectory_count(self) -> int:
        return sum(len(g.rules) for g in self.groups)

    @staticmethod
    def video_name(group_id: str, loc: int, traj: int) -> str:
        return f"{group_id}_loc{loc}_t{traj:02d}"

    def video_path(self, group_id: str, loc: int, traj: int) -> str:
        return f"groups/{group_id}/videos/{self.video_name(group_id, loc, traj)}.ccmv"

    def trajectory_path(self, group_id: str, traj: int) -> str:
        return f"groups/{group_id}/traj_{traj:02d}.json"

    def to_dict(self) -> dict:
        k = self.intrinsics
        return {
            "seed": self.seed,
            "frames": self.frames,
            "fps": self.fps,
            "width": self.width,
            "height": self.height,
            "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                           "width": k.width, "height": k.height},
            "groups": [
                {**g.to_dict(),
                 "trajectories": [self.trajectory_path(g.group_id, i)
                                  for i in range(len(g.rules))],
                 "videos": [{"location": loc, "trajectory": tr,
                             "file": self.video_path(g.group_id, loc, tr)}
                            for loc in range(len(g.locations))
                            for tr in range(len(g.rules))]}
                for g in self.groups
            ],
            "triples": [
                {"group": t.group_id,
                 "target": list(t.target), "cam_ref": list(t.cam_ref),
                 "cont_ref": list(t.cont_ref)}
                for t in self.triples
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        ki = d["intrinsics"]
        return cls(
            seed=int(d["seed"]),
            frames=int(d["frames"]),
            fps=float(d["fps"]),
            width=int(d["width"]),
            height=int(d["height"]),
            intrinsics=Intrinsics(fx=float(ki["fx"]), fy=float(ki["fy"]),
                                  cx=float(ki["cx"]), cy=float(ki["cy"]),
                                  width=int(ki["width"]), height=int(ki["height"])),
            groups=[GroupSpec.from_dict(g) for g in d["groups"]],
            triples=[TripleIndex(t["group"], tuple(t["target"]), tuple(t["cam_ref"]),
                                 tuple(t["cont_ref"])) for t in d["triples"]],
        )

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def plan_dataset(seed: int, n_groups: int, frames: int = 17, fps: float = 8.0,
                 intrinsics: Intrinsics = DEFAULT_INTRINSICS,
                 per_target: int = 3) -> DatasetManifest:
    """Deterministic dataset plan: same seed, same manifest, bit for bit."""
    rng = np.random.default_rng(seed)
    groups = [build_group(rng, f"g{i:05d}") for i in range(n_groups)]
    pair_rng = np.random.default_rng((seed, 0x9E3779B9))
    triples: list[TripleIndex] = []
    for g in groups:
        triples.extend(pairing(g, pair_rng, per_target=per_target))
    return DatasetManifest(seed=seed, frames=frames, fps=fps,
                           width=intrinsics.width, height=intrinsics.height,
                           intrinsics=intrinsics, groups=groups, triples=triples)
