"""Rule-based camera trajectory synthesis.

A ``TrajectoryRule`` names a camera move (pan, push-in, arc, ...) with concrete
parameters; ``synthesize`` turns a rule into a pose-per-frame ``Trajectory``
starting at an anchor pose.  Rules are deliberately low-dimensional so the
same rule replayed against any anchor gives the "same" camera motion, which is
what makes paired same-trajectory videos possible.

Composition conventions (see geometry.py for pose conventions):

- Pan/tilt/push/pull/truck are camera-frame displacements applied as left
  factors: ``P_i = M_i ∘ anchor`` with ``M_i = delta(kind, progress_i)``.
  Pedestal moves run along the world vertical (a pitched camera's own y-axis
  is not "up").  A shared anchor plus a shared rule therefore yields
  bitwise-identical pose sequences across scenes.
- Arc orbits the look-at point about the world-up axis through it; the camera
  assembly rotates rigidly, so the look-at point stays fixed in the image and
  the camera height is constant.  Dataset generation places the look-at point
  ``arc_radius`` along the anchor's view axis (see :func:`arc_look_at`).
- Compound rules run 2-3 basic sub-rules over equal time slices, each eased
  independently, accumulating displacement.

Sampling ranges (``RuleConfig`` defaults) are chosen so every sampled rule
passes ``validate`` at the default 17-frame / 8-fps profile AND keeps the
marker constellation inside the camera frustum for the whole clip.  The
binding constraints, with cubic ease-in-out peaking at 3x the nominal rate:

- peak speed 3 * 1.5 = 4.5 u/s < 5 u/s validator bound
- pan sweep 14 deg/s * 2 s = 28 deg; plus the +-10 deg marker-cloud azimuth
  spread stays inside the +-42 deg horizontal half-FOV with margin
- tilt sweep 9 * 2 = 18 deg against the +-34 deg vertical half-FOV
- pedestal drop 0.55 * 2 = 1.1 u from anchor heights >= 3.2 keeps the camera
  above the markers' sight lines and far above the ground bound
- arc sweep capped so radius * peak angular rate <= 4.5 u/s
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import (
    RigidPose,
    Trajectory,
    compose,
    inverse,
    quat_from_axis_angle,
    quat_to_matrix,
    relative,
)

__all__ = [
    "Easing",
    "RuleKind",
    "BASIC_KINDS",
    "TrajectoryRule",
    "RuleConfig",
    "DEFAULT_RULE_CONFIG",
    "ease_progress",
    "arc_look_at",
    "synthesize",
    "validate",
    "ValidationReport",
    "sample_rule",
    "rule_to_dict",
    "rule_from_dict",
]


class Easing(Enum):
    LINEAR = "linear"
    CUBIC = "cubic"


class RuleKind(Enum):
    STATIC = "static"
    PAN = "pan"
    TILT = "tilt"
    PUSH_IN = "push_in"
    PULL_OUT = "pull_out"
    TRUCK_LEFT = "truck_left"
    TRUCK_RIGHT = "truck_right"
    PEDESTAL_UP = "pedestal_up"
    PEDESTAL_DOWN = "pedestal_down"
    ARC = "arc"
    COMPOUND = "compound"


BASIC_KINDS = (
    RuleKind.STATIC,
    RuleKind.PAN,
    RuleKind.TILT,
    RuleKind.PUSH_IN,
    RuleKind.PULL_OUT,
    RuleKind.TRUCK_LEFT,
    RuleKind.TRUCK_RIGHT,
    RuleKind.PEDESTAL_UP,
    RuleKind.PEDESTAL_DOWN,
)

_ROTATIONAL = (RuleKind.PAN, RuleKind.TILT)


@dataclass(frozen=True)
class TrajectoryRule:
    """One camera move.  ``speed`` is units/s for translational kinds and
    deg/s for pan/tilt; arcs instead carry a radius and total sweep."""

    kind: RuleKind
    speed: float = 0.0
    easing: Easing = Easing.CUBIC
    direction: int = 1
    arc_radius: float | None = None
    arc_sweep_deg: float | None = None
    sub_rules: tuple["TrajectoryRule", ...] = ()

    def __post_init__(self):
        k = self.kind
        if self.direction not in (-1, 1):
            raise ValueError("direction must be -1 or +1")
        if k is RuleKind.COMPOUND:
            if not 2 <= len(self.sub_rules) <= 3:
                raise ValueError("compound rules take 2 or 3 sub-rules")
            for sr in self.sub_rules:
                if sr.kind not in BASIC_KINDS:
                    raise ValueError(f"compound sub-rule kind {sr.kind} not allowed")
        elif self.sub_rules:
            raise ValueError("only compound rules carry sub-rules")
        elif k is RuleKind.ARC:
            if not (self.arc_radius and self.arc_radius > 0):
                raise ValueError("arc needs a positive radius")
            if not (self.arc_sweep_deg and 0 < self.arc_sweep_deg <= 360):
                raise ValueError("arc sweep must be in (0, 360] degrees")
        elif k is RuleKind.STATIC:
            if self.speed != 0.0:
                raise ValueError("static rules have zero speed")
        else:
            if self.speed <= 0:
                raise ValueError(f"{k.value} needs a positive speed")

    def label(self) -> str:
        if self.kind is RuleKind.COMPOUND:
            return "compound(" + "+".join(sr.kind.value for sr in self.sub_rules) + ")"
        return self.kind.value


def ease_progress(easing: Easing, tau: float) -> float:
    """Monotone progress in [0, 1] for normalized time tau in [0, 1]."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau outside [0, 1]")
    if easing is Easing.LINEAR:
        return tau
    # cubic ease-in-out; peak rate 3x nominal at tau = 0.5
    if tau < 0.5:
        return 4.0 * tau**3
    return 1.0 - 4.0 * (1.0 - tau) ** 3


def _delta(kind: RuleKind, amount: float, direction: int) -> RigidPose:
    """Camera-frame displacement for a basic kind.  ``amount`` is distance in
    units (translational) or degrees (rotational), always >= 0."""
    ident_q = np.array([1.0, 0.0, 0.0, 0.0])
    if kind is RuleKind.STATIC:
        return RigidPose(ident_q, np.zeros(3))
    if kind is RuleKind.PAN:
        return RigidPose(quat_from_axis_angle([0, 1, 0], direction * math.radians(amount)), np.zeros(3))
    if kind is RuleKind.TILT:
        return RigidPose(quat_from_axis_angle([1, 0, 0], direction * math.radians(amount)), np.zeros(3))
    # translations: the camera center moves by +amount along the named camera
    # axis, which shows up negated in the world-to-camera translation
    moves = {
        RuleKind.PUSH_IN: np.array([0.0, 0.0, -1.0]),
        RuleKind.PULL_OUT: np.array([0.0, 0.0, 1.0]),
        RuleKind.TRUCK_RIGHT: np.array([-1.0, 0.0, 0.0]),
        RuleKind.TRUCK_LEFT: np.array([1.0, 0.0, 0.0]),
    }
    return RigidPose(ident_q, amount * moves[kind])


_IDENT_Q = np.array([1.0, 0.0, 0.0, 0.0])
_PEDESTALS = (RuleKind.PEDESTAL_UP, RuleKind.PEDESTAL_DOWN)


def _move(kind: RuleKind, amount: float, direction: int, base: RigidPose) -> RigidPose:
    """Pose after displacing ``base`` by ``amount`` under a basic kind."""
    if kind in _PEDESTALS:
        s = amount if kind is RuleKind.PEDESTAL_UP else -amount
        # world-frame vertical move: P -> P ∘ translate(0, s, 0)^-1
        return compose(base, RigidPose(_IDENT_Q, np.array([0.0, -s, 0.0])))
    return compose(_delta(kind, amount, direction), base)


def _rot_about_line(axis, point, angle: float) -> RigidPose:
    """World-frame rigid transform: rotate by ``angle`` about the line through
    ``point`` along ``axis``."""
    q = quat_from_axis_angle(axis, angle)
    R = quat_to_matrix(q)
    t = np.asarray(point, dtype=np.float64) - R @ np.asarray(point, dtype=np.float64)
    return RigidPose(q, t)


def synthesize(rule: TrajectoryRule, frames: int, fps: float, anchor: RigidPose,
               look_at=None) -> Trajectory:
    """Pose sequence for ``rule`` starting exactly at ``anchor``.

    ``look_at`` (world coordinates) is required for arc rules and ignored
    otherwise.  Deterministic: no randomness enters here.
    """
    if frames < 2:
        raise ValueError("need at least 2 frames")
    if fps <= 0:
        raise ValueError("fps must be positive")
    duration = (frames - 1) / fps

    poses: list[RigidPose] = []
    if rule.kind is RuleKind.ARC:
        if look_at is None:
            raise ValueError("arc rules need a look_at point")
        p = np.asarray(look_at, dtype=np.float64)
        for i in range(frames):
            tau = i / (frames - 1)
            phi = rule.direction * math.radians(rule.arc_sweep_deg) * ease_progress(rule.easing, tau)
            w = _rot_about_line([0.0, 1.0, 0.0], p, phi)
            poses.append(compose(anchor, inverse(w)))
    elif rule.kind is RuleKind.COMPOUND:
        k = len(rule.sub_rules)
        slice_dur = duration / k
        base = anchor
        bases = [base]
        for sr in rule.sub_rules[:-1]:
            base = _sub_move(sr, 1.0, slice_dur, base)
            bases.append(base)
        for i in range(frames):
            tau = i / (frames - 1)
            s = min(tau * k, float(k) - 1e-12)
            idx = int(s)
            local = s - idx
            poses.append(_sub_move(rule.sub_rules[idx], local, slice_dur, bases[idx]))
    else:
        for i in range(frames):
            tau = i / (frames - 1)
            amount = rule.speed * duration * ease_progress(rule.easing, tau)
            poses.append(_move(rule.kind, amount, rule.direction, anchor))
    return Trajectory(poses, fps)


def _sub_move(sr: TrajectoryRule, local_tau: float, slice_dur: float, base: RigidPose) -> RigidPose:
    amount = sr.speed * slice_dur * ease_progress(sr.easing, local_tau)
    return _move(sr.kind, amount, sr.direction, base)


def arc_look_at(rule: TrajectoryRule, anchor: RigidPose) -> np.ndarray | None:
    """Orbit point for an arc rule: ``arc_radius`` along the anchor's view
    axis, so the orbit radius equals the rule's radius.  None for other kinds."""
    if rule.kind is not RuleKind.ARC:
        return None
    fwd = quat_to_matrix(anchor.q)[2]
    return anchor.center + rule.arc_radius * fwd


# ---------------------------------------------------------------------------
# validation

@dataclass
class ValidationReport:
    clean: bool
    flags: list[list[str]]  # per frame; empty list = no violations

    def flagged_frames(self) -> list[int]:
        return [i for i, f in enumerate(self.flags) if f]


def validate(traj: Trajectory, max_ang_deg_s: float = 120.0, max_speed: float = 5.0,
             min_height: float = 0.05) -> ValidationReport:
    """Physical-plausibility screen: per-frame angular velocity, linear speed,
    and ground clearance of the camera center.  Velocity flags attach to the
    later frame of each consecutive pair."""
    flags: list[list[str]] = [[] for _ in range(len(traj))]
    centers = traj.centers()
    for i, p in enumerate(traj.poses):
        if not (np.all(np.isfinite(p.q)) and np.all(np.isfinite(p.t))):
            flags[i].append("non_finite")
        elif centers[i][1] < min_height - 1e-9:
            flags[i].append("ground")
    for i in range(1, len(traj)):
        step = relative(traj.poses[i - 1], traj.poses[i])
        ang = 2.0 * math.degrees(math.acos(min(1.0, abs(float(step.q[0])))))
        if ang * traj.fps > max_ang_deg_s + 1e-9:
            flags[i].append("angular_velocity")
        speed = float(np.linalg.norm(centers[i] - centers[i - 1])) * traj.fps
        if speed > max_speed + 1e-9:
            flags[i].append("speed")
    return ValidationReport(clean=not any(flags), flags=flags)


# ---------------------------------------------------------------------------
# sampling

@dataclass(frozen=True)
class RuleConfig:
    """Parameter ranges for rule sampling.  See the module docstring for how
    the defaults relate to the validator and frustum bounds."""

    push_speed: tuple[float, float] = (0.2, 1.0)
    truck_speed: tuple[float, float] = (0.2, 1.0)
    pedestal_speed: tuple[float, float] = (0.2, 0.55)
    pan_rate: tuple[float, float] = (5.0, 12.0)
    tilt_rate: tuple[float, float] = (5.0, 9.0)
    arc_radius: tuple[float, float] = (1.0, 5.0)
    arc_sweep: tuple[float, float] = (15.0, 75.0)
    arc_peak_speed: float = 4.5  # u/s, cap on radius * peak angular rate
    ref_duration: float = 2.0  # s, clip length the caps are computed against
    p_arc: float = 0.25
    p_compound: float = 0.25
    p_cubic: float = 0.8


DEFAULT_RULE_CONFIG = RuleConfig()


def rule_to_dict(rule: TrajectoryRule) -> dict:
    d = {"kind": rule.kind.value, "speed": rule.speed, "easing": rule.easing.value,
         "direction": rule.direction}
    if rule.kind is RuleKind.ARC:
        d["arc_radius"] = rule.arc_radius
        d["arc_sweep_deg"] = rule.arc_sweep_deg
    if rule.kind is RuleKind.COMPOUND:
        d["sub_rules"] = [rule_to_dict(sr) for sr in rule.sub_rules]
    return d


def rule_from_dict(d: dict) -> TrajectoryRule:
    return TrajectoryRule(
        kind=RuleKind(d["kind"]),
        speed=float(d.get("speed", 0.0)),
        easing=Easing(d.get("easing", "cubic")),
        direction=int(d.get("direction", 1)),
        arc_radius=d.get("arc_radius"),
        arc_sweep_deg=d.get("arc_sweep_deg"),
        sub_rules=tuple(rule_from_dict(s) for s in d.get("sub_rules", ())),
    )


def _sample_easing(rng, config) -> Easing:
    return Easing.CUBIC if rng.random() < config.p_cubic else Easing.LINEAR


def _sample_basic(rng, config, kind: RuleKind | None = None) -> TrajectoryRule:
    if kind is None:
        kind = BASIC_KINDS[int(rng.integers(len(BASIC_KINDS)))]
    easing = _sample_easing(rng, config)
    direction = int(rng.integers(2)) * 2 - 1
    if kind is RuleKind.STATIC:
        return TrajectoryRule(kind, 0.0, easing, 1)
    if kind in _ROTATIONAL:
        lo, hi = config.pan_rate if kind is RuleKind.PAN else config.tilt_rate
    elif kind in (RuleKind.PUSH_IN, RuleKind.PULL_OUT):
        lo, hi = config.push_speed
    elif kind in (RuleKind.TRUCK_LEFT, RuleKind.TRUCK_RIGHT):
        lo, hi = config.truck_speed
    else:
        lo, hi = config.pedestal_speed
    return TrajectoryRule(kind, float(rng.uniform(lo, hi)), easing, direction)


def sample_rule(rng: np.random.Generator, config: RuleConfig = DEFAULT_RULE_CONFIG) -> TrajectoryRule:
    """Draw one rule: 50% basic (uniform over the 9 kinds), 25% arc,
    25% compound of 2-3 basic sub-rules."""
    r = rng.random()
    if r < config.p_arc:
        radius = float(rng.uniform(*config.arc_radius))
        # peak linear speed = radius * 3 * sweep / duration  <=  cap
        max_sweep = math.degrees(config.arc_peak_speed * config.ref_duration / (3.0 * radius))
        hi = min(config.arc_sweep[1], max_sweep)
        sweep = float(rng.uniform(config.arc_sweep[0], max(hi, config.arc_sweep[0])))
        return TrajectoryRule(RuleKind.ARC, 0.0, _sample_easing(rng, config),
                              int(rng.integers(2)) * 2 - 1, arc_radius=radius,
                              arc_sweep_deg=sweep)
    if r < config.p_arc + config.p_compound:
        n = int(rng.integers(2, 4))
        subs = tuple(_sample_basic(rng, config) for _ in range(n))
        return TrajectoryRule(RuleKind.COMPOUND, sub_rules=subs)
    return _sample_basic(rng, config)
