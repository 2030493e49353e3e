"""Procedural 22-joint motions for each kinematic primitive.

Each generator poses an upright skeleton (y up, z forward, x to the
character's left, shoulder width 0.36, pelvis height 0.95) and overlays one
primitive, then adds uniform jitter of +/-0.002 per coordinate. Outputs are
deterministic given (spec, fps) and double as ground truth for the kinematic
predicates: at the calibrated magnitudes every primitive clears its own
predicate threshold by at least 25% and stays clear of all others.

Event timing scales with the clip: motion begins after the first eighth of
the duration, which keeps the first 10 frames quiet for baseline windows at
the default 4 s / 30 fps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidMotionError, UnsupportedPrimitiveError
from .motion import JOINT_NAMES, JointSequence

PRIMITIVES = (
    "walk_move", "jump", "turn", "crouch", "hands_up", "kick", "clap", "wave", "idle",
)

# Magnitudes that clear the predicate thresholds with margin (see module doc).
CALIBRATED_MAGNITUDES = {
    "walk_move": 0.8,   # net ground displacement
    "jump": 0.25,       # peak pelvis lift
    "turn": 120.0,      # total yaw, degrees
    "crouch": 0.2,      # pelvis dip depth
    "hands_up": 0.15,   # wrist height above the shoulders
    "kick": 0.45,       # kicking-ankle lift
    "clap": 0.2,        # per-wrist travel toward the midline
    "wave": 0.3,        # lateral oscillation amplitude
    "idle": 0.0,
}

DEFAULT_FREQUENCIES = {"clap": 2.0, "wave": 1.5}

# Which predicates each generator is expected to fire. Straight walks do not
# turn; a curved walk may legitimately fire walk_move and turn together, which
# is the one permitted overlap (predicates are not mutually exclusive).
EXPECTED_PASSES = {
    "walk_move": frozenset({"walk_move"}),
    "jump": frozenset({"jump"}),
    "turn": frozenset({"turn"}),
    "crouch": frozenset({"crouch"}),
    "hands_up": frozenset({"hands_up"}),
    "kick": frozenset({"kick"}),
    "clap": frozenset({"clap"}),
    "wave": frozenset({"wave"}),
    "idle": frozenset(),
}
ALLOWED_OVERLAPS = {"walk_move": frozenset({"walk_move", "turn"})}

GENRES = (
    "breaking", "popping", "locking", "hiphop", "house", "jazz", "krump", "waacking",
)

NOISE_AMPLITUDE = 0.002

_UP, _FWD, _LAT = 1, 2, 0  # y up, z forward, x lateral

_REST_POSE = {
    "pelvis": (0.0, 0.95, 0.0),
    "left_hip": (0.10, 0.90, 0.0),
    "right_hip": (-0.10, 0.90, 0.0),
    "spine1": (0.0, 1.05, 0.0),
    "left_knee": (0.10, 0.50, 0.0),
    "right_knee": (-0.10, 0.50, 0.0),
    "spine2": (0.0, 1.15, 0.0),
    "left_ankle": (0.10, 0.08, 0.0),
    "right_ankle": (-0.10, 0.08, 0.0),
    "spine3": (0.0, 1.25, 0.0),
    "left_foot": (0.10, 0.03, 0.12),
    "right_foot": (-0.10, 0.03, 0.12),
    "neck": (0.0, 1.40, 0.0),
    "left_collar": (0.07, 1.35, 0.0),
    "right_collar": (-0.07, 1.35, 0.0),
    "head": (0.0, 1.55, 0.0),
    "left_shoulder": (0.18, 1.40, 0.0),
    "right_shoulder": (-0.18, 1.40, 0.0),
    "left_elbow": (0.22, 1.08, 0.0),
    "right_elbow": (-0.22, 1.08, 0.0),
    "left_wrist": (0.22, 0.78, 0.0),
    "right_wrist": (-0.22, 0.78, 0.0),
}

_J = {name: i for i, name in enumerate(JOINT_NAMES)}

_UPPER_BODY = (
    "pelvis", "left_hip", "right_hip", "spine1", "spine2", "spine3", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)


@dataclass(frozen=True)
class PrimitiveSpec:
    """One requested primitive clip.

    ``magnitude`` is the primitive's controlled quantity (displacement, lift,
    angle, or amplitude; see ``CALIBRATED_MAGNITUDES``); ``None`` selects the
    calibrated default. ``frequency_hz`` applies to wave and clap only.
    """

    name: str
    magnitude: float | None = None
    frequency_hz: float | None = None
    duration_s: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.name not in PRIMITIVES:
            raise UnsupportedPrimitiveError(f"unknown primitive {self.name!r}")
        if self.magnitude is not None and self.magnitude < 0:
            raise InvalidMotionError("magnitude must be >= 0")
        if self.duration_s <= 0:
            raise InvalidMotionError("duration_s must be positive")

    def resolved_magnitude(self) -> float:
        if self.magnitude is None:
            return CALIBRATED_MAGNITUDES[self.name]
        return float(self.magnitude)

    def resolved_frequency(self) -> float:
        if self.frequency_hz is None:
            return DEFAULT_FREQUENCIES.get(self.name, 1.0)
        return float(self.frequency_hz)


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _window(t: np.ndarray, start: float, rise: float, hold: float, fall: float) -> np.ndarray:
    """Smooth 0 -> 1 -> 0 envelope: rise, hold, fall, all in seconds."""
    up = _smoothstep((t - start) / max(rise, 1e-9))
    down = _smoothstep((t - (start + rise + hold)) / max(fall, 1e-9))
    return up - down


def _rest_pose_array() -> np.ndarray:
    pose = np.zeros((len(JOINT_NAMES), 3))
    for name, xyz in _REST_POSE.items():
        pose[_J[name]] = xyz
    return pose


def _offset(pose, joints, axis, values):
    for name in joints:
        pose[:, _J[name], axis] += values


def _build_walk(pose, t, dur, mag):
    start = 0.1 * dur
    u = _smoothstep((t - start) / (dur - start - 1e-9))
    _offset(pose, JOINT_NAMES, _FWD, mag * u)
    # Gait overlay: alternating ankle lead, small lift, counter arm swing.
    phase = 2.0 * np.pi * 1.5 * np.maximum(t - start, 0.0)
    swing = np.sin(phase) * _smoothstep((t - start) / 0.3)
    for side, sign in (("left", 1.0), ("right", -1.0)):
        for joint, scale in ((f"{side}_ankle", 1.0), (f"{side}_foot", 1.0), (f"{side}_knee", 0.5)):
            pose[:, _J[joint], _FWD] += sign * 0.12 * scale * swing
        lift = 0.04 * np.maximum(sign * swing, 0.0)
        pose[:, _J[f"{side}_ankle"], _UP] += lift
        pose[:, _J[f"{side}_foot"], _UP] += lift
        pose[:, _J[f"{side}_wrist"], _FWD] += -sign * 0.05 * swing
        pose[:, _J[f"{side}_elbow"], _FWD] += -sign * 0.025 * swing


def _build_jump(pose, t, dur, mag):
    start, air = 0.25 * dur, 0.15 * dur
    inside = (t >= start) & (t <= start + air)
    lift = np.where(inside, mag * np.sin(np.pi * (t - start) / air) ** 2, 0.0)
    _offset(pose, JOINT_NAMES, _UP, lift)


def _build_turn(pose, t, dur, mag_deg):
    start = 0.125 * dur
    theta = np.radians(mag_deg) * _smoothstep((t - start) / (dur - 2.0 * start))
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    x, z = pose[..., _LAT].copy(), pose[..., _FWD].copy()
    pose[..., _LAT] = cos_t[:, None] * x - sin_t[:, None] * z
    pose[..., _FWD] = sin_t[:, None] * x + cos_t[:, None] * z


def _build_crouch(pose, t, dur, mag):
    env = _window(t, 0.25 * dur, 0.125 * dur, 0.25 * dur, 0.125 * dur)
    _offset(pose, _UPPER_BODY, _UP, -mag * env)
    _offset(pose, ("left_knee", "right_knee"), _UP, -0.4 * mag * env)
    _offset(pose, ("left_knee", "right_knee"), _FWD, 0.1 * env)


def _build_hands_up(pose, t, dur, mag):
    env = _window(t, 0.25 * dur, 0.1 * dur, 0.3 * dur, 0.1 * dur)
    shoulder_h = _REST_POSE["left_shoulder"][_UP]
    wrist_rise = (shoulder_h + mag) - _REST_POSE["left_wrist"][_UP]
    elbow_rise = (shoulder_h + 0.4 * mag) - _REST_POSE["left_elbow"][_UP]
    for side, sign in (("left", 1.0), ("right", -1.0)):
        pose[:, _J[f"{side}_wrist"], _UP] += wrist_rise * env
        pose[:, _J[f"{side}_wrist"], _LAT] += sign * -0.02 * env
        pose[:, _J[f"{side}_elbow"], _UP] += elbow_rise * env


def _build_kick(pose, t, dur, mag):
    env = _window(t, 0.25 * dur, 0.1 * dur, 0.075 * dur, 0.1 * dur)
    for joint, up, fwd in (("right_ankle", 1.0, 0.25), ("right_foot", 1.0, 0.25),
                           ("right_knee", 0.5, 0.15)):
        pose[:, _J[joint], _UP] += up * mag * env
        pose[:, _J[joint], _FWD] += fwd * env


def _build_clap(pose, t, dur, mag, freq):
    start = 0.125 * dur
    closure = np.where(t >= start, 0.5 * (1.0 - np.cos(2.0 * np.pi * freq * (t - start))), 0.0)
    for side, sign in (("left", 1.0), ("right", -1.0)):
        pose[:, _J[f"{side}_wrist"], _LAT] += -sign * mag * closure
        pose[:, _J[f"{side}_elbow"], _LAT] += -sign * 0.5 * mag * closure
        pose[:, _J[f"{side}_wrist"], _FWD] += 0.05 * closure


def _build_wave(pose, t, dur, mag, freq):
    # Right forearm raised near (but below) shoulder height, oscillating
    # laterally; the raise is kept small enough that the lateral axis stays
    # the axis of greatest wrist-shoulder range.
    raise_env = _smoothstep((t - 0.125 * dur) / (0.1 * dur))
    osc_env = _smoothstep((t - 0.225 * dur) / (0.075 * dur))
    osc = mag * osc_env * np.sin(2.0 * np.pi * freq * (t - 0.225 * dur))
    wrist, elbow = _J["right_wrist"], _J["right_elbow"]
    pose[:, wrist, _UP] += (1.20 - _REST_POSE["right_wrist"][_UP]) * raise_env
    pose[:, wrist, _LAT] += -0.13 * raise_env + osc
    pose[:, elbow, _UP] += (1.25 - _REST_POSE["right_elbow"][_UP]) * raise_env
    pose[:, elbow, _LAT] += -0.08 * raise_env + 0.5 * osc


def synthesize(spec: PrimitiveSpec, fps: int = 30) -> JointSequence:
    """Render one primitive clip; deterministic given (spec, fps)."""
    frames = int(round(spec.duration_s * fps))
    if frames < 20:
        raise InvalidMotionError(f"duration {spec.duration_s} s at {fps} fps yields "
                                 f"{frames} frames; need at least 20")
    t = np.arange(frames) / float(fps)
    dur = spec.duration_s
    mag = spec.resolved_magnitude()
    pose = np.repeat(_rest_pose_array()[None, :, :], frames, axis=0)

    if spec.name == "walk_move":
        _build_walk(pose, t, dur, mag)
    elif spec.name == "jump":
        _build_jump(pose, t, dur, mag)
    elif spec.name == "turn":
        _build_turn(pose, t, dur, mag)
    elif spec.name == "crouch":
        _build_crouch(pose, t, dur, mag)
    elif spec.name == "hands_up":
        _build_hands_up(pose, t, dur, mag)
    elif spec.name == "kick":
        _build_kick(pose, t, dur, mag)
    elif spec.name == "clap":
        _build_clap(pose, t, dur, mag, spec.resolved_frequency())
    elif spec.name == "wave":
        _build_wave(pose, t, dur, mag, spec.resolved_frequency())
    elif spec.name == "idle":
        pass
    else:  # unreachable: PrimitiveSpec validates the name
        raise UnsupportedPrimitiveError(spec.name)

    rng = np.random.default_rng(spec.seed)
    pose = pose + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=pose.shape)
    return JointSequence(positions=pose, fps=fps)


def synthesize_turning_walk(magnitude: float, turn_deg: float, duration_s: float = 4.0,
                            seed: int = 0, fps: int = 30) -> JointSequence:
    """A walk whose heading drifts; legitimately fires walk_move and turn."""
    seq = synthesize(PrimitiveSpec("walk_move", magnitude, duration_s=duration_s, seed=seed), fps)
    pose = seq.positions.copy()
    t = np.arange(seq.frames) / float(fps)
    theta = np.radians(turn_deg) * _smoothstep((t - 0.125 * duration_s)
                                               / (duration_s - 0.25 * duration_s))
    pelvis_g = pose[:, _J["pelvis"], :][:, [_LAT, _FWD]]
    rel_x = pose[..., _LAT] - pelvis_g[:, None, 0]
    rel_z = pose[..., _FWD] - pelvis_g[:, None, 1]
    cos_t, sin_t = np.cos(theta)[:, None], np.sin(theta)[:, None]
    pose[..., _LAT] = pelvis_g[:, None, 0] + cos_t * rel_x - sin_t * rel_z
    pose[..., _FWD] = pelvis_g[:, None, 1] + sin_t * rel_x + cos_t * rel_z
    return JointSequence(positions=pose, fps=fps)


def synthesize_corpus(specs, fps: int = 30):
    """One labelled sequence per spec, with genre tags assigned cyclically.

    Returns a list of (JointSequence, label, genre_tag); the primitive name is
    the sequence's canonical prompt string.
    """
    specs = list(specs)
    if not specs:
        raise InvalidMotionError("spec list must be non-empty")
    return [
        (synthesize(spec, fps), spec.name, GENRES[i % len(GENRES)])
        for i, spec in enumerate(specs)
    ]
