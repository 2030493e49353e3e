"""Core motion representations and kinematic helpers.

Two skeletons coexist and are deliberately not linked by forward kinematics:

* a 52-joint rotation skeleton used by the feature codec (6 channels per
  joint, plus root translation and foot contacts: 312 + 3 + 4 = 319), and
* a 22-joint position skeleton used by all kinematic analysis.

Rotations use the continuous 6d representation: the first two columns of a
rotation matrix, stored column-major as ``(c1x, c1y, c1z, c2x, c2y, c2z)``.

All containers are immutable after construction and every function here is
pure, so everything is safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    AmbiguousAxesError,
    DegenerateYawError,
    DimensionError,
    InvalidMotionError,
    SingularInputError,
)

NUM_ROTATION_JOINTS = 52
ROTATION_CHANNELS = NUM_ROTATION_JOINTS * 6  # 312
TRANSLATION_CHANNELS = 3
CONTACT_CHANNELS = 4
FEATURE_DIM = ROTATION_CHANNELS + TRANSLATION_CHANNELS + CONTACT_CHANNELS  # 319

NUM_JOINTS = 22

# Fixed analysis-skeleton ordering (standard SMPL body joint order) so that
# predicates can resolve named joints deterministically.
JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)

_REQUIRED_JOINTS = (
    "pelvis", "head", "left_hip", "right_hip", "left_shoulder", "right_shoulder",
    "left_wrist", "right_wrist", "left_ankle", "right_ankle",
)

IDENTITY_ROT6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

_EPS = 1e-8


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MotionClip:
    """A feature-space motion clip, one feature row per frame.

    The canonical width is 319 (52 rotations in 6d, root translation, four
    foot-contact channels). Reduced widths are accepted for compact generator
    features; the trailing four channels are always contact flags in [0, 1].
    """

    features: np.ndarray
    fps: int = 30

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise InvalidMotionError(f"features must be (frames, dim), got {feats.shape}")
        if feats.shape[1] <= CONTACT_CHANNELS:
            raise InvalidMotionError(f"feature dim {feats.shape[1]} too small")
        if not np.isfinite(feats).all():
            raise InvalidMotionError("features contain non-finite values")
        contacts = feats[:, -CONTACT_CHANNELS:]
        if contacts.min() < 0.0 or contacts.max() > 1.0:
            raise InvalidMotionError("contact channels must lie in [0, 1]")
        if self.fps <= 0:
            raise InvalidMotionError("fps must be positive")
        object.__setattr__(self, "features", _readonly(feats))

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_canonical(self) -> bool:
        return self.feature_dim == FEATURE_DIM


@dataclass(frozen=True)
class JointSequence:
    """22-joint 3d positions over time, in skeleton coordinate units."""

    positions: np.ndarray
    fps: int = 30
    joint_names: tuple = JOINT_NAMES

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 3 or pos.shape[1:] != (NUM_JOINTS, 3) or pos.shape[0] < 1:
            raise InvalidMotionError(f"positions must be (frames, 22, 3), got {pos.shape}")
        if not np.isfinite(pos).all():
            raise InvalidMotionError("positions contain non-finite values")
        names = tuple(self.joint_names)
        if len(names) != NUM_JOINTS or len(set(names)) != NUM_JOINTS:
            raise InvalidMotionError("joint_names must hold 22 unique entries")
        missing = [n for n in _REQUIRED_JOINTS if n not in names]
        if missing:
            raise InvalidMotionError(f"joint_names missing required joints: {missing}")
        if self.fps <= 0:
            raise InvalidMotionError("fps must be positive")
        object.__setattr__(self, "positions", _readonly(pos))
        object.__setattr__(self, "joint_names", names)

    @property
    def frames(self) -> int:
        return self.positions.shape[0]

    def index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise InvalidMotionError(f"unknown joint name {name!r}") from None

    def joint(self, name: str) -> np.ndarray:
        """Positions of one named joint, shape (frames, 3)."""
        return self.positions[:, self.index(name), :]


@dataclass(frozen=True)
class BodyAxes:
    """Partition of the coordinate axes into one height axis and two ground axes."""

    height_axis: int
    ground_axes: tuple

    def __post_init__(self):
        if sorted((self.height_axis, *self.ground_axes)) != [0, 1, 2]:
            raise InvalidMotionError("axes must partition {0, 1, 2}")
        object.__setattr__(self, "ground_axes", tuple(self.ground_axes))


def pack_motion(rotations, root_translation, contacts) -> np.ndarray:
    """Pack per-frame parts into one 319-channel feature vector.

    Layout is ``[52 * 6 rotation channels | 3 translation | 4 contact]``;
    ``unpack_motion`` is its exact inverse.
    """
    rot = np.asarray(rotations, dtype=np.float64)
    if rot.shape != (NUM_ROTATION_JOINTS, 6):
        raise DimensionError(f"rotations must be (52, 6), got {rot.shape}")
    trans = np.asarray(root_translation, dtype=np.float64)
    if trans.shape != (TRANSLATION_CHANNELS,):
        raise DimensionError(f"root_translation must be (3,), got {trans.shape}")
    con = np.asarray(contacts, dtype=np.float64)
    if con.shape != (CONTACT_CHANNELS,):
        raise DimensionError(f"contacts must be (4,), got {con.shape}")
    if not np.isin(con, (0.0, 1.0)).all():
        raise DimensionError("contacts must be binary flags")
    return np.concatenate([rot.ravel(), trans, con])


def unpack_motion(vector) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a 319-channel feature vector back into (rotations, translation, contacts)."""
    vec = np.asarray(vector, dtype=np.float64)
    if vec.shape != (FEATURE_DIM,):
        raise DimensionError(f"feature vector must be ({FEATURE_DIM},), got {vec.shape}")
    rot = vec[:ROTATION_CHANNELS].reshape(NUM_ROTATION_JOINTS, 6)
    trans = vec[ROTATION_CHANNELS:ROTATION_CHANNELS + TRANSLATION_CHANNELS]
    contacts = vec[-CONTACT_CHANNELS:]
    return rot, trans, contacts


def rot6d_to_matrix(r) -> np.ndarray:
    """Orthonormalise a 6d rotation into a proper 3x3 rotation matrix.

    Gram-Schmidt on the two encoded columns; the third column is their cross
    product. Raises ``SingularInputError`` for zero or parallel columns.
    """
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    if r.shape != (6,):
        raise DimensionError(f"6d rotation must have 6 values, got {r.shape}")
    c1, c2 = r[:3], r[3:]
    n1 = np.linalg.norm(c1)
    if n1 < _EPS:
        raise SingularInputError("first rotation column has zero norm")
    b1 = c1 / n1
    u2 = c2 - np.dot(b1, c2) * b1
    n2 = np.linalg.norm(u2)
    if n2 < _EPS:
        raise SingularInputError("rotation columns are parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def matrix_to_rot6d(matrix) -> np.ndarray:
    """Encode a rotation matrix as its first two columns, column-major."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise DimensionError(f"rotation matrix must be (3, 3), got {m.shape}")
    return np.concatenate([m[:, 0], m[:, 1]])


def detect_axes(seq: JointSequence) -> BodyAxes:
    """Identify the height axis as the largest mean positive head-minus-pelvis offset."""
    offsets = seq.joint("head") - seq.joint("pelvis")
    mean_offset = offsets.mean(axis=0)
    height = int(np.argmax(mean_offset))
    if mean_offset[height] <= 0.0:
        raise AmbiguousAxesError("no axis has a positive mean head-over-pelvis offset")
    ground = tuple(a for a in (0, 1, 2) if a != height)
    return BodyAxes(height, ground)


def shoulder_width(seq: JointSequence, axes: BodyAxes) -> float:
    """Mean ground-plane distance between the shoulders (the body-scale unit)."""
    delta = seq.joint("left_shoulder") - seq.joint("right_shoulder")
    ground = delta[:, list(axes.ground_axes)]
    return float(np.linalg.norm(ground, axis=1).mean())


def _hip_yaw(seq: JointSequence, axes: BodyAxes) -> np.ndarray:
    """Per-frame yaw of the ground-plane left-hip to right-hip vector.

    Frames with a (numerically) zero ground-plane hip vector reuse the
    previous frame's yaw; a degenerate first frame has nothing to reuse.
    """
    vec = seq.joint("right_hip") - seq.joint("left_hip")
    g0, g1 = axes.ground_axes
    gx, gy = vec[:, g0], vec[:, g1]
    norms = np.hypot(gx, gy)
    valid = norms >= _EPS
    if not valid[0]:
        raise DegenerateYawError("hip vector degenerate at the first frame")
    yaw = np.arctan2(gy, gx)
    if not valid.all():
        # Forward-fill from the most recent valid frame (handles runs).
        idx = np.where(valid, np.arange(len(yaw)), 0)
        idx = np.maximum.accumulate(idx)
        yaw = yaw[idx]
    return yaw


def cumulative_yaw(seq: JointSequence, axes: BodyAxes) -> float:
    """Total absolute hip-yaw change in degrees, with per-step wrap to [-pi, pi]."""
    if seq.frames < 2:
        raise InvalidMotionError("cumulative yaw needs at least 2 frames")
    yaw = _hip_yaw(seq, axes)
    deltas = np.diff(yaw)
    wrapped = (deltas + np.pi) % (2.0 * np.pi) - np.pi
    return float(np.degrees(np.abs(wrapped).sum()))


# ---------------------------------------------------------------------------
# Motion file formats (bit-exact JSON: doubles round-trip through repr)

def joint_sequence_to_dict(seq: JointSequence) -> dict:
    return {
        "fps": int(seq.fps),
        "joints": list(seq.joint_names),
        "frames": int(seq.frames),
        "positions": seq.positions.ravel().tolist(),
    }


def joint_sequence_from_dict(data: dict) -> JointSequence:
    frames = int(data["frames"])
    flat = np.asarray(data["positions"], dtype=np.float64)
    if flat.size != frames * NUM_JOINTS * 3:
        raise InvalidMotionError("positions length does not match frames * 22 * 3")
    return JointSequence(
        positions=flat.reshape(frames, NUM_JOINTS, 3),
        fps=int(data["fps"]),
        joint_names=tuple(data["joints"]),
    )


def motion_clip_to_dict(clip: MotionClip) -> dict:
    return {
        "fps": int(clip.fps),
        "frames": int(clip.frames),
        "features": clip.features.ravel().tolist(),
    }


def motion_clip_from_dict(data: dict) -> MotionClip:
    frames = int(data["frames"])
    flat = np.asarray(data["features"], dtype=np.float64)
    if frames < 1 or flat.size % frames != 0:
        raise InvalidMotionError("features length is not a multiple of frames")
    return MotionClip(features=flat.reshape(frames, flat.size // frames), fps=int(data["fps"]))


def write_joint_sequence(path, seq: JointSequence):
    Path(path).write_text(json.dumps(joint_sequence_to_dict(seq)))


def read_joint_sequence(path) -> JointSequence:
    return joint_sequence_from_dict(json.loads(Path(path).read_text()))


def write_motion_clip(path, clip: MotionClip):
    Path(path).write_text(json.dumps(motion_clip_to_dict(clip)))


def read_motion_clip(path) -> MotionClip:
    return motion_clip_from_dict(json.loads(Path(path).read_text()))
