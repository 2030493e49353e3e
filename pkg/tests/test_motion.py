import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from choreokit.errors import (
    AmbiguousAxesError,
    DegenerateYawError,
    DimensionError,
    InvalidMotionError,
    SingularInputError,
)
from choreokit.motion import (
    FEATURE_DIM,
    IDENTITY_ROT6D,
    JOINT_NAMES,
    BodyAxes,
    JointSequence,
    MotionClip,
    cumulative_yaw,
    detect_axes,
    matrix_to_rot6d,
    motion_clip_from_dict,
    motion_clip_to_dict,
    pack_motion,
    read_joint_sequence,
    rot6d_to_matrix,
    shoulder_width,
    unpack_motion,
    write_joint_sequence,
)

J = {name: i for i, name in enumerate(JOINT_NAMES)}


def _upright(frames=30, head_offset=0.6, axis=1):
    pos = np.zeros((frames, 22, 3))
    pos[:, J["pelvis"], axis] = 0.95
    pos[:, J["head"], axis] = 0.95 + head_offset
    pos[:, J["left_hip"], axis] = 0.9
    pos[:, J["right_hip"], axis] = 0.9
    ground = [a for a in range(3) if a != axis]
    pos[:, J["left_hip"], ground[0]] = 0.1
    pos[:, J["right_hip"], ground[0]] = -0.1
    pos[:, J["left_shoulder"], ground[0]] = 0.2
    pos[:, J["right_shoulder"], ground[0]] = -0.2
    pos[:, J["left_shoulder"], axis] = 1.4
    pos[:, J["right_shoulder"], axis] = 1.4
    return pos


class TestPackMotion:
    def test_identity_rotations_pattern(self):
        vec = pack_motion(np.tile(IDENTITY_ROT6D, (52, 1)), np.zeros(3), np.zeros(4))
        assert vec.shape == (FEATURE_DIM,)
        assert np.array_equal(vec[:312].reshape(52, 6), np.tile(IDENTITY_ROT6D, (52, 1)))
        assert np.all(vec[312:] == 0.0)

    def test_output_length_is_319(self):
        rng = np.random.default_rng(0)
        vec = pack_motion(rng.normal(size=(52, 6)), rng.normal(size=3),
                          rng.integers(0, 2, size=4).astype(float))
        assert vec.shape == (319,)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_is_bitwise(self, seed):
        rng = np.random.default_rng(seed)
        rot = rng.normal(size=(52, 6))
        trans = rng.normal(size=3)
        contacts = rng.integers(0, 2, size=4).astype(float)
        r, t, c = unpack_motion(pack_motion(rot, trans, contacts))
        assert np.array_equal(r, rot)
        assert np.array_equal(t, trans)
        assert np.array_equal(c, contacts)

    def test_wrong_cardinality_raises(self):
        good_rot = np.tile(IDENTITY_ROT6D, (52, 1))
        with pytest.raises(DimensionError):
            pack_motion(good_rot[:51], np.zeros(3), np.zeros(4))
        with pytest.raises(DimensionError):
            pack_motion(good_rot, np.zeros(2), np.zeros(4))
        with pytest.raises(DimensionError):
            pack_motion(good_rot, np.zeros(3), np.zeros(5))
        with pytest.raises(DimensionError):
            pack_motion(good_rot, np.zeros(3), np.array([0.0, 0.5, 0.0, 1.0]))
        with pytest.raises(DimensionError):
            unpack_motion(np.zeros(318))


class TestRot6d:
    def test_identity(self):
        assert np.allclose(rot6d_to_matrix(IDENTITY_ROT6D), np.eye(3), atol=1e-12)

    def test_quarter_turn_about_third_axis(self):
        # 90 degrees about z maps x->y, y->-x.
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        r = matrix_to_rot6d(expected)
        assert np.allclose(rot6d_to_matrix(r), expected, atol=1e-6)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            m = rot6d_to_matrix(rng.normal(size=6))
            r = matrix_to_rot6d(m)
            assert np.allclose(rot6d_to_matrix(r), m, atol=1e-6)
            assert np.allclose(r, matrix_to_rot6d(rot6d_to_matrix(r)), atol=1e-6)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_always_orthonormal_with_unit_determinant(self, seed):
        rng = np.random.default_rng(seed)
        r = rng.normal(size=6)
        m = rot6d_to_matrix(r)
        assert np.abs(m.T @ m - np.eye(3)).max() < 1e-6
        assert abs(np.linalg.det(m) - 1.0) < 1e-6

    def test_degenerate_inputs(self):
        with pytest.raises(SingularInputError):
            rot6d_to_matrix([0, 0, 0, 0, 1, 0])
        with pytest.raises(SingularInputError):
            rot6d_to_matrix([1, 0, 0, 2, 0, 0])


class TestDetectAxes:
    def test_upright_on_axis_1(self):
        seq = JointSequence(_upright(axis=1))
        assert detect_axes(seq).height_axis == 1

    def test_permuted_to_axis_2(self):
        seq = JointSequence(_upright(axis=2))
        axes = detect_axes(seq)
        assert axes.height_axis == 2
        assert axes.ground_axes == (0, 1)

    def test_noisy_mean_argmax(self):
        rng = np.random.default_rng(1)
        pos = _upright(axis=1)
        pos += rng.uniform(-0.01, 0.01, size=pos.shape)
        assert detect_axes(JointSequence(pos)).height_axis == 1

    def test_all_nonpositive_raises(self):
        pos = _upright(axis=1)
        pos[:, J["head"], 1] = 0.0  # head at pelvis level or below everywhere
        with pytest.raises(AmbiguousAxesError):
            detect_axes(JointSequence(pos))

    def test_invariant_under_uniform_scaling(self):
        pos = _upright(axis=1)
        assert detect_axes(JointSequence(pos * 3.7)).height_axis == 1


class TestShoulderWidth:
    def test_constant_width(self):
        seq = JointSequence(_upright())
        axes = detect_axes(seq)
        assert shoulder_width(seq, axes) == pytest.approx(0.4, abs=1e-12)

    def test_alternating_widths_average(self):
        pos = _upright(frames=4)
        pos[::2, J["left_shoulder"], 0] = 0.15   # distance 0.3 on even frames
        pos[1::2, J["left_shoulder"], 0] = 0.25  # distance 0.5 on odd frames
        seq = JointSequence(pos)
        assert shoulder_width(seq, detect_axes(seq)) == pytest.approx(0.4, abs=1e-12)

    def test_height_only_separation_is_zero(self):
        pos = _upright()
        pos[:, J["left_shoulder"], 0] = 0.0
        pos[:, J["right_shoulder"], 0] = 0.0
        pos[:, J["left_shoulder"], 1] = 1.6
        seq = JointSequence(pos)
        assert shoulder_width(seq, detect_axes(seq)) == pytest.approx(0.0, abs=1e-12)

    def test_scales_linearly(self):
        pos = _upright()
        seq1, seq2 = JointSequence(pos), JointSequence(pos * 2.5)
        axes = BodyAxes(1, (0, 2))
        assert shoulder_width(seq2, axes) == pytest.approx(2.5 * shoulder_width(seq1, axes))


def _yaw_sequence(yaws_deg, hip_radius=0.1):
    """Hip pair rotating in the ground plane by the given yaw angles."""
    frames = len(yaws_deg)
    pos = _upright(frames=frames)
    for i, yaw in enumerate(np.radians(yaws_deg)):
        direction = np.array([np.cos(yaw), np.sin(yaw)])
        pos[i, J["right_hip"], [0, 2]] = hip_radius * direction
        pos[i, J["left_hip"], [0, 2]] = -hip_radius * direction
    return JointSequence(pos)


class TestCumulativeYaw:
    def test_static_pose_is_zero(self):
        seq = _yaw_sequence(np.zeros(30))
        assert cumulative_yaw(seq, detect_axes(seq)) == pytest.approx(0.0, abs=1e-9)

    def test_constant_angular_velocity(self):
        # 90 deg/s sampled at 30 fps across 2 s of rotation: 61 frames.
        yaws = 3.0 * np.arange(61)
        seq = _yaw_sequence(yaws)
        assert cumulative_yaw(seq, detect_axes(seq)) == pytest.approx(180.0, abs=0.5)

    def test_oscillation_sums_absolute_changes(self):
        seq = _yaw_sequence([0.0, 30.0, 0.0, 30.0])
        assert cumulative_yaw(seq, detect_axes(seq)) == pytest.approx(90.0, abs=1e-9)

    @given(st.floats(-720.0, 720.0))
    @settings(max_examples=25, deadline=None)
    def test_invariant_under_constant_offset(self, offset):
        yaws = np.array([0.0, 25.0, -40.0, 10.0, 170.0, 150.0])
        base = cumulative_yaw(_yaw_sequence(yaws), BodyAxes(1, (0, 2)))
        shifted = cumulative_yaw(_yaw_sequence(yaws + offset), BodyAxes(1, (0, 2)))
        assert abs(base - shifted) < 1e-6

    def test_degenerate_frame_reuses_previous_yaw(self):
        seq = _yaw_sequence([0.0, 45.0, 45.0, 90.0])
        pos = seq.positions.copy()
        pos[2, J["left_hip"]] = pos[2, J["right_hip"]]  # zero hip vector mid-clip
        broken = JointSequence(pos)
        assert cumulative_yaw(broken, BodyAxes(1, (0, 2))) == pytest.approx(90.0, abs=1e-6)

    def test_degenerate_first_frame_raises(self):
        seq = _yaw_sequence([0.0, 45.0])
        pos = seq.positions.copy()
        pos[0, J["left_hip"]] = pos[0, J["right_hip"]]
        with pytest.raises(DegenerateYawError):
            cumulative_yaw(JointSequence(pos), BodyAxes(1, (0, 2)))


class TestContainers:
    def test_motion_clip_validation(self):
        with pytest.raises(InvalidMotionError):
            MotionClip(np.full((4, 319), np.nan))
        bad = np.zeros((4, 319))
        bad[0, -1] = 1.5  # contact channel out of range
        with pytest.raises(InvalidMotionError):
            MotionClip(bad)
        clip = MotionClip(np.zeros((4, 319)))
        assert clip.is_canonical and clip.frames == 4
        with pytest.raises(ValueError):
            clip.features[0, 0] = 1.0  # read-only storage

    def test_joint_sequence_validation(self):
        with pytest.raises(InvalidMotionError):
            JointSequence(np.zeros((0, 22, 3)))
        with pytest.raises(InvalidMotionError):
            JointSequence(np.zeros((4, 21, 3)))
        names = list(JOINT_NAMES)
        names[0] = "head"  # duplicate
        with pytest.raises(InvalidMotionError):
            JointSequence(np.zeros((4, 22, 3)), joint_names=tuple(names))


class TestMotionFiles:
    def test_joint_sequence_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        seq = JointSequence(rng.normal(size=(11, 22, 3)), fps=30)
        path = tmp_path / "seq.json"
        write_joint_sequence(path, seq)
        data = json.loads(path.read_text())
        assert set(data) == {"fps", "joints", "frames", "positions"}
        assert data["frames"] == 11 and len(data["positions"]) == 11 * 22 * 3
        loaded = read_joint_sequence(path)
        assert np.array_equal(loaded.positions, seq.positions)
        assert loaded.joint_names == seq.joint_names

    def test_motion_clip_round_trip_bit_exact(self):
        rng = np.random.default_rng(8)
        feats = rng.normal(size=(6, 319))
        feats[:, -4:] = rng.integers(0, 2, size=(6, 4))
        clip = MotionClip(feats, fps=30)
        data = json.loads(json.dumps(motion_clip_to_dict(clip)))
        assert set(data) == {"fps", "frames", "features"}
        loaded = motion_clip_from_dict(data)
        assert np.array_equal(loaded.features, clip.features)
