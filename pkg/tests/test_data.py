import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from timotion import data as d
from timotion.errors import ConfigurationError, DimensionError, FormatError, UsageError


@pytest.mark.parametrize("n, width", [(22, 268), (5, 64), (1, 16)])
def test_frame_dim(n, width):
    assert d.frame_dim(n) == width


def test_skeletons_valid():
    for spec in (d.minimal_skeleton(), d.smpl_like_skeleton()):
        assert np.all(spec.bone_lengths > 0)
        assert spec.parents[0] == 0
        assert all(spec.parents[j] < j for j in range(1, spec.n_joints))
    assert d.skeleton_for(22).n_joints == 22


def test_skeleton_rejects_bad_feet():
    offsets = np.zeros((2, 3))
    offsets[1] = [0, -1, 0]
    with pytest.raises(ConfigurationError):
        d.SkeletonSpec((0, 0), offsets, ())
    with pytest.raises(ConfigurationError):
        d.SkeletonSpec((0, 0), offsets, (1, 1, 5, 5))


def test_generator_deterministic():
    spec = d.minimal_skeleton()
    assert d.generate_synthetic_pair(spec, "mirror_dance", 32, 7) == d.generate_synthetic_pair(spec, "mirror_dance", 32, 7)
    assert d.generate_synthetic_pair(spec, "mirror_dance", 32, 7) != d.generate_synthetic_pair(spec, "mirror_dance", 32, 8)


@pytest.mark.parametrize("scenario", d.SCENARIOS)
@pytest.mark.parametrize("spec", [d.minimal_skeleton(), d.smpl_like_skeleton()], ids=["j5", "j22"])
def test_velocity_consistency_and_width(scenario, spec):
    pair = d.generate_synthetic_pair(spec, scenario, 24, 3)
    for x in (pair.x_a, pair.x_b):
        assert x.shape == (24, d.frame_dim(spec))
        pos, vel = d.positions(x, spec.n_joints), d.velocities(x, spec.n_joints)
        assert np.max(np.abs(vel[:-1] - (pos[1:] - pos[:-1]))) == 0.0
        c = d.contacts(x, spec.n_joints)
        assert np.all((c >= 0) & (c <= 1))
        r = d.sixd_to_matrix(d.rotations6d(x, spec.n_joints))
        np.testing.assert_allclose(np.einsum("...ji,...jk->...ik", r, r), np.broadcast_to(np.eye(3), r.shape), atol=1e-12)


def test_handshake_closest_in_final_quarter():
    spec = d.minimal_skeleton()
    for seed in range(10):
        pair = d.generate_synthetic_pair(spec, "approach_handshake", 32, seed)
        dist = np.linalg.norm(pair.x_a[:, [0, 2]] - pair.x_b[:, [0, 2]], axis=1)
        assert np.argmin(dist) >= 24


def test_generator_errors():
    spec = d.minimal_skeleton()
    with pytest.raises(UsageError):
        d.generate_synthetic_pair(spec, "tango", 32, 0)
    with pytest.raises(UsageError):
        d.generate_synthetic_pair(spec, "mirror_dance", 7, 0)


def test_tokens_deterministic_per_scenario():
    spec = d.minimal_skeleton()
    for sc in d.SCENARIOS:
        assert d.generate_synthetic_pair(spec, sc, 8, 0).tokens == d.generate_synthetic_pair(spec, sc, 8, 99).tokens == d.SCENARIO_TOKENS[sc]


def _static(spec, height):
    n = spec.n_joints
    pos = np.zeros((10, n, 3))
    pos[..., 1] = height
    return d.pack_frames(pos, np.tile(d.matrix_to_6d(np.eye(3)), (10, n, 1)), np.zeros((10, 4)))


def test_contact_static_on_ground():
    spec = d.minimal_skeleton()
    assert np.all(d.foot_contact_labels(_static(spec, 0.0), spec) == 1.0)


def test_contact_feet_in_air():
    spec = d.minimal_skeleton()
    assert np.all(d.foot_contact_labels(_static(spec, 1.0), spec, h_max=0.05) == 0.0)


def test_contact_bad_thresholds():
    spec = d.minimal_skeleton()
    with pytest.raises(UsageError):
        d.foot_contact_labels(_static(spec, 0.0), spec, h_max=0.0)


def test_walk_cycle_duty():
    spec = d.smpl_like_skeleton()
    frames, truth = d.walk_cycle(spec, 120)
    labels = d.foot_contact_labels(frames, spec)
    assert abs(labels.mean() - truth.mean()) <= 0.1
    # the two sides alternate: at most frames where both feet are in swing
    left, right = labels[:, 0], labels[:, 2]
    assert np.mean((left == 0) & (right == 0)) < 0.1
    assert 0 < left.mean() < 1


def test_forward_kinematics_rest_pose():
    spec = d.minimal_skeleton()
    rot = np.tile(np.eye(3), (3, spec.n_joints, 1, 1))
    pos = d.forward_kinematics(spec, np.zeros((3, 3)), rot)
    expected = np.zeros((spec.n_joints, 3))
    for j in range(1, spec.n_joints):
        expected[j] = expected[spec.parents[j]] + spec.offsets[j]
    np.testing.assert_allclose(pos[0], expected, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_sixd_roundtrip(angle, seed):
    axis = np.random.default_rng(seed).normal(size=3)
    r = d.axis_angle_matrix(axis / np.linalg.norm(axis), np.array(angle))
    np.testing.assert_allclose(d.sixd_to_matrix(d.matrix_to_6d(r)), r, atol=1e-12)


def test_dataset_roundtrip(tmp_path):
    spec = d.minimal_skeleton()
    pairs = d.generate_dataset(spec, 10, 16, 3)
    pairs[2] = d.MotionPair(pairs[2].x_a, pairs[2].x_b, (1, 2, 3, 4), valid_length=12)
    path = tmp_path / "x.timd"
    d.save_dataset(path, pairs, spec.n_joints, manifest={"seed": 3})
    loaded, n = d.load_dataset(path)
    assert n == 5 and loaded == pairs
    assert (tmp_path / "x.timd.json").exists()


def test_empty_dataset(tmp_path):
    path = tmp_path / "e.timd"
    d.save_dataset(path, [], 5)
    assert d.load_dataset(path) == ([], 5)


def test_corrupt_magic(tmp_path):
    path = tmp_path / "x.timd"
    d.save_dataset(path, d.generate_dataset(d.minimal_skeleton(), 2, 8, 0), 5)
    buf = bytearray(path.read_bytes())
    buf[:4] = b"XXXX"
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="offset 0"):
        d.load_dataset(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "x.timd"
    d.save_dataset(path, d.generate_dataset(d.minimal_skeleton(), 2, 8, 0), 5)
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(FormatError) as info:
        d.load_dataset(path)
    assert info.value.offset is not None


def test_bad_version(tmp_path):
    path = tmp_path / "x.timd"
    d.save_dataset(path, [], 5)
    buf = bytearray(path.read_bytes())
    buf[4] = 9
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="version"):
        d.load_dataset(path)


def test_save_rejects_wrong_width(tmp_path):
    pairs = d.generate_dataset(d.minimal_skeleton(), 1, 8, 0)
    with pytest.raises(DimensionError):
        d.save_dataset(tmp_path / "x.timd", pairs, 22)


def test_motion_pair_shapes():
    with pytest.raises(DimensionError):
        d.MotionPair(np.zeros((4, 64)), np.zeros((5, 64)), ())
