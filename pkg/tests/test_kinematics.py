import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from duomotion import kinematics as kin
from duomotion import synth


def _rest_positions(skel, root=(0.0, 0.0, 0.0)):
    # independent oracle: cumulative sum of rest offsets along the parent chain
    pos = np.zeros((skel.n_joints, 3))
    pos[0] = root
    for j in range(1, skel.n_joints):
        pos[j] = pos[skel.parent[j]] + skel.rest_offset[j]
    return pos


def _random_local(skel, rng, n=(), scale=0.6, twist_free=False):
    """Random local rotations; with ``twist_free`` single-child joints only swing."""
    out = np.broadcast_to(np.eye(3), n + (skel.n_joints, 3, 3)).copy()
    for j in range(skel.n_joints):
        rv = rng.normal(0.0, scale, size=n + (3,))
        kids = skel.children[j]
        if twist_free and len(kids) == 1:
            bone = skel.rest_offset[kids[0]] / np.linalg.norm(skel.rest_offset[kids[0]])
            rv = rv - (rv @ bone)[..., None] * bone  # drop the component along the bone
        out[..., j, :, :] = Rotation.from_rotvec(rv.reshape(-1, 3)).as_matrix().reshape(n + (3, 3))
    return out


def test_smpl22_layout(smpl):
    assert smpl.n_joints == 22
    assert smpl.parent[0] == -1
    assert all(smpl.parent[j] < j for j in range(1, 22))
    assert smpl.heel_toe == (7, 8, 10, 11)
    # left joints sit on +X in the rest pose
    rest = _rest_positions(smpl)
    for left, right in smpl.facing_joints:
        assert rest[left, 0] > 0 > rest[right, 0]


def test_skeleton_validation():
    base = kin.toy5().to_dict()
    bad = dict(base, parent=[-1, 0, 0, 4, 3])
    with pytest.raises(ValueError):
        kin.Skeleton.from_dict(bad)
    bad = dict(base, rest_offset=[[0.1, 0, 0]] + base["rest_offset"][1:])
    with pytest.raises(ValueError, match="root"):
        kin.Skeleton.from_dict(bad)
    bad = dict(base, heel_toe=[1, 2, 9, 2])
    with pytest.raises(ValueError):
        kin.Skeleton.from_dict(bad)
    bad = dict(base, mirror=[0, 2, 2, 3, 4])
    with pytest.raises(ValueError, match="mirror"):
        kin.Skeleton.from_dict(bad)
    with pytest.raises(ValueError, match="n_joints"):
        kin.Skeleton.from_dict(dict(base, n_joints=6))


def test_skeleton_file_round_trip(tmp_path, smpl):
    path = tmp_path / "skel.json"
    kin.save_skeleton(smpl, path)
    back = kin.load_skeleton(path)
    assert back.parent == smpl.parent
    np.testing.assert_array_equal(back.rest_offset, smpl.rest_offset)
    assert back.heel_toe == smpl.heel_toe and back.facing_joints == smpl.facing_joints
    assert kin.get_skeleton(str(path)).mirror == smpl.mirror


def test_rot6d_identity():
    np.testing.assert_array_equal(kin.rot6d_to_matrix(np.array([1.0, 0, 0, 0, 1, 0])), np.eye(3))


def test_rot6d_of_rotation_is_lossless():
    rots = Rotation.random(200, random_state=0).as_matrix()
    back = kin.rot6d_to_matrix(kin.matrix_to_rot6d(rots))
    np.testing.assert_allclose(back, rots, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_rot6d_output_is_proper_rotation(v):
    v = np.array(v)
    a, b = v[:3], v[3:]
    sin = np.linalg.norm(np.cross(a, b)) / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-300)
    if min(np.linalg.norm(a), np.linalg.norm(b), sin) < 1e-3:
        with pytest.raises(ValueError) if min(np.linalg.norm(a), np.linalg.norm(b), sin) < 1e-6 else _noop():
            kin.rot6d_to_matrix(v)
        return
    r = kin.rot6d_to_matrix(v)
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-5)
    assert abs(np.linalg.det(r) - 1.0) < 1e-5
    # the first column keeps the direction of a; re-encoding reproduces the orthonormalised input
    np.testing.assert_allclose(r[:, 0], a / np.linalg.norm(a), atol=1e-9)
    np.testing.assert_allclose(kin.rot6d_to_matrix(kin.matrix_to_rot6d(r)), r, atol=1e-9)


class _noop:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def test_rot6d_degenerate_rejected_with_measure():
    with pytest.raises(ValueError, match="degenerate"):
        kin.rot6d_to_matrix(np.array([1.0, 0, 0, 2.0, 0, 0]))
    with pytest.raises(ValueError, match="degenerate"):
        kin.rot6d_to_matrix(np.zeros(6))


def test_rot_helpers_match_scipy():
    for ang in (-2.0, 0.3, 1.7):
        np.testing.assert_allclose(kin.rot_y(ang), Rotation.from_euler("y", ang).as_matrix(), atol=1e-12)
        np.testing.assert_allclose(kin.rot_x(ang), Rotation.from_euler("x", ang).as_matrix(), atol=1e-12)


def test_align_vectors_minimal_and_antiparallel():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    r = kin.align_vectors(a, b)
    got = np.einsum("nij,nj->ni", r, a / np.linalg.norm(a, axis=1, keepdims=True))
    np.testing.assert_allclose(got, b / np.linalg.norm(b, axis=1, keepdims=True), atol=1e-10)
    # minimal: rotation angle equals the angle between the vectors
    ang = Rotation.from_matrix(r).magnitude()
    cos = np.einsum("ni,ni->n", a, b) / np.linalg.norm(a, axis=1) / np.linalg.norm(b, axis=1)
    np.testing.assert_allclose(ang, np.arccos(np.clip(cos, -1, 1)), atol=1e-8)
    flip = kin.align_vectors(np.array([0.0, 1, 0]), np.array([0.0, -1, 0]))
    np.testing.assert_allclose(flip @ [0, 1, 0], [0, -1, 0], atol=1e-12)
    np.testing.assert_allclose(flip.T @ flip, np.eye(3), atol=1e-12)


def test_fk_identity_is_cumulative_offsets(smpl):
    root = np.array([0.3, 0.9, -1.2])
    pos = kin.forward_kinematics(smpl, root, np.broadcast_to(np.eye(3), (22, 3, 3)))
    np.testing.assert_allclose(pos, _rest_positions(smpl, root), atol=1e-12)


def test_fk_accepts_rot6d(smpl):
    rots = _random_local(smpl, np.random.default_rng(1))
    a = kin.forward_kinematics(smpl, np.zeros(3), rots)
    b = kin.forward_kinematics(smpl, np.zeros(3), kin.matrix_to_rot6d(rots))
    np.testing.assert_allclose(a, b, atol=1e-12)
    with pytest.raises(ValueError):
        kin.forward_kinematics(smpl, np.zeros(3), rots[:5])


def test_fk_root_half_turn_reflects_through_root(smpl):
    root = np.array([0.5, 1.0, 0.2])
    local = np.broadcast_to(np.eye(3), (22, 3, 3)).copy()
    base = kin.forward_kinematics(smpl, root, local)
    local[0] = kin.rot_y(np.pi)
    turned = kin.forward_kinematics(smpl, root, local)
    rel0, rel1 = base - root, turned - root
    np.testing.assert_allclose(rel1[:, [0, 2]], -rel0[:, [0, 2]], atol=1e-12)
    np.testing.assert_allclose(rel1[:, 1], rel0[:, 1], atol=1e-12)


def test_fk_rigid_equivariance(smpl):
    rng = np.random.default_rng(2)
    local = _random_local(smpl, rng)
    root = rng.normal(size=3)
    pos = kin.forward_kinematics(smpl, root, local)
    yaw, shift = 0.8, np.array([1.0, 0.0, -2.0])
    local2 = local.copy()
    local2[0] = kin.rot_y(yaw) @ local[0]
    pos2 = kin.forward_kinematics(smpl, kin.rot_y(yaw) @ root + shift, local2)
    np.testing.assert_allclose(pos2, pos @ kin.rot_y(yaw).T + shift, atol=1e-5)


def test_bone_lengths_invariant_to_pose(smpl):
    rng = np.random.default_rng(3)
    rest = np.linalg.norm(smpl.rest_offset[1:], axis=1)
    for _ in range(10):
        pos = kin.forward_kinematics(smpl, rng.normal(size=3), _random_local(smpl, rng, scale=1.5))
        np.testing.assert_allclose(kin.bone_lengths(pos, smpl), rest, atol=1e-5)


def test_bone_lengths_scale(smpl):
    pos = _rest_positions(smpl)
    np.testing.assert_allclose(kin.bone_lengths(2 * pos, smpl), 2 * kin.bone_lengths(pos, smpl), rtol=1e-9)


def test_rest_pose_faces_plus_z(smpl, toy):
    for skel in (smpl, toy):
        assert abs(kin.facing_yaw(skel, _rest_positions(skel))) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(-3.1, 3.1), st.floats(-5, 5), st.floats(-5, 5))
def test_yaw_equivariant_and_translation_invariant(theta, dx, dz):
    skel = kin.smpl22()
    pos = _rest_positions(skel)
    moved = pos @ kin.rot_y(theta).T + np.array([dx, 0.3, dz])
    got = kin.facing_yaw(skel, moved)
    assert abs(np.angle(np.exp(1j * (got - theta)))) < 1e-9


def test_facing_degenerate_rejected(toy):
    pos = _rest_positions(toy)
    pos[2] = pos[1]  # feet on top of each other
    with pytest.raises(ValueError, match="degenerate"):
        kin.facing_yaw(toy, pos)
    with pytest.raises(ValueError):
        kin.extract_orientation(toy, pos)


def test_extract_orientation_round_trip_twist_free(smpl):
    rng = np.random.default_rng(4)
    local = _random_local(smpl, rng, n=(20,), scale=0.5, twist_free=True)
    roots = rng.normal(size=(20, 3))
    pos = kin.forward_kinematics(smpl, roots, local)
    yaw, rec = kin.extract_orientation(smpl, pos)
    back = kin.forward_kinematics(smpl, pos[:, 0], rec)
    assert np.abs(back - pos).max() < 1e-4
    assert yaw.shape == (20,)


def test_extract_orientation_toy_round_trip(toy):
    # the toy pelvis has three children; chest has one
    rng = np.random.default_rng(5)
    local = _random_local(toy, rng, n=(30,), scale=0.4, twist_free=True)
    pos = kin.forward_kinematics(toy, rng.normal(size=(30, 3)), local)
    _, rec = kin.extract_orientation(toy, pos)
    assert np.abs(kin.forward_kinematics(toy, pos[:, 0], rec) - pos).max() < 1e-4


def test_contacts_static_and_moving(smpl):
    pos = np.repeat(_rest_positions(smpl)[None], 10, axis=0)
    assert (kin.detect_foot_contacts(pos, smpl) == 1).all()
    moving = pos + np.arange(10)[:, None, None] * np.array([0.1, 0.0, 0.0])
    assert (kin.detect_foot_contacts(moving, smpl, 0.02) == 0).all()
    with pytest.raises(ValueError):
        kin.detect_foot_contacts(pos[:1], smpl)


def test_contacts_last_frame_copies_predecessor(smpl):
    pos = np.repeat(_rest_positions(smpl)[None], 5, axis=0)
    pos[4] += 1.0  # jump between frames 3 and 4
    c = kin.detect_foot_contacts(pos, smpl)
    assert (c[:3] == 1).all() and (c[3] == 0).all() and (c[4] == c[3]).all()


def test_walk_cycle_alternates_contacts(smpl):
    clip = synth.generate("circle", seed=0, length=200, skel=smpl)
    c = clip.person_a[:, -4:]
    left, right = c[:, [0, 2]].max(1), c[:, [1, 3]].max(1)
    assert left.mean() >= 0.3 and right.mean() >= 0.3
    # both feet lift at some point, never at the same time
    assert (left == 0).any() and (right == 0).any()
    assert not ((left == 0) & (right == 0)).any()


def test_rest_height(smpl, toy):
    assert abs(kin.rest_height(toy) - 0.5) < 1e-12
    assert kin.rest_height(smpl) == pytest.approx(-_rest_positions(smpl)[:, 1].min())
