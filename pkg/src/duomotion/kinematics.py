"""Skeletons, 6D rotations, forward kinematics and position-based orientation recovery.

Axis convention: Y is up, the ground is the XZ plane and a character with zero
yaw faces +Z, which puts its left side on +X.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_CONTACT_THRESHOLD = 0.02  # m/frame at 30 fps
_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class Skeleton:
    name: str
    parent: tuple[int, ...]
    rest_offset: np.ndarray  # (n_joints, 3), metres, parent frame
    heel_toe: tuple[int, int, int, int]  # left heel, right heel, left toe, right toe
    facing_joints: tuple[tuple[int, int], ...]  # (left, right) pairs spanning the body
    mirror: tuple[int, ...] = ()  # left/right joint permutation
    joint_names: tuple[str, ...] = ()
    children: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.parent)
        offs = np.asarray(self.rest_offset, dtype=np.float64)
        if offs.shape != (n, 3):
            raise ValueError(f"rest_offset shape {offs.shape} does not match {n} joints")
        if self.parent[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j in range(1, n):
            if not 0 <= self.parent[j] < j:
                raise ValueError(f"joint {j}: parent {self.parent[j]} must precede it")
        if np.any(offs[0] != 0.0):
            raise ValueError("root rest offset must be zero")
        flat = list(self.heel_toe) + [i for pair in self.facing_joints for i in pair]
        if len(self.heel_toe) != 4 or not self.facing_joints or any(not 0 <= i < n for i in flat):
            raise ValueError("heel_toe / facing_joints must be valid joint indices")
        mirror = tuple(self.mirror) or tuple(range(n))
        if sorted(mirror) != list(range(n)) or any(mirror[mirror[j]] != j for j in range(n)):
            raise ValueError("mirror must be an involutive permutation")
        offs.setflags(write=False)
        object.__setattr__(self, "rest_offset", offs)
        object.__setattr__(self, "mirror", mirror)
        object.__setattr__(
            self, "children", tuple(tuple(c for c in range(n) if self.parent[c] == j) for j in range(n))
        )

    @property
    def n_joints(self) -> int:
        return len(self.parent)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_joints": self.n_joints,
            "parent": list(self.parent),
            "rest_offset": self.rest_offset.tolist(),
            "heel_toe": list(self.heel_toe),
            "facing_joints": [list(p) for p in self.facing_joints],
            "mirror": list(self.mirror),
            "joint_names": list(self.joint_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        skel = cls(
            name=d.get("name", "custom"),
            parent=tuple(int(p) for p in d["parent"]),
            rest_offset=np.asarray(d["rest_offset"], dtype=np.float64),
            heel_toe=tuple(int(i) for i in d["heel_toe"]),
            facing_joints=tuple(tuple(int(i) for i in p) for p in d["facing_joints"]),
            mirror=tuple(int(i) for i in d.get("mirror", ())),
            joint_names=tuple(d.get("joint_names", ())),
        )
        if "n_joints" in d and int(d["n_joints"]) != skel.n_joints:
            raise ValueError(f"n_joints={d['n_joints']} but parent list has {skel.n_joints} entries")
        return skel


def save_skeleton(skel: Skeleton, path) -> None:
    Path(path).write_text(json.dumps(skel.to_dict(), indent=2) + "\n")


def load_skeleton(path) -> Skeleton:
    return Skeleton.from_dict(json.loads(Path(path).read_text()))


_SMPL22_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)


def smpl22() -> Skeleton:
    """22-joint body (SMPL body joints without hands), left side on +X."""
    offsets = [
        (0, 0, 0),
        (0.06, -0.09, 0), (-0.06, -0.09, 0), (0, 0.11, 0),
        (0, -0.38, 0), (0, -0.38, 0), (0, 0.13, 0),
        (0, -0.40, 0), (0, -0.40, 0), (0, 0.06, 0),
        (0, -0.06, 0.12), (0, -0.06, 0.12), (0, 0.21, 0),
        (0.08, 0.12, 0), (-0.08, 0.12, 0), (0, 0.09, 0.05),
        (0.10, 0.03, 0), (-0.10, 0.03, 0),
        (0.26, 0, 0), (-0.26, 0, 0),
        (0.25, 0, 0), (-0.25, 0, 0),
    ]
    parent = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)
    mirror = (0, 2, 1, 3, 5, 4, 6, 8, 7, 9, 11, 10, 12, 14, 13, 15, 17, 16, 19, 18, 21, 20)
    return Skeleton(
        name="smpl22",
        parent=parent,
        rest_offset=np.array(offsets, dtype=np.float64),
        heel_toe=(7, 8, 10, 11),
        facing_joints=((1, 2), (16, 17)),
        mirror=mirror,
        joint_names=_SMPL22_NAMES,
    )


def toy5() -> Skeleton:
    """Five-joint figure for fast tests: pelvis, two feet, chest, head."""
    offsets = [(0, 0, 0), (0.1, -0.5, 0), (-0.1, -0.5, 0), (0, 0.4, 0), (0, 0.2, 0.05)]
    return Skeleton(
        name="toy5",
        parent=(-1, 0, 0, 0, 3),
        rest_offset=np.array(offsets, dtype=np.float64),
        heel_toe=(1, 2, 1, 2),
        facing_joints=((1, 2),),
        mirror=(0, 2, 1, 3, 4),
        joint_names=("pelvis", "left_foot", "right_foot", "chest", "head"),
    )


BUILTIN_SKELETONS = {"smpl22": smpl22, "toy5": toy5}


def get_skeleton(name_or_path: str) -> Skeleton:
    if name_or_path in BUILTIN_SKELETONS:
        return BUILTIN_SKELETONS[name_or_path]()
    return load_skeleton(name_or_path)


def rest_height(skel: Skeleton) -> float:
    """Root height that puts the lowest joint of the rest pose on the ground."""
    pos = forward_kinematics(skel, np.zeros(3), np.broadcast_to(np.eye(3), (skel.n_joints, 3, 3)))
    return float(-pos[:, 1].min())


# ---------------------------------------------------------------------------
# rotations


def rot6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt the two stored columns into a proper rotation (..., 3, 3)."""
    r6 = np.asarray(r6, dtype=np.float64)
    a, b = r6[..., :3], r6[..., 3:6]
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    sin = np.linalg.norm(np.cross(a, b), axis=-1) / np.maximum(na * nb, 1e-300)
    cond = np.minimum(np.minimum(na, nb), sin)
    if np.any(cond < 1e-6):
        raise ValueError(f"degenerate 6D rotation: min(|a|, |b|, sin angle) = {float(np.min(cond)):.3g}")
    c1 = a / na[..., None]
    b2 = b - (c1 * b).sum(-1, keepdims=True) * c1
    c2 = b2 / np.linalg.norm(b2, axis=-1, keepdims=True)
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=-1)


def matrix_to_rot6d(rot: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot)
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def rot_y(angle) -> np.ndarray:
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    z, o = np.zeros_like(angle), np.ones_like(angle)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def rot_x(angle) -> np.ndarray:
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    z, o = np.zeros_like(angle), np.ones_like(angle)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def align_vectors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation taking direction ``a`` onto direction ``b`` (batched)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a, b = np.broadcast_arrays(a, b)
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    v = np.cross(a, b)
    c = (a * b).sum(-1)
    k = np.zeros(a.shape[:-1] + (3, 3))
    k[..., 0, 1], k[..., 0, 2] = -v[..., 2], v[..., 1]
    k[..., 1, 0], k[..., 1, 2] = v[..., 2], -v[..., 0]
    k[..., 2, 0], k[..., 2, 1] = -v[..., 1], v[..., 0]
    anti = c < -1.0 + 1e-9
    denom = np.where(anti, 1.0, 1.0 + c)
    rot = np.eye(3) + k + (k @ k) / denom[..., None, None]
    if np.any(anti):
        # half turn about any axis perpendicular to a
        aa = a[anti]
        helper = np.where(np.abs(aa[:, :1]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]])
        axis = np.cross(aa, helper)
        axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
        rot[anti] = 2.0 * axis[:, :, None] * axis[:, None, :] - np.eye(3)
    return rot


def _kabsch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Rotation R minimising sum |R src_k - dst_k|^2; src/dst are (..., K, 3)."""
    h = np.swapaxes(src, -1, -2) @ dst
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(np.swapaxes(vt, -1, -2) @ np.swapaxes(u, -1, -2)))
    fix = np.ones(h.shape[:-2] + (3,))
    fix[..., 2] = d
    return np.swapaxes(vt, -1, -2) @ (fix[..., :, None] * np.swapaxes(u, -1, -2))


# ---------------------------------------------------------------------------
# forward / inverse kinematics


def forward_kinematics(skel: Skeleton, root_pos, local_rots, return_global: bool = False):
    """World joint positions (..., N, 3) from root position and per-joint local rotations.

    ``local_rots`` holds rotation matrices (..., N, 3, 3) or 6D vectors (..., N, 6);
    the root entry is the root's world rotation.
    """
    local_rots = np.asarray(local_rots, dtype=np.float64)
    if local_rots.shape[-1] == 6:
        local_rots = rot6d_to_matrix(local_rots)
    if local_rots.shape[-3] != skel.n_joints:
        raise ValueError(f"expected {skel.n_joints} joint rotations, got {local_rots.shape[-3]}")
    root_pos = np.asarray(root_pos, dtype=np.float64)
    batch = np.broadcast_shapes(root_pos.shape[:-1], local_rots.shape[:-3])
    pos = np.zeros(batch + (skel.n_joints, 3))
    glob = np.zeros(batch + (skel.n_joints, 3, 3))
    pos[..., 0, :] = root_pos
    glob[..., 0, :, :] = local_rots[..., 0, :, :]
    for j in range(1, skel.n_joints):
        p = skel.parent[j]
        pos[..., j, :] = pos[..., p, :] + glob[..., p, :, :] @ skel.rest_offset[j]
        glob[..., j, :, :] = glob[..., p, :, :] @ local_rots[..., j, :, :]
    return (pos, glob) if return_global else pos


def heading(skel: Skeleton, positions):
    """Unnormalised forward direction ``(fx, fz)`` in the ground plane.

    The across-body vector is averaged over ``facing_joints`` (left minus right)
    and crossed with +Y. Works on numpy arrays and torch tensors alike.
    """
    ax = 0.0
    az = 0.0
    for left, right in skel.facing_joints:
        d = positions[..., left, :] - positions[..., right, :]
        ax = ax + d[..., 0]
        az = az + d[..., 2]
    return -az, ax


def facing_yaw(skel: Skeleton, positions, min_norm: float = 1e-6) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    fx, fz = heading(skel, positions)
    norm = np.hypot(fx, fz)
    if np.any(norm < min_norm):
        raise ValueError(f"degenerate facing: across-body vector XZ norm {float(norm.min()):.3g}")
    return np.arctan2(fx, fz)


def extract_orientation(skel: Skeleton, positions):
    """Root yaw and per-joint local rotations recovered from joint positions.

    Joints with a single child get the minimal (swing) rotation aligning the
    rest bone with the observed bone, so twist about that bone is not
    recovered. Joints whose children span a plane are solved exactly by
    orthogonal Procrustes; leaves get the identity. The root entry is the
    root's world rotation. Returns ``(yaw, local_rots)`` with shapes
    ``(...)`` and ``(..., N, 3, 3)``.
    """
    positions = np.asarray(positions, dtype=np.float64)
    yaw = facing_yaw(skel, positions)
    batch = positions.shape[:-2]
    n = skel.n_joints
    local = np.broadcast_to(np.eye(3), batch + (n, 3, 3)).copy()
    glob = np.zeros(batch + (n, 3, 3))
    for j in range(n):
        parent_glob = np.broadcast_to(np.eye(3), batch + (3, 3)) if j == 0 else glob[..., skel.parent[j], :, :]
        kids = skel.children[j]
        if kids:
            obs = positions[..., list(kids), :] - positions[..., j : j + 1, :]
            obs = obs @ parent_glob  # into the parent frame: R^T b for each row
            rest = skel.rest_offset[list(kids)]
            spans = len(kids) >= 2 and np.linalg.matrix_rank(rest, tol=1e-6) >= 2
            if spans:
                local[..., j, :, :] = _kabsch(np.broadcast_to(rest, obs.shape), obs)
            else:
                local[..., j, :, :] = align_vectors(rest[0], obs[..., 0, :])
        glob[..., j, :, :] = parent_glob @ local[..., j, :, :]
    return yaw, local


def bone_lengths(positions, skel: Skeleton):
    """Length of every non-root bone, shape (..., N-1). numpy or torch input."""
    child = list(range(1, skel.n_joints))
    par = list(skel.parent[1:])
    d = positions[..., child, :] - positions[..., par, :]
    return ((d * d).sum(-1) + 1e-12) ** 0.5


def detect_foot_contacts(positions, skel: Skeleton, vel_threshold: float = DEFAULT_CONTACT_THRESHOLD) -> np.ndarray:
    """Binary (L, 4) contacts: heel/toe displacement to the next frame below threshold."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] < 2:
        raise ValueError("contact detection needs at least two frames")
    feet = positions[:, list(skel.heel_toe), :]
    speed = np.linalg.norm(feet[1:] - feet[:-1], axis=-1)
    contact = (speed < vel_threshold).astype(np.float32)
    return np.concatenate([contact, contact[-1:]], axis=0)
