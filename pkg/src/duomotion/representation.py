"""World-frame and root-frame motion states for a pair of people.

World-frame (non-canonical) state per frame, N joints, width 12N + 4::

    [joint positions 3N | joint velocities 3N | local rotations 6N | foot contacts 4]

Root-frame (canonical) state per frame, width 12N + 12::

    [yaw rate, vel x, vel z, root height | local positions 3N | local velocities 3N
     | local rotations 6N | foot contacts 4 | relative yaw (cos, sin) | relative xz 2]

Velocities are forward differences with the last frame repeated, which makes
encoding and decoding exact inverses. The root rotation slot stores the root's
world rotation with its heading removed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kinematics as kin
from .kinematics import Skeleton

FPS = 30
MAX_FRAMES = 300


def noncanonical_dim(n_joints: int) -> int:
    return 12 * n_joints + 4


def canonical_dim(n_joints: int) -> int:
    return 12 * n_joints + 12


@dataclass(frozen=True)
class Layout:
    """Channel slices of the world-frame state."""

    n_joints: int

    @property
    def dim(self) -> int:
        return noncanonical_dim(self.n_joints)

    @property
    def pos(self) -> slice:
        return slice(0, 3 * self.n_joints)

    @property
    def vel(self) -> slice:
        return slice(3 * self.n_joints, 6 * self.n_joints)

    @property
    def rot(self) -> slice:
        return slice(6 * self.n_joints, 12 * self.n_joints)

    @property
    def contact(self) -> slice:
        return slice(12 * self.n_joints, 12 * self.n_joints + 4)

    def positions(self, states):
        """(..., L, N, 3) view of the position block (numpy or torch)."""
        return states[..., self.pos].reshape(*states.shape[:-1], self.n_joints, 3)

    def velocities(self, states):
        return states[..., self.vel].reshape(*states.shape[:-1], self.n_joints, 3)

    def contacts(self, states):
        return states[..., self.contact]

    def root_xz_channels(self) -> list[int]:
        """Root x/z position channels followed by root x/z velocity channels."""
        v0 = 3 * self.n_joints
        return [0, 2, v0, v0 + 2]


@dataclass
class InteractionClip:
    """Two synchronised world-frame state sequences sharing one condition."""

    person_a: np.ndarray  # (L, 12N+4) float32
    person_b: np.ndarray
    label: str
    text: str = ""
    fps: int = FPS
    skeleton: str = "smpl22"
    n_joints: int = field(default=0)

    def __post_init__(self):
        self.person_a = np.ascontiguousarray(self.person_a, dtype=np.float32)
        self.person_b = np.ascontiguousarray(self.person_b, dtype=np.float32)
        if self.person_a.shape != self.person_b.shape or self.person_a.ndim != 2:
            raise ValueError(f"unsynchronised persons: {self.person_a.shape} vs {self.person_b.shape}")
        length, dim = self.person_a.shape
        if not 2 <= length <= MAX_FRAMES:
            raise ValueError(f"clip length {length} outside [2, {MAX_FRAMES}]")
        if not self.n_joints:
            if (dim - 4) % 12:
                raise ValueError(f"state width {dim} is not 12N + 4")
            self.n_joints = (dim - 4) // 12
        elif dim != noncanonical_dim(self.n_joints):
            raise ValueError(f"state width {dim} != 12*{self.n_joints} + 4")

    @property
    def n_frames(self) -> int:
        return self.person_a.shape[0]

    @property
    def layout(self) -> Layout:
        return Layout(self.n_joints)

    def stacked(self) -> np.ndarray:
        return np.stack([self.person_a, self.person_b])

    def swapped(self) -> "InteractionClip":
        return replace(self, person_a=self.person_b.copy(), person_b=self.person_a.copy())

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        lay = self.layout
        return lay.positions(self.person_a), lay.positions(self.person_b)


# ---------------------------------------------------------------------------
# world-frame encoding


def forward_diff(x: np.ndarray) -> np.ndarray:
    d = np.empty_like(x)
    d[:-1] = x[1:] - x[:-1]
    d[-1] = d[-2] if len(x) > 1 else 0.0
    return d


def check_bone_lengths(positions: np.ndarray, skel: Skeleton, tol: float = 0.01) -> float:
    rest = np.linalg.norm(skel.rest_offset[1:], axis=-1)
    dev = float(np.max(np.abs(kin.bone_lengths(np.asarray(positions, np.float64), skel) - rest) / rest))
    if dev > tol:
        raise ValueError(f"bone lengths deviate from the skeleton by up to {dev:.2%} (limit {tol:.0%})")
    return dev


def encode_noncanonical(
    positions: np.ndarray,
    skel: Skeleton,
    local_rots: np.ndarray | None = None,
    contact_threshold: float = kin.DEFAULT_CONTACT_THRESHOLD,
) -> np.ndarray:
    """World-frame states (L, 12N+4) from joint positions (L, N, 3).

    ``local_rots`` are (L, N, 3, 3) local rotations with the root entry in world
    frame; when omitted they are recovered from the positions.
    """
    positions = np.asarray(positions, dtype=np.float64)
    length, n = positions.shape[:2]
    if n != skel.n_joints:
        raise ValueError(f"positions have {n} joints, skeleton has {skel.n_joints}")
    check_bone_lengths(positions, skel)
    yaw = kin.facing_yaw(skel, positions)
    if local_rots is None:
        _, local_rots = kin.extract_orientation(skel, positions)
    local_rots = np.array(local_rots, dtype=np.float64)
    local_rots[:, 0] = np.swapaxes(kin.rot_y(yaw), -1, -2) @ local_rots[:, 0]
    pos32 = positions.astype(np.float32)
    vel = forward_diff(pos32)
    states = np.concatenate(
        [
            pos32.reshape(length, -1),
            vel.reshape(length, -1),
            kin.matrix_to_rot6d(local_rots).astype(np.float32).reshape(length, -1),
            kin.detect_foot_contacts(positions, skel, contact_threshold),
        ],
        axis=1,
    )
    return states.astype(np.float32)


def decode_noncanonical(states: np.ndarray, n_joints: int) -> np.ndarray:
    """Joint positions (L, N, 3), read straight from the state."""
    return Layout(n_joints).positions(np.asarray(states)).copy()


# ---------------------------------------------------------------------------
# root-frame encoding


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _to_root_frame(v: np.ndarray, yaw: np.ndarray) -> np.ndarray:
    """Rotate world vectors (..., 3) by -yaw; ``yaw`` broadcasts over leading dims."""
    c, s = np.cos(yaw), np.sin(yaw)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([c * x - s * z, y, s * x + c * z], axis=-1)


def _to_world(v: np.ndarray, yaw: np.ndarray) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([c * x + s * z, y, -s * x + c * z], axis=-1)


def init_pose(states: np.ndarray, skel: Skeleton) -> tuple[float, float, float]:
    """Frame-0 (yaw, root x, root z) of a world-frame state sequence."""
    pos = decode_noncanonical(states[:1], skel.n_joints).astype(np.float64)[0]
    return float(kin.facing_yaw(skel, pos)), float(pos[0, 0]), float(pos[0, 2])


def _encode_one(pos: np.ndarray, other: np.ndarray, states: np.ndarray, skel: Skeleton) -> np.ndarray:
    lay = Layout(skel.n_joints)
    length = pos.shape[0]
    yaw = kin.facing_yaw(skel, pos)
    yaw_o = kin.facing_yaw(skel, other)
    root = pos[:, 0, :]
    d_root = root[1:] - root[:-1]
    r_dot = np.zeros((length, 3))
    r_dot[:-1, 0] = _wrap(yaw[1:] - yaw[:-1])
    local_step = _to_root_frame(d_root, yaw[:-1])
    r_dot[:-1, 1] = local_step[:, 0]
    r_dot[:-1, 2] = local_step[:, 2]
    r_dot[-1] = r_dot[-2]
    ground = root * np.array([1.0, 0.0, 1.0])
    local_pos = _to_root_frame(pos - ground[:, None, :], yaw[:, None])
    local_vel = _to_root_frame(forward_diff(pos), yaw[:, None])
    rel_yaw = yaw_o - yaw
    rel_xz = _to_root_frame(other[:, 0, :] - root, yaw)[:, [0, 2]]
    out = np.concatenate(
        [
            r_dot,
            root[:, 1:2],
            local_pos.reshape(length, -1),
            local_vel.reshape(length, -1),
            states[:, lay.rot].astype(np.float64),
            states[:, lay.contact].astype(np.float64),
            np.stack([np.cos(rel_yaw), np.sin(rel_yaw)], -1),
            rel_xz,
        ],
        axis=1,
    )
    return out.astype(np.float32)


def encode_canonical(clip: InteractionClip, skel: Skeleton) -> tuple[np.ndarray, np.ndarray]:
    """Root-frame states (L, 12N+12) for person a and person b."""
    pa, pb = (p.astype(np.float64) for p in clip.positions())
    return _encode_one(pa, pb, clip.person_a, skel), _encode_one(pb, pa, clip.person_b, skel)


def integrate_root(r_dot: np.ndarray, yaw0, x0, z0) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative heading and ground position from per-frame (yaw rate, vx, vz).

    ``r_dot`` is (..., L, 3); returns yaw (..., L) and ground xz (..., L, 2).
    Frame i uses the increments of frames 0..i-1.
    """
    r_dot = np.asarray(r_dot, dtype=np.float64)
    lead = r_dot.shape[:-2]
    length = r_dot.shape[-2]
    yaw = np.empty(lead + (length,))
    yaw[..., 0] = yaw0
    yaw[..., 1:] = yaw0 + np.cumsum(r_dot[..., :-1, 0], axis=-1)
    c, s = np.cos(yaw[..., :-1]), np.sin(yaw[..., :-1])
    vx, vz = r_dot[..., :-1, 1], r_dot[..., :-1, 2]
    step = np.stack([c * vx + s * vz, -s * vx + c * vz], axis=-1)
    xz = np.empty(lead + (length, 2))
    xz[..., 0, 0] = x0
    xz[..., 0, 1] = z0
    xz[..., 1:, :] = np.asarray([x0, z0]) + np.cumsum(step, axis=-2)
    return yaw, xz


def decode_canonical(states: np.ndarray, init: tuple[float, float, float], n_joints: int) -> np.ndarray:
    """World joint positions (L, N, 3) by integrating the root terms from ``init``."""
    states = np.asarray(states, dtype=np.float64)
    length = states.shape[0]
    yaw, xz = integrate_root(states[:, :3], *init)
    local = states[:, 4 : 4 + 3 * n_joints].reshape(length, n_joints, 3)
    world = _to_world(local, yaw[:, None])
    world[..., 0] += xz[:, None, 0]
    world[..., 2] += xz[:, None, 1]
    return world


def canonical_to_noncanonical(states: np.ndarray, init: tuple[float, float, float], skel: Skeleton) -> np.ndarray:
    n = skel.n_joints
    pos = decode_canonical(states, init, n).astype(np.float32)
    length = pos.shape[0]
    rot = states[:, 4 + 6 * n : 4 + 12 * n]
    contact = states[:, 4 + 12 * n : 8 + 12 * n]
    return np.concatenate(
        [pos.reshape(length, -1), forward_diff(pos).reshape(length, -1), rot, contact], axis=1
    ).astype(np.float32)


# ---------------------------------------------------------------------------
# drift experiment


@dataclass
class DriftReport:
    horizons: list[int]
    canonical_rms: np.ndarray  # (H,)
    noncanonical_rms: np.ndarray
    canonical_errors: np.ndarray  # (trials, H) terminal xz errors
    noncanonical_errors: np.ndarray

    def fraction_growing(self, short: int, long: int) -> float:
        i, j = self.horizons.index(short), self.horizons.index(long)
        return float(np.mean(self.canonical_errors[:, j] > self.canonical_errors[:, i]))

    def table(self) -> str:
        rows = ["horizon  canonical_rms  noncanonical_rms"]
        for h, c, n in zip(self.horizons, self.canonical_rms, self.noncanonical_rms):
            rows.append(f"{h:7d}  {c:13.6f}  {n:16.6f}")
        return "\n".join(rows)


def measure_drift(
    clip: InteractionClip,
    skel: Skeleton,
    noise: float,
    horizons=(30, 300),
    trials: int = 1000,
    seed: int = 0,
) -> DriftReport:
    """Terminal ground-plane root error of person a under i.i.d. Gaussian noise.

    Root-frame decoding perturbs the integrated root terms (yaw rate and xz
    velocity); world-frame decoding perturbs the stored root position directly.
    Each trial draws one noise sequence and reports the error at every horizon.
    """
    if noise < 0:
        raise ValueError("noise level must be non-negative")
    horizons = [int(h) for h in horizons]
    if max(horizons) > clip.n_frames or min(horizons) < 1:
        raise ValueError(f"horizons {horizons} exceed clip length {clip.n_frames}")
    rng = np.random.default_rng(seed)
    can_a, _ = encode_canonical(clip, skel)
    init = init_pose(clip.person_a, skel)
    clean_yaw, clean_xz = integrate_root(can_a[:, :3], *init)
    length = clip.n_frames

    r_noise = rng.normal(0.0, noise, size=(trials, length, 3))
    _, noisy_xz = integrate_root(can_a[None, :, :3] + r_noise, *init)
    can_err = np.linalg.norm(noisy_xz - clean_xz, axis=-1)

    p_noise = rng.normal(0.0, noise, size=(trials, length, 2))
    non_err = np.linalg.norm(p_noise, axis=-1)

    idx = [h - 1 for h in horizons]
    ce, ne = can_err[:, idx], non_err[:, idx]
    return DriftReport(
        horizons=horizons,
        canonical_rms=np.sqrt(np.mean(ce**2, axis=0)),
        noncanonical_rms=np.sqrt(np.mean(ne**2, axis=0)),
        canonical_errors=ce,
        noncanonical_errors=ne,
    )


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError(f"stats shapes {self.mean.shape} / {self.std.shape}")

    @classmethod
    def from_states(cls, states: np.ndarray, min_std: float = 1e-6) -> "NormStats":
        flat = np.asarray(states, dtype=np.float64).reshape(-1, states.shape[-1])
        std = flat.std(axis=0)
        std[std < min_std] = 1.0
        return cls(flat.mean(axis=0), std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def _check(self, x) -> None:
        if x.shape[-1] != self.dim:
            raise ValueError(f"state width {x.shape[-1]} does not match stats width {self.dim}")

    def _pair(self, x):
        if isinstance(x, np.ndarray):
            return self.mean, self.std
        import torch

        return torch.as_tensor(self.mean, device=x.device), torch.as_tensor(self.std, device=x.device)

    def normalize(self, x):
        self._check(x)
        mu, sd = self._pair(x)
        return (x - mu) / sd

    def denormalize(self, x):
        self._check(x)
        mu, sd = self._pair(x)
        return x * sd + mu
