"""Procedural two-person interaction clips, augmentation, splits and the condition codebook.

Four families with contrasting distance and orientation signatures:

* ``circle``: the pair walks around a circle at opposite points, constant distance.
* ``approach-retreat``: face to face, walk in, then back off.
* ``mirror-wave``: face to face, standing, mirrored arm waves.
* ``push-pull``: contact range, the pair shifts back and forth along its axis.

Bodies are posed through forward kinematics, so bone lengths are exact; the
root height is shifted per frame so the lowest joint touches the ground.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import kinematics as kin
from .kinematics import Skeleton
from .representation import InteractionClip, Layout, encode_noncanonical

FAMILIES = ("circle", "approach-retreat", "mirror-wave", "push-pull")

PARAM_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "circle": {
        "radius": (0.9, 1.1),
        "speed": (0.006, 0.012),  # rad/frame
        "phase": (0.0, 2 * np.pi),
        "direction": (-1.0, 1.0),
        "center_x": (-1.0, 1.0),
        "center_z": (-1.0, 1.0),
    },
    "approach-retreat": {
        "far": (2.6, 3.2),
        "near": (0.5, 0.8),
        "angle": (0.0, 2 * np.pi),
        "center_x": (-1.0, 1.0),
        "center_z": (-1.0, 1.0),
    },
    "mirror-wave": {
        "distance": (1.0, 1.4),
        "amplitude": (0.3, 0.7),
        "frequency": (0.5, 1.5),  # Hz
        "phase": (0.0, 2 * np.pi),
        "angle": (0.0, 2 * np.pi),
        "center_x": (-1.0, 1.0),
        "center_z": (-1.0, 1.0),
    },
    "push-pull": {
        "distance": (0.6, 0.9),
        "amplitude": (0.1, 0.3),
        "frequency": (0.3, 0.8),  # Hz
        "phase": (0.0, 2 * np.pi),
        "angle": (0.0, 2 * np.pi),
        "center_x": (-1.0, 1.0),
        "center_z": (-1.0, 1.0),
    },
}

_STEP = 0.35  # m, nominal step length
_U_MAX = 0.45  # m, furthest the ankle may sit ahead/behind the hip
_KNEE_LIFT = 0.8  # rad of knee flexion at mid swing


# ---------------------------------------------------------------------------
# body animation


@dataclass
class _Track:
    """Root ground trajectory and heading of one person, plus an arm pose rule."""

    xz: np.ndarray  # (L, 2)
    yaw: np.ndarray  # (L,)
    arms: Callable[[int, np.ndarray, np.ndarray], tuple[np.ndarray, ...]]


def _leg_angles(u: np.ndarray, knee: np.ndarray, thigh: float, shank: float) -> np.ndarray:
    """Hip pitch placing the ankle ``u`` ahead of the hip for a given knee flexion."""
    theta = np.arcsin(np.clip(u / (thigh + shank), -0.95, 0.95)) + 0.5 * knee
    for _ in range(6):
        f = thigh * np.sin(theta) + shank * np.sin(theta - knee) - u
        df = thigh * np.cos(theta) + shank * np.cos(theta - knee)
        theta = theta - f / df
    return theta


def _gait(forward_step: np.ndarray, init: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Per-leg ankle offsets ``u`` and knee flexion over time, shapes (L, 2).

    A stance foot stays planted: its hip-relative offset shrinks by exactly the
    root's forward displacement. A leg lifts once it trails by more than half
    a step and the other leg is planted.
    """
    length = forward_step.shape[0] + 1
    u = np.zeros((length, 2))
    knee = np.zeros((length, 2))
    u[0] = init
    swing_left = [0, 0]
    swing_len = [1, 1]
    start = [0.0, 0.0]
    target = [0.0, 0.0]
    for i in range(1, length):
        step = forward_step[i - 1]
        direction = np.sign(step)
        for leg in range(2):
            other = 1 - leg
            if swing_left[leg] > 0:
                swing_left[leg] -= 1
                s = 1.0 - swing_left[leg] / swing_len[leg]
                ease = 0.5 - 0.5 * np.cos(np.pi * s)
                u[i, leg] = start[leg] + (target[leg] - start[leg]) * ease
                knee[i, leg] = _KNEE_LIFT * np.sin(np.pi * s)
                continue
            u[i, leg] = np.clip(u[i - 1, leg] - step, -_U_MAX, _U_MAX)
            trailing = direction != 0 and u[i, leg] * direction < -0.5 * _STEP
            if trailing and swing_left[other] == 0:
                n = int(np.clip(round(0.5 * _STEP / max(abs(step), 1e-6)), 4, 10))
                swing_left[leg], swing_len[leg] = n, n
                start[leg] = u[i, leg]
                target[leg] = direction * 0.5 * _STEP
    return u, knee


def _arm_rotations(skel: Skeleton, upper: np.ndarray, fore: np.ndarray, shoulder: int, elbow: int, wrist: int):
    """Local rotations of shoulder and elbow pointing the arm along body-frame directions."""
    r_sh = kin.align_vectors(skel.rest_offset[elbow], upper)
    fore_local = np.einsum("...ji,...j->...i", r_sh, fore)
    r_el = kin.align_vectors(skel.rest_offset[wrist], fore_local)
    return r_sh, r_el


def _pose_person(skel: Skeleton, track: _Track) -> tuple[np.ndarray, np.ndarray]:
    """World joint positions (L, N, 3) and local rotations (L, N, 3, 3)."""
    if skel.name != "smpl22":
        raise ValueError("the procedural body rig targets the smpl22 skeleton")
    length = track.xz.shape[0]
    heading = np.stack([np.sin(track.yaw), np.cos(track.yaw)], -1)
    forward = np.einsum("ij,ij->i", track.xz[1:] - track.xz[:-1], heading[:-1])
    still = np.allclose(forward, 0.0)
    u, knee = _gait(forward, (0.05, -0.05) if still else (0.25 * _STEP, -0.25 * _STEP))

    rots = np.broadcast_to(np.eye(3), (length, skel.n_joints, 3, 3)).copy()
    rots[:, 0] = kin.rot_y(track.yaw)
    thigh = float(np.linalg.norm(skel.rest_offset[4]))
    shank = float(np.linalg.norm(skel.rest_offset[7]))
    for leg, (hip, kn, ankle) in enumerate(((1, 4, 7), (2, 5, 8))):
        theta = _leg_angles(u[:, leg], knee[:, leg], thigh, shank)
        rots[:, hip] = kin.rot_x(-theta)
        rots[:, kn] = kin.rot_x(knee[:, leg])
        rots[:, ankle] = kin.rot_x(theta - knee[:, leg])

    t = np.arange(length)
    up_l, fo_l, up_r, fo_r = track.arms(length, u, t)
    rots[:, 16], rots[:, 18] = _arm_rotations(skel, up_l, fo_l, 16, 18, 20)
    rots[:, 17], rots[:, 19] = _arm_rotations(skel, up_r, fo_r, 17, 19, 21)

    root = np.zeros((length, 3))
    root[:, 0], root[:, 2] = track.xz[:, 0], track.xz[:, 1]
    pos = kin.forward_kinematics(skel, root, rots)
    pos[..., 1] -= pos[..., 1].min(axis=1, keepdims=True)
    return pos, rots


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _relaxed_arms(swing: float = 0.6):
    def arms(length, u, t):
        # arms swing opposite to the legs
        zl = -swing * u[:, 1]
        zr = -swing * u[:, 0]
        up_l = _unit(np.stack([np.full(length, 0.15), -np.ones(length), zl + 0.05], -1))
        up_r = _unit(np.stack([np.full(length, -0.15), -np.ones(length), zr + 0.05], -1))
        fo_l = _unit(up_l + np.array([0.0, 0.0, 0.3]))
        fo_r = _unit(up_r + np.array([0.0, 0.0, 0.3]))
        return up_l, fo_l, up_r, fo_r

    return arms


def _wave_arms(side: str, amplitude: float, omega: float, phase: float):
    relaxed = _relaxed_arms(0.0)

    def arms(length, u, t):
        up_l, fo_l, up_r, fo_r = relaxed(length, u, t)
        sway = amplitude * np.sin(omega * t + phase)
        sgn = 1.0 if side == "left" else -1.0
        upper = _unit(np.stack([np.full(length, sgn * 0.5), np.full(length, 0.8), np.full(length, 0.25)], -1))
        fore = _unit(np.stack([sgn * np.sin(sway), np.cos(sway), np.full(length, 0.2)], -1))
        if side == "left":
            return upper, fore, up_r, fo_r
        return up_l, fo_l, upper, fore

    return arms


def _push_arms(reach: np.ndarray):
    """Arms forward; ``reach`` in [0, 1] per frame straightens the elbows."""

    def arms(length, u, t):
        out = []
        for sgn in (1.0, -1.0):
            upper = _unit(np.stack([np.full(length, sgn * 0.15), np.full(length, -0.25), np.ones(length)], -1))
            bend = 0.9 * (1.0 - reach)
            fore = _unit(np.stack([np.full(length, sgn * 0.05), np.sin(bend), np.cos(bend)], -1))
            out += [upper, fore]
        return tuple(out)

    return arms


def _facing_pair(center, angle, offset_a, offset_b):
    """Ground tracks for two people on the line at ``angle`` facing each other.

    ``offset_*`` are signed distances from ``center`` along the line's axis.
    """
    axis = np.array([np.sin(angle), np.cos(angle)])
    xz_a = center + offset_a[:, None] * axis
    xz_b = center + offset_b[:, None] * axis
    yaw_a = np.full(offset_a.shape, angle)
    return xz_a, yaw_a, xz_b, yaw_a + np.pi


# ---------------------------------------------------------------------------
# families


def _text(family: str, p: dict) -> str:
    if family == "circle":
        way = "counterclockwise" if p["direction"] > 0 else "clockwise"
        return f"two people walk {way} around a circle {2 * p['radius']:.1f} meters apart"
    if family == "approach-retreat":
        return f"two people walk toward each other from {p['far']:.1f} meters away and then step back"
    if family == "mirror-wave":
        return "two people face each other and wave, one with the right hand and the other with the left hand"
    return f"two people push and pull each other back and forth at {p['distance']:.1f} meters"


def sample_params(family: str, rng: np.random.Generator) -> dict:
    ranges = PARAM_RANGES[family]
    p = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in ranges.items()}
    if "direction" in p:
        p["direction"] = 1.0 if p["direction"] >= 0 else -1.0
    return p


def _tracks(family: str, p: dict, length: int) -> tuple[_Track, _Track]:
    t = np.arange(length, dtype=np.float64)
    center = np.array([p["center_x"], p["center_z"]])
    if family == "circle":
        phi = p["phase"] + p["direction"] * p["speed"] * t
        tracks = []
        for shift in (0.0, np.pi):
            ang = phi + shift
            xz = center + p["radius"] * np.stack([np.cos(ang), np.sin(ang)], -1)
            tangent = p["direction"] * np.stack([-np.sin(ang), np.cos(ang)], -1)
            tracks.append(_Track(xz, np.arctan2(tangent[:, 0], tangent[:, 1]), _relaxed_arms()))
        return tracks[0], tracks[1]
    if family == "approach-retreat":
        d = p["near"] + (p["far"] - p["near"]) * 0.5 * (1.0 + np.cos(2.0 * np.pi * t / (length - 1)))
        xa, ya, xb, yb = _facing_pair(center, p["angle"], -0.5 * d, 0.5 * d)
        return _Track(xa, ya, _relaxed_arms()), _Track(xb, yb, _relaxed_arms())
    if family == "mirror-wave":
        half = np.full(length, 0.5 * p["distance"])
        xa, ya, xb, yb = _facing_pair(center, p["angle"], -half, half)
        omega = 2.0 * np.pi * p["frequency"] / 30.0
        return (
            _Track(xa, ya, _wave_arms("right", p["amplitude"], omega, p["phase"])),
            _Track(xb, yb, _wave_arms("left", p["amplitude"], omega, p["phase"])),
        )
    if family == "push-pull":
        omega = 2.0 * np.pi * p["frequency"] / 30.0
        shift = p["amplitude"] * np.sin(omega * t + p["phase"])
        half = 0.5 * p["distance"]
        xa, ya, xb, yb = _facing_pair(center, p["angle"], shift - half, shift + half)
        push = np.cos(omega * t + p["phase"])  # velocity sign of the pair centre
        return _Track(xa, ya, _push_arms(np.clip(push, 0, 1))), _Track(xb, yb, _push_arms(np.clip(-push, 0, 1)))
    raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")


def generate(family: str, params: dict | None = None, seed: int = 0, length: int = 64, skel: Skeleton | None = None) -> InteractionClip:
    """One clip of ``family``; unspecified parameters are drawn from ``seed``."""
    if family not in PARAM_RANGES:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
    if not 30 <= length <= 300:
        raise ValueError(f"length {length} outside [30, 300]")
    skel = skel or kin.smpl22()
    drawn = sample_params(family, np.random.default_rng(seed))
    for k, v in (params or {}).items():
        if k not in PARAM_RANGES[family]:
            raise ValueError(f"{family}: unknown parameter {k!r}")
        lo, hi = PARAM_RANGES[family][k]
        if not lo <= v <= hi:
            raise ValueError(f"{family}: {k}={v} outside [{lo}, {hi}]")
        drawn[k] = float(v)
    if "direction" in drawn:
        drawn["direction"] = 1.0 if drawn["direction"] >= 0 else -1.0
    track_a, track_b = _tracks(family, drawn, length)
    states = []
    for track in (track_a, track_b):
        pos, rots = _pose_person(skel, track)
        states.append(encode_noncanonical(pos, skel, rots))
    return InteractionClip(states[0], states[1], label=family, text=_text(family, drawn), skeleton=skel.name, n_joints=skel.n_joints)



def walk_together(length: int = 300, speed: float = 0.03, heading: float = 0.0, spacing: float = 1.0, skel: Skeleton | None = None) -> InteractionClip:
    """Two people walking side by side along a straight line at ``speed`` m/frame.

    Not one of the training families; used where steady translation matters,
    such as the drift comparison of the two representations.
    """
    if not 2 <= length <= 300:
        raise ValueError(f"length {length} outside [2, 300]")
    if not 0.0 < speed <= 0.06:
        raise ValueError("speed must lie in (0, 0.06] m/frame")
    skel = skel or kin.smpl22()
    t = np.arange(length, dtype=np.float64)
    forward = np.array([np.sin(heading), np.cos(heading)])
    left = np.array([np.cos(heading), -np.sin(heading)])
    yaw = np.full(length, heading)
    states = []
    for side in (0.5, -0.5):
        xz = (side * spacing) * left + (speed * t)[:, None] * forward
        pos, rots = _pose_person(skel, _Track(xz, yaw, _relaxed_arms()))
        states.append(encode_noncanonical(pos, skel, rots))
    return InteractionClip(states[0], states[1], label="walk", text="two people walk side by side", skeleton=skel.name, n_joints=skel.n_joints)

def root_distance(clip: InteractionClip) -> np.ndarray:
    """Per-frame ground-plane distance between the two roots."""
    pa, pb = clip.positions()
    d = pa[:, 0, [0, 2]].astype(np.float64) - pb[:, 0, [0, 2]]
    return np.linalg.norm(d, axis=-1)


# ---------------------------------------------------------------------------
# augmentation

_SWAP_WORDS = {"left": "right", "right": "left", "clockwise": "counterclockwise", "counterclockwise": "clockwise"}
_SWAP_RE = re.compile(r"\b(" + "|".join(_SWAP_WORDS) + r")\b")
_ROT6D_MIRROR = np.array([1, -1, -1, -1, 1, 1], dtype=np.float32)


def mirror_text(text: str) -> str:
    return _SWAP_RE.sub(lambda m: _SWAP_WORDS[m.group(1)], text)


def mirror_states(states: np.ndarray, skel: Skeleton) -> np.ndarray:
    """Reflect world-frame states through the YZ plane, swapping left and right."""
    lay = Layout(skel.n_joints)
    n = skel.n_joints
    perm = list(skel.mirror)
    length = states.shape[0]
    flip = np.array([-1, 1, 1], dtype=np.float32)
    pos = lay.positions(states)[:, perm] * flip
    vel = lay.velocities(states)[:, perm] * flip
    rot = states[:, lay.rot].reshape(length, n, 6)[:, perm] * _ROT6D_MIRROR
    contact = lay.contacts(states)[:, [1, 0, 3, 2]]
    return np.concatenate([pos.reshape(length, -1), vel.reshape(length, -1), rot.reshape(length, -1), contact], 1)


def mirror_clip(clip: InteractionClip, skel: Skeleton) -> InteractionClip:
    return InteractionClip(
        mirror_states(clip.person_a, skel),
        mirror_states(clip.person_b, skel),
        label=clip.label,
        text=mirror_text(clip.text),
        fps=clip.fps,
        skeleton=clip.skeleton,
        n_joints=clip.n_joints,
    )


VARIANTS = ("orig", "mirror", "swap", "mirror-swap")


def augment(clip: InteractionClip, skel: Skeleton) -> list[InteractionClip]:
    """Original, mirrored, person-swapped and mirrored+swapped variants."""
    mirrored = mirror_clip(clip, skel)
    return [clip, mirrored, clip.swapped(), mirrored.swapped()]


# ---------------------------------------------------------------------------
# corpus and splits


@dataclass
class Sample:
    source: int
    variant: str
    clip: InteractionClip


def build_corpus(per_family: int = 125, length: int = 64, seed: int = 0, skel: Skeleton | None = None) -> list[Sample]:
    """``per_family`` sources per family, each expanded by :func:`augment`."""
    skel = skel or kin.smpl22()
    seeds = np.random.SeedSequence(seed).generate_state(per_family * len(FAMILIES))
    samples = []
    source = 0
    for fam in FAMILIES:
        for _ in range(per_family):
            clip = generate(fam, seed=int(seeds[source]), length=length, skel=skel)
            samples += [Sample(source, v, c) for v, c in zip(VARIANTS, augment(clip, skel))]
            source += 1
    return samples



def desk_corpus(n_clips: int = 500, length: int = 64, seed: int = 0, skel: Skeleton | None = None) -> list[Sample]:
    """Subsample whole sources (all four variants each) from the default corpus.

    Sources are drawn round-robin across families so every family is represented
    about equally; ``n_clips`` is rounded down to a multiple of four.
    """
    n_sources = n_clips // len(VARIANTS)
    if n_sources < len(FAMILIES):
        raise ValueError(f"need at least {len(FAMILIES) * len(VARIANTS)} clips, got {n_clips}")
    per_family = -(-n_sources // len(FAMILIES))
    skel = skel or kin.smpl22()
    full = build_corpus(per_family=per_family, length=length, seed=seed, skel=skel)
    order = [f * per_family + i for i in range(per_family) for f in range(len(FAMILIES))]
    keep = set(order[:n_sources])
    return [s for s in full if s.source in keep]


def split_sources(sources, ratios=(0.8, 0.05, 0.15), seed: int = 0) -> dict[str, list[int]]:
    """Deterministic train/val/test partition of source ids."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = sorted(set(sources))
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(ratios[0] * len(ids)))
    n_val = int(round(ratios[1] * len(ids)))
    shuffled = [ids[i] for i in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train : n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val :]),
    }


def split(samples: list[Sample], ratios=(0.8, 0.05, 0.15), seed: int = 0) -> dict[str, list[Sample]]:
    """Split samples by source so all variants of a source share a split."""
    parts = split_sources([s.source for s in samples], ratios, seed)
    where = {src: name for name, ids in parts.items() for src in ids}
    out: dict[str, list[Sample]] = {"train": [], "val": [], "test": []}
    for s in samples:
        out[where[s.source]].append(s)
    return out


MANIFEST_FIELDS = ("clip", "label", "text", "split", "source", "variant")


def write_manifest(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, delimiter="\t")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in MANIFEST_FIELDS})


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    for r in rows:
        r["source"] = int(r["source"])
    return rows


def load_split(manifest_path, name: str) -> list[InteractionClip]:
    from .clipio import load_clip

    base = Path(manifest_path).parent
    return [load_clip(base / r["clip"]) for r in read_manifest(manifest_path) if r["split"] == name]


# ---------------------------------------------------------------------------
# condition codebook


class ConditionCodebook(nn.Module):
    """Trainable embedding per label; index 0 is the null condition, fixed at zero."""

    NULL = 0

    def __init__(self, labels=FAMILIES, dim: int = 64, texts: dict[str, str] | None = None):
        super().__init__()
        self.labels = tuple(labels)
        self.texts = dict(texts or {lab: _CANONICAL_TEXT.get(lab, lab) for lab in self.labels})
        self.weight = nn.Parameter(torch.randn(len(self.labels) + 1, dim) * 0.5)
        with torch.no_grad():
            self.weight[self.NULL].zero_()

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def index(self, label: str | None) -> int:
        if label is None or label == "":
            return self.NULL
        try:
            return self.labels.index(label) + 1
        except ValueError:
            raise ValueError(f"unknown condition label {label!r}; known: {self.labels}") from None

    def ids(self, labels) -> torch.Tensor:
        return torch.tensor([self.index(x) for x in labels], dtype=torch.long)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        live = (ids != self.NULL).to(self.weight.dtype).unsqueeze(-1)
        return self.weight[ids] * live


_CANONICAL_TEXT = {
    "circle": "two people walk around each other in a circle",
    "approach-retreat": "two people walk toward each other and step back",
    "mirror-wave": "two people face each other and wave",
    "push-pull": "two people push and pull each other",
}
