"""Masked sampling: hold chosen entries of the two-person state at known values while the rest is generated.

Covers person-to-person generation (freeze one person), trajectory control
(freeze the root ground-plane track) and inbetweening (freeze the first and
last frames). Masked entries are re-noised to the current step after every
reverse update and copied verbatim into the final output.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .diffusion import SamplerConfig, _generator, finalize_states, forward_noise, reverse_loop, to_clips
from .representation import InteractionClip, Layout, forward_diff

log = logging.getLogger(__name__)

CHANNEL_GROUPS = ("all", "root-xz-yaw")


@dataclass
class FreezeMask:
    mask: np.ndarray  # (2, L, D) bool
    known: np.ndarray  # (2, L, D) float32 raw (un-normalised) states

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.known = np.asarray(self.known, dtype=np.float32)
        if self.mask.ndim != 3 or self.mask.shape[0] != 2:
            raise ValueError(f"mask must have shape (2, L, D), got {self.mask.shape}")
        if self.known.shape != self.mask.shape:
            raise ValueError(f"known shape {self.known.shape} does not match mask shape {self.mask.shape}")

    @property
    def length(self) -> int:
        return self.mask.shape[1]

    def union(self, other: "FreezeMask") -> "FreezeMask":
        """Mask covering both; ``self`` supplies known values where both are set."""
        known = np.where(self.mask, self.known, other.known)
        return FreezeMask(self.mask | other.mask, known)


def root_xz_channels(n_joints: int) -> list[int]:
    return Layout(n_joints).root_xz_channels()


def mask_person(clip: InteractionClip, person: int | str) -> FreezeMask:
    idx = {"a": 0, "b": 1, 0: 0, 1: 1}.get(person)
    if idx is None:
        raise ValueError(f"person must be 'a' or 'b', got {person!r}")
    mask = np.zeros((2, clip.n_frames, clip.person_a.shape[1]), dtype=bool)
    mask[idx] = True
    return FreezeMask(mask, clip.stacked())


def mask_trajectory(trajectories: dict, length: int, n_joints: int) -> FreezeMask:
    """Freeze root X/Z position and velocity of the given people.

    ``trajectories`` maps a person ("a"/"b") to a (L, 2) array of root X, Z or a
    (L, 3) array of X, Z, yaw. Heading is carried by the hip and shoulder
    positions rather than a dedicated channel, so a yaw column is accepted but
    not frozen.
    """
    if length < 1:
        raise ValueError("trajectory length must be positive")
    lay = Layout(n_joints)
    mask = np.zeros((2, length, lay.dim), dtype=bool)
    known = np.zeros((2, length, lay.dim), dtype=np.float32)
    px, pz, vx, vz = lay.root_xz_channels()
    for person, traj in trajectories.items():
        idx = {"a": 0, "b": 1, 0: 0, 1: 1}.get(person)
        if idx is None:
            raise ValueError(f"person must be 'a' or 'b', got {person!r}")
        traj = np.asarray(traj, dtype=np.float32)
        if traj.ndim != 2 or traj.shape[1] not in (2, 3):
            raise ValueError(f"trajectory must be (L, 2) or (L, 3), got {traj.shape}")
        if traj.shape[0] != length:
            raise ValueError(f"trajectory has {traj.shape[0]} frames, target length is {length}")
        if traj.shape[1] == 3:
            log.info("yaw column of the trajectory for person %s is not frozen", person)
        vel = forward_diff(traj[:, :2])
        known[idx, :, px], known[idx, :, pz] = traj[:, 0], traj[:, 1]
        known[idx, :, vx], known[idx, :, vz] = vel[:, 0], vel[:, 1]
        mask[idx][:, [px, pz, vx, vz]] = True
    return FreezeMask(mask, known)


def mask_inbetween(clip: InteractionClip, prefix: int, suffix: int) -> FreezeMask:
    L = clip.n_frames
    if prefix < 0 or suffix < 0:
        raise ValueError("prefix and suffix must be non-negative")
    if prefix + suffix >= L:
        raise ValueError(f"prefix {prefix} + suffix {suffix} leaves no free frame in {L}")
    mask = np.zeros((2, L, clip.person_a.shape[1]), dtype=bool)
    mask[:, :prefix] = True
    mask[:, L - suffix :] = True
    return FreezeMask(mask, clip.stacked())


def masked_sample(bundle, condition: str | None, mask: FreezeMask, cfg: SamplerConfig = SamplerConfig(), seed: int = 0) -> InteractionClip:
    """Reverse loop with masked entries replaced by the re-noised known values after every step."""
    if mask.known.shape[-1] != bundle.denoiser.config.state_dim:
        raise ValueError(f"mask width {mask.known.shape[-1]} does not match model width {bundle.denoiser.config.state_dim}")
    if mask.length > bundle.denoiser.config.max_len:
        raise ValueError(f"mask length {mask.length} exceeds the model's maximum")
    ids = bundle.denoiser.codebook.ids([condition])
    m = torch.from_numpy(mask.mask)[None]
    known = torch.from_numpy(bundle.stats.normalize(mask.known).astype(np.float32))[None]
    renoise = _generator(seed, 2)  # separate stream so an empty mask leaves the plain chain untouched

    def replace(x, t):
        if t == 0:
            target = known
        else:
            target = forward_noise(bundle.schedule, known, t, torch.randn(known.shape, generator=renoise))
        return torch.where(m, target, x)

    after = replace if mask.mask.any() else None
    x0 = reverse_loop(bundle, ids, mask.length, [seed], cfg, after_step=after)
    raw = finalize_states(bundle, x0)
    raw[0][mask.mask] = mask.known[mask.mask]
    return to_clips(bundle, raw, [condition])[0]


# ---------------------------------------------------------------------------
# mask files


def load_mask_file(path) -> tuple[FreezeMask, InteractionClip]:
    """Parse a JSON mask specification.

    ``{"reference": "clip.ihc", "entries": [{"person": "a", "frames": [0, 30],
    "channels": "all" | "root-xz-yaw"}, ...]}``; the reference path is resolved
    relative to the mask file and supplies the known values.
    """
    from .clipio import load_clip

    path = Path(path)
    spec = json.loads(path.read_text())
    unknown = set(spec) - {"reference", "entries"}
    if unknown:
        raise ValueError(f"unknown mask file keys: {sorted(unknown)}")
    ref = load_clip(path.parent / spec["reference"])
    known = ref.stacked()
    mask = np.zeros(known.shape, dtype=bool)
    xz = root_xz_channels(ref.n_joints)
    for e in spec.get("entries", []):
        idx = {"a": 0, "b": 1}.get(e.get("person"))
        if idx is None:
            raise ValueError(f"entry person must be 'a' or 'b': {e}")
        start, stop = e.get("frames", [0, ref.n_frames])
        if not 0 <= start < stop <= ref.n_frames:
            raise ValueError(f"frame range {start}:{stop} outside [0, {ref.n_frames}]")
        group = e.get("channels", "all")
        if group not in CHANNEL_GROUPS:
            raise ValueError(f"channel group must be one of {CHANNEL_GROUPS}, got {group!r}")
        if group == "all":
            mask[idx, start:stop] = True
        else:
            mask[idx, start:stop, xz] = True
    return FreezeMask(mask, known), ref
