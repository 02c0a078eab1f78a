"""Model bundles and their checkpoint files.

A checkpoint is the line ``DMCK1``, one line of JSON header (architecture,
schedule length, skeleton, training metadata, blob table) and the
concatenated little-endian float32 blobs named in the table. Normalisation
statistics travel as the blobs ``norm.mean`` / ``norm.std``; optimizer
moments, when present, as ``optim.<param>.<slot>``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import kinematics as kin
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule, cosine_schedule
from .kinematics import Skeleton
from .representation import NormStats

MAGIC = b"DMCK1\n"
_LE_F32 = np.dtype("<f4")


@dataclass
class ModelBundle:
    """Everything sampling needs: weights, normalisation, schedule, skeleton."""

    denoiser: Denoiser
    stats: NormStats
    schedule: NoiseSchedule
    skeleton: Skeleton
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: DenoiserConfig, stats: NormStats, skeleton: Skeleton, T: int = 1000, seed: int = 0, meta=None):
        return cls(Denoiser(config, seed=seed), stats, cosine_schedule(T), skeleton, dict(meta or {}))


def save_checkpoint(path, bundle: ModelBundle, optimizer_state: dict[str, np.ndarray] | None = None) -> None:
    blobs: list[tuple[str, np.ndarray]] = [
        (name, p.detach().cpu().numpy()) for name, p in bundle.denoiser.state_dict().items()
    ]
    blobs += [("norm.mean", bundle.stats.mean), ("norm.std", bundle.stats.std)]
    for name, arr in (optimizer_state or {}).items():
        blobs.append((f"optim.{name}", arr))
    table, offset = [], 0
    for name, arr in blobs:
        nbytes = int(np.prod(arr.shape, dtype=np.int64)) * 4
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += nbytes
    header = {
        "version": 1,
        "arch": bundle.denoiser.config.to_dict(),
        "T": bundle.schedule.T,
        "skeleton": bundle.skeleton.to_dict(),
        "norm_stats": {"mean": "norm.mean", "std": "norm.std"},
        "meta": bundle.meta,
        "blobs": table,
    }
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        for _, arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC) : end])
    body = memoryview(raw)[end + 1 :]
    blobs = {}
    for entry in header["blobs"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        arr = np.frombuffer(body[start : start + 4 * count], dtype=_LE_F32).astype(np.float32)
        blobs[entry["name"]] = arr.reshape(entry["shape"])
    return header, blobs


def load_checkpoint(path) -> tuple[ModelBundle, dict[str, np.ndarray]]:
    """Bundle plus any stored optimizer blobs (names without the ``optim.`` prefix)."""
    header, blobs = read_checkpoint(path)
    config = DenoiserConfig.from_dict(header["arch"])
    den = Denoiser(config)
    state = {k: torch.from_numpy(v.copy()) for k, v in blobs.items() if not k.startswith(("norm.", "optim."))}
    den.load_state_dict(state)
    stats = NormStats(blobs[header["norm_stats"]["mean"]], blobs[header["norm_stats"]["std"]])
    bundle = ModelBundle(den, stats, cosine_schedule(int(header["T"])), kin.Skeleton.from_dict(header["skeleton"]), header.get("meta", {}))
    optim = {k[len("optim.") :]: v for k, v in blobs.items() if k.startswith("optim.")}
    return bundle, optim
