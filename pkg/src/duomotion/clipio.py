"""IHC1 clip files.

Layout: the ASCII line ``IHC1``, one line of JSON header, then the raw
little-endian float32 states of person a followed by person b, each
``length x width``. The header records version, fps, n_joints, length,
label, free text and the skeleton reference. Root-frame clips written by
``convert`` use the same container with ``"repr": "canonical"`` and the
frame-0 poses needed to integrate them back.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .representation import InteractionClip, canonical_dim, noncanonical_dim

MAGIC = b"IHC1\n"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def _write(path, header: dict, a: np.ndarray, b: np.ndarray) -> None:
    line = json.dumps(header, sort_keys=True, ensure_ascii=True).encode("ascii") + b"\n"
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(line)
        fh.write(np.ascontiguousarray(a, dtype=_LE_F32).tobytes())
        fh.write(np.ascontiguousarray(b, dtype=_LE_F32).tobytes())


def _read(path) -> tuple[dict, np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not an IHC1 clip file")
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC) : end].decode("ascii"))
    if header.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported IHC1 version {header.get('version')}")
    length, width = int(header["length"]), int(header["width"])
    body = raw[end + 1 :]
    expected = 2 * length * width * 4
    if len(body) != expected:
        raise ValueError(f"{path}: body has {len(body)} bytes, header implies {expected}")
    data = np.frombuffer(body, dtype=_LE_F32).reshape(2, length, width).astype(np.float32)
    return header, data[0], data[1]


def read_header(path) -> dict:
    return _read(path)[0]


def save_clip(clip: InteractionClip, path) -> None:
    header = {
        "version": VERSION,
        "repr": "noncanonical",
        "fps": clip.fps,
        "n_joints": clip.n_joints,
        "length": clip.n_frames,
        "width": noncanonical_dim(clip.n_joints),
        "label": clip.label,
        "text": clip.text,
        "skeleton": clip.skeleton,
    }
    _write(path, header, clip.person_a, clip.person_b)


def load_clip(path) -> InteractionClip:
    header, a, b = _read(path)
    if header.get("repr", "noncanonical") != "noncanonical":
        raise ValueError(f"{path}: holds {header['repr']} states; use load_canonical")
    return InteractionClip(
        person_a=a,
        person_b=b,
        label=header["label"],
        text=header.get("text", ""),
        fps=int(header["fps"]),
        skeleton=header.get("skeleton", "smpl22"),
        n_joints=int(header["n_joints"]),
    )


def save_canonical(path, states_a, states_b, init_a, init_b, *, n_joints, label, text="", fps=30, skeleton="smpl22"):
    header = {
        "version": VERSION,
        "repr": "canonical",
        "fps": fps,
        "n_joints": n_joints,
        "length": int(states_a.shape[0]),
        "width": canonical_dim(n_joints),
        "label": label,
        "text": text,
        "skeleton": skeleton,
        "init_pose": [list(map(float, init_a)), list(map(float, init_b))],
    }
    _write(path, header, states_a, states_b)


def load_canonical(path) -> tuple[dict, np.ndarray, np.ndarray]:
    header, a, b = _read(path)
    if header.get("repr") != "canonical":
        raise ValueError(f"{path}: not a canonical clip")
    return header, a, b
