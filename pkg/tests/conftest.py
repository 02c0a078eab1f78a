from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest
import torch

from duomotion import kinematics as kin
from duomotion import synth
from duomotion.checkpoint import ModelBundle, load_checkpoint
from duomotion.denoiser import DenoiserConfig
from duomotion.losses import LossWeights
from duomotion.representation import NormStats, noncanonical_dim
from duomotion.trainer import TrainConfig, fit

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

CACHE = Path(os.environ.get("DUOMOTION_TEST_CACHE", Path(__file__).resolve().parent.parent / ".cache"))

# ---------------------------------------------------------------------------
# acceptance summary

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion implemented by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        if call.excinfo is None:
            status = "PASS"
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            status = "SKIP"
        else:
            status = "FAIL"
        note = item.funcargs.get("acceptance_note") if hasattr(item, "funcargs") else None
        _CRITERIA[number] = (title, status, note.text if note else "")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, note = _CRITERIA[n]
        terminalreporter.write_line(f"[{status}] {n:2d}. {title}" + (f" :: {note}" if note else ""))


class _Note:
    def __init__(self):
        self.text = ""

    def __call__(self, text: str) -> None:
        self.text = text


@pytest.fixture
def acceptance_note():
    """Callable recording the measured values shown next to a criterion's pass/fail line."""
    return _Note()


# ---------------------------------------------------------------------------
# common objects


@pytest.fixture(scope="session")
def smpl():
    return kin.smpl22()


@pytest.fixture(scope="session")
def toy():
    return kin.toy5()


@pytest.fixture(scope="session")
def circle_clip(smpl):
    return synth.generate("circle", seed=3, length=64, skel=smpl)


def tiny_bundle(skel=None, seed: int = 0, latent: int = 16, T: int = 1000, labels=synth.FAMILIES) -> ModelBundle:
    """Randomly initialised small model with identity normalisation.

    The adaptive-norm modulation starts at zero, so it is perturbed to make the
    condition pathways live.
    """
    skel = skel or kin.smpl22()
    D = noncanonical_dim(skel.n_joints)
    config = DenoiserConfig(state_dim=D, latent_dim=latent, n_blocks=1, n_heads=2, max_len=300, labels=tuple(labels))
    stats = NormStats(np.zeros(D, np.float32), np.ones(D, np.float32))
    bundle = ModelBundle.create(config, stats, skel, T=T, seed=seed)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, p in bundle.denoiser.named_parameters():
            if ".mod." in name:
                p.add_(0.1 * torch.randn(p.shape, generator=g))
    bundle.denoiser.eval()
    return bundle


@pytest.fixture(scope="session")
def tiny():
    return tiny_bundle()


# ---------------------------------------------------------------------------
# trained desk model (cached across sessions under .cache/)

DESK_DATA = dict(n_clips=500, length=64, seed=0)


@pytest.fixture(scope="session")
def desk_splits(smpl):
    samples = synth.desk_corpus(DESK_DATA["n_clips"], DESK_DATA["length"], DESK_DATA["seed"], smpl)
    parts = synth.split(samples, seed=DESK_DATA["seed"])
    return {k: [s.clip for s in v] for k, v in parts.items()}


def _key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


_TRAINING_MODULES = ("numeric", "kinematics", "representation", "synth", "diffusion", "denoiser", "losses", "trainer", "checkpoint")


def _source_digest() -> str:
    import duomotion

    base = Path(duomotion.__file__).parent
    h = hashlib.sha256()
    for name in _TRAINING_MODULES:
        h.update((base / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


def train_cached(name: str, splits, config: TrainConfig, weights: LossWeights):
    """Fit once per configuration and training-code version; later sessions reload the result."""
    key = _key(name, asdict(config), asdict(weights), DESK_DATA, _source_digest())
    out = CACHE / f"{name}-{key}"
    done = out / "result.json"
    if done.exists():
        info = json.loads(done.read_text())
        bundle, _ = load_checkpoint(out / info["best"])
        return bundle, info
    res = fit(splits, config, out, weights=weights)
    info = {
        "best": res.best_checkpoint.name,
        "last": res.checkpoint.name,
        "baseline_val": res.baseline_val,
        "best_val": res.best_val,
        "final_val": res.history[-1] if res.history else None,
    }
    done.write_text(json.dumps(info, indent=2))
    bundle, _ = load_checkpoint(res.best_checkpoint)
    return bundle, info


DESK_TRAIN = TrainConfig(val_every=5)  # batch 16, 300 epochs, lr 1e-4, seed 0


@pytest.fixture(scope="session")
def desk_model(desk_splits):
    return train_cached("desk", desk_splits, DESK_TRAIN, LossWeights())
