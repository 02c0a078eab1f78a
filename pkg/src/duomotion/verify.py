"""Finite-difference verification of every loss and of the denoiser on small random inputs.

Checks run on the five-joint toy skeleton with eight frames. They evaluate in
float64 so that the central-difference truncation and rounding errors sit well
below the 1e-3 tolerance.
"""

from __future__ import annotations

import numpy as np
import torch
from torch.func import functional_call

from .denoiser import Denoiser, DenoiserConfig
from .kinematics import forward_kinematics, toy5
from .losses import (
    LossWeights,
    loss_bone_length,
    loss_distance_map,
    loss_relative_orientation,
    loss_simple,
    loss_total,
    velocity_loss,
    foot_loss,
)
from .representation import Layout, noncanonical_dim

TOLERANCE = 1e-3


def _poses(skel, L: int, rng: np.random.Generator, offset) -> np.ndarray:
    rots = np.stack([np.stack([np.eye(3)] * skel.n_joints)] * L)
    # small random bends so bones point in varied directions
    angles = rng.normal(0.0, 0.4, size=(L, skel.n_joints, 3))
    for j in range(skel.n_joints):
        for axis in range(3):
            c, s = np.cos(angles[:, j, axis]), np.sin(angles[:, j, axis])
            r = np.zeros((L, 3, 3))
            i1, i2 = [a for a in range(3) if a != axis]
            r[:, axis, axis] = 1.0
            r[:, i1, i1], r[:, i1, i2], r[:, i2, i1], r[:, i2, i2] = c, -s, s, c
            rots[:, j] = rots[:, j] @ r
    root = np.asarray(offset) + rng.normal(0.0, 0.05, size=(L, 3))
    return forward_kinematics(skel, root, rots)


def gradcheck_report(seed: int = 0, L: int = 8, step: float = 1e-5) -> dict[str, float]:
    """Relative finite-difference error per check; all should be below ``TOLERANCE``."""
    from .numeric import finite_difference_check as fd

    skel = toy5()
    rng = np.random.default_rng(seed)
    g = torch.Generator().manual_seed(seed)
    dt = torch.float64

    def tens(a):
        return torch.as_tensor(np.asarray(a), dtype=dt)

    tgt_a = tens(_poses(skel, L, rng, (0.0, 0.9, 0.0)))
    tgt_b = tens(_poses(skel, L, rng, (0.5, 0.9, 0.4)))
    pred_a = tgt_a + 0.05 * torch.randn(tgt_a.shape, generator=g, dtype=dt)
    pred_b = tgt_b + 0.05 * torch.randn(tgt_b.shape, generator=g, dtype=dt)
    contact = tens(rng.integers(0, 2, size=(L, 4)))
    threshold = 1.0

    D = noncanonical_dim(skel.n_joints)
    x_a = torch.randn((1, L, D), generator=g, dtype=dt)
    x_b = torch.randn((1, L, D), generator=g, dtype=dt)
    hat_a = x_a + 0.1 * torch.randn(x_a.shape, generator=g, dtype=dt)
    hat_b = x_b + 0.1 * torch.randn(x_b.shape, generator=g, dtype=dt)
    lay = Layout(skel.n_joints)
    # plant the state positions so that the interaction terms have active entries
    x_a[..., lay.pos] = tgt_a.reshape(L, -1)
    x_b[..., lay.pos] = tgt_b.reshape(L, -1)
    hat_a[..., lay.pos] = pred_a.reshape(L, -1)
    x_a[..., lay.contact] = contact
    t = torch.tensor([10])

    checks = {
        "loss_simple": (lambda p: loss_simple(x_a, x_b, p, hat_b).sum(), hat_a),
        "velocity": (lambda p: velocity_loss(p, tgt_a), pred_a),
        "foot": (lambda p: foot_loss(p, contact, skel), pred_a),
        "bone_length": (lambda p: loss_bone_length(p, pred_b, tgt_a, tgt_b, skel), pred_a),
        "distance_map": (lambda p: loss_distance_map(p, pred_b, tgt_a, tgt_b, threshold), pred_a),
        "relative_orientation": (lambda p: loss_relative_orientation(p, pred_b, tgt_a, tgt_b, skel), pred_a),
        "total": (lambda p: loss_total(x_a, x_b, p, hat_b, t, LossWeights(), 1000, skel)["total"].sum(), hat_a),
    }
    report = {name: fd(fn, x, step) for name, (fn, x) in checks.items()}

    config = DenoiserConfig(state_dim=D, latent_dim=16, n_blocks=1, n_heads=2, max_len=16)
    den = Denoiser(config, seed=seed).to(dt)
    with torch.no_grad():
        for p in den.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=dt))
    w_a = torch.randn((1, L, D), generator=g, dtype=dt)
    w_b = torch.randn((1, L, D), generator=g, dtype=dt)
    ids = torch.tensor([1])
    tt = torch.tensor([500])

    def probe(oa, ob):
        return (oa * w_a).sum() + (ob * w_b).sum()

    report["denoiser_input"] = fd(lambda x: probe(*den(x, x_b, tt, ids)), x_a)
    names = [n for n, _ in den.named_parameters()]
    shapes = [p.shape for _, p in den.named_parameters()]
    sizes = [p.numel() for _, p in den.named_parameters()]
    flat = torch.cat([p.detach().reshape(-1) for p in den.parameters()])
    # a fixed random subset of coordinates keeps the check fast
    pick = torch.from_numpy(rng.choice(flat.numel(), size=min(400, flat.numel()), replace=False))

    def with_params(sub):
        full = flat.clone()
        full = full.index_put((pick,), sub)
        parts = torch.split(full, sizes)
        params = {n: v.reshape(s) for n, v, s in zip(names, parts, shapes)}
        return probe(*functional_call(den, params, (x_a, x_b, tt, ids)))

    report["denoiser_params"] = fd(with_params, flat[pick].clone())
    return report
