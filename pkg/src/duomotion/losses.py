"""Training objectives: denoising MSE, geometric and interaction regularisers, gated total.

Geometric terms work on world joint positions of shape (..., L, N, 3); leading
dims are batch dims and every loss returns one value per leading index (a
scalar for unbatched input). Per-person terms are summed over the two people.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import Tensor

from .kinematics import Skeleton, bone_lengths, heading
from .representation import Layout


@dataclass
class LossWeights:
    lambda_vel: float = 30.0
    lambda_foot: float = 30.0
    lambda_bl: float = 10.0
    lambda_dm: float = 3.0
    lambda_ro: float = 0.01
    lambda_reg: float = 1.0
    t_bar_fraction: float = 0.7
    dm_threshold: float = 1.0  # metres

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative")
        if not 0.0 <= self.t_bar_fraction <= 1.0:
            raise ValueError("t_bar_fraction must lie in [0, 1]")


def _masked_mean(values: Tensor, mask: Tensor, n_trailing: int) -> Tensor:
    """Mean of ``values`` over entries where ``mask``; zero when nothing is active."""
    dims = tuple(range(-n_trailing, 0))
    num = (values * mask).sum(dim=dims)
    den = mask.sum(dim=dims)
    return torch.where(den > 0, num / den.clamp(min=1), torch.zeros_like(num))


def loss_simple(x_a: Tensor, x_b: Tensor, x0_hat_a: Tensor, x0_hat_b: Tensor) -> Tensor:
    """Per-stream mean squared error against the clean states, summed over streams."""
    return ((x0_hat_a - x_a) ** 2).mean(dim=(-2, -1)) + ((x0_hat_b - x_b) ** 2).mean(dim=(-2, -1))


def velocity_loss(pred: Tensor, target: Tensor) -> Tensor:
    dv = (pred[..., 1:, :, :] - pred[..., :-1, :, :]) - (target[..., 1:, :, :] - target[..., :-1, :, :])
    return (dv**2).sum(-1).mean(dim=(-2, -1))


def foot_loss(pred: Tensor, target_contact: Tensor, skel: Skeleton) -> Tensor:
    """Squared foot-joint speed where the target foot is planted, averaged over planted entries."""
    feet = pred[..., list(skel.heel_toe), :]
    speed2 = ((feet[..., 1:, :, :] - feet[..., :-1, :, :]) ** 2).sum(-1)
    mask = (target_contact[..., :-1, :] > 0.5).to(pred.dtype)
    return _masked_mean(speed2, mask, 2)


def loss_geometric(pred_a, pred_b, target_a, target_b, contact_a, contact_b, skel: Skeleton) -> tuple[Tensor, Tensor]:
    """(L_vel, L_foot) summed over both people; contacts are the target's (…, L, 4)."""
    l_vel = velocity_loss(pred_a, target_a) + velocity_loss(pred_b, target_b)
    l_foot = foot_loss(pred_a, contact_a, skel) + foot_loss(pred_b, contact_b, skel)
    return l_vel, l_foot


def loss_bone_length(pred_a, pred_b, target_a, target_b, skel: Skeleton) -> Tensor:
    def one(p, q):
        return ((bone_lengths(p, skel) - bone_lengths(q, skel)) ** 2).mean(dim=(-2, -1))

    return one(pred_a, target_a) + one(pred_b, target_b)


def distance_map(pos_a: Tensor, pos_b: Tensor, axes=(0, 1, 2)) -> Tensor:
    """(..., L, N, N) distances between every joint of a and every joint of b."""
    axes = list(axes)
    diff = pos_a[..., :, None, axes] - pos_b[..., None, :, axes]
    return ((diff**2).sum(-1) + 1e-12) ** 0.5


def loss_distance_map(pred_a, pred_b, target_a, target_b, threshold: float = 1.0) -> Tensor:
    """Masked squared error of cross-person distance maps.

    The mask keeps joint pairs whose ground-truth ground-plane distance is below
    ``threshold``; the error is averaged over active entries.
    """
    with torch.no_grad():
        mask = (distance_map(target_a, target_b, axes=(0, 2)) < threshold).to(pred_a.dtype)
    err = (distance_map(pred_a, pred_b) - distance_map(target_a, target_b)) ** 2
    return _masked_mean(err, mask, 3)


def relative_orientation(pos_a: Tensor, pos_b: Tensor, skel: Skeleton, min_norm: float = 1e-6):
    """(cos, sin) of yaw_b - yaw_a per frame, shape (..., L, 2), and a validity mask (..., L)."""
    ax, az = heading(skel, pos_a)
    bx, bz = heading(skel, pos_b)
    na = (ax**2 + az**2) ** 0.5
    nb = (bx**2 + bz**2) ** 0.5
    valid = (na > min_norm) & (nb > min_norm)
    na = torch.where(valid, na, torch.ones_like(na))
    nb = torch.where(valid, nb, torch.ones_like(nb))
    ax, az, bx, bz = ax / na, az / na, bx / nb, bz / nb
    cos = az * bz + ax * bx
    sin = bx * az - bz * ax
    return torch.stack([cos, sin], dim=-1), valid


class DegenerateFacingError(ValueError):
    pass


def loss_relative_orientation(pred_a, pred_b, target_a, target_b, skel: Skeleton) -> Tensor:
    o_pred, v_pred = relative_orientation(pred_a, pred_b, skel)
    o_true, v_true = relative_orientation(target_a, target_b, skel)
    valid = v_pred & v_true
    skipped = 1.0 - valid.to(torch.float32).mean(dim=-1)
    if bool((skipped > 0.5).any()):
        raise DegenerateFacingError(f"facing direction degenerate on {float(skipped.max()):.0%} of frames")
    err = ((o_pred - o_true) ** 2).sum(-1)
    return _masked_mean(err, valid.to(err.dtype), 1)


REG_TERMS = ("vel", "foot", "bl", "dm", "ro")


def regularizers(pred_a, pred_b, target_a, target_b, contact_a, contact_b, skel: Skeleton, weights: LossWeights) -> dict[str, Tensor]:
    l_vel, l_foot = loss_geometric(pred_a, pred_b, target_a, target_b, contact_a, contact_b, skel)
    return {
        "vel": l_vel,
        "foot": l_foot,
        "bl": loss_bone_length(pred_a, pred_b, target_a, target_b, skel),
        "dm": loss_distance_map(pred_a, pred_b, target_a, target_b, weights.dm_threshold),
        "ro": loss_relative_orientation(pred_a, pred_b, target_a, target_b, skel),
    }


def loss_total(
    x_a: Tensor,
    x_b: Tensor,
    x0_hat_a: Tensor,
    x0_hat_b: Tensor,
    t: Tensor,
    weights: LossWeights,
    T: int,
    skel: Skeleton,
    stats=None,
) -> dict[str, Tensor]:
    """Denoising loss plus the regulariser, gated per example by t <= t_bar.

    ``x_*`` and ``x0_hat_*`` are (B, L, D) states, normalised with ``stats`` when
    given. Returns per-example components and ``"total"`` (all shape (B,)) plus
    ``"reg"``, the gated weighted regulariser.
    """
    out = {"simple": loss_simple(x_a, x_b, x0_hat_a, x0_hat_b)}
    gate = (t.to(torch.float64) <= weights.t_bar_fraction * T).to(x_a.dtype)
    lay = Layout(skel.n_joints)
    lam = {"vel": weights.lambda_vel, "foot": weights.lambda_foot, "bl": weights.lambda_bl,
           "dm": weights.lambda_dm, "ro": weights.lambda_ro}
    active = weights.lambda_reg > 0 and any(v > 0 for v in lam.values()) and bool(gate.any())
    if active:
        dn = stats.denormalize if stats is not None else (lambda z: z)
        ta, tb, pa, pb = dn(x_a), dn(x_b), dn(x0_hat_a), dn(x0_hat_b)
        terms = regularizers(
            lay.positions(pa), lay.positions(pb), lay.positions(ta), lay.positions(tb),
            lay.contacts(ta), lay.contacts(tb), skel, weights,
        )
    else:
        zero = torch.zeros_like(out["simple"])
        terms = {k: zero for k in REG_TERMS}
    out.update(terms)
    weighted = sum(lam[k] * terms[k] for k in REG_TERMS)
    out["reg"] = weights.lambda_reg * gate * weighted
    out["total"] = out["simple"] + out["reg"]
    return out
