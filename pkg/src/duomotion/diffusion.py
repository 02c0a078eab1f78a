"""Variance-preserving noising, cosine schedule, deterministic reverse steps and guidance.

The denoiser predicts clean motion, so reverse updates use the x0
parameterisation: move to the predicted signal level and keep the implied
noise direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # (T + 1,), float64, alpha_bar[0] == 1

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar must have T+1={self.T + 1} entries, got {ab.shape}")

    def signal(self, t) -> np.ndarray:
        return np.sqrt(self.alpha_bar[np.asarray(t)])

    def noise(self, t) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar[np.asarray(t)])

    def check_t(self, t) -> None:
        arr = np.asarray(t)
        if np.any(arr < 0) or np.any(arr > self.T):
            raise ValueError(f"timestep {t} outside [0, {self.T}]")


def cosine_schedule(T: int = 1000, s: float = 0.008, min_ratio: float = 1e-3) -> NoiseSchedule:
    """alpha_bar_t = f(t) / f(0), f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2).

    Per-step ratios alpha_bar_t / alpha_bar_{t-1} are clipped to [min_ratio, 1].
    """
    if T < 2:
        raise ValueError("T must be at least 2")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    ratios = np.clip(f[1:] / f[:-1], min_ratio, 1.0)
    alpha_bar = np.concatenate([[1.0], np.cumprod(ratios)])
    return NoiseSchedule(T, alpha_bar)


def _coef(values, like: Tensor) -> Tensor:
    """Per-example coefficients broadcast over the trailing dims of ``like``."""
    c = torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=like.dtype, device=like.device)
    return c.reshape(c.shape + (1,) * (like.dim() - c.dim()))


def forward_noise(schedule: NoiseSchedule, x0: Tensor, t, eps: Tensor) -> Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps; ``t`` scalar or per leading index."""
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != data shape {tuple(x0.shape)}")
    schedule.check_t(t)
    return _coef(schedule.signal(t), x0) * x0 + _coef(schedule.noise(t), x0) * eps


def reverse_step(
    schedule: NoiseSchedule,
    x_t: Tensor,
    x0_hat: Tensor,
    t: int,
    t_prev: int,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    noise: Tensor | None = None,
) -> Tensor:
    """DDIM update from step ``t`` to ``t_prev`` given a clean-signal estimate.

    With ``eta > 0`` fresh Gaussian noise is drawn from ``generator`` unless
    ``noise`` is supplied.
    """
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    schedule.check_t(t)
    ab_t, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t_prev]
    eps_hat = (x_t - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
    if eta == 0.0:
        return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat
    if eta < 0:
        raise ValueError("eta must be non-negative")
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(max(0.0, 1.0 - ab_t / ab_prev))
    direction = math.sqrt(max(0.0, 1.0 - ab_prev - sigma**2))
    z = noise if noise is not None else torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return math.sqrt(ab_prev) * x0_hat + direction * eps_hat + sigma * z


def guide(x0_cond: Tensor, x0_null: Tensor, scale: float) -> Tensor:
    """Classifier-free guidance in x0 space: null + s (cond - null)."""
    if x0_cond.shape != x0_null.shape:
        raise ValueError(f"shape mismatch {tuple(x0_cond.shape)} vs {tuple(x0_null.shape)}")
    # written as a convex-style blend so s=1 and s=0 return the inputs exactly
    return scale * x0_cond + (1.0 - scale) * x0_null


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 3.5

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be positive")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")


def step_list(T: int, num_steps: int) -> list[int]:
    """Evenly spaced timesteps from T down to 0, rounded and de-duplicated."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must lie in [1, {T}]")
    raw = np.rint(np.linspace(T, 0, num_steps + 1)).astype(int)
    out: list[int] = []
    for t in raw:
        if not out or t < out[-1]:
            out.append(int(t))
    return out


# ---------------------------------------------------------------------------
# sampling


def _generator(seed: int, stream: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + stream)


def guided_estimate(denoiser, x_a: Tensor, x_b: Tensor, t: int, cond_ids: Tensor, scale: float):
    """Guided clean estimates for both streams; one conditional and one null pass."""
    tt = torch.full((x_a.shape[0],), t, dtype=torch.long)
    ca, cb = denoiser(x_a, x_b, tt, cond_ids)
    na, nb = denoiser(x_a, x_b, tt, torch.zeros_like(cond_ids))
    return guide(ca, na, scale), guide(cb, nb, scale)


@torch.no_grad()
def reverse_loop(bundle, cond_ids: Tensor, length: int, seeds, cfg: SamplerConfig, after_step=None) -> Tensor:
    """Run the reverse chain from unit noise; returns normalised x0, shape (B, 2, L, D).

    ``after_step(x, t_prev)`` may rewrite the (B, 2, L, D) state after each
    update (and once at t = T before the first).
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) != len(cond_ids):
        raise ValueError("need one seed per condition")
    dim = bundle.denoiser.config.state_dim
    x = torch.stack([torch.randn((2, length, dim), generator=_generator(s)) for s in seeds])
    eta_gens = [_generator(s, 1) for s in seeds]
    steps = step_list(bundle.schedule.T, cfg.num_steps)
    if after_step is not None:
        x = after_step(x, steps[0])
    for k, (t, t_prev) in enumerate(zip(steps[:-1], steps[1:])):
        x0a, x0b = guided_estimate(bundle.denoiser, x[:, 0], x[:, 1], t, cond_ids, cfg.guidance_scale)
        x0 = torch.stack([x0a, x0b], dim=1)
        z = None
        if cfg.eta > 0:
            z = torch.stack([torch.randn(x.shape[1:], generator=g) for g in eta_gens])
        x = reverse_step(bundle.schedule, x, x0, t, t_prev, cfg.eta, noise=z)
        if after_step is not None:
            x = after_step(x, t_prev)
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite sample state at reverse step {k} (t={t} -> {t_prev})")
    return x


def finalize_states(bundle, x0_norm: Tensor) -> np.ndarray:
    """Denormalise (B, 2, L, D) samples and snap contact channels to {0, 1}."""
    from .representation import Layout

    raw = bundle.stats.denormalize(x0_norm.detach().numpy().astype(np.float32)).astype(np.float32)
    c = Layout(bundle.skeleton.n_joints).contact
    raw[..., c] = (raw[..., c] > 0.5).astype(np.float32)
    return raw


def to_clips(bundle, states: np.ndarray, labels) -> list:
    from .representation import InteractionClip

    sk = bundle.skeleton
    texts = bundle.denoiser.codebook.texts
    return [
        InteractionClip(s[0], s[1], label=lab or "", text=texts.get(lab, "") if lab else "", skeleton=sk.name, n_joints=sk.n_joints)
        for s, lab in zip(states, labels)
    ]


def sample(bundle, condition: str | None, length: int, seed: int = 0, cfg: SamplerConfig = SamplerConfig()):
    """One generated clip for ``condition`` (``None`` for the null condition)."""
    return sample_batch(bundle, [condition], length, [seed], cfg)[0]


def sample_batch(bundle, conditions, length: int, seeds, cfg: SamplerConfig = SamplerConfig()):
    if length > bundle.denoiser.config.max_len:
        raise ValueError(f"length {length} exceeds the model's maximum {bundle.denoiser.config.max_len}")
    ids = bundle.denoiser.codebook.ids(conditions)
    x0 = reverse_loop(bundle, ids, length, seeds, cfg)
    return to_clips(bundle, finalize_states(bundle, x0), conditions)
