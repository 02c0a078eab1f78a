"""Evaluation: contrastive motion/condition embedders and the distribution, retrieval and variety metrics.

All distances are unnormalised Euclidean distances in embedding space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import numeric as nc
from .denoiser import MultiHeadAttention, sinusoidal
from .representation import InteractionClip, NormStats
from .synth import ConditionCodebook

# ---------------------------------------------------------------------------
# embedders


class MotionEncoder(nn.Module):
    """One-block transformer over both people's normalised states, mean-pooled over time."""

    def __init__(self, state_dim: int, dim: int = 64, out_dim: int = 32, n_heads: int = 4, max_len: int = 300):
        super().__init__()
        self.inp = nn.Linear(2 * state_dim, dim)
        self.attn = MultiHeadAttention(dim, n_heads)
        self.ff1 = nn.Linear(dim, 4 * dim)
        self.ff2 = nn.Linear(4 * dim, dim)
        self.out = nn.Linear(dim, out_dim)
        self.register_buffer("pos_table", sinusoidal(torch.arange(max_len), dim), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: (B, 2, L, D) normalised states -> (B, out_dim)."""
        h = torch.cat([x[:, 0], x[:, 1]], dim=-1)
        h = self.inp(h) + self.pos_table[: h.shape[1]]
        a = nc.layer_norm(h)
        h = h + self.attn(a, a)
        h = h + self.ff2(nc.gelu(self.ff1(nc.layer_norm(h))))
        return self.out(nc.layer_norm(h).mean(dim=1))


class ConditionEncoder(nn.Module):
    def __init__(self, labels, dim: int = 64, out_dim: int = 32):
        super().__init__()
        self.codebook = ConditionCodebook(labels, dim)
        self.proj = nn.Linear(dim, out_dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.proj(self.codebook(ids))


@dataclass
class EmbedderPair:
    motion: MotionEncoder
    text: ConditionEncoder
    stats: NormStats
    log_scale: float

    @torch.no_grad()
    def embed_motion(self, clips: Sequence[InteractionClip], batch: int = 128) -> np.ndarray:
        self.motion.eval()
        out = []
        for i in range(0, len(clips), batch):
            x = np.stack([c.stacked() for c in clips[i : i + batch]])
            out.append(self.motion(torch.from_numpy(self.stats.normalize(x).astype(np.float32))).numpy())
        return np.concatenate(out).astype(np.float64)

    @torch.no_grad()
    def embed_text(self, labels: Sequence[str]) -> np.ndarray:
        return self.text(self.text.codebook.ids(labels)).numpy().astype(np.float64)


def _contrastive(m: torch.Tensor, t: torch.Tensor, same: torch.Tensor, log_scale: torch.Tensor) -> torch.Tensor:
    """Symmetric cross-entropy on logits -scale * |m_i - t_j|^2 with all same-label pairs as positives."""
    logits = -torch.cdist(m, t) ** 2 * log_scale.exp()
    target = same / same.sum(dim=1, keepdim=True)
    l_mt = -(target * torch.log_softmax(logits, dim=1)).sum(1).mean()
    l_tm = -(target.T * torch.log_softmax(logits.T, dim=1)).sum(1).mean()
    return 0.5 * (l_mt + l_tm)


def train_embedders(
    clips: Sequence[InteractionClip],
    stats: NormStats | None = None,
    out_dim: int = 32,
    dim: int = 64,
    steps: int = 300,
    batch: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
) -> EmbedderPair:
    labels = sorted({c.label for c in clips})
    if len(labels) < 2:
        raise ValueError("contrastive training needs at least two distinct conditions")
    x = np.stack([c.stacked() for c in clips]).astype(np.float32)
    stats = stats or NormStats.from_states(x)
    xn = torch.from_numpy(stats.normalize(x).astype(np.float32))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        motion = MotionEncoder(x.shape[-1], dim, out_dim, max_len=max(300, x.shape[2]))
        text = ConditionEncoder(labels, dim, out_dim)
    ids = text.codebook.ids([c.label for c in clips])
    log_scale = torch.zeros((), requires_grad=True)  # trainable temperature
    params = list(motion.parameters()) + list(text.parameters()) + [log_scale]
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    motion.train()
    for _ in range(steps):
        idx = torch.from_numpy(rng.choice(len(xn), size=min(batch, len(xn)), replace=False))
        b_ids = ids[idx]
        same = (b_ids[:, None] == b_ids[None, :]).to(torch.float32)
        loss = _contrastive(motion(xn[idx]), text(b_ids), same, log_scale)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return EmbedderPair(motion, text, stats, float(log_scale.detach()))


# ---------------------------------------------------------------------------
# metrics


def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(x: np.ndarray, y: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two embedding sets."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    d = x.shape[1]
    if y.shape[1] != d:
        raise ValueError(f"embedding widths differ: {d} vs {y.shape[1]}")
    if min(len(x), len(y)) < d + 1:
        raise ValueError(f"need at least {d + 1} samples per set for width {d}")
    mu_x, mu_y = x.mean(0), y.mean(0)
    cov_x, cov_y = np.cov(x, rowvar=False), np.cov(y, rowvar=False)
    rx = _sqrt_psd(cov_x)
    # tr((Sx Sy)^1/2) = tr((Sx^1/2 Sy Sx^1/2)^1/2), the inner product is symmetric PSD
    w = np.linalg.eigvalsh(rx @ cov_y @ rx)
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    val = float(((mu_x - mu_y) ** 2).sum() + np.trace(cov_x) + np.trace(cov_y) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def r_precision(motion: np.ndarray, text: np.ndarray, pool_size: int = 32, seed: int = 0, top_k=(1, 2, 3)) -> dict[int, float]:
    """Rank each motion's own text among ``pool_size - 1`` random distractors.

    Ties are resolved in favour of the true text (rank = 1 + #strictly closer).
    """
    motion, text = np.asarray(motion, dtype=np.float64), np.asarray(text, dtype=np.float64)
    n = len(motion)
    if len(text) != n:
        raise ValueError("motion and text embeddings must be paired")
    if pool_size > n:
        raise ValueError(f"pool size {pool_size} exceeds the {n} available pairs")
    rng = np.random.default_rng(seed)
    hits = {k: 0 for k in top_k}
    for i in range(n):
        others = rng.choice(n - 1, size=pool_size - 1, replace=False)
        others = others + (others >= i)
        d_true = np.linalg.norm(motion[i] - text[i])
        d_other = np.linalg.norm(motion[i][None] - text[others], axis=1)
        rank = 1 + int((d_other < d_true).sum())
        for k in top_k:
            hits[k] += rank <= k
    return {k: hits[k] / n for k in top_k}


def mm_dist(motion: np.ndarray, text: np.ndarray) -> float:
    motion, text = np.asarray(motion, dtype=np.float64), np.asarray(text, dtype=np.float64)
    if motion.shape != text.shape:
        raise ValueError("motion and text embeddings must be paired")
    return float(np.linalg.norm(motion - text, axis=1).mean())


def diversity(emb: np.ndarray, n_pairs: int = 300, seed: int = 0) -> float:
    """Mean distance over ``n_pairs`` random pairs of distinct indices."""
    emb = np.asarray(emb, dtype=np.float64)
    n = len(emb)
    if n < 2:
        raise ValueError("diversity needs at least two embeddings")
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, size=n_pairs)
    j = (i + rng.integers(1, n, size=n_pairs)) % n
    return float(np.linalg.norm(emb[i] - emb[j], axis=1).mean())


def disjoint_pairs(n: int, rng: np.random.Generator) -> np.ndarray:
    """(n // 2, 2) index pairs, each index used at most once."""
    perm = rng.permutation(n)
    k = n // 2
    return np.stack([perm[:k], perm[k : 2 * k]], axis=1)


def mmodality(
    sampler: Callable[[str, int], InteractionClip],
    embed: Callable[[list], np.ndarray],
    conditions: Sequence[str],
    per_condition: int = 20,
    seed: int = 0,
) -> float:
    """Mean within-condition distance over disjoint pairs of generations."""
    if per_condition < 2:
        raise ValueError("per_condition must be at least 2")
    rng = np.random.default_rng(seed)
    vals = []
    for ci, cond in enumerate(conditions):
        clips = [sampler(cond, seed * 100_003 + ci * 1009 + k) for k in range(per_condition)]
        e = np.asarray(embed(clips), dtype=np.float64)
        p = disjoint_pairs(per_condition, rng)
        vals.append(np.linalg.norm(e[p[:, 0]] - e[p[:, 1]], axis=1).mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# report


def _ci(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    half = 1.96 * v.std(ddof=1) / math.sqrt(len(v)) if len(v) > 1 else 0.0
    return {"mean": float(v.mean()), "ci95": float(half), "values": [float(x) for x in v]}


def evaluate_model(
    bundle,
    embedders: EmbedderPair,
    real: Sequence[InteractionClip],
    repeats: int = 20,
    n_generated: int | None = None,
    per_condition: int = 20,
    pool_size: int = 32,
    n_pairs: int = 300,
    sampler_cfg=None,
    seed: int = 0,
) -> dict:
    """Metrics of generated clips against ``real`` over ``repeats`` seeded repetitions."""
    from .diffusion import SamplerConfig, sample_batch

    cfg = sampler_cfg or SamplerConfig()
    length = real[0].n_frames
    labels = [c.label for c in real]
    n_gen = n_generated or len(real)
    conditions = sorted(set(labels))
    real_m = embedders.embed_motion(real)
    per_rep: dict[str, list] = {k: [] for k in ("fid", "top1", "top2", "top3", "mm_dist", "diversity", "mmodality")}
    for r in range(repeats):
        rs = seed * 7919 + r
        gen_labels = [labels[i % len(labels)] for i in range(n_gen)]
        gen = sample_batch(bundle, gen_labels, length, [rs * 100_000 + i for i in range(n_gen)], cfg)
        gm = embedders.embed_motion(gen)
        gt = embedders.embed_text(gen_labels)
        rp = r_precision(gm, gt, min(pool_size, n_gen), seed=rs)
        per_rep["fid"].append(fid(real_m, gm) if min(len(real_m), len(gm)) > gm.shape[1] else float("nan"))
        per_rep["top1"].append(rp[1])
        per_rep["top2"].append(rp[2])
        per_rep["top3"].append(rp[3])
        per_rep["mm_dist"].append(mm_dist(gm, gt))
        per_rep["diversity"].append(diversity(gm, n_pairs, seed=rs))
        per_rep["mmodality"].append(
            mmodality(lambda c, s: sample_batch(bundle, [c], length, [s], cfg)[0], embedders.embed_motion, conditions, per_condition, seed=rs)
        )
    rt = embedders.embed_text(labels)
    rp_real = r_precision(real_m, rt, min(pool_size, len(real)), seed=seed)
    return {
        "seed": seed,
        "repeats": repeats,
        "pool_size": pool_size,
        "n_pairs": n_pairs,
        "n_generated": n_gen,
        "per_condition": per_condition,
        "sampler": {"num_steps": cfg.num_steps, "eta": cfg.eta, "guidance_scale": cfg.guidance_scale},
        "generated": {k: _ci(v) for k, v in per_rep.items()},
        "real": {
            "top1": rp_real[1], "top2": rp_real[2], "top3": rp_real[3],
            "mm_dist": mm_dist(real_m, rt), "diversity": diversity(real_m, n_pairs, seed=seed),
        },
    }


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
