"""Weight-shared two-stream transformer that predicts clean motion for both people.

Every block runs, per stream: adaptive norm -> self-attention -> adaptive norm ->
mutual attention (queries from the stream's own context, keys/values from the
counterpart's block input) -> adaptive norm -> feed-forward, each sublayer
wrapped in a residual. The two streams are evaluated by separate calls on the
same modules, so swapping the inputs swaps the outputs bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import Tensor, nn

from . import numeric as nc
from .synth import FAMILIES, ConditionCodebook


@dataclass(frozen=True)
class DenoiserConfig:
    state_dim: int = 268
    latent_dim: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    ff_mult: int = 4
    max_len: int = 300
    labels: tuple[str, ...] = FAMILIES

    def __post_init__(self):
        if self.latent_dim % self.n_heads:
            raise ValueError(f"latent_dim {self.latent_dim} not divisible by {self.n_heads} heads")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["labels"] = tuple(d.get("labels", FAMILIES))
        return cls(**d)


def scaled_dot_product(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head softmax(QK^T / sqrt(C_head)) V on (..., L, C) inputs, heads re-concatenated."""
    c = q.shape[-1]
    if c % n_heads or k.shape[-1] != c or v.shape[-1] != c:
        raise nc.ShapeError(f"attention: channels {q.shape[-1]}/{k.shape[-1]}/{v.shape[-1]} with {n_heads} heads")
    if k.shape[-2] != v.shape[-2]:
        raise nc.ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    hd = c // n_heads

    def split(x):
        return x.reshape(*x.shape[:-1], n_heads, hd).transpose(-2, -3)

    qh, kh, vh = split(q), split(k), split(v)
    logits = nc.matmul(qh, kh.transpose(-1, -2)) / math.sqrt(hd)
    ctx = nc.matmul(nc.softmax(logits), vh)
    return ctx.transpose(-2, -3).reshape(*q.shape[:-1], c)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x_q: Tensor, x_kv: Tensor) -> Tensor:
        return self.out(scaled_dot_product(self.q(x_q), self.k(x_kv), self.v(x_kv), self.n_heads))


class AdaptiveNorm(nn.Module):
    """Layer norm whose scale and shift are regressed from the conditioning vector."""

    def __init__(self, dim: int):
        super().__init__()
        self.mod = nn.Linear(dim, 2 * dim)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        scale, shift = self.mod(nc.silu(cond)).unsqueeze(-2).chunk(2, dim=-1)
        return nc.layer_norm(x) * (1.0 + scale) + shift


class InteractionBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, ff_mult: int = 4):
        super().__init__()
        self.norm_self = AdaptiveNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads)
        self.norm_mutual = AdaptiveNorm(dim)
        self.mutual_attn = MultiHeadAttention(dim, n_heads)
        self.norm_ff = AdaptiveNorm(dim)
        self.ff1 = nn.Linear(dim, ff_mult * dim)
        self.ff2 = nn.Linear(ff_mult * dim, dim)

    def stream(self, h_own: Tensor, h_other: Tensor, cond: Tensor) -> Tensor:
        x = self.norm_self(h_own, cond)
        ctx = h_own + self.self_attn(x, x)
        q = self.norm_mutual(ctx, cond)
        kv = self.norm_mutual(h_other, cond)
        m = ctx + self.mutual_attn(q, kv)
        return m + self.ff2(nc.gelu(self.ff1(self.norm_ff(m, cond))))

    def forward(self, h_a: Tensor, h_b: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        if h_a.shape != h_b.shape:
            raise nc.ShapeError(f"stream shapes differ: {tuple(h_a.shape)} vs {tuple(h_b.shape)}")
        return self.stream(h_a, h_b, cond), self.stream(h_b, h_a, cond)


def sinusoidal(positions: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = positions.to(torch.float32).unsqueeze(-1) * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class Denoiser(nn.Module):
    """D(x_own, x_other, t, c) -> clean estimates for both people in one pass."""

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.config = config
        d = config.latent_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.embed = nn.Linear(config.state_dim, d)
            self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
            self.codebook = ConditionCodebook(config.labels, d)
            self.cond_proj = nn.Linear(d, d)
            self.blocks = nn.ModuleList(
                InteractionBlock(d, config.n_heads, config.ff_mult) for _ in range(config.n_blocks)
            )
            self.unembed = nn.Linear(d, config.state_dim)
        self.register_buffer("pos_table", sinusoidal(torch.arange(config.max_len), d), persistent=False)

    def condition(self, t: Tensor, cond_ids: Tensor) -> Tensor:
        t_emb = self.time_mlp(sinusoidal(t, self.config.latent_dim).to(self.pos_table.dtype))
        return t_emb + self.cond_proj(self.codebook(cond_ids))

    def forward(self, x_a: Tensor, x_b: Tensor, t: Tensor, cond_ids: Tensor) -> tuple[Tensor, Tensor]:
        """``x_*``: (B, L, D) normalised states; ``t``: (B,) steps; ``cond_ids``: (B,) codebook rows."""
        if x_a.shape != x_b.shape:
            raise nc.ShapeError(f"stream shapes differ: {tuple(x_a.shape)} vs {tuple(x_b.shape)}")
        if x_a.shape[-1] != self.config.state_dim or x_a.shape[-2] > self.config.max_len:
            raise nc.ShapeError(f"input {tuple(x_a.shape)} incompatible with {self.config}")
        if not (torch.isfinite(x_a).all() and torch.isfinite(x_b).all()):
            raise ValueError("non-finite denoiser input")
        cond = self.condition(t, cond_ids)
        pos = self.pos_table[: x_a.shape[-2]]
        h_a = self.embed(x_a) + pos
        h_b = self.embed(x_b) + pos
        for block in self.blocks:
            h_a, h_b = block(h_a, h_b, cond)
        return self.unembed(nc.layer_norm(h_a)), self.unembed(nc.layer_norm(h_b))

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())
