"""Training loop: AdamW with warm-up plus cosine decay, condition dropout, gated losses, checkpoints.

Randomness is derived from ``(seed, step)`` and ``(seed, epoch)`` rather than
carried state, so a resumed run draws exactly what an uninterrupted run would.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import ModelBundle, load_checkpoint, save_checkpoint
from .denoiser import DenoiserConfig
from .diffusion import forward_noise
from .kinematics import Skeleton, get_skeleton
from .losses import REG_TERMS, LossWeights, loss_total
from .representation import InteractionClip, NormStats

log = logging.getLogger(__name__)

FREEZE_MODES = ("none", "a", "b", "random")


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 300
    max_lr: float = 1e-4
    warmup_epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 2e-5
    p_null: float = 0.1
    T: int = 1000
    seed: int = 0
    grad_clip: float = 1.0
    val_every: int = 10  # epochs; the final epoch is always validated
    val_repeats: int = 4  # noise draws per validation clip
    freeze_person: str = "none"  # fine-tune mode: hold one person at ground truth

    def __post_init__(self):
        if not 0.0 <= self.p_null <= 1.0:
            raise ValueError("p_null must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.max_lr < 0 or self.weight_decay < 0:
            raise ValueError("max_lr and weight_decay must be non-negative")
        if self.freeze_person not in FREEZE_MODES:
            raise ValueError(f"freeze_person must be one of {FREEZE_MODES}")


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warm-up from 0 to ``max_lr``, then cosine decay reaching 0 at the last step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    total = config.epochs * steps_per_epoch
    warm = config.warmup_epochs * steps_per_epoch
    if step < warm:
        return config.max_lr * step / warm
    if total <= warm:
        return config.max_lr
    frac = min(1.0, (step - warm) / (total - warm))
    return 0.5 * config.max_lr * (1.0 + math.cos(math.pi * frac))


def condition_dropout(ids: torch.Tensor, p: float, rng: np.random.Generator) -> torch.Tensor:
    """Replace each condition id by the null id 0 with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    drop = torch.from_numpy(rng.random(len(ids)) < p)
    return torch.where(drop, torch.zeros_like(ids), ids)


def step_rng(seed: int, step: int) -> tuple[np.random.Generator, torch.Generator]:
    ss = np.random.SeedSequence([seed, step])
    a, b = ss.generate_state(2)
    return np.random.default_rng(int(a)), torch.Generator().manual_seed(int(b))


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=config.max_lr, betas=(config.beta1, config.beta2), weight_decay=config.weight_decay
    )


def freeze_mask(batch: int, mode: str, rng: np.random.Generator) -> torch.Tensor | None:
    """(B, 2) boolean: which person is held at ground truth in fine-tune mode."""
    if mode == "none":
        return None
    if mode == "random":
        who = rng.integers(0, 2, size=batch)
    else:
        who = np.full(batch, 0 if mode == "a" else 1)
    out = np.zeros((batch, 2), dtype=bool)
    out[np.arange(batch), who] = True
    return torch.from_numpy(out)


@dataclass
class StepResult:
    loss: dict[str, float]  # batch means of each component
    per_example: dict[str, torch.Tensor]
    t: torch.Tensor
    lr: float
    accepted: bool


def train_step(
    bundle: ModelBundle,
    optimizer: torch.optim.Optimizer,
    x0: torch.Tensor,
    cond_ids: torch.Tensor,
    weights: LossWeights,
    config: TrainConfig,
    lr: float,
    rng: np.random.Generator,
    gen: torch.Generator,
) -> StepResult:
    """One update on a normalised batch ``x0`` of shape (B, 2, L, D)."""
    den, sched = bundle.denoiser, bundle.schedule
    B = x0.shape[0]
    t = torch.from_numpy(rng.integers(1, sched.T + 1, size=B))
    ids = condition_dropout(cond_ids, config.p_null, rng)
    eps = torch.randn(x0.shape, generator=gen)  # eps[:, 0] and eps[:, 1] are independent draws
    x_t = forward_noise(sched, x0, t.numpy(), eps)
    frozen = freeze_mask(B, config.freeze_person, rng)
    if frozen is not None:
        x_t = torch.where(frozen[:, :, None, None], x0, x_t)

    den.train()
    pa, pb = den(x_t[:, 0], x_t[:, 1], t, ids)
    out = loss_total(x0[:, 0], x0[:, 1], pa, pb, t, weights, sched.T, bundle.skeleton, bundle.stats)
    total = out["total"].mean()
    means = {k: float(v.detach().mean()) for k, v in out.items()}
    per_example = {k: v.detach() for k, v in out.items()}
    if not math.isfinite(float(total.detach())):
        log.warning("rejected step: non-finite loss %s", means)
        optimizer.zero_grad(set_to_none=True)
        return StepResult(means, per_example, t, lr, False)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(den.parameters(), config.grad_clip)
    optimizer.step()
    return StepResult(means, per_example, t, lr, True)


# ---------------------------------------------------------------------------
# data


def stack_clips(clips: list[InteractionClip]) -> np.ndarray:
    if not clips:
        raise ValueError("empty clip list")
    lengths = {c.n_frames for c in clips}
    if len(lengths) != 1:
        raise ValueError(f"clips must share one length for batching, got {sorted(lengths)}")
    return np.stack([c.stacked() for c in clips]).astype(np.float32)


def condition_ids(bundle: ModelBundle, clips: list[InteractionClip]) -> torch.Tensor:
    return bundle.denoiser.codebook.ids([c.label for c in clips])


@torch.no_grad()
def evaluate(bundle: ModelBundle, x0: torch.Tensor, ids: torch.Tensor, weights: LossWeights, seed: int, repeats: int = 4, batch: int = 64) -> dict[str, float]:
    """Mean loss components on fixed (seeded) timesteps and noise."""
    den, sched = bundle.denoiser, bundle.schedule
    den.eval()
    sums: dict[str, float] = {}
    count = 0
    for r in range(repeats):
        rng, gen = step_rng(seed, 10_000_000 + r)
        t_all = torch.from_numpy(rng.integers(1, sched.T + 1, size=len(x0)))
        eps_all = torch.randn(x0.shape, generator=gen)
        for i in range(0, len(x0), batch):
            x, t, e, c = x0[i : i + batch], t_all[i : i + batch], eps_all[i : i + batch], ids[i : i + batch]
            x_t = forward_noise(sched, x, t.numpy(), e)
            pa, pb = den(x_t[:, 0], x_t[:, 1], t, c)
            out = loss_total(x[:, 0], x[:, 1], pa, pb, t, weights, sched.T, bundle.skeleton, bundle.stats)
            for k, v in out.items():
                sums[k] = sums.get(k, 0.0) + float(v.sum())
            count += len(x)
    return {k: v / count for k, v in sums.items()}


# ---------------------------------------------------------------------------
# fit

LOG_FIELDS = ("phase", "step", "epoch", "lr") + ("simple",) + REG_TERMS + ("reg", "total", "wall_time")


@dataclass
class FitResult:
    bundle: ModelBundle
    checkpoint: Path
    best_checkpoint: Path
    log_path: Path
    baseline_val: dict[str, float]
    best_val: dict[str, float]
    history: list[dict] = field(default_factory=list)


def _optim_blobs(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], dict]:
    names = {id(p): n for n, p in model.named_parameters()}
    blobs, steps = {}, {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            blobs[f"{n}.exp_avg"] = st["exp_avg"].numpy()
            blobs[f"{n}.exp_avg_sq"] = st["exp_avg_sq"].numpy()
            steps[n] = float(st["step"])
    return blobs, steps


def _restore_optim(model, optimizer, blobs: dict[str, np.ndarray], steps: dict) -> None:
    for n, p in model.named_parameters():
        if n not in steps:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(steps[n]),
            "exp_avg": torch.from_numpy(blobs[f"{n}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(blobs[f"{n}.exp_avg_sq"].copy()),
        }


def _config_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def fit(
    splits: dict[str, list[InteractionClip]],
    config: TrainConfig,
    out_dir,
    model_config: DenoiserConfig | None = None,
    weights: LossWeights | None = None,
    skeleton: Skeleton | None = None,
    resume: str | Path | None = None,
    progress=None,
) -> FitResult:
    """Train on ``splits["train"]``, validating on ``splits["val"]``.

    Writes ``metrics.csv`` (append-only) and epoch checkpoints to ``out_dir``;
    only the best-validation and the latest checkpoints are kept.
    """
    for name in ("train", "val"):
        if not splits.get(name):
            raise ValueError(f"split {name!r} is empty")
    weights = weights or LossWeights()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_clips, val_clips = splits["train"], splits["val"]
    skeleton = skeleton or get_skeleton(train_clips[0].skeleton)
    x_train = stack_clips(train_clips)
    x_val = stack_clips(val_clips)

    optim_blobs: dict = {}
    if resume is not None:
        bundle, optim_blobs = load_checkpoint(resume)
        state = bundle.meta["train_state"]
        start_epoch, step = state["epoch"], state["step"]
        best_val, baseline = state["best_val"], state["baseline_val"]
        best_path = Path(state["best_checkpoint"])
    else:
        stats = NormStats.from_states(x_train)
        model_config = model_config or DenoiserConfig(state_dim=x_train.shape[-1])
        bundle = ModelBundle.create(model_config, stats, skeleton, T=config.T, seed=config.seed)
        start_epoch, step, best_val, baseline, best_path = 0, 0, None, None, None
    bundle.meta.update(train=_config_dict(config), loss=asdict(weights), seed=config.seed)

    den = bundle.denoiser
    opt = make_optimizer(den, config)
    if optim_blobs:
        _restore_optim(den, opt, optim_blobs, bundle.meta["train_state"]["optim_steps"])
    xt = torch.from_numpy(bundle.stats.normalize(x_train).astype(np.float32))
    xv = torch.from_numpy(bundle.stats.normalize(x_val).astype(np.float32))
    ids_t, ids_v = condition_ids(bundle, train_clips), condition_ids(bundle, val_clips)
    spe = math.ceil(len(xt) / config.batch_size)

    log_path = out / "metrics.csv"
    new_log = not log_path.exists()
    fh = open(log_path, "a", newline="")
    writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
    if new_log:
        writer.writeheader()
    t_start = time.time()
    history: list[dict] = []

    def record(phase, epoch, lr, comps):
        row = {"phase": phase, "step": step, "epoch": epoch, "lr": lr, "wall_time": round(time.time() - t_start, 3)}
        row.update({k: comps.get(k, 0.0) for k in ("simple",) + REG_TERMS + ("reg", "total")})
        writer.writerow(row)
        fh.flush()
        history.append(row)

    log.info("resolved training config %s", json.dumps(bundle.meta, sort_keys=True))
    if baseline is None:
        baseline = evaluate(bundle, xv, ids_v, weights, config.seed, config.val_repeats)
        record("val", 0, 0.0, baseline)
    last_path = Path(resume) if resume is not None else None
    try:
        for epoch in range(start_epoch, config.epochs):
            order = np.random.default_rng([config.seed, epoch, 7]).permutation(len(xt))
            for i in range(spe):
                idx = torch.from_numpy(order[i * config.batch_size : (i + 1) * config.batch_size])
                rng, gen = step_rng(config.seed, step)
                lr = lr_at(step, config, spe)
                res = train_step(bundle, opt, xt[idx], ids_t[idx], weights, config, lr, rng, gen)
                record("train" if res.accepted else "rejected", epoch + 1, lr, res.loss)
                step += 1
            done = epoch + 1
            if done % config.val_every == 0 or done == config.epochs:
                val = evaluate(bundle, xv, ids_v, weights, config.seed, config.val_repeats)
                record("val", done, lr, val)
                if progress is not None:
                    progress(done, val)
                path = out / f"epoch{done:04d}.ckpt"
                if best_val is None or val["simple"] < best_val["simple"]:
                    best_val, best_path = val, path
                blobs, steps = _optim_blobs(den, opt)
                bundle.meta["train_state"] = {
                    "epoch": done, "step": step, "best_val": best_val, "baseline_val": baseline,
                    "best_checkpoint": str(best_path), "optim_steps": steps,
                }
                save_checkpoint(path, bundle, blobs)
                for old in out.glob("epoch*.ckpt"):
                    if old not in (path, best_path):
                        old.unlink()
                last_path = path
    finally:
        fh.close()
    return FitResult(bundle, last_path, best_path, log_path, baseline, best_val, history)
