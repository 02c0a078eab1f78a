import csv
import logging

import numpy as np
import pytest
import torch

from duomotion import synth
from duomotion import trainer as tr
from duomotion.checkpoint import load_checkpoint
from duomotion.denoiser import DenoiserConfig
from duomotion.losses import LossWeights

SMALL = DenoiserConfig(state_dim=268, latent_dim=16, n_blocks=1, n_heads=2)


@pytest.fixture(scope="module")
def small_splits(smpl):
    samples = synth.build_corpus(per_family=3, length=30, seed=1, skel=smpl)
    clips = [s.clip for s in samples if s.variant in ("orig", "swap")]
    return {"train": clips[:16], "val": clips[16:20]}


def _steps_per_epoch(n, bs):
    return -(-n // bs)


def test_lr_schedule_examples():
    cfg = tr.TrainConfig(epochs=300, warmup_epochs=10)
    spe = 25
    assert tr.lr_at(0, cfg, spe) == 0.0
    assert tr.lr_at(10 * spe, cfg, spe) == pytest.approx(1e-4, rel=1e-12)
    assert tr.lr_at(5 * spe, cfg, spe) == pytest.approx(5e-5, rel=1e-12)
    assert tr.lr_at(300 * spe - 1, cfg, spe) < 1e-7
    assert tr.lr_at(300 * spe, cfg, spe) == 0.0
    lrs = [tr.lr_at(s, cfg, spe) for s in range(10 * spe, 300 * spe)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        tr.lr_at(-1, cfg, spe)


def test_train_config_defaults_and_validation():
    cfg = tr.TrainConfig()
    assert (cfg.max_lr, cfg.warmup_epochs, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.p_null, cfg.T) == (
        1e-4, 10, 0.9, 0.999, 2e-5, 0.1, 1000)
    for bad in (dict(p_null=1.5), dict(warmup_epochs=400), dict(epochs=0), dict(freeze_person="c"), dict(beta1=1.0)):
        with pytest.raises(ValueError):
            tr.TrainConfig(**bad)


def test_condition_dropout():
    ids = torch.arange(1, 5).repeat(25_000)
    rng = np.random.default_rng(0)
    assert torch.equal(tr.condition_dropout(ids, 0.0, rng), ids)
    assert (tr.condition_dropout(ids, 1.0, rng) == 0).all()
    out = tr.condition_dropout(ids, 0.1, np.random.default_rng(1))
    frac = float((out == 0).float().mean())
    assert abs(frac - 0.1) <= 0.005
    kept = out != 0
    assert torch.equal(out[kept], ids[kept])
    a = tr.condition_dropout(ids, 0.1, np.random.default_rng(2))
    b = tr.condition_dropout(ids, 0.1, np.random.default_rng(2))
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        tr.condition_dropout(ids, -0.1, rng)


def _fresh(smpl, splits, seed=0):
    from duomotion.checkpoint import ModelBundle
    from duomotion.representation import NormStats

    x = tr.stack_clips(splits["train"])
    bundle = ModelBundle.create(SMALL, NormStats.from_states(x), smpl, seed=seed)
    xt = torch.from_numpy(bundle.stats.normalize(x).astype(np.float32))
    return bundle, xt, tr.condition_ids(bundle, splits["train"])


def test_zero_lr_leaves_weights_bit_exact(smpl, small_splits):
    bundle, x, ids = _fresh(smpl, small_splits)
    before = {k: v.clone() for k, v in bundle.denoiser.state_dict().items()}
    cfg = tr.TrainConfig()
    opt = tr.make_optimizer(bundle.denoiser, cfg)
    rng, gen = tr.step_rng(0, 0)
    res = tr.train_step(bundle, opt, x[:8], ids[:8], LossWeights(), cfg, 0.0, rng, gen)
    assert res.accepted
    for k, v in bundle.denoiser.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_non_finite_loss_rejected(smpl, small_splits, caplog):
    bundle, x, ids = _fresh(smpl, small_splits)
    before = {k: v.clone() for k, v in bundle.denoiser.state_dict().items()}
    cfg = tr.TrainConfig()
    opt = tr.make_optimizer(bundle.denoiser, cfg)
    huge = torch.full_like(x[:4], 1e25)  # finite input whose squared error overflows
    rng, gen = tr.step_rng(0, 0)
    with caplog.at_level(logging.WARNING, logger="duomotion.trainer"):
        res = tr.train_step(bundle, opt, huge, ids[:4], LossWeights(), cfg, 1e-3, rng, gen)
    assert not res.accepted
    assert "rejected step" in caplog.text
    for k, v in bundle.denoiser.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_step_draws_per_example_t_and_independent_noise(smpl, small_splits):
    bundle, x, ids = _fresh(smpl, small_splits)
    cfg = tr.TrainConfig()
    opt = tr.make_optimizer(bundle.denoiser, cfg)
    rng, gen = tr.step_rng(3, 0)
    res = tr.train_step(bundle, opt, x, ids, LossWeights(), cfg, 1e-4, rng, gen)
    assert len(set(res.t.tolist())) > 1
    assert res.t.min() >= 1 and res.t.max() <= 1000
    _, gen = tr.step_rng(3, 0)
    eps = torch.randn(x.shape, generator=gen)
    corr = np.corrcoef(eps[:, 0].flatten().numpy(), eps[:, 1].flatten().numpy())[0, 1]
    assert abs(corr) < 0.01


def test_gating_in_the_loop(smpl, small_splits):
    bundle, x, ids = _fresh(smpl, small_splits)
    cfg = tr.TrainConfig()
    opt = tr.make_optimizer(bundle.denoiser, cfg)
    seen_hi = seen_lo = 0
    for step in range(6):
        rng, gen = tr.step_rng(0, step)
        res = tr.train_step(bundle, opt, x, ids, LossWeights(), cfg, 1e-4, rng, gen)
        reg, t = res.per_example["reg"], res.t
        hi = t > 700
        assert (reg[hi] == 0).all()
        assert (reg[~hi] > 0).all()
        seen_hi += int(hi.sum())
        seen_lo += int((~hi).sum())
    assert seen_hi and seen_lo


def test_adamw_quadratic_bowl():
    target = torch.tensor([1.5, -0.75], dtype=torch.float64)
    w = torch.nn.Parameter(torch.zeros(2, dtype=torch.float64))
    model = torch.nn.Module()
    model.w = w
    cfg = tr.TrainConfig(epochs=2000, warmup_epochs=0, max_lr=0.05, weight_decay=0.0)
    opt = tr.make_optimizer(model, cfg)
    hit = None
    for step in range(2000):
        for group in opt.param_groups:
            group["lr"] = tr.lr_at(step, cfg, 1)
        opt.zero_grad()
        loss = ((w - target) ** 2 * torch.tensor([1.0, 10.0], dtype=torch.float64)).sum()
        loss.backward()
        opt.step()
        if hit is None and (w.detach() - target).abs().max() < 1e-4:
            hit = step
    assert (w.detach() - target).abs().max() < 1e-4
    assert hit is not None and hit < 2000


def test_smoke_200_steps(smpl):
    samples = synth.desk_corpus(32, length=32, seed=0, skel=smpl)
    clips = [s.clip for s in samples]
    splits = {"train": clips, "val": clips[:4]}
    bundle, x, ids = _fresh(smpl, splits)
    cfg = tr.TrainConfig(batch_size=8, epochs=50, warmup_epochs=2, max_lr=1e-3)
    opt = tr.make_optimizer(bundle.denoiser, cfg)
    spe = _steps_per_epoch(len(x), cfg.batch_size)
    losses = []
    for step in range(200):
        order = np.random.default_rng([0, step // spe, 7]).permutation(len(x))
        i = step % spe
        idx = torch.from_numpy(order[i * cfg.batch_size : (i + 1) * cfg.batch_size])
        rng, gen = tr.step_rng(0, step)
        res = tr.train_step(bundle, opt, x[idx], ids[idx], LossWeights(), cfg, tr.lr_at(step, cfg, spe), rng, gen)
        losses.append(res.loss["simple"])
    first, last = np.mean(losses[:10]), np.mean(losses[-10:])
    assert last <= 0.7 * first, (first, last)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_fit_one_epoch(tmp_path, small_splits):
    cfg = tr.TrainConfig(epochs=1, warmup_epochs=0, batch_size=8)
    res = tr.fit(small_splits, cfg, tmp_path, model_config=SMALL)
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["epoch0001.ckpt"]
    assert res.log_path == tmp_path / "metrics.csv"
    rows = _rows(res.log_path)
    assert [r["phase"] for r in rows] == ["val", "train", "train", "val"]
    assert set(rows[0]) == set(tr.LOG_FIELDS)
    bundle, optim = load_checkpoint(res.checkpoint)
    assert bundle.meta["train"]["epochs"] == 1 and bundle.meta["seed"] == 0
    assert bundle.meta["loss"]["lambda_dm"] == 3.0
    assert optim  # moment blobs stored for resuming


def test_fit_rejects_empty_split(tmp_path, small_splits):
    with pytest.raises(ValueError, match="empty"):
        tr.fit({"train": small_splits["train"], "val": []}, tr.TrainConfig(epochs=1, warmup_epochs=0), tmp_path)


def _train_rows(path):
    return [(r["step"], r["simple"], r["total"]) for r in _rows(path) if r["phase"] == "train"]


def test_fit_deterministic_and_resume_exact(tmp_path, small_splits):
    cfg = tr.TrainConfig(epochs=4, warmup_epochs=1, batch_size=8, val_every=1, max_lr=1e-3)
    a = tr.fit(small_splits, cfg, tmp_path / "a", model_config=SMALL)
    b = tr.fit(small_splits, cfg, tmp_path / "b", model_config=SMALL)
    assert _train_rows(a.log_path) == _train_rows(b.log_path)

    class Stop(Exception):
        pass

    def stop_at_three(epoch, val):
        if epoch == 3:
            raise Stop

    with pytest.raises(Stop):
        tr.fit(small_splits, cfg, tmp_path / "c", model_config=SMALL, progress=stop_at_three)
    ckpt = tmp_path / "c" / "epoch0002.ckpt"
    assert ckpt.exists()
    c = tr.fit(small_splits, cfg, tmp_path / "c", resume=ckpt)
    steps = [int(r["step"]) for r in _rows(c.log_path) if r["phase"] == "train"]
    resumed = [int(r["step"]) for r in c.history if r["phase"] == "train"]
    assert resumed == sorted(resumed) and resumed[0] == 4
    assert steps[-1] == 7
    for (n, p), (_, q) in zip(a.bundle.denoiser.state_dict().items(), c.bundle.denoiser.state_dict().items()):
        assert torch.equal(p, q), n
    assert c.best_val["simple"] == a.best_val["simple"]


def test_fit_freeze_mode_runs(tmp_path, small_splits):
    cfg = tr.TrainConfig(epochs=1, warmup_epochs=0, batch_size=8, freeze_person="random")
    res = tr.fit(small_splits, cfg, tmp_path, model_config=SMALL)
    assert res.checkpoint.exists()
    mask = tr.freeze_mask(6, "random", np.random.default_rng(0))
    assert (mask.sum(1) == 1).all()
    assert tr.freeze_mask(3, "none", np.random.default_rng(0)) is None
    assert tr.freeze_mask(3, "b", np.random.default_rng(0))[:, 1].all()
