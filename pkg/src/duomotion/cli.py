"""duomotion command line: data generation, training, sampling, editing, evaluation and checks.

Exit status is 0 on success, 1 on usage errors and 2 on runtime failures; all
diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


log = logging.getLogger("duomotion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="JSON run configuration (sections data/model/train/loss/sample)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="duomotion", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic corpus and its manifest")
    _common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a denoiser")
    _common(p)
    p.add_argument("--data", required=True, help="manifest file or directory containing manifest.tsv")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("sample", help="generate one clip")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", default=None, help="condition label; omit for the null condition")
    p.add_argument("--steps", type=int, default=None, help="reverse steps (default 50)")
    p.add_argument("--guidance", type=float, default=None, help="guidance scale (default 3.5)")
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--length", type=int, default=None, help="frames (default: data length)")

    p = sub.add_parser("edit", help="masked sampling from a mask file")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", default=None, help="condition label (default: the reference clip's)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--guidance", type=float, default=None)

    p = sub.add_parser("eval", help="metrics report for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--n-generated", type=int, default=None)
    p.add_argument("--per-condition", type=int, default=20)
    p.add_argument("--pool-size", type=int, default=32)
    p.add_argument("--embed-steps", type=int, default=300)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("convert", help="convert between world-frame and root-frame clip files")
    _common(p, config=False)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--to", choices=("canonical", "noncanonical"), required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss and the denoiser")
    _common(p, config=False)

    p = sub.add_parser("drift-demo", help="terminal drift of root-frame vs world-frame decoding")
    _common(p, config=False)
    p.add_argument("--noise", type=float, default=0.001)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--horizons", type=int, nargs="+", default=[30, 300])
    p.add_argument("--speed", type=float, default=0.03, help="walking speed of the test clip, m/frame")
    return ap


def _config(args):
    from . import config as cfg

    overrides = list(args.set)
    if args.seed is not None:
        section = "data" if args.command == "gen-data" else "train"
        overrides.append(f"{section}.seed={args.seed}")
    try:
        run = cfg.resolve(args.config, overrides)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(str(exc).strip("'\"")) from None
    print(f"resolved config: {json.dumps(run.to_dict(), sort_keys=True)}", file=sys.stderr)
    return run


def _options(args) -> None:
    opts = {k: v for k, v in sorted(vars(args).items()) if k != "verbose"}
    print(f"resolved config: {json.dumps(opts, sort_keys=True)}", file=sys.stderr)


def _manifest(path) -> Path:
    p = Path(path)
    return p / "manifest.tsv" if p.is_dir() else p


def cmd_gen_data(args) -> int:
    from . import synth
    from .clipio import save_clip
    from .config import save
    from .kinematics import get_skeleton

    run = _config(args)
    d = run.data
    out = Path(args.out)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    samples = synth.desk_corpus(d.n_clips, d.length, d.seed, get_skeleton(d.skeleton))
    parts = synth.split(samples, (d.train_ratio, d.val_ratio, d.test_ratio), seed=d.seed)
    where = {id(s): name for name, group in parts.items() for s in group}
    rows = []
    for i, s in enumerate(samples):
        rel = f"clips/{i:05d}.ihc"
        save_clip(s.clip, out / rel)
        rows.append({"clip": rel, "label": s.clip.label, "text": s.clip.text, "split": where[id(s)], "source": s.source, "variant": s.variant})
    synth.write_manifest(out / "manifest.tsv", rows)
    save(out / "config.json", run)
    print(f"wrote {len(rows)} clips to {out}")
    return 0


def cmd_train(args) -> int:
    from .kinematics import get_skeleton
    from .representation import noncanonical_dim
    from .synth import FAMILIES, load_split
    from .trainer import fit

    run = _config(args)
    man = _manifest(args.data)
    splits = {name: load_split(man, name) for name in ("train", "val")}
    skel = get_skeleton(splits["train"][0].skeleton) if splits["train"] else None
    labels = sorted({c.label for c in splits["train"]}, key=lambda x: (FAMILIES + (x,)).index(x))
    model = run.model.denoiser(noncanonical_dim(skel.n_joints), labels) if skel else None
    res = fit(
        splits, run.train, args.out, model, run.loss, skel, resume=args.resume,
        progress=lambda e, v: log.info("epoch %d val simple %.5f", e, v["simple"]),
    )
    print(f"best {res.best_checkpoint} val loss_simple {res.best_val['simple']:.5f} (initial {res.baseline_val['simple']:.5f})")
    return 0


def _sampler_cfg(run, steps=None, guidance=None, eta=None):
    from dataclasses import replace

    s = run.sample
    upd = {k: v for k, v in (("num_steps", steps), ("guidance_scale", guidance), ("eta", eta)) if v is not None}
    return replace(s, **upd)


def cmd_sample(args) -> int:
    from .checkpoint import load_checkpoint
    from .clipio import save_clip
    from .diffusion import sample

    run = _config(args)
    bundle, _ = load_checkpoint(args.checkpoint)
    cfg = _sampler_cfg(run, args.steps, args.guidance, args.eta)
    length = args.length or run.data.length
    seed = args.seed if args.seed is not None else 0
    clip = sample(bundle, args.label, length, seed, cfg)
    save_clip(clip, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_edit(args) -> int:
    from .checkpoint import load_checkpoint
    from .clipio import save_clip
    from .editing import load_mask_file, masked_sample

    run = _config(args)
    bundle, _ = load_checkpoint(args.checkpoint)
    mask, ref = load_mask_file(args.mask)
    cfg = _sampler_cfg(run, args.steps, args.guidance)
    label = args.label if args.label is not None else ref.label
    clip = masked_sample(bundle, label, mask, cfg, args.seed if args.seed is not None else 0)
    save_clip(clip, args.out)
    print(f"wrote {args.out} ({int(mask.mask.sum())} frozen entries)")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import evaluate_model, train_embedders, write_report
    from .synth import load_split

    run = _config(args)
    seed = args.seed if args.seed is not None else 0
    bundle, _ = load_checkpoint(args.checkpoint)
    man = _manifest(args.data)
    train = load_split(man, "train")
    real = load_split(man, args.split)
    if not real:
        raise ValueError(f"split {args.split!r} is empty")
    emb = train_embedders(train, bundle.stats, steps=args.embed_steps, seed=seed)
    cfg = _sampler_cfg(run, args.steps)
    report = evaluate_model(
        bundle, emb, real, repeats=args.repeats, n_generated=args.n_generated,
        per_condition=args.per_condition, pool_size=args.pool_size, sampler_cfg=cfg, seed=seed,
    )
    write_report(args.out, report)
    g = report["generated"]
    print(f"fid {g['fid']['mean']:.4f}  top1 {g['top1']['mean']:.3f}  mm_dist {g['mm_dist']['mean']:.4f}  "
          f"diversity {g['diversity']['mean']:.4f}  mmodality {g['mmodality']['mean']:.4f}")
    return 0


def cmd_convert(args) -> int:
    from .clipio import load_canonical, load_clip, read_header, save_canonical, save_clip
    from .kinematics import get_skeleton
    from .representation import InteractionClip, canonical_to_noncanonical, encode_canonical, init_pose

    _options(args)
    header = read_header(args.inp)
    current = header.get("repr", "noncanonical")
    if current == args.to:
        raise UsageError(f"{args.inp} is already {current}")
    if args.to == "canonical":
        clip = load_clip(args.inp)
        skel = get_skeleton(clip.skeleton)
        a, b = encode_canonical(clip, skel)
        save_canonical(
            args.out, a, b, init_pose(clip.person_a, skel), init_pose(clip.person_b, skel),
            n_joints=clip.n_joints, label=clip.label, text=clip.text, fps=clip.fps, skeleton=clip.skeleton,
        )
    else:
        header, a, b = load_canonical(args.inp)
        skel = get_skeleton(header["skeleton"])
        init_a, init_b = header["init_pose"]
        clip = InteractionClip(
            canonical_to_noncanonical(a, tuple(init_a), skel), canonical_to_noncanonical(b, tuple(init_b), skel),
            label=header["label"], text=header.get("text", ""), fps=int(header["fps"]),
            skeleton=header["skeleton"], n_joints=int(header["n_joints"]),
        )
        save_clip(clip, args.out)
    print(f"wrote {args.out} ({args.to})")
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import TOLERANCE, gradcheck_report

    _options(args)
    report = gradcheck_report(seed=args.seed if args.seed is not None else 0)
    worst = 0.0
    for name, err in report.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:22s} {err:.3e} {status}")
        worst = max(worst, err)
    if worst >= TOLERANCE:
        print(f"gradient check failed: worst relative error {worst:.3e} >= {TOLERANCE}", file=sys.stderr)
        return 2
    return 0


def cmd_drift_demo(args) -> int:
    from . import synth
    from .kinematics import smpl22
    from .representation import measure_drift

    _options(args)
    seed = args.seed if args.seed is not None else 0
    length = max(args.horizons)
    skel = smpl22()
    clip = synth.walk_together(length, args.speed, skel=skel)
    rep = measure_drift(clip, skel, args.noise, args.horizons, args.trials, seed)
    print(rep.table())
    if len(rep.horizons) >= 2:
        short, long = min(rep.horizons), max(rep.horizons)
        print(f"canonical drift grows from {short} to {long} frames in {rep.fraction_growing(short, long):.1%} of trials")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "convert": cmd_convert,
    "gradcheck": cmd_gradcheck,
    "drift-demo": cmd_drift_demo,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
