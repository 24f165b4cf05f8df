"""Command-line entry point: ``m2tr <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from m2tr.config import Config, desk_preset
from m2tr.errors import ConfigError, DataError, M2TRError, NumericError

log = logging.getLogger("m2tr")

GRADCHECK_TOLERANCE = 1e-4


def _config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(payload, path: Path | None = None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2)
    print(text)
    if path is not None:
        path.write_text(text + "\n")


# ---- commands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from m2tr.data import build_clips, build_dataset, build_splits

    seed = args.seed if args.seed is not None else 0
    out = _out(args, "data")
    size = args.image_size
    if args.preset == "desk":
        summary = build_splits(out, desk_preset().split_sizes(), seed, size)
    else:
        m = build_dataset(args.n_real, args.n_fake, seed, out, size)
        summary = {"n_real": m.n_real, "n_fake": m.n_fake, "seed": seed}
    if args.clips:
        frames = args.clip_frames
        build_clips(args.clips, args.clips, frames, seed + 100, out / "clips", size)
        summary["clips"] = {"n_real": args.clips, "n_fake": args.clips, "frames": frames}
    _emit({"out": str(out), "splits": summary})
    return 0


def cmd_train(args) -> int:
    from m2tr.train import train

    cfg = _config(args)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    out = Path(args.out or "runs/train")
    res = train(cfg, args.data, out, max_steps_per_epoch=args.max_steps_per_epoch, progress=not args.quiet)
    _emit({"best": str(res.best_path), "last": str(res.last_path), "best_val_auc": res.best_auc,
           "config_hash": cfg.hash(), "epochs": len(res.history)})
    return 0


def cmd_eval(args) -> int:
    from m2tr.train import evaluate

    rep = evaluate(args.checkpoint, args.data)
    _emit(rep, Path(args.out) / "eval.json" if args.out else None)
    return 0


def cmd_predict(args) -> int:
    from m2tr.train import predict

    _emit(predict(args.checkpoint, args.image, args.mask_out))
    return 0


def _gradcheck_targets(seed: int) -> dict:
    from m2tr import blocks, losses
    from m2tr.network import ClassificationHead, MaskDecoder, Stem
    from m2tr.numerics.layers import Conv2d, Dense

    rng = np.random.default_rng(seed)
    bce_target = (rng.uniform(size=6) > 0.5).astype(float)
    mask_target = (rng.uniform(size=(2, 4, 4)) > 0.5).astype(float)
    con_labels = np.array([0, 1, 0, 1, 1, 0])

    head, decoder = ClassificationHead(rng, 4, 6), MaskDecoder(rng, 4)
    for w in (head.fc.weight, decoder.out.weight):  # zero-initialized; make upstream gradients nonzero
        w.data = rng.standard_normal(w.shape).astype(np.float32)

    def prob_input(fn):
        from m2tr.numerics import ops

        return lambda z: fn(ops.sigmoid(z))

    return {
        "dense": (Dense(rng, 5, 3), [(4, 5)]),
        "conv2d": (Conv2d(rng, 3, 4, 3, stride=2), [(2, 8, 8, 3)]),
        "frequency_filter": (blocks.FrequencyFilterBlock((8, 8), 2), [(2, 8, 8, 2)]),
        "mst": (blocks.MultiScaleTransformerBlock(rng, 2, (8, 8), (8, 4, 2)), [(2, 8, 8, 2)]),
        "cmf": (blocks.CrossModalityFusionBlock(rng, 2), [(2, 4, 4, 2), (2, 4, 4, 2)]),
        "stem": (Stem(rng, 4), [(2, 16, 16, 3)]),
        "head": (head, [(2, 8, 8, 4)]),
        "decoder": (decoder, [(2, 4, 4, 4)]),
        "cls_loss": (prob_input(lambda p: losses.cls_loss(p, bce_target)), [(6,)]),
        "seg_loss": (prob_input(lambda p: losses.seg_loss(p, mask_target)), [(2, 4, 4)]),
        "contrastive_loss": (lambda f: losses.contrastive_loss(f, con_labels), [(6, 5)]),
    }


def cmd_gradcheck(args) -> int:
    from m2tr.numerics import gradcheck

    targets = _gradcheck_targets(args.seed or 0)
    names = list(targets) if args.block == "all" else [args.block]
    results = {}
    for name in names:
        if name not in targets:
            raise ConfigError(f"unknown block {name!r}; choose from {sorted(targets)} or 'all'")
        block, shapes = targets[name]
        results[name] = gradcheck(block, shapes, seed=args.seed or 0)
    worst = max(results.values())
    _emit({"max_rel_error": results, "tolerance": GRADCHECK_TOLERANCE, "pass": worst < GRADCHECK_TOLERANCE})
    if worst >= GRADCHECK_TOLERANCE:
        raise NumericError(f"gradient check failed: worst relative error {worst:.3g}")
    return 0


def cmd_ablate(args) -> int:
    from m2tr.train import ABLATIONS, run_ablation, single_scale_variants

    cfg = _config(args)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    variants = {}
    for name in args.variants.split(","):
        if name not in ABLATIONS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(ABLATIONS)}")
        variants[name] = ABLATIONS[name]
    if args.single_scale:
        variants.update(single_scale_variants(cfg))
    out = _out(args, "runs/ablation")
    rows = run_ablation(cfg, variants, args.data, out, args.max_steps_per_epoch)
    _emit({"csv": str(out / "ablation.csv"), "rows": rows})
    return 0


def cmd_qc(args) -> int:
    from m2tr import metrics
    from m2tr.numerics.tns import read_tns

    if args.metric == "mask-ssim":
        value = metrics.mask_ssim(read_tns(args.a), read_tns(args.b), read_tns(args.mask))
    elif args.metric == "perceptual":
        value = metrics.perceptual_distance(read_tns(args.a), read_tns(args.b))
    else:
        if not args.flow:
            raise ConfigError("ewarp needs --flow")
        occ = read_tns(args.occlusion) if args.occlusion else None
        value = metrics.ewarp(read_tns(args.a), read_tns(args.b), metrics.FlowField(read_tns(args.flow), occ))
    cfg = _config(args)
    payload = metrics.report(args.metric, value, 1, cfg.hash())
    _emit(payload, Path(args.out) / f"qc_{args.metric}.json" if args.out else None)
    return 0


def cmd_export_features(args) -> int:
    from m2tr.checkpoint import load_model
    from m2tr.metrics import export_features

    model, _ = load_model(args.checkpoint)
    out = _out(args, "runs/features") / "features.csv"
    n = export_features(model, args.data, out)
    _emit({"csv": str(out), "rows": n})
    return 0


def cmd_video_eval(args) -> int:
    from m2tr.checkpoint import load_model
    from m2tr.data import load_clips
    from m2tr.metrics import ScoredSet, accuracy, auc
    from m2tr.network import sample_frames, video_mean_forward, video_temporal_forward
    from m2tr.train import clip_features, load_temporal_head, save_temporal_head, train_temporal_head

    model, ck = load_model(args.checkpoint)
    clips = load_clips(args.clips)
    k = ck.config.frames_per_clip
    if args.fusion == "mean":
        scores = [video_mean_forward(model, frames) for _, _, frames in clips]
    else:
        if args.head:
            head = load_temporal_head(args.head)
        else:
            if not args.train_clips:
                raise ConfigError("temporal fusion needs --head or --train-clips")
            feats, labels = clip_features(model, load_clips(args.train_clips), k)
            head = train_temporal_head(feats, labels, epochs=args.head_epochs, seed=ck.config.seed)
            out = _out(args, "runs/video")
            save_temporal_head(out / "temporal_head.ckpt", head, ck.config)
        scores = [video_temporal_forward(model, head, sample_frames(frames, k)) for _, _, frames in clips]
    labels = [label for _, label, _ in clips]
    s = ScoredSet(scores, labels)
    payload = {"fusion": args.fusion, "n": len(clips), "acc": accuracy(s), "config_hash": ck.config.hash()}
    try:
        payload["auc"] = auc(s)
    except DataError:
        payload["auc"] = None
    _emit(payload, Path(args.out) / f"video_{args.fusion}.json" if args.out else None)
    return 0


# ---- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m2tr", description="Multi-modal multi-scale transformer forgery detector.")
    p.add_argument("--config", help="JSON file whose keys are Config fields")
    p.add_argument("--seed", type=int, help="overrides the config seed (and seeds data generation)")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic forgery dataset")
    g.add_argument("--preset", choices=["desk"], help="train/val/test splits of the desk preset")
    g.add_argument("--n-real", type=int, default=500)
    g.add_argument("--n-fake", type=int, default=2000)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--clips", type=int, default=0, help="also write this many real and fake clips")
    g.add_argument("--clip-frames", type=int, default=32)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train on <data>/train, validate on <data>/val")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps-per-epoch", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="ACC, AUC and mask IoU of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("predict", help="score one .tns image and write its mask")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--mask-out")
    pr.set_defaults(fn=cmd_predict)

    gc = sub.add_parser("gradcheck", help="finite-difference check of a named block")
    gc.add_argument("--block", default="all")
    gc.set_defaults(fn=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train ablation variants and write ablation.csv")
    a.add_argument("--data", required=True)
    a.add_argument("--variants", default="full,no_mt,no_ff,no_cmf,no_contrastive")
    a.add_argument("--single-scale", action="store_true", help="add one single-scale variant per patch side")
    a.add_argument("--epochs", type=int)
    a.add_argument("--max-steps-per-epoch", type=int)
    a.set_defaults(fn=cmd_ablate)

    q = sub.add_parser("qc", help="dataset-quality metrics on .tns inputs")
    q.add_argument("metric", choices=["mask-ssim", "perceptual", "ewarp"])
    q.add_argument("--a", required=True, help="forged image / first image / frame t")
    q.add_argument("--b", required=True, help="original image / second image / frame t+1")
    q.add_argument("--mask", help="face mask for mask-ssim")
    q.add_argument("--flow", help="(H, W, 2) flow for ewarp")
    q.add_argument("--occlusion", help="(H, W) occlusion mask for ewarp")
    q.set_defaults(fn=cmd_qc)

    x = sub.add_parser("export-features", help="write per-sample feature vectors as CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.set_defaults(fn=cmd_export_features)

    v = sub.add_parser("video-eval", help="clip-level scores by feature averaging or the temporal head")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--clips", required=True)
    v.add_argument("--fusion", choices=["mean", "temporal"], default="mean")
    v.add_argument("--head", help="trained temporal head checkpoint")
    v.add_argument("--train-clips", help="clips to fit the temporal head on when --head is absent")
    v.add_argument("--head-epochs", type=int, default=30)
    v.set_defaults(fn=cmd_video_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "qc" and args.metric == "mask-ssim" and not args.mask:
        parser.error("mask-ssim needs --mask")
    try:
        return args.fn(args)
    except M2TRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
