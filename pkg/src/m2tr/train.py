"""Training loop, optimizer schedule, evaluation, prediction and ablation driver."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from m2tr import checkpoint as ckpt
from m2tr.config import Config, DeskPreset, OverfitPreset, desk_preset, overfit_preset
from m2tr.data import balanced_epoch, build_dataset, build_splits, load_arrays, load_manifest
from m2tr.errors import DataError, NumericError
from m2tr.losses import LossWeights, cls_loss, contrastive_terms, seg_loss, total_loss
from m2tr.metrics import ScoredSet, accuracy, auc, mask_iou
from m2tr.network import M2TRModel, predict_batch
from m2tr.numerics.tensor import GradContext, Tensor, backward
from m2tr.numerics.tns import read_tns, write_tns

log = logging.getLogger(__name__)


def lr_at(cfg: Config, epoch: int) -> float:
    """Step decay: lr0 * factor ** floor(epoch / every)."""
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


class Adam:
    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{n}": a for n, a in self.m.items()}
        out.update({f"adam.v/{n}": a for n, a in self.v.items()})
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for n in self.m:
            self.m[n] = tensors[f"adam.m/{n}"].astype(self.m[n].dtype).copy()
            self.v[n] = tensors[f"adam.v/{n}"].astype(self.v[n].dtype).copy()
        self.t = t


@dataclass
class StepLosses:
    total: float
    cls: float
    seg: float
    con: float
    con_skipped: bool


def train_step(model: M2TRModel, opt: Adam, images: np.ndarray, masks: np.ndarray, labels: np.ndarray,
               weights: LossWeights) -> StepLosses:
    model.train(True)
    with GradContext() as ctx:
        y, mask_hat, f = model(Tensor(images))
        lc = cls_loss(y, labels.astype(np.float32))
        ls = seg_loss(mask_hat, masks)
        con = contrastive_terms(f, labels) if weights.con > 0 else None
        con_value = con.value if con is not None else Tensor(np.zeros((), np.float32))
        loss = total_loss(lc, ls, con_value, weights)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite training loss {value}")
    model.zero_grad()
    backward(loss, ctx, model.parameters())
    opt.step()
    return StepLosses(value, float(lc.data), float(ls.data), float(con_value.data),
                      con is None or con.skipped)


@dataclass
class EvalReport:
    acc: float
    auc: float
    mask_iou: float
    mask_iou_all: float
    n: int

    def as_dict(self) -> dict:
        return {"acc": self.acc, "auc": self.auc, "mask_iou": self.mask_iou,
                "mask_iou_all": self.mask_iou_all, "n": self.n}


def evaluate_arrays(model: M2TRModel, images, masks, labels, batch_size: int = 32) -> EvalReport:
    scores, pred_masks, _ = predict_batch(model, images, batch_size)
    s = ScoredSet(scores, labels)
    ious = np.array([mask_iou(p, t) for p, t in zip(pred_masks, masks)])
    fake = np.asarray(labels) == 1
    return EvalReport(
        acc=accuracy(s),
        auc=auc(s),
        mask_iou=float(ious[fake].mean()) if fake.any() else float("nan"),
        mask_iou_all=float(ious.mean()),
        n=len(labels),
    )


def evaluate(checkpoint_path, dataset_dir) -> dict:
    model, ck = ckpt.load_model(checkpoint_path)
    manifest = load_manifest(dataset_dir)
    images, masks, labels = load_arrays(manifest)
    rep = evaluate_arrays(model, images, masks, labels)
    out = rep.as_dict()
    out["config_hash"] = ck.config.hash()
    return out


@dataclass
class TrainResult:
    model: M2TRModel
    history: list[dict] = field(default_factory=list)
    best_auc: float = float("-inf")
    best_path: Path | None = None
    last_path: Path | None = None


def _split_dir(dataset_dir, name: str) -> Path:
    root = Path(dataset_dir)
    sub = root / name
    if (sub / "manifest.json").exists():
        return sub
    if name == "train" and (root / "manifest.json").exists():
        return root
    raise DataError(f"no '{name}' split under {root}")


def train(cfg: Config, dataset_dir, out_dir, max_steps_per_epoch: int | None = None,
          val_dir=None, progress: bool = False) -> TrainResult:
    """Adam on the weighted three-term objective with per-epoch balanced resampling.

    ``dataset_dir`` holds ``train/`` and ``val/`` splits (a bare dataset is used
    for training and, absent ``val_dir``, for validation too). Writes
    ``metrics.jsonl``, ``last.ckpt`` and ``best.ckpt`` into ``out_dir``.
    """
    train_m = load_manifest(_split_dir(dataset_dir, "train"))
    if val_dir is None:
        try:
            val_dir = _split_dir(dataset_dir, "val")
        except DataError:
            val_dir = _split_dir(dataset_dir, "train")
    val_m = load_manifest(val_dir)
    for m in (train_m, val_m):
        if m.image_size != cfg.image_size:
            raise DataError(f"dataset image size {m.image_size} != config image_size {cfg.image_size}")
    images, masks, labels = load_arrays(train_m)
    v_images, v_masks, v_labels = load_arrays(val_m)
    index = {sid: i for i, sid in enumerate(train_m.ids)}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    model = M2TRModel(cfg)
    opt = Adam(list(model.named_parameters()), lr=cfg.lr)
    weights = LossWeights(cfg.lambda_seg, cfg.lambda_con)
    result = TrainResult(model)
    log_path = out / "metrics.jsonl"
    log_path.write_text("")
    for epoch in range(cfg.epochs):
        opt.lr = lr_at(cfg, epoch)
        order = np.array([index[i] for i in balanced_epoch(train_m, cfg.seed, epoch)])
        sums = np.zeros(4)
        steps = 0
        t0 = time.time()
        for start in range(0, len(order), cfg.batch_size):
            if max_steps_per_epoch is not None and steps >= max_steps_per_epoch:
                break
            idx = order[start:start + cfg.batch_size]
            st = train_step(model, opt, images[idx], masks[idx], labels[idx], weights)
            sums += (st.total, st.cls, st.seg, st.con)
            steps += 1
        rep = evaluate_arrays(model, v_images, v_masks, v_labels)
        row = {"epoch": epoch, "lr": opt.lr, "steps": steps,
               "loss": sums[0] / steps, "cls": sums[1] / steps, "seg": sums[2] / steps, "con": sums[3] / steps,
               "val_acc": rep.acc, "val_auc": rep.auc, "val_mask_iou": rep.mask_iou}
        result.history.append(row)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        msg = (f"epoch {epoch} lr {opt.lr:.1e} loss {row['loss']:.4f} (cls {row['cls']:.4f} seg {row['seg']:.4f} "
               f"con {row['con']:.4f}) val acc {rep.acc:.4f} auc {rep.auc:.4f} iou {rep.mask_iou:.4f} "
               f"[{time.time() - t0:.0f}s]")
        log.info(msg)
        if progress:
            print(msg, flush=True)
        meta = {"epoch": epoch + 1, "adam_t": opt.t, "rng": {"seed": cfg.seed, "next_epoch": epoch + 1},
                "val_auc": rep.auc}
        result.last_path = out / "last.ckpt"
        ckpt.save(result.last_path, ckpt.from_model(model, cfg, meta, opt))
        if rep.auc > result.best_auc:
            result.best_auc = rep.auc
            result.best_path = out / "best.ckpt"
            ckpt.save(result.best_path, ckpt.from_model(model, cfg, meta, opt))
    return result


def predict(checkpoint_path, image_path, out_mask=None) -> dict:
    """Score one ``.tns`` image and write its predicted mask next to it (or to ``out_mask``)."""
    from m2tr.network import forward

    model, _ = ckpt.load_model(checkpoint_path)
    img = read_tns(image_path)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise DataError(f"expected an (H, W, 3) image, got {img.shape}")
    score, mask, _ = forward(model, img)
    mask_path = Path(out_mask) if out_mask else Path(image_path).with_suffix(".mask.tns")
    write_tns(mask_path, mask)
    return {"score": score, "mask_path": str(mask_path)}


# ---- ablations ----------------------------------------------------------

ABLATIONS: dict[str, dict] = {
    "full": {},
    "no_mt": {"ablate_mt": True},
    "no_ff": {"ablate_ff": True},
    "no_cmf": {"ablate_cmf": True},
    "no_contrastive": {"lambda_con": 0.0},
}


def single_scale_variants(cfg: Config) -> dict[str, dict]:
    return {f"single_{r}": {"patch_sides": (r,)} for r in cfg.patch_sides}


ABLATION_FIELDS = ("variant", "ablate_mt", "ablate_ff", "ablate_cmf", "patch_sides", "lambda_con",
                   "val_acc", "val_auc", "test_acc", "test_auc", "test_mask_iou", "n_params")


def run_ablation(base: Config, variants: dict[str, dict], dataset_dir, out_dir,
                 max_steps_per_epoch: int | None = None) -> list[dict]:
    """Train each variant with the shared seed and data order; write ablation.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    test_dir = Path(dataset_dir) / "test"
    test = None
    if (test_dir / "manifest.json").exists():
        test = load_arrays(load_manifest(test_dir))
    rows = []
    for name, overrides in variants.items():
        cfg = base.replace(**overrides)
        res = train(cfg, dataset_dir, out / name, max_steps_per_epoch=max_steps_per_epoch)
        last = res.history[-1]
        row = {"variant": name, "ablate_mt": cfg.ablate_mt, "ablate_ff": cfg.ablate_ff, "ablate_cmf": cfg.ablate_cmf,
               "patch_sides": " ".join(str(r) for r in cfg.patch_sides), "lambda_con": cfg.lambda_con,
               "val_acc": last["val_acc"], "val_auc": last["val_auc"], "n_params": res.model.num_parameters()}
        if test is not None:
            rep = evaluate_arrays(res.model, *test)
            row.update(test_acc=rep.acc, test_auc=rep.auc, test_mask_iou=rep.mask_iou)
        else:
            row.update(test_acc="", test_auc="", test_mask_iou="")
        rows.append(row)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATION_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out / "ablation.csv").write_text(buf.getvalue(), encoding="utf-8")
    return rows


# ---- desk preset end to end ------------------------------------------------

def desk_run(out_dir, preset: DeskPreset | None = None, variants: Sequence[str] = ("full",),
             progress: bool = False) -> dict:
    """Generate the desk splits, train each variant on them and score its best checkpoint.

    The checkpoint with the highest validation AUC is the one evaluated on
    both validation and test. Wall times are recorded per stage.
    """
    preset = preset or desk_preset()
    cfg = preset.config
    out = Path(out_dir)
    t0 = time.time()
    build_splits(out / "data", preset.split_sizes(), cfg.seed, cfg.image_size)
    summary = {"seed": cfg.seed, "config_hash": cfg.hash(), "cpu_count": os.cpu_count(),
               "data_seconds": time.time() - t0, "variants": {}}
    for name in variants:
        vcfg = cfg.replace(**ABLATIONS[name])
        t1 = time.time()
        res = train(vcfg, out / "data", out / name, progress=progress)
        train_seconds = time.time() - t1
        val = evaluate(res.best_path, out / "data" / "val")
        test = evaluate(res.best_path, out / "data" / "test")
        summary["variants"][name] = {
            "best_epoch": int(np.argmax([r["val_auc"] for r in res.history])),
            "val_auc": val["auc"], "val_mask_iou": val["mask_iou"],
            "test_auc": test["auc"], "test_acc": test["acc"], "test_mask_iou": test["mask_iou"],
            "train_seconds": train_seconds, "total_seconds": time.time() - t1 + summary["data_seconds"],
        }
    (out / "desk.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


def overfit_run(out_dir, preset: OverfitPreset | None = None, cfg: Config | None = None,
                progress: bool = False) -> dict:
    """Train on a tiny split, validating on the same samples, and report the final epoch loss."""
    preset = preset or overfit_preset()
    cfg = cfg or preset.config
    out = Path(out_dir)
    t0 = time.time()
    build_dataset(preset.train.n_real, preset.train.n_fake, cfg.seed, out / "data", image_size=cfg.image_size)
    res = train(cfg, out / "data", out / "run", val_dir=out / "data", progress=progress)
    last = res.history[-1]
    summary = {"epochs": cfg.epochs, "final_loss": last["loss"], "final_cls": last["cls"], "final_seg": last["seg"],
               "train_auc": last["val_auc"], "train_mask_iou": last.get("val_mask_iou"),
               "target_loss": preset.target_loss, "seconds": time.time() - t0}
    (out / "overfit.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


# ---- temporal head --------------------------------------------------------

def clip_features(model: M2TRModel, clips, frames_per_clip: int) -> tuple[np.ndarray, np.ndarray]:
    """Frozen per-frame features (n_clips, k, D) for ``k`` uniformly sampled frames per clip."""
    from m2tr.network import frame_features, sample_frames

    feats = [frame_features(model, sample_frames(frames, frames_per_clip)) for _, _, frames in clips]
    labels = np.array([label for _, label, _ in clips], dtype=np.int64)
    return np.stack(feats), labels


def train_temporal_head(feats: np.ndarray, labels: np.ndarray, epochs: int = 30, lr: float = 1e-3,
                        batch_size: int = 8, seed: int = 0, n_layers: int = 4, n_heads: int = 8):
    """Fit the clip-level encoder stack on frozen frame features with cross-entropy."""
    from m2tr.network import TemporalHead

    head = TemporalHead(feats.shape[2], feats.shape[1], n_layers, n_heads, seed=seed)
    opt = Adam(list(head.named_parameters()), lr=lr)
    rng = np.random.default_rng([seed, 40])
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            with GradContext() as ctx:
                loss = cls_loss(head(Tensor(feats[idx])), labels[idx].astype(np.float32))
            if not np.isfinite(float(loss.data)):
                raise NumericError("non-finite temporal head loss")
            head.zero_grad()
            backward(loss, ctx, head.parameters())
            opt.step()
    return head


def save_temporal_head(path, head, config: Config) -> None:
    tensors = {f"temporal/{k}": v for k, v in head.state_dict().items()}
    meta = {"kind": "temporal_head", "frames": head.frames_per_clip, "layers": len(head.layers),
            "heads": head.layers[0]._heads if head.layers else 0}
    ckpt.save(path, ckpt.Checkpoint(config, tensors, meta))


def load_temporal_head(path):
    from m2tr.network import TemporalHead

    ck = ckpt.load(path)
    if ck.meta.get("kind") != "temporal_head":
        raise DataError(f"{path} is not a temporal head checkpoint")
    params = ck.params("temporal/")
    head = TemporalHead(ck.config.feature_dim, ck.meta["frames"], ck.meta["layers"], ck.meta["heads"])
    try:
        head.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise DataError(f"temporal head checkpoint is inconsistent: {exc}") from exc
    return head
