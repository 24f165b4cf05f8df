"""Detector scores (accuracy, AUC, mask IoU) and dataset-quality measures.

The quality measures compare a forged frame with its pristine source:
masked SSIM, a feature-pyramid perceptual distance, and the flow warping
error between consecutive frames.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from m2tr.errors import DataError, ShapeError
from m2tr.numerics import ops
from m2tr.numerics.layers import uniform_init
from m2tr.numerics.tensor import Tensor, no_grad


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if len(self.scores) == 0 or len(self.scores) != len(self.labels):
            raise DataError(f"need equal nonempty scores/labels, got {len(self.scores)}/{len(self.labels)}")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError("labels must be 0/1")


def accuracy(s: ScoredSet, threshold: float = 0.5) -> float:
    pred = (s.scores >= threshold).astype(np.int64)
    return float(np.mean(pred == s.labels))


def auc(s: ScoredSet) -> float:
    """Mann-Whitney form: P(score_pos > score_neg) + 0.5 P(tie)."""
    n_pos = int(s.labels.sum())
    n_neg = len(s.labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs at least one positive and one negative")
    ranks = rankdata(s.scores)  # average ranks settle ties at one half
    u = ranks[s.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mask_iou(pred: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> float:
    """IoU of the thresholded prediction; two empty masks count as a perfect match."""
    p = np.asarray(pred) >= threshold
    t = np.asarray(truth) >= 0.5
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


# ---- SSIM ---------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable, half-sample symmetric padding keeps every tap within the window's reach
    r = len(g) // 2
    p = np.pad(img, r, mode="symmetric")
    tmp = sum(g[i] * p[i:i + img.shape[0], :] for i in range(len(g)))
    return sum(g[j] * tmp[:, j:j + img.shape[1]] for j in range(len(g)))


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    g = gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    x, y = to_gray(a), to_gray(b)
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def mask_ssim(forged: np.ndarray, original: np.ndarray, face_mask: np.ndarray) -> float:
    """Mean SSIM over windows centred inside ``face_mask`` (grayscale by channel mean)."""
    if np.shape(forged) != np.shape(original):
        raise ShapeError(f"image shapes differ: {np.shape(forged)} vs {np.shape(original)}")
    m = np.asarray(face_mask) > 0.5
    if m.shape != np.shape(forged)[:2]:
        raise ShapeError(f"mask {m.shape} vs image {np.shape(forged)[:2]}")
    if not m.any():
        raise DataError("Mask-SSIM needs a nonempty face mask")
    return float(ssim_map(forged, original)[m].mean())


# ---- perceptual distance ------------------------------------------------

class FeaturePyramid:
    """Fixed random conv stack; each stage is conv3x3 stride 2 + ReLU and is one tap.

    Stands in for a pretrained classifier's relu activations.
    """

    def __init__(self, stages: Sequence[tuple[np.ndarray, np.ndarray, int, int]]):
        # (weight (k, k, cin, cout), bias, stride, padding)
        self.stages = [(Tensor(w.astype(np.float64)), Tensor(b.astype(np.float64)), s, p) for w, b, s, p in stages]

    @classmethod
    def random(cls, channels: Sequence[int] = (3, 16, 32, 64, 64, 64), seed: int = 2024) -> "FeaturePyramid":
        rng = np.random.default_rng(seed)
        stages = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            w = uniform_init(rng, (3, 3, cin, cout), 9 * cin, np.sqrt(2.0))
            stages.append((w, np.zeros(cout), 2, 1))
        return cls(stages)

    @classmethod
    def identity(cls, channels: int = 3) -> "FeaturePyramid":
        return cls([(np.eye(channels).reshape(1, 1, channels, channels), np.zeros(channels), 1, 0)])

    def taps(self, img: np.ndarray) -> list[np.ndarray]:
        x = Tensor(np.asarray(img, dtype=np.float64)[None])
        out = []
        with no_grad():
            for w, b, s, p in self.stages:
                x = ops.relu(ops.conv2d(x, w, b, s, p))
                out.append(x.data[0])
        return out


_DEFAULT_PYRAMID: FeaturePyramid | None = None


def default_pyramid() -> FeaturePyramid:
    global _DEFAULT_PYRAMID
    if _DEFAULT_PYRAMID is None:
        _DEFAULT_PYRAMID = FeaturePyramid.random()
    return _DEFAULT_PYRAMID


def perceptual_distance(a: np.ndarray, b: np.ndarray, taps: FeaturePyramid | None = None) -> float:
    """Mean over taps of the mean squared feature difference."""
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"image shapes differ: {np.shape(a)} vs {np.shape(b)}")
    pyramid = taps if taps is not None else default_pyramid()
    fa, fb = pyramid.taps(a), pyramid.taps(b)
    return float(np.mean([np.mean((x - y) ** 2) for x, y in zip(fa, fb)]))


# ---- warping error ------------------------------------------------------

@dataclass
class FlowField:
    """Per-pixel displacement (dx, dy) into the previous frame, plus occlusion (1 = occluded)."""

    flow: np.ndarray  # (H, W, 2)
    occlusion: np.ndarray | None = None  # (H, W)

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        if self.flow.ndim != 3 or self.flow.shape[-1] != 2:
            raise ShapeError(f"flow must be (H, W, 2), got {self.flow.shape}")
        if not np.all(np.isfinite(self.flow)):
            raise DataError("flow has non-finite entries")
        if self.occlusion is None:
            self.occlusion = np.zeros(self.flow.shape[:2])
        self.occlusion = np.asarray(self.occlusion, dtype=np.float64)
        if self.occlusion.shape != self.flow.shape[:2]:
            raise ShapeError("occlusion mask shape differs from flow")


def warp(frame: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample ``frame`` at p + flow(p); returns (warped, in-bounds mask)."""
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = xx + flow[..., 0]
    sy = yy + flow[..., 1]
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (sx - x0)[..., None]
    ty = (sy - y0)[..., None]
    out = (img[y0, x0] * (1 - tx) * (1 - ty) + img[y0, x1] * tx * (1 - ty)
           + img[y1, x0] * (1 - tx) * ty + img[y1, x1] * tx * ty)
    return out, valid


def ewarp(frame_t: np.ndarray, frame_t1: np.ndarray, flow: FlowField) -> float:
    """Mean squared difference between frame t+1 and warped frame t over visible pixels."""
    if np.shape(frame_t) != np.shape(frame_t1):
        raise ShapeError(f"frame shapes differ: {np.shape(frame_t)} vs {np.shape(frame_t1)}")
    if flow.flow.shape[:2] != np.shape(frame_t)[:2]:
        raise ShapeError("flow does not match frame size")
    warped, valid = warp(frame_t, flow.flow)
    target = np.asarray(frame_t1, dtype=np.float64)
    if target.ndim == 2:
        target = target[..., None]
    visible = valid & (flow.occlusion < 0.5)
    if not visible.any():
        return 0.0
    return float(((warped - target) ** 2)[visible].mean())


# ---- reports and exports ------------------------------------------------

def report(metric: str, value: float, n: int, config_hash: str) -> dict:
    return {"metric": metric, "value": float(value), "n": int(n), "config_hash": config_hash}


def write_report(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def export_features(model, dataset_dir, out) -> int:
    """Write ``id,label,f0..f{D-1}`` for every sample; returns the row count."""
    from m2tr.data import load_arrays, load_manifest
    from m2tr.network import predict_batch

    manifest = load_manifest(dataset_dir)
    images, _, labels = load_arrays(manifest)
    feats = predict_batch(model, images)[2]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "label"] + [f"f{i}" for i in range(feats.shape[1])])
    for sid, lab, f in zip(manifest.ids, labels, feats):
        writer.writerow([sid, int(lab)] + [repr(float(v)) for v in f])
    Path(out).write_bytes(buf.getvalue().encode("utf-8"))
    return len(manifest.ids)
