"""Classification, segmentation and contrastive losses and their weighted sum.

The cross-entropy terms are written as negative log-likelihoods so the
objective is minimized; the segmentation term is averaged over pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from m2tr.errors import DataError, NumericError
from m2tr.numerics import ops
from m2tr.numerics.tensor import Tensor

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    seg: float = 1.0
    con: float = 0.001

    def __post_init__(self):
        if self.seg < 0 or self.con < 0:
            raise ValueError("loss weights must be nonnegative")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _binary_targets(y, name: str) -> np.ndarray:
    arr = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if not np.all((arr == 0) | (arr == 1)):
        raise DataError(f"{name} must be 0/1")
    return arr


def _bce(p: Tensor, target: np.ndarray) -> Tensor:
    p = ops.clamp(p, EPS, 1.0 - EPS)
    t = Tensor(target.astype(p.dtype))
    pos = ops.mul(t, ops.log(p))
    neg = ops.mul(ops.sub(1.0, t), ops.log(ops.sub(1.0, p)))
    return ops.mul(ops.add(pos, neg), -1.0)


def cls_loss(y_hat, y) -> Tensor:
    """Mean binary cross-entropy of predicted fake-probabilities."""
    y_hat = _as_tensor(y_hat)
    target = _binary_targets(y, "labels")
    if target.shape != y_hat.shape:
        raise DataError(f"labels {target.shape} vs predictions {y_hat.shape}")
    return ops.mean(_bce(y_hat, target))


def seg_loss(mask_hat, mask) -> Tensor:
    """Per-pixel binary cross-entropy, averaged over all pixels (and the batch)."""
    mask_hat = _as_tensor(mask_hat)
    target = _binary_targets(mask, "mask")
    if target.shape != mask_hat.shape:
        raise DataError(f"mask {target.shape} vs prediction {mask_hat.shape}")
    return ops.mean(_bce(mask_hat, target))


@dataclass
class ContrastiveResult:
    value: Tensor
    skipped: bool


def contrastive_terms(features, labels) -> ContrastiveResult:
    """Pull real features toward their batch center and push fakes away.

    ``d = 1 - cos`` against the mean of the real features in the batch;
    gradients flow through the center. With no real samples the value is 0
    and ``skipped`` is set.
    """
    f = _as_tensor(features)
    y = _binary_targets(labels, "labels")
    if f.ndim != 2 or len(y) != f.shape[0]:
        raise DataError(f"features {f.shape} vs {len(y)} labels")
    norms = np.linalg.norm(f.data, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise NumericError("zero-norm or non-finite feature vector; cosine distance undefined")
    real_idx = np.flatnonzero(y == 0)
    fake_idx = np.flatnonzero(y == 1)
    if len(real_idx) == 0:
        return ContrastiveResult(Tensor(np.zeros((), dtype=f.dtype)), True)
    reals = ops.index_rows(f, real_idx)
    center = ops.mean(reals, axis=0)
    if np.linalg.norm(center.data) == 0:
        raise NumericError("real-feature center has zero norm")
    c_hat = ops.l2_normalize_rows(center)

    def mean_distance(rows: Tensor) -> Tensor:
        cos = ops.sum(ops.mul(ops.l2_normalize_rows(rows), c_hat), axis=1)
        return ops.mean(ops.sub(1.0, cos))

    value = mean_distance(reals)
    if len(fake_idx):
        value = ops.sub(value, mean_distance(ops.index_rows(f, fake_idx)))
    return ContrastiveResult(value, False)


def contrastive_loss(features, labels) -> Tensor:
    return contrastive_terms(features, labels).value


def total_loss(cls, seg, con, weights: LossWeights = LossWeights()) -> Tensor:
    return ops.add(ops.add(_as_tensor(cls), ops.mul(_as_tensor(seg), weights.seg)),
                   ops.mul(_as_tensor(con), weights.con))
