"""Full detector: conv stem, stacked attention/frequency/fusion stages, heads.

Also the two clip-level variants: feature averaging over frames and a
temporal transformer over per-frame features.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from m2tr.blocks import CrossModalityFusionBlock, FrequencyFilterBlock, MultiScaleTransformerBlock, NaiveFusion
from m2tr.config import Config
from m2tr.errors import ConfigError, ShapeError
from m2tr.numerics import ops
from m2tr.numerics.layers import BatchNorm, Conv2d, Dense, LayerNorm, Module, evaluating, param
from m2tr.numerics.tensor import Tensor, no_grad

RELU_GAIN = math.sqrt(2.0)


class Stem(Module):
    """Three 3x3 convolutions, two of them stride 2: (H, W, 3) -> (H/4, W/4, C).

    With ``norm=True`` the two stride-2 convolutions are followed by batch
    normalization before their ReLU.
    """

    def __init__(self, rng, channels: int, norm: bool = False):
        half = channels // 2
        self.conv1 = Conv2d(rng, 3, half, 3, stride=2, gain=RELU_GAIN)
        self.conv2 = Conv2d(rng, half, channels, 3, stride=2, gain=RELU_GAIN)
        self.conv3 = Conv2d(rng, channels, channels, 3)
        self.norm1 = BatchNorm(half) if norm else None
        self.norm2 = BatchNorm(channels) if norm else None

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(x)
        if self.norm1 is not None:
            h = self.norm1(h)
        h = self.conv2(ops.relu(h))
        if self.norm2 is not None:
            h = self.norm2(h)
        return self.conv3(ops.relu(h))


class Stage(Module):
    def __init__(self, rng, cfg: Config):
        grid = (cfg.grid, cfg.grid)
        c = cfg.stem_channels
        self.mst = None if cfg.ablate_mt else MultiScaleTransformerBlock(
            rng, c, grid, cfg.patch_sides, cfg.attention_scale)
        self.ff = None if cfg.ablate_ff else FrequencyFilterBlock(grid, c)
        if cfg.ablate_ff:
            self.fusion = None
        elif cfg.ablate_cmf:
            self.fusion = NaiveFusion(rng, c)
        else:
            self.fusion = CrossModalityFusionBlock(rng, c, cfg.attention_scale, cfg.cmf_query_source)

    def __call__(self, m: Tensor) -> Tensor:
        t = m if self.mst is None else self.mst(m)
        if self.ff is None:
            return t
        w = self.ff(m)
        return self.fusion(t, w)


class ClassificationHead(Module):
    """Two stride-2 convs and global pooling give f; a dense layer gives the logit."""

    def __init__(self, rng, channels: int, feature_dim: int):
        self.conv1 = Conv2d(rng, channels, feature_dim, 3, stride=2, gain=RELU_GAIN)
        self.conv2 = Conv2d(rng, feature_dim, feature_dim, 3, stride=2)
        self.fc = Dense(rng, feature_dim, 1)
        self.fc.weight.data[:] = 0  # start at y_hat = 0.5

    def features(self, m: Tensor) -> Tensor:
        return ops.global_avg_pool(self.conv2(ops.relu(self.conv1(m))))

    def logit(self, f: Tensor) -> Tensor:
        return ops.reshape(self.fc(f), (f.shape[0],))

    def __call__(self, m: Tensor) -> Tensor:
        return self.logit(self.features(m))


class MaskDecoder(Module):
    """Two [conv3x3, ReLU, bilinear x2] stages, then a 1x1 conv to one channel."""

    def __init__(self, rng, channels: int):
        half = channels // 2
        self.conv1 = Conv2d(rng, channels, channels, 3, gain=RELU_GAIN)
        self.conv2 = Conv2d(rng, channels, half, 3, gain=RELU_GAIN)
        self.out = Conv2d(rng, half, 1, 1)
        self.out.weight.data[:] = 0

    def logits(self, m: Tensor) -> Tensor:
        x = ops.upsample_bilinear(ops.relu(self.conv1(m)), 2)
        x = ops.upsample_bilinear(ops.relu(self.conv2(x)), 2)
        y = self.out(x)
        return ops.reshape(y, y.shape[:-1])

    def __call__(self, m: Tensor) -> Tensor:
        return self.logits(m)


class M2TRModel(Module):
    def __init__(self, cfg: Config, seed: int | None = None):
        cfg.validate()
        self._cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.stem = Stem(rng, cfg.stem_channels, norm=cfg.stem_norm == "batch")
        self.stages = [Stage(rng, cfg) for _ in range(cfg.n_stack)]
        self.head = ClassificationHead(rng, cfg.stem_channels, cfg.feature_dim)
        self.decoder = MaskDecoder(rng, cfg.stem_channels)

    @property
    def config(self) -> Config:
        return self._cfg

    def encode(self, images: Tensor) -> Tensor:
        """Image batch (B, H, W, 3) -> fused feature map M_out (B, H/4, W/4, C)."""
        if images.ndim == 3:
            images = ops.reshape(images, (1, *images.shape))
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ShapeError(f"expected (B, H, W, 3) images, got {images.shape}")
        h, w = images.shape[1:3]
        if h != self._cfg.image_size or w != self._cfg.image_size:
            raise ConfigError(f"model built for {self._cfg.image_size}px images, got {h}x{w}")
        # fixed affine map of [0, 1] pixels onto [-1, 1]; uncentred inputs train far slower
        m = self.stem(ops.sub(ops.mul(images, 2.0), 1.0))
        for stage in self.stages:
            m = stage(m)
        return m

    def forward_logits(self, images: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        m_out = self.encode(images)
        f = self.head.features(m_out)
        return self.head.logit(f), self.decoder.logits(m_out), f

    def __call__(self, images: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (score (B,), mask (B, H, W), features (B, D)); score and mask are probabilities."""
        logit, mask_logit, f = self.forward_logits(images)
        return ops.sigmoid(logit), ops.sigmoid(mask_logit), f

    def score_features(self, f: Tensor) -> Tensor:
        return ops.sigmoid(self.head.logit(f))


def forward(model: M2TRModel, image) -> tuple[float, np.ndarray, np.ndarray]:
    """Single (H, W, 3) image -> (probability, (H, W) mask, feature vector)."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
    with no_grad(), evaluating(model):
        y, mask, f = model(x)
    return float(y.data[0]), mask.data[0], f.data[0]


def predict_batch(model: M2TRModel, images: np.ndarray, batch_size: int = 32):
    """Scores, masks and features for a stack of images, in inference mode and without recording."""
    scores, masks, feats = [], [], []
    with no_grad(), evaluating(model):
        for start in range(0, len(images), batch_size):
            y, m, f = model(Tensor(np.asarray(images[start:start + batch_size], dtype=np.float32)))
            scores.append(y.data)
            masks.append(m.data)
            feats.append(f.data)
    return np.concatenate(scores), np.concatenate(masks), np.concatenate(feats)


# ---- clip-level variants -------------------------------------------------

def sample_frames(video: Sequence, k: int) -> list:
    """k frames at uniform intervals: index floor(i * n / k)."""
    n = len(video)
    if k < 1 or k > n:
        raise ShapeError(f"cannot sample {k} frames from {n}")
    return [video[(i * n) // k] for i in range(k)]


def frame_features(model: M2TRModel, frames: Sequence) -> np.ndarray:
    imgs = np.stack([np.asarray(f, dtype=np.float32) for f in frames])
    return predict_batch(model, imgs)[2]


def video_mean_forward(model: M2TRModel, frames: Sequence) -> float:
    """Average the per-frame features, then apply the frame model's final layer."""
    if len(frames) == 0:
        raise ShapeError("no frames")
    feats = frame_features(model, frames)
    with no_grad():
        y = model.score_features(Tensor(feats.mean(axis=0, keepdims=True)))
    return float(y.data[0])


class EncoderLayer(Module):
    """Pre-norm transformer encoder layer over a (B, T, D) sequence."""

    def __init__(self, rng, dim: int, n_heads: int, hidden: int):
        if dim % n_heads:
            raise ConfigError(f"feature width {dim} not divisible by {n_heads} heads")
        self.norm1 = LayerNorm(dim)
        self.q = Dense(rng, dim, dim)
        self.k = Dense(rng, dim, dim)
        self.v = Dense(rng, dim, dim)
        self.proj = Dense(rng, dim, dim)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Dense(rng, dim, hidden, gain=RELU_GAIN)
        self.fc2 = Dense(rng, hidden, dim)
        self._heads = n_heads

    def attention(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h, dh = self._heads, d // self._heads

        def split(z):
            return ops.transpose(ops.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        out = ops.matmul(ops.softmax_rows(scores), v)
        return self.proj(ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, t, d)))

    def __call__(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.attention(self.norm1(x)))
        return ops.add(x, self.fc2(ops.relu(self.fc1(self.norm2(x)))))


class TemporalHead(Module):
    """Stacked encoders over per-frame features with a learned frame-position embedding."""

    def __init__(self, feature_dim: int, frames_per_clip: int = 16, n_layers: int = 4, n_heads: int = 8,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.pos = param(0.02 * rng.standard_normal((frames_per_clip, feature_dim)))
        self.layers = [EncoderLayer(rng, feature_dim, n_heads, 2 * feature_dim) for _ in range(n_layers)]
        self.mlp1 = Dense(rng, feature_dim, feature_dim, gain=RELU_GAIN)
        self.mlp2 = Dense(rng, feature_dim, 1)
        self._frames = frames_per_clip

    @property
    def frames_per_clip(self) -> int:
        return self._frames

    def tokens(self, feats: Tensor) -> Tensor:
        if feats.ndim != 3 or feats.shape[1] != self._frames:
            raise ShapeError(f"temporal head expects (B, {self._frames}, D) features, got {feats.shape}")
        x = ops.add(feats, self.pos)
        for layer in self.layers:
            x = layer(x)
        return x

    def logit(self, feats: Tensor) -> Tensor:
        pooled = ops.mean(self.tokens(feats), axis=1)
        out = self.mlp2(ops.relu(self.mlp1(pooled)))
        return ops.reshape(out, (feats.shape[0],))

    def __call__(self, feats: Tensor) -> Tensor:
        return ops.sigmoid(self.logit(feats))


def video_temporal_forward(model: M2TRModel, head: TemporalHead, frames: Sequence) -> float:
    if len(frames) != head.frames_per_clip:
        raise ShapeError(f"temporal head needs exactly {head.frames_per_clip} frames, got {len(frames)}")
    feats = frame_features(model, frames)
    with no_grad():
        y = head(Tensor(feats[None]))
    return float(y.data[0])
