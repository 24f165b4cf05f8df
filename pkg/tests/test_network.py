import math

import numpy as np
import pytest

from m2tr.config import Config
from m2tr.errors import ConfigError, ShapeError
from m2tr.network import (
    M2TRModel,
    TemporalHead,
    forward,
    predict_batch,
    sample_frames,
    video_mean_forward,
    video_temporal_forward,
)
from m2tr.numerics import KERNEL_CALLS, Tensor, gradcheck, no_grad


def config_for(size, **kw):
    s = size // 4
    return Config(image_size=size, patch_sides=(s, s // 2, s // 4, s // 8), **kw)


@pytest.mark.parametrize("size", [32, 64, 128])
def test_shape_contract(size, rng):
    cfg = config_for(size)
    model = M2TRModel(cfg)
    x = Tensor(rng.uniform(0, 1, (1, size, size, 3)).astype(np.float32))
    with no_grad():
        feat = model.stem(x)
        assert feat.shape == (1, size // 4, size // 4, cfg.stem_channels)
        y, mask, f = model(x)
    assert y.shape == (1,) and mask.shape == (1, size, size) and f.shape == (1, cfg.feature_dim)
    assert 0 < y.data[0] < 1
    assert mask.data.min() > 0 and mask.data.max() < 1


def test_default_model_sizes(rng):
    model = M2TRModel(Config())
    img = rng.uniform(0, 1, (64, 64, 3))
    with no_grad():
        assert model.encode(Tensor(img.astype(np.float32))).shape == (1, 16, 16, 32)
    score, mask, f = forward(model, img)
    assert isinstance(score, float) and mask.shape == (64, 64) and f.shape == (128,)
    assert len(model.stages) == 4


def test_bad_input_size(tiny_config, rng):
    model = M2TRModel(tiny_config)
    with pytest.raises(ConfigError):
        model(Tensor(np.zeros((1, 64, 64, 3), np.float32)))
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((1, 32, 32, 4), np.float32)))
    with pytest.raises(ConfigError):
        Config(image_size=48).validate()


def test_seeded_forward_is_bitwise_deterministic(tiny_config, rng):
    x = rng.uniform(0, 1, (3, 32, 32, 3)).astype(np.float32)
    a = predict_batch(M2TRModel(tiny_config), x)
    b = predict_batch(M2TRModel(tiny_config), x)
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_ablations_shrink_the_model(tiny_config):
    full = M2TRModel(tiny_config).num_parameters()
    for flags in [dict(ablate_mt=True), dict(ablate_ff=True), dict(ablate_mt=True, ablate_ff=True, ablate_cmf=True)]:
        assert M2TRModel(tiny_config.replace(**flags)).num_parameters() < full
    # naive concat fusion swaps CMF for a 2C->C conv, which is not necessarily smaller
    assert M2TRModel(tiny_config.replace(ablate_cmf=True)).stages[0].fusion is not None
    bare = M2TRModel(tiny_config.replace(ablate_mt=True, ablate_ff=True, ablate_cmf=True))
    assert all(s.mst is None and s.ff is None and s.fusion is None for s in bare.stages)


def test_no_fft_when_frequency_branch_disabled(tiny_config, rng):
    x = Tensor(rng.uniform(0, 1, (2, 32, 32, 3)).astype(np.float32))
    KERNEL_CALLS.clear()
    with no_grad():
        M2TRModel(tiny_config.replace(ablate_ff=True))(x)
    assert sum(KERNEL_CALLS.values()) == 0
    with no_grad():
        M2TRModel(tiny_config)(x)
    assert KERNEL_CALLS["fft2d"] == tiny_config.n_stack


def test_full_model_gradients(tiny_config):
    model = M2TRModel(tiny_config)
    rng = np.random.default_rng(0)
    for p in (model.head.fc.weight, model.decoder.out.weight):  # zero at init; perturb so upstream grads are live
        p.data = 0.3 * rng.standard_normal(p.shape)
    # a bias nudge moves every pixel at once, so eps=1e-4 straddles ReLU kinks; 1e-6 does not
    assert gradcheck(model, [(2, 32, 32, 3)], seed=4, max_entries=6, eps=1e-6) < 1e-4


# ---- clip-level variants ----------------------------------------------------

def test_sample_frames():
    video = list(range(32))
    assert sample_frames(video, 16) == list(range(0, 32, 2))
    assert sample_frames(video[:5], 5) == video[:5]
    seventeen = list(range(17))
    expected = [int(v) for v in np.floor(np.linspace(0, 17, 16, endpoint=False))]
    assert sample_frames(seventeen, 16) == expected
    with pytest.raises(ShapeError):
        sample_frames(video[:3], 4)


def test_video_mean_forward(tiny_config, rng):
    model = M2TRModel(tiny_config)
    model.head.fc.weight.data = rng.standard_normal(model.head.fc.weight.shape).astype(np.float32)
    frame = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
    single, _, _ = forward(model, frame)
    assert abs(video_mean_forward(model, [frame] * 5) - single) < 1e-6
    frames = [rng.uniform(0, 1, (32, 32, 3)).astype(np.float32) for _ in range(4)]
    assert video_mean_forward(model, frames) == pytest.approx(video_mean_forward(model, frames[::-1]), abs=1e-6)
    fa, fb = forward(model, frames[0])[2], forward(model, frames[1])[2]
    w = model.head.fc.weight.data[:, 0].astype(np.float64)
    b = float(model.head.fc.bias.data[0])
    manual = 1 / (1 + math.exp(-(0.5 * (fa + fb) @ w + b)))
    assert video_mean_forward(model, frames[:2]) == pytest.approx(manual, abs=1e-6)


def test_temporal_rejects_wrong_frame_count(tiny_config, rng):
    model = M2TRModel(tiny_config)
    head = TemporalHead(tiny_config.feature_dim, frames_per_clip=4, n_layers=1, n_heads=2)
    frames = [rng.uniform(0, 1, (32, 32, 3)).astype(np.float32) for _ in range(4)]
    score = video_temporal_forward(model, head, frames)
    assert 0 < score < 1
    for n in (3, 5):
        with pytest.raises(ShapeError):
            video_temporal_forward(model, head, frames[:3] if n == 3 else frames + frames[:1])


def test_temporal_symmetry_without_positions(rng):
    head = TemporalHead(8, frames_per_clip=5, n_layers=2, n_heads=2, seed=1)
    head.pos.data[:] = 0
    feats = np.tile(rng.standard_normal(8), (1, 5, 1))
    with no_grad():
        toks = head.tokens(Tensor(feats)).data[0]
    np.testing.assert_allclose(toks, np.broadcast_to(toks[0], toks.shape), atol=1e-6)


def encoder_oracle(head: TemporalHead, feats: np.ndarray) -> float:
    """Explicit loops over frames, heads and feature indices."""

    def lnorm(v, g, b):
        mu = sum(v) / len(v)
        var = sum((a - mu) ** 2 for a in v) / len(v)
        return [(a - mu) / math.sqrt(var + 1e-5) * g[i] + b[i] for i, a in enumerate(v)]

    def dense(v, layer):
        w, b = layer.weight.data, layer.bias.data
        return [b[o] + sum(v[i] * w[i, o] for i in range(len(v))) for o in range(w.shape[1])]

    xs = [[feats[t, i] + head.pos.data[t, i] for i in range(feats.shape[1])] for t in range(feats.shape[0])]
    for layer in head.layers:
        d, nh = len(xs[0]), layer._heads
        dh = d // nh
        normed = [lnorm(x, layer.norm1.gamma.data, layer.norm1.beta.data) for x in xs]
        q = [dense(x, layer.q) for x in normed]
        k = [dense(x, layer.k) for x in normed]
        v = [dense(x, layer.v) for x in normed]
        att = [[0.0] * d for _ in xs]
        for h in range(nh):
            sl = range(h * dh, (h + 1) * dh)
            for t in range(len(xs)):
                s = [sum(q[t][i] * k[u][i] for i in sl) / math.sqrt(dh) for u in range(len(xs))]
                m = max(s)
                e = [math.exp(a - m) for a in s]
                z = sum(e)
                for i in sl:
                    att[t][i] = sum(e[u] / z * v[u][i] for u in range(len(xs)))
        xs = [[a + b for a, b in zip(x, dense(o, layer.proj))] for x, o in zip(xs, att)]
        hidden = [[max(0.0, a) for a in dense(lnorm(x, layer.norm2.gamma.data, layer.norm2.beta.data), layer.fc1)]
                  for x in xs]
        xs = [[a + b for a, b in zip(x, dense(hd, layer.fc2))] for x, hd in zip(xs, hidden)]
    pooled = [sum(x[i] for x in xs) / len(xs) for i in range(len(xs[0]))]
    logit = dense([max(0.0, a) for a in dense(pooled, head.mlp1)], head.mlp2)[0]
    return 1 / (1 + math.exp(-logit))


def test_temporal_head_matches_loop_oracle(rng):
    head = TemporalHead(4, frames_per_clip=2, n_layers=2, n_heads=2, seed=3).astype(np.float64)
    for p in head.parameters():
        p.data = rng.standard_normal(p.shape) * 0.5
    feats = rng.standard_normal((2, 4))
    with no_grad():
        got = float(head(Tensor(feats[None])).data[0])
    assert got == pytest.approx(encoder_oracle(head, feats), abs=1e-5)


def test_temporal_head_gradients(rng):
    head = TemporalHead(8, frames_per_clip=3, n_layers=1, n_heads=2, seed=2)
    assert gradcheck(head, [(2, 3, 8)], seed=5) < 1e-4
