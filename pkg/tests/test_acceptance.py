"""Acceptance criteria, one test each; every test prints a single [PASS]/[FAIL] line.

The desk-scale test trains the full preset (2000/400/400 samples, 10 epochs)
plus the no-frequency-filter variant used by the soft ablation check, so this
module dominates the suite's wall time.
"""

import json
import math
import os
import time

import numpy as np
import pytest

from m2tr.blocks import CrossModalityFusionBlock, MultiScaleTransformerBlock
from m2tr.cli import _gradcheck_targets, main
from m2tr.losses import cls_loss, contrastive_loss, seg_loss, total_loss
from m2tr.metrics import FlowField, ScoredSet, auc, ewarp, mask_ssim, perceptual_distance
from m2tr.network import M2TRModel, TemporalHead, forward, video_mean_forward, video_temporal_forward
from m2tr.numerics import ComplexSpectrum, Tensor, fft2d, gradcheck, ifft2d
from m2tr.errors import ShapeError
from m2tr.train import desk_run

from oracles import cmf_oracle, dft2_bruteforce, idft2_bruteforce, mst_oracle
from test_metrics import pairwise_auc, shift_left

DESK_AUC = 0.95
DESK_IOU = 0.70
DESK_SECONDS = 15 * 60
DESK_CORES = 4  # the wall-time budget is stated for a 4-core laptop


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def test_gradient_suite(criterion):
    start = time.process_time()
    errors = {}
    for name, (block, shapes) in _gradcheck_targets(0).items():
        errors[name] = gradcheck(block, shapes, seed=0)
    cpu = time.process_time() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and cpu < 60
    criterion("gradient suite", ok, f"{len(errors)} blocks, worst {worst} rel err {errors[worst]:.2e} "
                                    f"(< 1e-4), {cpu:.1f}s CPU (< 60s)")
    assert ok


def test_fft_oracle(criterion, rng):
    sides = [1, 2, 3, 4, 5, 8, 16]
    fwd = inv = parseval = 0.0
    for _ in range(50):
        h, w = rng.choice(sides, 2)
        c = int(rng.integers(1, 5))
        x = rng.standard_normal((h, w, c))
        s = fft2d(t64(x)).to_complex()
        want = dft2_bruteforce(x)
        fwd = max(fwd, np.abs(s - want).max())
        spec = rng.standard_normal((h, w, c)) + 1j * rng.standard_normal((h, w, c))
        back = ifft2d(ComplexSpectrum(t64(spec.real), t64(spec.imag))).data
        inv = max(inv, np.abs(back - idft2_bruteforce(spec).real).max())
        energy = (x ** 2).sum()
        parseval = max(parseval, abs(energy - (np.abs(s) ** 2).sum() / (h * w)) / energy)
    ok = fwd < 1e-5 and inv < 1e-5 and parseval < 1e-4
    criterion("FFT oracle", ok, f"50 inputs up to 16x16x4: fft max err {fwd:.1e}, ifft {inv:.1e} (< 1e-5); "
                                f"Parseval rel {parseval:.1e} (< 1e-4)")
    assert ok


def _randomize(block, rng, scale):
    for p in block.parameters():
        p.data = scale * rng.standard_normal(p.shape)
    return block


def test_attention_oracles(criterion, rng):
    mst_err = cmf_err = 0.0
    for i in range(20):
        side = int(rng.choice([2, 4]))
        c = int(rng.integers(1, 3))
        sides = [r for r in (4, 2, 1) if side % r == 0 and r <= side]
        patches = tuple(rng.choice(sides, size=int(rng.integers(1, len(sides) + 1)), replace=False))
        mode = ("paper", "sqrt_dim")[i % 2]
        blk = _randomize(MultiScaleTransformerBlock(rng, c, (side, side), patches, mode), rng, 0.7)
        x = rng.standard_normal((side, side, c))
        mst_err = max(mst_err, np.abs(blk(t64(x)).data - mst_oracle(blk, x)).max())
        fuse = _randomize(CrossModalityFusionBlock(rng, c, mode, ("rgb", "freq")[i % 3 == 2]), rng, 1.0)
        t, w = rng.standard_normal((2, side, side, c))
        cmf_err = max(cmf_err, np.abs(fuse(t64(t), t64(w)).data - cmf_oracle(fuse, t, w)).max())
    ok = mst_err < 1e-5 and cmf_err < 1e-5
    criterion("attention oracles", ok, f"20 parameterizations each on <= 4x4 grids: mst max err {mst_err:.1e}, "
                                       f"cmf {cmf_err:.1e} (< 1e-5)")
    assert ok


def test_loss_analytics(criterion, rng):
    half = [abs(float(cls_loss(np.full(7, 0.5), np.full(7, y)).data) - math.log(2)) for y in (0, 1)]
    half += [abs(float(seg_loss(np.full((6, 6), 0.5), np.full((6, 6), y)).data) - math.log(2)) for y in (0, 1)]
    invariance = 0.0
    for _ in range(20):
        f = rng.standard_normal((10, 6))
        y = np.r_[0, 1, rng.integers(0, 2, 8)]
        base = float(contrastive_loss(f, y).data)
        invariance = max(invariance, abs(float(contrastive_loss(f * rng.uniform(0.01, 100), y).data) - base))
    exact = all(float(total_loss(c, sg, k).data) == c + 1.0 * sg + 0.001 * k
                for c, sg, k in rng.standard_normal((20, 3)).tolist())
    ok = max(half) < 1e-6 and invariance < 1e-6 and exact
    criterion("loss analytics", ok, f"ln2 dev {max(half):.1e} (< 1e-6); contrastive scale dev {invariance:.1e} "
                                    f"(< 1e-6); cls + 1*seg + 0.001*con exact: {exact}")
    assert ok


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    summary = desk_run(out, variants=("full", "no_ff"))
    print(json.dumps(summary, sort_keys=True, indent=2))
    return summary


def test_desk_end_to_end(criterion, desk):
    full = desk["variants"]["full"]
    wall, cores = full["total_seconds"], desk["cpu_count"] or 1
    in_time = wall <= DESK_SECONDS if cores >= DESK_CORES else None
    ok = full["val_auc"] >= DESK_AUC and full["test_mask_iou"] >= DESK_IOU and in_time is not False
    timing = f"{wall / 60:.1f} min on {cores} core(s)"
    timing += " (<= 15)" if in_time is not None else f" (15 min budget gated only with >= {DESK_CORES} cores)"
    criterion("desk end-to-end", ok,
              f"seed 7, 10 epochs: val AUC {full['val_auc']:.4f} (>= {DESK_AUC}), test mask IoU "
              f"{full['test_mask_iou']:.4f} (>= {DESK_IOU}), wall {timing}")
    assert ok


def test_ablation_direction(criterion, desk):
    full, no_ff = desk["variants"]["full"], desk["variants"]["no_ff"]
    ok = full["test_auc"] >= no_ff["test_auc"]
    criterion("ablation direction (soft)", ok,
              f"test AUC full {full['test_auc']:.4f} vs no-FF {no_ff['test_auc']:.4f}", soft=True)


def test_auc_oracle(criterion, rng):
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        scores = np.round(rng.uniform(0, 1, n), int(rng.integers(1, 4)))
        mismatches += auc(ScoredSet(scores, labels)) != pairwise_auc(scores.tolist(), labels.tolist())
    criterion("AUC oracle", mismatches == 0, f"{100 - mismatches}/100 score sets equal the pairwise count exactly")
    assert mismatches == 0


def test_metric_identities(criterion, rng):
    ssim_dev = warp_err = perc = 0.0
    for _ in range(100):
        x = rng.uniform(0, 1, (16, 16, 3))
        m = rng.integers(0, 2, (16, 16))
        m[0, 0] = 1
        ssim_dev = max(ssim_dev, abs(mask_ssim(x, x, m) - 1.0))
        flow = np.zeros((16, 16, 2))
        flow[..., 0] = 1.0
        warp_err = max(warp_err, ewarp(x, shift_left(x), FlowField(flow)))
        a = rng.uniform(0, 1, (32, 32, 3))
        perc = max(perc, perceptual_distance(a, a))
    ok = ssim_dev < 1e-12 and warp_err < 1e-10 and perc == 0.0
    criterion("metric identities", ok, f"100 inputs: |mask_ssim(x,x)-1| {ssim_dev:.1e}, ewarp translation "
                                       f"{warp_err:.1e} (< 1e-10), perceptual(a,a) {perc}")
    assert ok


def _pipeline(root, cfg_path, capsys):
    data = root / "data"
    main(["--seed", "11", "--out", str(data / "train"), "gen-data", "--n-real", "6", "--n-fake", "6",
          "--image-size", "32"])
    main(["--seed", "12", "--out", str(data / "val"), "gen-data", "--n-real", "3", "--n-fake", "3",
          "--image-size", "32"])
    main(["--config", str(cfg_path), "--seed", "11", "--out", str(root / "run"), "train", "--data", str(data),
          "--quiet"])
    capsys.readouterr()
    main(["eval", "--checkpoint", str(root / "run" / "last.ckpt"), "--data", str(data / "val")])
    report = capsys.readouterr().out
    files = {p.relative_to(data).as_posix(): p.read_bytes() for p in sorted(data.rglob("*")) if p.is_file()}
    return files, report, (root / "run" / "last.ckpt").read_bytes()


def test_determinism(criterion, tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"image_size": 32, "stem_channels": 4, "feature_dim": 8, "n_stack": 1,
                                    "patch_sides": [8, 4], "batch_size": 4, "epochs": 2}))
    files_a, report_a, ckpt_a = _pipeline(tmp_path / "a", cfg_path, capsys)
    files_b, report_b, ckpt_b = _pipeline(tmp_path / "b", cfg_path, capsys)
    ok = files_a == files_b and report_a == report_b and ckpt_a == ckpt_b
    criterion("determinism", ok, f"{len(files_a)} dataset files byte-identical: {files_a == files_b}; "
                                 f"eval reports identical: {report_a == report_b}; checkpoints identical: "
                                 f"{ckpt_a == ckpt_b}")
    assert ok


def test_video_heads(criterion, tiny_config, rng):
    model = M2TRModel(tiny_config)
    model.head.fc.weight.data = rng.standard_normal(model.head.fc.weight.shape).astype(np.float32)
    dev = 0.0
    for k in (1, 3, 8):
        frame = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        dev = max(dev, abs(video_mean_forward(model, [frame] * k) - forward(model, frame)[0]))
    head = TemporalHead(tiny_config.feature_dim, frames_per_clip=4, n_layers=1, n_heads=2)
    frames = [rng.uniform(0, 1, (32, 32, 3)).astype(np.float32) for _ in range(6)]
    rejected = 0
    for n in (1, 3, 5, 6):
        try:
            video_temporal_forward(model, head, frames[:n])
        except ShapeError:
            rejected += 1
    accepted = 0 < video_temporal_forward(model, head, frames[:4]) < 1
    ok = dev < 1e-6 and rejected == 4 and accepted
    criterion("video heads", ok, f"mean over k identical frames vs frame score {dev:.1e} (< 1e-6); "
                                 f"temporal rejected {rejected}/4 wrong counts, accepted 4 frames: {accepted}")
    assert ok
