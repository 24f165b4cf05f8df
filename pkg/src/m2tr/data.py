"""Procedural face-like images, four forgery recipes, dataset files and epoch sampling.

Every random draw comes from a generator seeded by ``(seed, stream, index)``
so any single sample can be regenerated without the rest of the dataset.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from m2tr.errors import DataError
from m2tr.numerics.fft import fft2_array
from m2tr.numerics.tns import read_tns, write_tns

FORMAT_VERSION = 1
KINDS = ("splice", "color-shift", "blur-patch", "spectral-truncation")
FEATHER_RADIUS = 2
MASK_FRACTION = (0.01, 0.60)

# documented intensity ranges per recipe kind
INTENSITY_RANGES = {
    "splice": (0.7, 1.0),  # donor opacity inside the region
    "color-shift": (0.30, 0.50),  # offset magnitude and contrast reduction
    "blur-patch": (1.5, 3.0),  # gaussian sigma in pixels
    "spectral-truncation": (0.5, 0.75),  # fraction of frequencies removed per axis
}

CSV_COLUMNS = ("id", "path_image", "path_mask", "label", "recipe_kind")


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, *keys]))


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    label: int
    mask: np.ndarray  # (H, W) in {0, 1}
    id: str
    recipe_kind: str = "none"

    def check(self) -> None:
        if self.label == 0 and self.mask.any():
            raise DataError(f"{self.id}: real sample with nonzero mask")
        if self.label == 1:
            frac = float(self.mask.mean())
            if not MASK_FRACTION[0] <= frac <= MASK_FRACTION[1]:
                raise DataError(f"{self.id}: mask fraction {frac:.3f} outside {MASK_FRACTION}")


@dataclass
class ForgeryRecipe:
    kind: str
    shape: str  # "ellipse" or "rect"
    center: tuple[float, float]  # (row, col)
    axes: tuple[float, float]  # half-extents (rows, cols)
    intensity: float
    seed: int
    params: dict = field(default_factory=dict)

    def region(self, h: int, w: int) -> np.ndarray:
        """Boolean indicator of the manipulated region; errors if it leaves the image."""
        cy, cx = self.center
        ay, ax = self.axes
        if ay <= 0 or ax <= 0:
            raise DataError("region axes must be positive")
        if cy - ay < 0 or cx - ax < 0 or cy + ay > h or cx + ax > w:
            raise DataError(f"region {self.center}+-{self.axes} leaves the {h}x{w} image")
        yy, xx = np.mgrid[0:h, 0:w]
        py, px = yy + 0.5, xx + 0.5
        if self.shape == "rect":
            return (np.abs(py - cy) <= ay) & (np.abs(px - cx) <= ax)
        if self.shape == "ellipse":
            return ((py - cy) / ay) ** 2 + ((px - cx) / ax) ** 2 <= 1.0
        raise DataError(f"unknown region shape {self.shape!r}")


def generate_real(seed: int, h: int = 64, w: int = 64) -> Sample:
    """Smooth face-like picture: tinted gradient background, skin ellipse, eyes, mouth, mild noise."""
    rng = rng_for(seed, 1)
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    img = np.empty((h, w, 3))
    base = rng.uniform(0.15, 0.85, size=3)
    grad = rng.uniform(-0.25, 0.25, size=(2, 3))
    for c in range(3):
        img[..., c] = base[c] + grad[0, c] * (yy - 0.5) + grad[1, c] * (xx - 0.5)
    # low-frequency ripples
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.02, 0.06)
        img += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)[..., None]

    cy, cx = rng.uniform(0.42, 0.58) * h, rng.uniform(0.42, 0.58) * w
    ay, ax = rng.uniform(0.28, 0.38) * h, rng.uniform(0.22, 0.30) * w
    face = ((np.mgrid[0:h, 0:w][0] + 0.5 - cy) / ay) ** 2 + ((np.mgrid[0:h, 0:w][1] + 0.5 - cx) / ax) ** 2
    skin = np.array([rng.uniform(0.55, 0.9), rng.uniform(0.4, 0.7), rng.uniform(0.3, 0.55)])
    alpha = np.clip((1.0 - face) * 4.0, 0.0, 1.0)[..., None]
    shade = 1.0 - 0.25 * np.clip(face, 0, 1)[..., None]
    img = img * (1 - alpha) + skin * shade * alpha
    dark = rng.uniform(0.05, 0.25)
    for side in (-1, 1):
        ey, ex = cy - 0.25 * ay, cx + side * 0.4 * ax
        er = rng.uniform(0.06, 0.1) * ax
        d = ((np.mgrid[0:h, 0:w][0] + 0.5 - ey) ** 2 + (np.mgrid[0:h, 0:w][1] + 0.5 - ex) ** 2) / er ** 2
        a = np.exp(-d)[..., None]
        img = img * (1 - a) + dark * a
    my = cy + 0.45 * ay
    d = ((np.mgrid[0:h, 0:w][0] + 0.5 - my) / (0.06 * ay)) ** 2 + ((np.mgrid[0:h, 0:w][1] + 0.5 - cx) / (0.35 * ax)) ** 2
    a = 0.6 * np.exp(-d)[..., None]
    img = img * (1 - a) + np.array([0.5, 0.15, 0.15]) * a
    img = ndimage.gaussian_filter(img, sigma=(0.7, 0.7, 0))
    img += rng.normal(0.0, rng.uniform(0.03, 0.05), size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img, 0, np.zeros((h, w), dtype=np.float32), f"real-{seed}")


def random_recipe(kind: str, seed: int, h: int = 64, w: int = 64) -> ForgeryRecipe:
    """Draw a recipe whose region covers 1%..60% of the image and stays inside it."""
    if kind not in KINDS:
        raise DataError(f"unknown recipe kind {kind!r}")
    rng = rng_for(seed, 2)
    shape = "rect" if kind == "spectral-truncation" else str(rng.choice(["ellipse", "rect"]))
    lo, hi = INTENSITY_RANGES[kind]
    for _ in range(100):
        ay = rng.uniform(0.12, 0.38) * h
        ax = rng.uniform(0.12, 0.38) * w
        cy = rng.uniform(ay, h - ay)
        cx = rng.uniform(ax, w - ax)
        recipe = ForgeryRecipe(kind, shape, (cy, cx), (ay, ax), float(rng.uniform(lo, hi)), seed)
        frac = recipe.region(h, w).mean()
        if MASK_FRACTION[0] <= frac <= MASK_FRACTION[1]:
            if kind == "color-shift":
                direction = rng.normal(size=3)
                recipe.params["direction"] = (direction / np.linalg.norm(direction)).tolist()
            return recipe
    raise DataError("could not draw a region with a valid mask fraction")  # pragma: no cover


def feather_alpha(region: np.ndarray, radius: int = FEATHER_RADIUS) -> np.ndarray:
    """1 inside the region, ramping linearly to 0 over ``radius`` pixels outside it."""
    dist = ndimage.distance_transform_edt(~region)
    return np.clip(1.0 - dist / (radius + 1), 0.0, 1.0)


def lowpass_patch(patch: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Zero every DFT bin whose frequency index exceeds the cutoff on either axis."""
    ph, pw = patch.shape[:2]
    spec = fft2_array(patch, (0, 1))
    keep = frequency_keep_mask(ph, pw, keep_fraction)
    out = fft2_array(spec * keep[..., None], (0, 1), inverse=True).real
    return out


def frequency_keep_mask(ph: int, pw: int, keep_fraction: float) -> np.ndarray:
    fy = np.abs(np.fft.fftfreq(ph))
    fx = np.abs(np.fft.fftfreq(pw))
    cut = 0.5 * keep_fraction
    return (fy[:, None] <= cut) & (fx[None, :] <= cut)


def resample_half(img: np.ndarray) -> np.ndarray:
    """2x2 box downsample then linear upsample: the resampling trace of a warped, re-rendered face."""
    h, w = img.shape[:2]
    small = img.reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))
    return ndimage.zoom(small, (2, 2, 1), order=1, mode="nearest", grid_mode=True)[:h, :w]


def region_box(recipe: ForgeryRecipe, h: int, w: int) -> tuple[slice, slice]:
    rows, cols = np.nonzero(recipe.region(h, w))
    return slice(rows.min(), rows.max() + 1), slice(cols.min(), cols.max() + 1)


def generate_fake(base: Sample, recipe: ForgeryRecipe, donor: Sample | None = None) -> Sample:
    """Apply ``recipe`` inside its region of ``base``; the mask is the region indicator."""
    if base.label != 0:
        raise DataError("fakes are derived from real samples")
    if recipe.intensity <= 0:
        raise DataError("zero-intensity recipe leaves the image unchanged")
    lo, hi = INTENSITY_RANGES[recipe.kind]
    if not lo <= recipe.intensity <= hi:
        raise DataError(f"{recipe.kind} intensity {recipe.intensity} outside [{lo}, {hi}]")
    h, w = base.image.shape[:2]
    region = recipe.region(h, w)
    img = base.image.astype(np.float64)
    out = img.copy()
    if recipe.kind == "splice":
        if donor is None:
            donor = generate_real(recipe.seed ^ 0x5A5A5A, h, w)
        alpha = (recipe.intensity * feather_alpha(region))[..., None]
        out = img * (1 - alpha) + resample_half(donor.image.astype(np.float64)) * alpha
    elif recipe.kind == "color-shift":
        direction = np.asarray(recipe.params.get("direction", [1.0, -0.5, -0.5]))
        direction = direction / np.linalg.norm(direction)
        # colour grade of the region: offset along ``direction`` plus contrast pulled toward the region mean
        mean = img[region].mean(axis=0)
        graded = mean + (1.0 - recipe.intensity) * (img - mean) + recipe.intensity * direction
        out = np.where(region[..., None], graded, img)
    elif recipe.kind == "blur-patch":
        blurred = ndimage.gaussian_filter(img, sigma=(recipe.intensity, recipe.intensity, 0), mode="reflect")
        out = np.where(region[..., None], blurred, img)
    elif recipe.kind == "spectral-truncation":
        if recipe.shape != "rect":
            raise DataError("spectral truncation needs a rectangular region")
        rs, cs = region_box(recipe, h, w)
        patch = img[rs, cs]
        low = lowpass_patch(patch, 1.0 - recipe.intensity)
        # affine squeeze of the AC part keeps values in [0, 1] without adding high frequencies
        mu = low.mean(axis=(0, 1), keepdims=True)
        dev = low - mu
        with np.errstate(divide="ignore", invalid="ignore"):
            up = np.where(dev > 0, (1.0 - mu) / dev, np.inf)
            down = np.where(dev < 0, -mu / dev, np.inf)
        scale = min(1.0, float(np.min(up)), float(np.min(down)))
        out[rs, cs] = mu + scale * dev
    else:
        raise DataError(f"unknown recipe kind {recipe.kind!r}")
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return Sample(out, 1, region.astype(np.float32), f"fake-{recipe.seed}", recipe.kind)


# ---- dataset files -------------------------------------------------------

@dataclass
class Manifest:
    seed: int
    n_real: int
    n_fake: int
    image_size: int
    format_version: int = FORMAT_VERSION
    recipe_kinds: tuple[str, ...] = KINDS
    intensity_ranges: dict = field(default_factory=lambda: {k: list(v) for k, v in INTENSITY_RANGES.items()})
    feather_radius: int = FEATHER_RADIUS
    ids: list[str] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    kinds: list[str] = field(default_factory=list)
    root: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("root")
        d["recipe_kinds"] = list(self.recipe_kinds)
        for key in ("ids", "labels", "kinds"):
            d.pop(key)
        return json.dumps(d, sort_keys=True, indent=2) + "\n"


def make_sample(seed: int, index: int, n_real: int, h: int, w: int) -> Sample:
    """Sample ``index`` of a dataset: reals first, then fakes with kinds cycled."""
    if index < n_real:
        s = generate_real(int(rng_for(seed, 10, index).integers(2**31)), h, w)
        s.id = f"r{index:05d}"
        return s
    j = index - n_real
    kind = KINDS[j % len(KINDS)]
    base_seed, donor_seed, recipe_seed = (int(v) for v in rng_for(seed, 11, j).integers(2**31, size=3))
    base = generate_real(base_seed, h, w)
    donor = generate_real(donor_seed, h, w) if kind == "splice" else None
    fake = generate_fake(base, random_recipe(kind, recipe_seed, h, w), donor)
    fake.id = f"f{j:05d}"
    return fake


def build_dataset(n_real: int, n_fake: int, seed: int, out_dir, image_size: int = 64) -> Manifest:
    """Write images/, masks/, labels.csv and manifest.json; output is a pure function of the arguments."""
    if n_real < 0 or n_fake < 0 or n_real + n_fake == 0:
        raise DataError("need at least one sample")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    manifest = Manifest(seed, n_real, n_fake, image_size, root=str(out))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for i in range(n_real + n_fake):
        s = make_sample(seed, i, n_real, image_size, image_size)
        s.check()
        img_rel, mask_rel = f"images/{s.id}.tns", f"masks/{s.id}.tns"
        write_tns(out / img_rel, s.image)
        write_tns(out / mask_rel, s.mask)
        writer.writerow((s.id, img_rel, mask_rel, s.label, s.recipe_kind))
        manifest.ids.append(s.id)
        manifest.labels.append(s.label)
        manifest.kinds.append(s.recipe_kind)
    (out / "labels.csv").write_bytes(buf.getvalue().encode("utf-8"))
    (out / "manifest.json").write_bytes(manifest.to_json().encode("utf-8"))
    return manifest


def build_splits(out_dir, sizes: dict[str, tuple[int, int]], seed: int, image_size: int = 64) -> dict:
    """One dataset per named split, the i-th split seeded with ``seed + i``."""
    summary = {}
    for offset, (name, (n_real, n_fake)) in enumerate(sizes.items()):
        m = build_dataset(n_real, n_fake, seed + offset, Path(out_dir) / name, image_size)
        summary[name] = {"n_real": m.n_real, "n_fake": m.n_fake, "seed": seed + offset}
    return summary


def load_manifest(dataset_dir) -> Manifest:
    root = Path(dataset_dir)
    try:
        meta = json.loads((root / "manifest.json").read_text())
        with open(root / "labels.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset at {root}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"dataset format {meta.get('format_version')} != {FORMAT_VERSION}")
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise DataError("labels.csv header mismatch")
    body = rows[1:]
    m = Manifest(meta["seed"], meta["n_real"], meta["n_fake"], meta["image_size"], root=str(root))
    for row in body:
        if len(row) != len(CSV_COLUMNS):
            raise DataError(f"malformed labels.csv row {row}")
        m.ids.append(row[0])
        m.labels.append(int(row[3]))
        m.kinds.append(row[4])
    if sum(m.labels) != m.n_fake or len(m.labels) - sum(m.labels) != m.n_real:
        raise DataError(f"labels.csv counts disagree with manifest ({m.n_real} real / {m.n_fake} fake)")
    return m


def load_arrays(manifest: Manifest) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All images (N, H, W, 3), masks (N, H, W) and labels (N,) of a dataset."""
    root = Path(manifest.root)
    images = np.stack([read_tns(root / "images" / f"{i}.tns") for i in manifest.ids])
    masks = np.stack([read_tns(root / "masks" / f"{i}.tns") for i in manifest.ids])
    labels = np.asarray(manifest.labels, dtype=np.int64)
    if images.shape[1:] != (manifest.image_size, manifest.image_size, 3):
        raise DataError(f"image shape {images.shape[1:]} does not match manifest size {manifest.image_size}")
    for lab, m, sid in zip(labels, masks, manifest.ids):
        if lab == 0 and m.any():
            raise DataError(f"{sid}: real sample with nonzero mask")
    return images, masks, labels


def balanced_epoch(manifest: Manifest, seed: int, epoch: int = 0) -> list[str]:
    """Repeat each real id ceil(n_fake / n_real) times, fakes once, shuffled by (seed, epoch)."""
    reals = [i for i, y in zip(manifest.ids, manifest.labels) if y == 0]
    fakes = [i for i, y in zip(manifest.ids, manifest.labels) if y == 1]
    reps = max(1, math.ceil(len(fakes) / len(reals))) if reals else 0
    order = reals * reps + fakes
    perm = rng_for(seed, 20, epoch).permutation(len(order))
    return [order[i] for i in perm]


# ---- clips ----------------------------------------------------------------

def generate_clip(seed: int, n_frames: int, fake: bool, h: int = 64, w: int = 64) -> tuple[list[np.ndarray], int]:
    """A short sequence: one face drifting by sub-pixel translations; fakes carry
    the same recipe in every frame."""
    rng = rng_for(seed, 30)
    base = generate_real(int(rng.integers(2**31)), h, w)
    if fake:
        kind = KINDS[int(rng.integers(len(KINDS)))]
        donor = generate_real(int(rng.integers(2**31)), h, w)
        base = generate_fake(base, random_recipe(kind, int(rng.integers(2**31)), h, w), donor)
    drift = rng.uniform(-0.3, 0.3, size=2)
    frames = []
    for t in range(n_frames):
        shifted = ndimage.shift(base.image.astype(np.float64), (drift[0] * t, drift[1] * t, 0), order=1, mode="nearest")
        noise = rng.normal(0, 0.01, size=shifted.shape)
        frames.append(np.clip(shifted + noise, 0, 1).astype(np.float32))
    return frames, int(fake)


def build_clips(n_real: int, n_fake: int, n_frames: int, seed: int, out_dir, image_size: int = 64) -> list[tuple[str, int]]:
    out = Path(out_dir)
    rows = []
    for i in range(n_real + n_fake):
        fake = i >= n_real
        frames, label = generate_clip(int(rng_for(seed, 31, i).integers(2**31)), n_frames, fake, image_size, image_size)
        cid = f"clip{i:04d}"
        (out / cid).mkdir(parents=True, exist_ok=True)
        for t, fr in enumerate(frames):
            write_tns(out / cid / f"frame_{t:03d}.tns", fr)
        rows.append((cid, label))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("id", "label", "n_frames"))
    for cid, label in rows:
        writer.writerow((cid, label, n_frames))
    (out / "clips.csv").write_bytes(buf.getvalue().encode("utf-8"))
    return rows


def load_clips(clip_dir) -> list[tuple[str, int, list[np.ndarray]]]:
    root = Path(clip_dir)
    try:
        with open(root / "clips.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read clips at {root}: {exc}") from exc
    clips = []
    for row in rows:
        frames = [read_tns(p) for p in sorted((root / row["id"]).glob("frame_*.tns"))]
        if len(frames) != int(row["n_frames"]):
            raise DataError(f"{row['id']}: expected {row['n_frames']} frames, found {len(frames)}")
        clips.append((row["id"], int(row["label"]), frames))
    return clips


def label_histogram(kinds: Sequence[str]) -> dict[str, int]:
    return {k: sum(1 for x in kinds if x == k) for k in KINDS}
