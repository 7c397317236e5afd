"""Dataset construction: bicubic degradation, pairing, PNG/manifest round trips.

The x4 degradation uses separable cubic-convolution resampling (kernel
parameter a = -0.5, antialiasing when downsampling, edge replication) so that
datasets regenerate bit-exactly from (images, seed).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

KERNEL_A = -0.5
DEGRADATION = {"method": "bicubic", "factor": 4, "kernel_a": KERNEL_A, "antialias": True}


@dataclass
class ImagePair:
    """One training/evaluation example; hr extent is 4x lr extent."""

    lr: np.ndarray
    ref: np.ndarray
    hr: np.ndarray
    degradation: dict = field(default_factory=lambda: dict(DEGRADATION))
    name: str = ""


def _cubic_weight(x: np.ndarray, a: float = KERNEL_A) -> np.ndarray:
    ax = np.abs(x)
    w = np.zeros_like(ax)
    inner = ax <= 1.0
    outer = (ax > 1.0) & (ax < 2.0)
    w[inner] = (a + 2.0) * ax[inner] ** 3 - (a + 3.0) * ax[inner] ** 2 + 1.0
    w[outer] = a * ax[outer] ** 3 - 5.0 * a * ax[outer] ** 2 + 8.0 * a * ax[outer] - 4.0 * a
    return w


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) row-stochastic resampling operator for one axis."""
    scale = n_in / n_out
    support = max(1.0, scale)  # antialiasing widens the kernel when shrinking
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        lo = int(np.floor(center - 2.0 * support)) + 1
        hi = int(np.ceil(center + 2.0 * support))
        taps = np.arange(lo, hi + 1)
        w = _cubic_weight((taps - center) / support)
        keep = w != 0.0
        taps, w = taps[keep], w[keep]
        w = w / w.sum()
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), w)  # edge replication
    return mat


def bicubic_resize(img: np.ndarray, out_extent: tuple[int, int]) -> np.ndarray:
    """Separable cubic-convolution resample of an (H, W[, C]) image in [0, 1]."""
    h_out, w_out = out_extent
    if img.shape[0] < 4 or img.shape[1] < 4 or h_out < 1 or w_out < 1:
        raise ValueError(f"degenerate extents: {img.shape[:2]} -> {out_extent}")
    arr = img.astype(np.float64, copy=False)
    rows = _resize_matrix(arr.shape[0], h_out)
    cols = _resize_matrix(arr.shape[1], w_out)
    out = np.tensordot(rows, arr, axes=(1, 0))
    out = np.tensordot(cols, out, axes=(1, 1))
    out = np.swapaxes(out, 0, 1)
    return np.clip(out, 0.0, 1.0)


def degrade(hr: np.ndarray, factor: int = 4) -> np.ndarray:
    """Bicubic downsample by ``factor``; extents must be divisible."""
    h, w = hr.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"HR extent {h}x{w} not divisible by factor {factor}")
    return bicubic_resize(hr, (h // factor, w // factor))


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid while staying in [0, 1] floats."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


# -- PNG io -------------------------------------------------------------------


def save_png(path: str, img: np.ndarray):
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


# -- synthetic fixtures --------------------------------------------------------


def synthesize_texture(extent: int, rng: np.random.Generator) -> np.ndarray:
    """Structured RGB test image: smooth base, solid rectangles, stripe band.

    Sharp edges make the bicubic upsampling baseline clearly beatable while
    keeping the content compressible enough to learn.
    """
    base = bicubic_resize(rng.random((4, 4, 3)), (extent, extent))
    img = base.copy()
    for _ in range(6):
        y0, x0 = rng.integers(0, extent - 4, size=2)
        hgt = int(rng.integers(extent // 8, extent // 2))
        wid = int(rng.integers(extent // 8, extent // 2))
        color = rng.random(3)
        img[y0 : y0 + hgt, x0 : x0 + wid] = 0.8 * color + 0.2 * img[y0 : y0 + hgt, x0 : x0 + wid]
    yy, xx = np.meshgrid(np.arange(extent), np.arange(extent), indexing="ij")
    period = int(rng.integers(3, 7))
    stripes = (((yy + xx) // period) % 2).astype(np.float64)
    band = slice(int(rng.integers(0, extent // 2)), int(rng.integers(extent // 2, extent)))
    channel = int(rng.integers(0, 3))
    img[band, :, channel] = 0.6 * stripes[band, :] + 0.4 * img[band, :, channel]
    return np.clip(img, 0.0, 1.0)


def stripe_mosaic(extent: int, rng: np.random.Generator) -> np.ndarray:
    """Tiled fine stripes/checkerboards with contrasting colors.

    Period 2-3 px detail is destroyed by x4 downsampling, so plain upsampling
    scores poorly while a reference carrying the same texture has everything
    needed: the fixture of choice for exercising reference-based restoration.
    """
    yy, xx = np.meshgrid(np.arange(extent), np.arange(extent), indexing="ij")
    img = np.zeros((extent, extent, 3))
    tile = extent // 2
    for ty in range(2):
        for tx in range(2):
            sl = (slice(ty * tile, (ty + 1) * tile), slice(tx * tile, (tx + 1) * tile))
            period = int(rng.integers(2, 4))
            kind = int(rng.integers(0, 4))
            y, x = yy[sl], xx[sl]
            if kind == 0:
                pat = (y // period) % 2
            elif kind == 1:
                pat = (x // period) % 2
            elif kind == 2:
                pat = ((y + x) // period) % 2
            else:
                pat = ((y // period) + (x // period)) % 2
            c0 = rng.random(3)
            c1 = np.clip(1.0 - c0 + rng.normal(0.0, 0.1, 3), 0.0, 1.0)
            img[sl] = pat[..., None] * c0 + (1 - pat[..., None]) * c1
    return np.clip(img, 0.0, 1.0)


def make_toy_images(out_dir: str, count: int = 8, extent: int = 64, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(count):
        path = os.path.join(out_dir, f"toy{i:02d}.png")
        save_png(path, stripe_mosaic(extent, rng))
        paths.append(path)
    return paths


# -- pairing and manifest ------------------------------------------------------

MANIFEST_COLUMNS = ["name", "lr", "ref", "hr", "method", "factor", "kernel_a", "antialias", "seed", "hr_crop"]


def center_crop_multiple(img: np.ndarray, multiple: int) -> tuple[np.ndarray, str]:
    """Center-crop to the largest extent divisible by ``multiple``."""
    h, w = img.shape[:2]
    h2, w2 = (h // multiple) * multiple, (w // multiple) * multiple
    if h2 < multiple or w2 < multiple:
        raise ValueError(f"image {h}x{w} too small for factor {multiple}")
    y, x = (h - h2) // 2, (w - w2) // 2
    note = f"{h}x{w}->{h2}x{w2}" if (h2, w2) != (h, w) else "none"
    return img[y : y + h2, x : x + w2], note


def prepare_pairs(
    hr_paths: list[str],
    out_dir: str,
    seed: int = 0,
    ref_mode: str = "self",
    hr_size: int | None = None,
) -> str:
    """Degrade HR images x4, pair each with a reference, write a manifest.

    ``ref_mode='self'`` pairs each image with its own HR as reference (the
    texture-transfer path carries the full answer; used for toy overfitting);
    ``'cycle'`` pairs image i with the HR of image i+1.

    Returns the manifest path. Deterministic for a fixed seed; unreadable
    inputs are skipped with a warning.
    """
    if ref_mode not in ("self", "cycle"):
        raise ValueError(f"unknown ref_mode {ref_mode!r}")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    images, names, notes = [], [], []
    for path in hr_paths:
        try:
            img = load_png(path)
        except Exception as exc:  # unreadable image: skip with warning
            import warnings

            warnings.warn(f"skipping unreadable image {path}: {exc}")
            continue
        if hr_size is not None:
            if img.shape[0] != hr_size or img.shape[1] != hr_size:
                img = bicubic_resize(img, (hr_size, hr_size))
            note = f"resized->{hr_size}x{hr_size}"
            img, crop_note = center_crop_multiple(img, 4)
            if crop_note != "none":
                note += f",{crop_note}"
        else:
            img, note = center_crop_multiple(img, 4)
        images.append(quantize(img))
        names.append(os.path.splitext(os.path.basename(path))[0])
        notes.append(note)
    if not images:
        raise ValueError("no readable HR images")

    for i, (hr, name, note) in enumerate(zip(images, names, notes)):
        lr = quantize(degrade(hr, 4))
        ref = images[i] if ref_mode == "self" else images[(i + 1) % len(images)]
        lr_path = os.path.join(out_dir, f"{name}_lr.png")
        hr_path = os.path.join(out_dir, f"{name}_hr.png")
        ref_path = os.path.join(out_dir, f"{name}_ref.png")
        save_png(lr_path, lr)
        save_png(hr_path, hr)
        save_png(ref_path, ref)
        rows.append(
            [name, os.path.basename(lr_path), os.path.basename(ref_path), os.path.basename(hr_path),
             "bicubic", "4", repr(KERNEL_A), "true", str(seed), note]
        )

    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w") as f:
        f.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for row in rows:
            f.write("\t".join(row) + "\n")
    return manifest


def load_manifest(manifest_path: str) -> list[ImagePair]:
    base = os.path.dirname(manifest_path)
    pairs = []
    with open(manifest_path) as f:
        header = f.readline().rstrip("\n").split("\t")
        if header != MANIFEST_COLUMNS:
            raise ValueError(f"manifest columns {header} != {MANIFEST_COLUMNS}")
        for line in f:
            row = dict(zip(header, line.rstrip("\n").split("\t")))
            pairs.append(
                ImagePair(
                    lr=load_png(os.path.join(base, row["lr"])),
                    ref=load_png(os.path.join(base, row["ref"])),
                    hr=load_png(os.path.join(base, row["hr"])),
                    degradation={"method": row["method"], "factor": int(row["factor"]),
                                 "kernel_a": float(row["kernel_a"]), "antialias": row["antialias"] == "true"},
                    name=row["name"],
                )
            )
    return pairs
