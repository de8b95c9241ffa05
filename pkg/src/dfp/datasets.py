"""Dataset loading and procedural generation.

Sources accepted by make_dataset:

  * a directory containing IDX image/label files (train-images-idx3-ubyte,
    train-labels-idx1-ubyte, t10k-... for the validation split; dotted
    variants of the names are also accepted),
  * "glyphs:train=N,test=M"  procedural 28x28 digit images, 10 classes,
  * "gauss2:n=N"             two 2D Gaussian blobs, 2 classes,
  * "linreg:n=N,slope=A,intercept=B,noise=S"  scalar regression pairs.

Images are scaled to [0, 1] and then standardized with the training
split's scalar mean/std; the same normalization constants are applied to
the validation split and are recorded on the handle, so every precision
mode sees bit-identical inputs for a given source and seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from typing import Dict, Optional, Tuple

import numpy as np

from .fileio import read_idx_images, read_idx_labels

# === handle ===


@dataclasses.dataclass
class DatasetHandle:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    source: str
    mean: float
    std: float
    checksum: str
    n_classes: int

    @property
    def in_shape(self) -> Tuple[int, ...]:
        return self.train_x.shape[1:]


def _finish(source: str, train_x, train_y, val_x, val_y, n_classes,
            normalize: bool = True) -> DatasetHandle:
    train_x = np.asarray(train_x, np.float32)
    val_x = np.asarray(val_x, np.float32)
    digest = hashlib.sha256()
    for arr in (train_x, train_y, val_x, val_y):
        digest.update(np.ascontiguousarray(arr).tobytes())
    if normalize:
        mean = float(train_x.mean())
        std = float(train_x.std())
        if std < 1e-8:
            raise ValueError(f"{source}: degenerate data, std={std}")
        train_x = ((train_x - np.float32(mean)) / np.float32(std)).astype(np.float32)
        val_x = ((val_x - np.float32(mean)) / np.float32(std)).astype(np.float32)
    else:
        mean, std = 0.0, 1.0
    return DatasetHandle(train_x, train_y, val_x, val_y, source, mean, std,
                         digest.hexdigest(), n_classes)


def _parse_kv(body: str, defaults: Dict[str, float]) -> Dict[str, float]:
    out = dict(defaults)
    if body:
        for item in body.split(","):
            if "=" not in item:
                raise ValueError(f"bad dataset parameter {item!r}")
            k, v = item.split("=", 1)
            if k not in defaults:
                raise ValueError(f"unknown dataset parameter {k!r}")
            out[k] = float(v)
    return out


# === procedural glyph images ===

# Stroke skeletons for the ten digit classes, unit square coordinates
# (x right, y down).  Each class is a list of polylines.
_GLYPH_STROKES = {
    0: [[(0.5 + 0.30 * np.sin(a), 0.5 - 0.40 * np.cos(a))
         for a in np.linspace(0, 2 * np.pi, 13)]],
    1: [[(0.35, 0.25), (0.52, 0.08), (0.52, 0.92)]],
    2: [[(0.22, 0.30), (0.30, 0.12), (0.50, 0.08), (0.70, 0.12), (0.78, 0.30),
         (0.68, 0.50), (0.30, 0.75), (0.22, 0.92), (0.80, 0.92)]],
    3: [[(0.25, 0.12), (0.50, 0.08), (0.74, 0.22), (0.58, 0.44), (0.45, 0.50),
         (0.60, 0.55), (0.78, 0.70), (0.60, 0.90), (0.30, 0.92), (0.22, 0.80)]],
    4: [[(0.58, 0.08), (0.18, 0.58), (0.85, 0.58)], [(0.62, 0.30), (0.62, 0.92)]],
    5: [[(0.75, 0.10), (0.30, 0.10), (0.27, 0.45), (0.55, 0.42), (0.74, 0.55),
         (0.72, 0.78), (0.50, 0.90), (0.25, 0.82)]],
    6: [[(0.65, 0.10), (0.40, 0.30), (0.28, 0.55), (0.30, 0.78), (0.50, 0.90),
         (0.70, 0.80), (0.72, 0.60), (0.50, 0.50), (0.32, 0.62)]],
    7: [[(0.20, 0.10), (0.80, 0.10), (0.45, 0.92)], [(0.35, 0.50), (0.65, 0.50)]],
    8: [[(0.5 + 0.20 * np.sin(a), 0.30 - 0.20 * np.cos(a))
         for a in np.linspace(0, 2 * np.pi, 11)],
        [(0.5 + 0.23 * np.sin(a), 0.72 - 0.22 * np.cos(a))
         for a in np.linspace(0, 2 * np.pi, 11)]],
    9: [[(0.5 + 0.22 * np.sin(a), 0.32 - 0.22 * np.cos(a))
         for a in np.linspace(0, 2 * np.pi, 11)],
        [(0.72, 0.36), (0.66, 0.92)]],
}

_GLYPH_SIZE = 28


def _render_glyph(label: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterize one jittered digit as a float32 image in [0, 1]."""
    theta = rng.uniform(-0.21, 0.21)
    sx, sy = rng.uniform(0.85, 1.15, size=2)
    shear = rng.uniform(-0.12, 0.12)
    tx, ty = rng.uniform(-1.8, 1.8, size=2)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    aff = rot @ np.array([[sx, shear * sx], [0.0, sy]])
    size = _GLYPH_SIZE
    segs_a, segs_b = [], []
    for stroke in _GLYPH_STROKES[label]:
        pts = np.asarray(stroke, np.float64) - 0.5
        pts = pts @ aff.T * 20.0 + (size - 1) / 2.0 + np.array([tx, ty])
        segs_a.append(pts[:-1])
        segs_b.append(pts[1:])
    a = np.concatenate(segs_a)          # (s, 2) segment starts
    b = np.concatenate(segs_b)          # (s, 2) segment ends
    yy, xx = np.mgrid[0:size, 0:size]
    pix = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    ab = b - a                          # point-to-segment distances
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    ap = pix[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab[None, :, :]).sum(axis=2) / denom, 0.0, 1.0)
    closest = a[None, :, :] + t[..., None] * ab[None, :, :]
    d2 = ((pix[:, None, :] - closest) ** 2).sum(axis=2).min(axis=1)
    img = np.exp(-d2 / (0.9 ** 2)).reshape(size, size)
    img += rng.normal(0.0, 0.03, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_glyphs(n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """n procedural digit images, balanced labels in shuffled order."""
    labels = rng.permutation(np.arange(n) % 10).astype(np.int64)
    images = np.stack([_render_glyph(int(l), rng) for l in labels])
    return images[:, None, :, :], labels


# === synthetic numeric datasets ===


def _make_gauss2(n_train: int, n_val: int, rng: np.random.Generator):
    def split(n):
        y = rng.permutation(np.arange(n) % 2).astype(np.int64)
        centers = np.where(y[:, None] == 0, -1.2, 1.2).astype(np.float64)
        x = centers + rng.normal(0.0, 0.45, (n, 2))
        return x.astype(np.float32), y
    tx, ty = split(n_train)
    vx, vy = split(n_val)
    return tx, ty, vx, vy


def _make_linreg(n: int, slope: float, intercept: float, noise: float,
                 rng: np.random.Generator):
    def split(count):
        x = rng.uniform(-1.0, 1.0, (count, 1))
        y = slope * x + intercept + noise * rng.normal(0.0, 1.0, (count, 1))
        return x.astype(np.float32), y.astype(np.float32)
    tx, ty = split(n)
    vx, vy = split(max(16, n // 4))
    return tx, ty, vx, vy


# === IDX directory loading ===


def _find_idx(directory: str, stem: str) -> str:
    for name in (f"{stem.replace('.', '-')}", stem,
                 f"{stem.replace('-idx', '.idx')}"):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {stem} (or dotted variant) in {directory}")


def _load_idx_dir(directory: str):
    tx = read_idx_images(_find_idx(directory, "train-images-idx3-ubyte"))
    ty = read_idx_labels(_find_idx(directory, "train-labels-idx1-ubyte"))
    vx = read_idx_images(_find_idx(directory, "t10k-images-idx3-ubyte"))
    vy = read_idx_labels(_find_idx(directory, "t10k-labels-idx1-ubyte"))
    if tx.shape[0] != ty.shape[0] or vx.shape[0] != vy.shape[0]:
        raise ValueError(f"{directory}: image/label counts disagree")
    scale = np.float32(1.0 / 255.0)
    return (tx[:, None].astype(np.float32) * scale, ty.astype(np.int64),
            vx[:, None].astype(np.float32) * scale, vy.astype(np.int64))


# === dispatch ===


def make_dataset(source: str, seed: int) -> DatasetHandle:
    if os.path.isdir(source):
        tx, ty, vx, vy = _load_idx_dir(source)
        return _finish(source, tx, ty, vx, vy, n_classes=int(ty.max()) + 1)

    kind, _, body = source.partition(":")
    if kind == "glyphs":
        p = _parse_kv(body, {"train": 4096, "test": 1024})
        rng_t = np.random.default_rng(np.random.SeedSequence([seed, 101]))
        rng_v = np.random.default_rng(np.random.SeedSequence([seed, 102]))
        tx, ty = make_glyphs(int(p["train"]), rng_t)
        vx, vy = make_glyphs(int(p["test"]), rng_v)
        return _finish(source, tx, ty, vx, vy, n_classes=10)
    if kind == "gauss2":
        p = _parse_kv(body, {"n": 1024})
        rng = np.random.default_rng(np.random.SeedSequence([seed, 103]))
        tx, ty, vx, vy = _make_gauss2(int(p["n"]), max(64, int(p["n"]) // 4), rng)
        return _finish(source, tx, ty, vx, vy, n_classes=2, normalize=False)
    if kind == "linreg":
        p = _parse_kv(body, {"n": 256, "slope": 3.0, "intercept": 1.0, "noise": 0.0})
        rng = np.random.default_rng(np.random.SeedSequence([seed, 104]))
        tx, ty, vx, vy = _make_linreg(int(p["n"]), p["slope"], p["intercept"],
                                      p["noise"], rng)
        return _finish(source, tx, ty, vx, vy, n_classes=0, normalize=False)
    raise ValueError(f"unknown dataset source {source!r}")


def export_idx(handle_or_source, directory: str, seed: int = 0) -> None:
    """Materialize a generated image dataset as IDX files in a directory."""
    from .fileio import write_idx_images, write_idx_labels
    handle = (handle_or_source if isinstance(handle_or_source, DatasetHandle)
              else make_dataset(handle_or_source, seed))
    if handle.train_x.ndim != 4:
        raise ValueError("only image datasets can be exported as IDX")
    os.makedirs(directory, exist_ok=True)

    def as_u8(x):
        # undo normalization back to [0, 1] before byte quantization
        raw = x * np.float32(handle.std) + np.float32(handle.mean)
        return np.clip(np.rint(raw * 255.0), 0, 255).astype(np.uint8)[:, 0]

    write_idx_images(os.path.join(directory, "train-images-idx3-ubyte"),
                     as_u8(handle.train_x))
    write_idx_labels(os.path.join(directory, "train-labels-idx1-ubyte"),
                     handle.train_y)
    write_idx_images(os.path.join(directory, "t10k-images-idx3-ubyte"),
                     as_u8(handle.val_x))
    write_idx_labels(os.path.join(directory, "t10k-labels-idx1-ubyte"),
                     handle.val_y)
