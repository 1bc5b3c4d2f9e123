"""Patch dataset handling: Brown-layout ingestion, synthetic generation,
normalization, pair batches, and augmentation.

A PatchStore holds 32x32 single-channel patches, each normalized to zero mean
and unit std (all-zero if the raw patch was constant), labeled by the id of
the 3D point it depicts.  Training consumes batches of N anchor/positive
pairs whose class ids are pairwise distinct, so every off-diagonal similarity
is a true negative.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PATCH_SIDE = 32
BROWN_RAW_SIDE = 64
BROWN_GRID_IMAGE = 1024
BROWN_GRID_COLS = BROWN_GRID_IMAGE // BROWN_RAW_SIDE          # 16
BROWN_PATCHES_PER_GRID = BROWN_GRID_COLS * BROWN_GRID_COLS    # 256

STORE_MAGIC = b"RALP"

_DEGENERATE_STD = 1e-6


class DataFormatError(ValueError):
    """Raised for unreadable or inconsistent dataset files."""


@dataclass
class PatchStore:
    patches: np.ndarray            # (K, 32, 32) float32, per-patch normalized
    class_ids: np.ndarray          # (K,) int64, 3D point id per patch
    source: str = "synthetic"      # "brown" | "synthetic"
    _by_class: dict = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.patches)

    def classes(self) -> np.ndarray:
        return np.unique(self.class_ids)

    def indices_by_class(self) -> dict:
        if self._by_class is None:
            order = np.argsort(self.class_ids, kind="stable")
            ids = self.class_ids[order]
            splits = np.flatnonzero(np.diff(ids)) + 1
            self._by_class = {int(self.class_ids[g[0]]): g
                              for g in np.split(order, splits)}
        return self._by_class

    def pairable_classes(self) -> np.ndarray:
        """Class ids with at least two patches (usable for training pairs)."""
        by = self.indices_by_class()
        return np.array(sorted(c for c, idx in by.items() if len(idx) >= 2))


@dataclass
class PairBatch:
    anchors: np.ndarray            # (N, 32, 32)
    positives: np.ndarray          # (N, 32, 32)
    class_ids: np.ndarray          # (N,), pairwise distinct


@dataclass
class TestPairSet:
    first: np.ndarray              # (M,) patch indices
    second: np.ndarray             # (M,)
    is_match: np.ndarray           # (M,) bool, from 3D-point-id equality


# ---------------------------------------------------------------------------
# normalization and resizing


def normalize_patches(patches: np.ndarray) -> np.ndarray:
    """Zero mean, unit std per patch; constant patches become all zeros."""
    x = patches.astype(np.float32)
    flat = x.reshape(len(x), -1)
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    out = x - mean[:, None, None]
    safe = np.where(std < _DEGENERATE_STD, 1.0, std)
    out /= safe[:, None, None]
    out[std < _DEGENERATE_STD] = 0.0
    return out


def _catmull_rom(t: np.ndarray) -> np.ndarray:
    """Cubic convolution kernel with a = -0.5."""
    at = np.abs(t)
    at2 = at * at
    at3 = at2 * at
    near = 1.5 * at3 - 2.5 * at2 + 1.0
    far = -0.5 * at3 + 2.5 * at2 - 4.0 * at + 2.0
    return np.where(at <= 1.0, near, np.where(at < 2.0, far, 0.0))


def _resample_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bicubic row-resampling matrix, half-pixel centers,
    edge taps clamped to the border pixel."""
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        x = (i + 0.5) * scale - 0.5
        base = math.floor(x)
        for tap in range(base - 1, base + 3):
            weight = float(_catmull_rom(np.asarray(x - tap)))
            w[i, min(max(tap, 0), n_in - 1)] += weight
    return w


def resize_bicubic(patch: np.ndarray, out_h: int = PATCH_SIDE,
                   out_w: int = PATCH_SIDE) -> np.ndarray:
    """Separable Catmull-Rom resize of one (H,W) patch."""
    wy = _resample_weights(patch.shape[0], out_h)
    wx = _resample_weights(patch.shape[1], out_w)
    return wy @ patch.astype(np.float64) @ wx.T


def _resize_stack(patches: np.ndarray, out_side: int) -> np.ndarray:
    wy = _resample_weights(patches.shape[1], out_side)
    wx = _resample_weights(patches.shape[2], out_side)
    out = np.einsum("ij,njk,lk->nil", wy, patches.astype(np.float64), wx,
                    optimize=True)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Brown layout


def _read_grid_bitmap(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.uint8)
    if arr.shape != (BROWN_GRID_IMAGE, BROWN_GRID_IMAGE):
        raise DataFormatError(
            f"{path.name}: expected {BROWN_GRID_IMAGE}x{BROWN_GRID_IMAGE} grid, "
            f"got {arr.shape}")
    return arr


def _split_grid(arr: np.ndarray) -> np.ndarray:
    """(1024,1024) grid -> (256,64,64) patches, left-to-right, top-to-bottom."""
    g = BROWN_GRID_COLS
    s = BROWN_RAW_SIDE
    return arr.reshape(g, s, g, s).transpose(0, 2, 1, 3).reshape(g * g, s, s)


def load_brown(directory: str) -> PatchStore:
    """Load a Brown-layout patch dataset directory.

    Patches come from ``patches*.bmp`` grids in lexicographic filename order;
    the n-th line of ``info.txt`` gives the 3D point id of the n-th patch.
    """
    root = Path(directory)
    info_path = root / "info.txt"
    if not info_path.is_file():
        raise DataFormatError(f"missing info file {info_path}")
    class_ids = []
    with open(info_path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                class_ids.append(int(parts[0]))
            except ValueError:
                raise DataFormatError(f"info.txt line {lineno}: bad point id {parts[0]!r}")
    count = len(class_ids)
    if count == 0:
        raise DataFormatError("info.txt lists no patches")

    grid_files = sorted(root.glob("patches*.bmp"))
    if not grid_files:
        raise DataFormatError(f"no patches*.bmp grids in {root}")
    slots = len(grid_files) * BROWN_PATCHES_PER_GRID
    if slots < count:
        raise DataFormatError(
            f"patch grids hold {slots} patches but info.txt lists {count}")
    if len(grid_files) > math.ceil(count / BROWN_PATCHES_PER_GRID):
        raise DataFormatError(
            f"info.txt lists {count} patches, shorter than the "
            f"{slots} patch slots in {len(grid_files)} grid files")

    raw = np.empty((count, BROWN_RAW_SIDE, BROWN_RAW_SIDE), dtype=np.uint8)
    done = 0
    for path in grid_files:
        block = _split_grid(_read_grid_bitmap(path))
        take = min(len(block), count - done)
        raw[done:done + take] = block[:take]
        done += take
        if done == count:
            break
    resized = _resize_stack(raw.astype(np.float32) / 255.0, PATCH_SIDE)
    return PatchStore(normalize_patches(resized), np.asarray(class_ids, dtype=np.int64),
                      source="brown")


def load_test_pairs(path: str, store: PatchStore) -> TestPairSet:
    """Parse a Brown match file: ``patchID1 pointID1 x patchID2 pointID2 x [x]``."""
    first, second, labels = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (6, 7):
                raise DataFormatError(
                    f"{path}: line {lineno} has {len(parts)} fields, expected 6 or 7")
            try:
                p1, c1, p2, c2 = int(parts[0]), int(parts[1]), int(parts[3]), int(parts[4])
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno} is not numeric")
            for p in (p1, p2):
                if not 0 <= p < len(store):
                    raise DataFormatError(
                        f"{path}: line {lineno} references patch {p}, "
                        f"store holds {len(store)}")
            first.append(p1)
            second.append(p2)
            labels.append(c1 == c2)
    if not first:
        raise DataFormatError(f"{path}: no pairs")
    return TestPairSet(np.asarray(first), np.asarray(second),
                       np.asarray(labels, dtype=bool))


# ---------------------------------------------------------------------------
# batches and augmentation


def sample_pair_batch(store: PatchStore, n: int, rng: np.random.Generator) -> PairBatch:
    """N distinct classes, two distinct patches each."""
    classes = store.pairable_classes()
    if len(classes) < n:
        raise ValueError(f"need {n} classes with >= 2 patches, have {len(classes)}")
    chosen = rng.choice(classes, size=n, replace=False)
    by = store.indices_by_class()
    anchor_idx = np.empty(n, dtype=np.int64)
    pos_idx = np.empty(n, dtype=np.int64)
    for i, c in enumerate(chosen):
        pick = rng.choice(by[int(c)], size=2, replace=False)
        anchor_idx[i], pos_idx[i] = pick
    return PairBatch(store.patches[anchor_idx].copy(), store.patches[pos_idx].copy(),
                     chosen.astype(np.int64))


def augment_pair_batch(batch: PairBatch, rng: np.random.Generator) -> PairBatch:
    """Random horizontal flip (p=0.5) then k*90 deg rotation, the same
    transform applied to both members of each pair."""
    anchors = batch.anchors.copy()
    positives = batch.positives.copy()
    flips = rng.random(len(anchors)) < 0.5
    quarters = rng.integers(0, 4, size=len(anchors))
    for i in range(len(anchors)):
        for arr in (anchors, positives):
            m = arr[i]
            if flips[i]:
                m = m[:, ::-1]
            if quarters[i]:
                m = np.rot90(m, int(quarters[i]))
            arr[i] = m
    return PairBatch(anchors, positives, batch.class_ids.copy())


# ---------------------------------------------------------------------------
# synthetic data


def _affine_warp(canvas: np.ndarray, angle: float, scale: float,
                 dx: float, dy: float, out_side: int) -> np.ndarray:
    """Sample an out_side x out_side window from the canvas center under a
    rotation/scale/shift, bilinear interpolation, edge clamped."""
    h, w = canvas.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(out_side), np.arange(out_side), indexing="ij")
    yo = ys - (out_side - 1) / 2.0
    xo = xs - (out_side - 1) / 2.0
    cos, sin = math.cos(angle), math.sin(angle)
    src_y = (cos * yo - sin * xo) * scale + cy + dy
    src_x = (sin * yo + cos * xo) * scale + cx + dx
    y0 = np.clip(np.floor(src_y).astype(int), 0, h - 2)
    x0 = np.clip(np.floor(src_x).astype(int), 0, w - 2)
    fy = np.clip(src_y - y0, 0.0, 1.0)
    fx = np.clip(src_x - x0, 0.0, 1.0)
    c00 = canvas[y0, x0]
    c01 = canvas[y0, x0 + 1]
    c10 = canvas[y0 + 1, x0]
    c11 = canvas[y0 + 1, x0 + 1]
    top = c00 * (1 - fx) + c01 * fx
    bot = c10 * (1 - fx) + c11 * fx
    return top * (1 - fy) + bot * fy


def generate_synthetic(classes: int, patches_per_class: int, seed: int,
                       canvas_side: int = 48, coarse: int = 6,
                       max_angle_deg: float = 8.0, max_shift: float = 1.5,
                       scale_jitter: float = 0.08, noise_std: float = 0.05) -> PatchStore:
    """Desk-scale dataset: per class a smooth random texture, per patch a small
    affine warp plus brightness/contrast jitter and additive noise."""
    rng = np.random.default_rng(seed)
    total = classes * patches_per_class
    patches = np.empty((total, PATCH_SIDE, PATCH_SIDE), dtype=np.float32)
    class_ids = np.repeat(np.arange(classes, dtype=np.int64), patches_per_class)
    k = 0
    for _ in range(classes):
        field = rng.standard_normal((coarse, coarse))
        canvas = resize_bicubic(field, canvas_side, canvas_side)
        for _ in range(patches_per_class):
            angle = math.radians(rng.uniform(-max_angle_deg, max_angle_deg))
            scale = 1.0 + rng.uniform(-scale_jitter, scale_jitter)
            dx = rng.uniform(-max_shift, max_shift)
            dy = rng.uniform(-max_shift, max_shift)
            warped = _affine_warp(canvas, angle, scale, dx, dy, PATCH_SIDE)
            contrast = 1.0 + rng.uniform(-0.15, 0.15)
            brightness = rng.uniform(-0.2, 0.2)
            noise = rng.standard_normal((PATCH_SIDE, PATCH_SIDE)) * noise_std
            patches[k] = (contrast * warped + brightness + noise).astype(np.float32)
            k += 1
    return PatchStore(normalize_patches(patches), class_ids, source="synthetic")


# ---------------------------------------------------------------------------
# patch store files: magic "RALP", u32 count, u32 side, u32 class ids,
# float32 little-endian patch data


def save_patch_store(store: PatchStore, path: str) -> None:
    side = store.patches.shape[1]
    with open(path, "wb") as f:
        f.write(STORE_MAGIC)
        f.write(struct.pack("<II", len(store), side))
        f.write(store.class_ids.astype("<u4").tobytes())
        f.write(np.ascontiguousarray(store.patches, dtype="<f4").tobytes())


def load_patch_store(path: str) -> PatchStore:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != STORE_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a patch store")
    if len(blob) < 12:
        raise DataFormatError(f"{path}: truncated header")
    count, side = struct.unpack("<II", blob[4:12])
    need = 12 + 4 * count + 4 * count * side * side
    if len(blob) != need:
        raise DataFormatError(f"{path}: expected {need} bytes, found {len(blob)}")
    ids = np.frombuffer(blob, dtype="<u4", count=count, offset=12).astype(np.int64)
    data = np.frombuffer(blob, dtype="<f4", count=count * side * side,
                         offset=12 + 4 * count)
    return PatchStore(data.reshape(count, side, side).copy(), ids, source="synthetic")
