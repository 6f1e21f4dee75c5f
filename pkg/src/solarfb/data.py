"""Patch dataset format, synthetic generator, and scene tiling.

A dataset directory holds ``manifest.json`` plus flat binary blobs:
``patches.bin`` (little-endian float32, record-major, channel-major
within a record), ``labels.bin`` (one byte per record) and optional
``masks.bin`` (one byte per pixel, {0,1}). The layout is mmap-friendly
so very large test sets stream without loading.

The synthetic generator stands in for the non-redistributable source
imagery: correlated multi-band background noise, with positives carrying
rectangular "panel" regions of a distinct 7-band signature covering more
than 20% of the patch. The signatures are constants defined here with no
claim of radiometric realism.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .activation_maps import ActivationMap, resize_nearest

CHANNELS = 7
PATCH = 16
FORMAT_VERSION = 1
MIN_POSITIVE_COVERAGE = 0.20

# per-band background base levels and panel signature (arbitrary but well
# separated relative to the default noise level)
BACKGROUND_LEVELS = np.array([0.30, 0.32, 0.35, 0.38, 0.42, 0.40, 0.36],
                             dtype=np.float32)
PANEL_SIGNATURE = np.array([0.02, 0.02, 0.02, 0.02, 0.98, 0.02, 0.02],
                           dtype=np.float32)


class DataFormatError(ValueError):
    """Corrupt or inconsistent dataset directory."""


@dataclass
class PatchDataset:
    patches: np.ndarray  # (N, 7, 16, 16) float32
    labels: np.ndarray   # (N,) uint8, 1 = positive
    masks: np.ndarray | None  # (N, 16, 16) uint8 or None
    manifest: dict

    def __len__(self) -> int:
        return self.labels.shape[0]


def _manifest(kind, n_pos, n_neg, channels, height, width, has_masks, provenance):
    return {
        "version": FORMAT_VERSION,
        "kind": kind,
        "n_positive": int(n_pos),
        "n_negative": int(n_neg),
        "channels": int(channels),
        "height": int(height),
        "width": int(width),
        "dtype": "float32le",
        "has_masks": bool(has_masks),
        "provenance": provenance,
    }


def write_dataset(path, patches, labels, masks=None, provenance="") -> None:
    patches = np.ascontiguousarray(patches, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    n, c, h, w = patches.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    os.makedirs(path, exist_ok=True)
    manifest = _manifest("patches", np.sum(labels == 1), np.sum(labels == 0),
                         c, h, w, masks is not None, provenance)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    patches.tofile(os.path.join(path, "patches.bin"))
    labels.tofile(os.path.join(path, "labels.bin"))
    if masks is not None:
        masks = np.ascontiguousarray(masks, dtype=np.uint8)
        if masks.shape != (n, h, w):
            raise ValueError(f"masks shape {masks.shape} != ({n},{h},{w})")
        masks.tofile(os.path.join(path, "masks.bin"))


def _read_manifest(path, kind):
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise DataFormatError(f"{path}: no manifest.json")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: manifest version {manifest.get('version')} unsupported"
        )
    if manifest.get("kind") != kind:
        raise DataFormatError(
            f"{path}: manifest kind {manifest.get('kind')!r}, expected {kind!r}"
        )
    if manifest.get("dtype") != "float32le":
        raise DataFormatError(f"{path}: unsupported dtype {manifest.get('dtype')!r}")
    return manifest


def _mmap(path, name, dtype, shape):
    fpath = os.path.join(path, name)
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    actual = os.path.getsize(fpath) if os.path.exists(fpath) else -1
    if actual != expected:
        raise DataFormatError(
            f"{fpath}: size mismatch, expected {expected} bytes, found {actual}"
        )
    return np.memmap(fpath, dtype=dtype, mode="r", shape=shape)


def load_dataset(path) -> PatchDataset:
    """Memory-mapped, read-only view of a dataset directory."""
    manifest = _read_manifest(path, "patches")
    n = manifest["n_positive"] + manifest["n_negative"]
    c, h, w = manifest["channels"], manifest["height"], manifest["width"]
    patches = _mmap(path, "patches.bin", "<f4", (n, c, h, w))
    labels = _mmap(path, "labels.bin", np.uint8, (n,))
    if int(np.sum(labels == 1)) != manifest["n_positive"]:
        raise DataFormatError(
            f"{path}: labels.bin has {int(np.sum(labels == 1))} positives, "
            f"manifest says {manifest['n_positive']}"
        )
    masks = None
    if manifest["has_masks"]:
        masks = _mmap(path, "masks.bin", np.uint8, (n, h, w))
    return PatchDataset(patches=patches, labels=labels, masks=masks,
                        manifest=manifest)


def write_scene(path, bands, provenance="") -> None:
    bands = np.ascontiguousarray(bands, dtype="<f4")
    c, h, w = bands.shape
    os.makedirs(path, exist_ok=True)
    manifest = _manifest("scene", 0, 1, c, h, w, False, provenance)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    bands.tofile(os.path.join(path, "patches.bin"))


def load_scene(path) -> np.ndarray:
    manifest = _read_manifest(path, "scene")
    c, h, w = manifest["channels"], manifest["height"], manifest["width"]
    return _mmap(path, "patches.bin", "<f4", (c, h, w))


# ---------------------------------------------------------------------------
# synthetic generation


def _background(rng, n, noise):
    base = BACKGROUND_LEVELS[None, :, None, None]
    # per-patch brightness offset shared by all bands (correlated background)
    offset = rng.normal(0.0, 0.04, size=(n, 1, 1, 1))
    # smooth spatial texture: low-resolution noise upsampled to 16x16
    coarse = rng.normal(0.0, 0.05, size=(n, 1, 4, 4))
    texture = np.repeat(np.repeat(coarse, 4, axis=2), 4, axis=3)
    grain = rng.normal(0.0, noise, size=(n, CHANNELS, PATCH, PATCH))
    return np.clip(base + offset + texture + grain, 0.0, 1.0).astype(np.float32)


def _panel_mask(rng) -> np.ndarray:
    # one compact plant per positive patch with a fixed visible footprint
    # of 64 pixels (25% coverage, above the 20% labeling rule). Placement
    # may overhang the tile edge, as plants continue across tile cuts;
    # shape and clipping vary, the visible area does not, which keeps the
    # per-patch activation scale comparable across samples.
    visible_pixels = 64
    overhang = 4
    while True:
        hh = int(rng.integers(7, 11))
        ww = int(rng.integers(7, 11))
        r = int(rng.integers(-overhang, PATCH - hh + overhang + 1))
        c = int(rng.integers(-overhang, PATCH - ww + overhang + 1))
        mask = np.zeros((PATCH, PATCH), dtype=np.uint8)
        mask[max(r, 0):min(r + hh, PATCH), max(c, 0):min(c + ww, PATCH)] = 1
        if mask.sum() == visible_pixels:
            return mask


def synth_generate(n_pos: int, n_neg: int, seed: int, noise: float = 0.05):
    """Seed-deterministic synthetic dataset.

    Returns (patches, labels, masks); positives come first. Every positive
    mask covers more than 20% of the patch (the labeling rule for the
    positive class).
    """
    if n_pos < 0 or n_neg < 0:
        raise ValueError("sample counts must be nonnegative")
    rng = np.random.default_rng(seed)
    n = n_pos + n_neg
    patches = _background(rng, n, noise)
    masks = np.zeros((n, PATCH, PATCH), dtype=np.uint8)
    sig = PANEL_SIGNATURE[:, None]
    for i in range(n_pos):
        mask = _panel_mask(rng)
        sel = mask.astype(bool)
        panel = sig + rng.normal(0.0, noise, size=(CHANNELS, int(sel.sum())))
        patches[i, :, sel] = np.clip(panel, 0.0, 1.0).astype(np.float32).T
        masks[i] = mask
    labels = np.zeros(n, dtype=np.uint8)
    labels[:n_pos] = 1
    return patches, labels, masks


# ---------------------------------------------------------------------------
# scene tiling


def tile_scene(scene: np.ndarray):
    """Non-overlapping 16x16 cells, row-major; trailing remainders dropped."""
    c, h, w = scene.shape
    rows, cols = h // PATCH, w // PATCH
    if rows < 1 or cols < 1:
        raise ValueError(f"scene {h}x{w} is smaller than one {PATCH}x{PATCH} tile")
    tiles = []
    coords = []
    for r in range(rows):
        for q in range(cols):
            tiles.append(scene[:, r * PATCH:(r + 1) * PATCH,
                                q * PATCH:(q + 1) * PATCH])
            coords.append((r, q))
    return np.ascontiguousarray(np.stack(tiles)), coords


def stitch_maps(tile_maps, coords, grid_rows: int, grid_cols: int) -> ActivationMap:
    """Place per-tile maps (resized to 16x16) into the scene grid.

    Cells without a map (e.g. classified negative) stay zero.
    """
    seen = set()
    out = np.zeros((grid_rows * PATCH, grid_cols * PATCH), dtype=np.float32)
    for m, (r, q) in zip(tile_maps, coords, strict=True):
        if (r, q) in seen:
            raise ValueError(f"overlapping tile coordinate ({r},{q})")
        if not (0 <= r < grid_rows and 0 <= q < grid_cols):
            raise ValueError(f"tile coordinate ({r},{q}) outside "
                             f"{grid_rows}x{grid_cols} grid")
        seen.add((r, q))
        v = resize_nearest(m, PATCH, PATCH)
        v = v.values if isinstance(v, ActivationMap) else v
        out[r * PATCH:(r + 1) * PATCH, q * PATCH:(q + 1) * PATCH] = v
    return ActivationMap(out)


# ---------------------------------------------------------------------------
# map export


def write_pgm(m, path) -> None:
    """8-bit binary PGM (P5) plus a raw float32 sidecar (<path>.f32)."""
    v = m.values if isinstance(m, ActivationMap) else np.asarray(m)
    h, w = v.shape
    quantized = np.clip(np.rint(v * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(quantized.tobytes())
    np.ascontiguousarray(v, dtype="<f4").tofile(str(path) + ".f32")
