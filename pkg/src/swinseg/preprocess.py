"""Preprocessing: crop to the non-zero bounding box, resample to a target
spacing (trilinear for images, nearest for labels), Z-score normalize."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .volio import LabelMap, Volume

SIGMA_EPS = 1e-8


class EmptyForegroundError(ValueError):
    pass


@dataclass(frozen=True)
class CropBox:
    lo: tuple[int, int, int]   # inclusive
    hi: tuple[int, int, int]   # exclusive

    def __post_init__(self):
        if any(l >= h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate crop box {self.lo}..{self.hi}")

    @property
    def slices(self):
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))


@dataclass(frozen=True)
class ZScoreParams:
    mu: float
    sigma: float   # population std over the stated region, >= 0


def crop_nonzero(v: Volume):
    """Tight bounding box of |voxel| > 0; returns (cropped volume, box)."""
    nz = np.abs(v.voxels) > 0
    if not nz.any():
        raise EmptyForegroundError("volume has no non-zero voxels")
    lo, hi = [], []
    for ax in range(3):
        proj = nz.any(axis=tuple(a for a in range(3) if a != ax))
        idx = np.flatnonzero(proj)
        lo.append(int(idx[0]))
        hi.append(int(idx[-1]) + 1)
    box = CropBox(tuple(lo), tuple(hi))
    return Volume(v.voxels[box.slices].copy(), v.spacing_mm), box


def embed(cropped: Volume, box: CropBox, full_dims) -> Volume:
    """Inverse of crop_nonzero: place cropped content back at box.lo."""
    out = np.zeros(full_dims, dtype=np.float32)
    out[box.slices] = cropped.voxels
    return Volume(out, cropped.spacing_mm)


def _resample_grid(src_dims, src_spacing, target_spacing):
    new_dims = tuple(max(1, int(round(d * s / t)))
                     for d, s, t in zip(src_dims, src_spacing, target_spacing))
    # voxel centers at (i + 0.5) * spacing; map target centers into source index space
    coords = np.meshgrid(*[
        (np.arange(n) + 0.5) * t / s - 0.5
        for n, s, t in zip(new_dims, src_spacing, target_spacing)
    ], indexing="ij")
    return new_dims, np.stack(coords)


def resample(obj, target_spacing_mm, mode=None):
    """Resample a Volume (trilinear) or LabelMap (nearest) to a new spacing.

    New dims = round(old_dims * old_spacing / target_spacing), min 1 per axis.
    Identity spacing returns a bit-identical copy.
    """
    target = tuple(float(s) for s in target_spacing_mm)
    if any(s <= 0 for s in target):
        raise ValueError(f"target spacing must be positive, got {target}")
    is_label = isinstance(obj, LabelMap)
    if mode is None:
        mode = "nearest" if is_label else "trilinear"
    if is_label and mode != "nearest":
        raise ValueError("labels must be resampled with mode='nearest'")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resample mode {mode!r}")

    if target == tuple(obj.spacing_mm):
        if is_label:
            return LabelMap(obj.labels.copy(), obj.spacing_mm, obj.num_classes, obj.available)
        return Volume(obj.voxels.copy(), obj.spacing_mm)

    data = obj.labels if is_label else obj.voxels
    _, coords = _resample_grid(data.shape, obj.spacing_mm, target)
    if mode == "nearest":
        idx = [np.clip(np.rint(c).astype(np.intp), 0, n - 1)
               for c, n in zip(coords, data.shape)]
        out = data[tuple(idx)]
    else:
        out = map_coordinates(data.astype(np.float64), coords, order=1, mode="nearest")
        out = out.astype(np.float32)
    if is_label:
        return LabelMap(out.astype(np.uint8), target, obj.num_classes, obj.available)
    return Volume(out, target)


def zscore(v: Volume, region: CropBox | None = None):
    """Standardize to zero mean / unit std over `region` (default: whole
    volume); sigma is the population std, clamped below by SIGMA_EPS."""
    vox = v.voxels if region is None else v.voxels[region.slices]
    if vox.size == 0:
        raise ValueError("zscore region is empty")
    mu = float(vox.mean(dtype=np.float64))
    sigma = float(vox.std(dtype=np.float64))
    out = (v.voxels.astype(np.float64) - mu) / max(sigma, SIGMA_EPS)
    return Volume(out.astype(np.float32), v.spacing_mm), ZScoreParams(mu, sigma)
