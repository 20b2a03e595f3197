"""Connected-component post-processing: label 3D components under 6- or
26-adjacency, drop small ones, keep the largest component per class."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volio import LabelMap


@dataclass(frozen=True)
class ComponentInfo:
    comp_id: int
    voxel_count: int
    bbox_lo: tuple[int, int, int]
    bbox_hi: tuple[int, int, int]       # exclusive
    seed: tuple[int, int, int]          # lowest linear-index voxel


def _structure(connectivity: int):
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components_3d(mask: np.ndarray, connectivity: int = 26):
    """Label maximal connected sets of a binary mask.

    Returns (components, id_grid). Component ids start at 1 and are assigned
    in decreasing size order; ties broken by smaller seed linear index.
    Background is 0 in id_grid.
    """
    mask = np.asarray(mask).astype(bool)
    raw, n = ndimage.label(mask, structure=_structure(connectivity))
    if n == 0:
        return [], np.zeros(mask.shape, dtype=np.int32)

    counts = np.bincount(raw.ravel(), minlength=n + 1)
    flat = raw.ravel()
    # first occurrence of each raw label = seed (smallest linear index)
    order = np.argsort(flat, kind="stable")
    starts = np.searchsorted(flat, np.arange(1, n + 1), sorter=order)
    seeds = order[starts]

    ranked = sorted(range(1, n + 1), key=lambda r: (-counts[r], seeds[r - 1]))
    remap = np.zeros(n + 1, dtype=np.int32)
    components = []
    objs = ndimage.find_objects(raw)
    for new_id, r in enumerate(ranked, start=1):
        remap[r] = new_id
        sl = objs[r - 1]
        components.append(ComponentInfo(
            comp_id=new_id,
            voxel_count=int(counts[r]),
            bbox_lo=tuple(s.start for s in sl),
            bbox_hi=tuple(s.stop for s in sl),
            seed=tuple(int(c) for c in np.unravel_index(seeds[r - 1], mask.shape)),
        ))
    return components, remap[raw]


def keep_largest_per_label(labels: LabelMap, connectivity: int = 26,
                           min_size: int = 0) -> LabelMap:
    """For each class independently, zero out every component except the
    largest; components below min_size are removed regardless."""
    out = labels.labels.copy()
    for cls in sorted(set(np.unique(labels.labels).tolist()) - {0}):
        mask = labels.labels == cls
        comps, ids = connected_components_3d(mask, connectivity)
        if not comps:
            continue
        keep = comps[0]  # largest by the ranking contract
        kill = ids != keep.comp_id
        if keep.voxel_count < min_size:
            kill = np.ones_like(kill)
        out[mask & kill] = 0
    return LabelMap(out, labels.spacing_mm, labels.num_classes, labels.available)
