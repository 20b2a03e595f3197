"""Volume / label-map containers, the MVOL file container, and dataset
manifests with partial-label availability.

MVOL layout: 8-byte magic ``MVOL0001``, a little-endian uint32 header
length, a UTF-8 JSON header ``{kind, dims, spacing, classes, available}``,
then the raw little-endian payload (float32 for images, uint8 for labels),
row-major with W fastest. Axis order is (D, H, W) everywhere.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MVOL0001"


class FormatError(ValueError):
    """Malformed MVOL file; message carries the byte offset of the fault."""

    def __init__(self, msg, offset=None):
        if offset is not None:
            msg = f"{msg} (at byte offset {offset})"
        super().__init__(msg)
        self.offset = offset


class ValidationError(ValueError):
    """In-memory invariant violation (labels, manifests)."""


@dataclass
class Volume:
    voxels: np.ndarray                       # (D,H,W) float32
    spacing_mm: tuple[float, float, float]   # (sz, sy, sx)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValidationError(f"Volume must be 3-D, got shape {self.voxels.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValidationError(f"spacing must be 3 positive reals, got {self.spacing_mm}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValidationError("Volume contains non-finite voxels")

    @property
    def dims(self):
        return self.voxels.shape


@dataclass
class LabelMap:
    labels: np.ndarray                       # (D,H,W) uint8, 0 = background
    spacing_mm: tuple[float, float, float]
    num_classes: int                         # J; valid labels are 0..J
    available: frozenset[int] = field(default_factory=frozenset)  # subset of 1..J

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise ValidationError(f"LabelMap must be 3-D, got shape {self.labels.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValidationError(f"spacing must be 3 positive reals, got {self.spacing_mm}")
        self.available = frozenset(int(c) for c in self.available)
        if any(c < 1 or c > self.num_classes for c in self.available):
            raise ValidationError(
                f"available classes {sorted(self.available)} outside 1..{self.num_classes}")
        present = set(np.unique(self.labels).tolist()) - {0}
        extra = present - self.available
        if extra:
            raise ValidationError(
                f"label values {sorted(extra)} present but not in available set "
                f"{sorted(self.available)}")

    @property
    def dims(self):
        return self.labels.shape


@dataclass
class CaseEntry:
    case_id: str
    image: str
    label: str | None
    split: str   # labeled | unlabeled | val | pseudo


@dataclass
class DatasetManifest:
    cases: list[CaseEntry]
    root: str = "."

    def split(self, name) -> list[CaseEntry]:
        return [c for c in self.cases if c.split == name]

    def image_path(self, case: CaseEntry) -> str:
        return os.path.join(self.root, case.image)

    def label_path(self, case: CaseEntry) -> str:
        return os.path.join(self.root, case.label)


SPLITS = ("labeled", "unlabeled", "val", "pseudo")


def write_mvol(obj, path):
    """Serialize a Volume or LabelMap; roundtrip is bit-exact."""
    if isinstance(obj, Volume):
        header = {
            "kind": "image",
            "dims": list(obj.dims),
            "spacing": list(obj.spacing_mm),
        }
        payload = obj.voxels.astype("<f4", copy=False).tobytes()
    elif isinstance(obj, LabelMap):
        header = {
            "kind": "label",
            "dims": list(obj.dims),
            "spacing": list(obj.spacing_mm),
            "classes": obj.num_classes,
            "available": sorted(obj.available),
        }
        payload = obj.labels.tobytes()
    else:
        raise TypeError(f"write_mvol: unsupported type {type(obj).__name__}")
    hj = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hj)))
        f.write(hj)
        f.write(payload)


def read_mvol(path):
    """Deserialize an MVOL file to a Volume or LabelMap."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise FormatError("file too short for MVOL magic + header length", offset=0)
    if blob[:8] != MAGIC:
        raise FormatError(f"bad magic {blob[:8]!r}", offset=0)
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise FormatError("truncated header", offset=12)
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"invalid JSON header: {e}", offset=12)
    off = 12 + hlen
    payload = blob[off:]

    kind = header.get("kind")
    dims = header.get("dims")
    spacing = header.get("spacing")
    if kind not in ("image", "label") or not isinstance(dims, list) or len(dims) != 3:
        raise FormatError(f"malformed header fields: {header}", offset=12)
    d, h, w = (int(v) for v in dims)
    n = d * h * w

    if kind == "image":
        if len(payload) != 4 * n:
            raise FormatError(
                f"payload holds {len(payload) // 4} scalars, header declares {n}", offset=off)
        vox = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
        return Volume(vox.astype(np.float32), tuple(spacing))
    if len(payload) != n:
        raise FormatError(
            f"payload holds {len(payload)} labels, header declares {n}", offset=off)
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(d, h, w)
    return LabelMap(labels.copy(), tuple(spacing),
                    num_classes=int(header.get("classes", 0)),
                    available=frozenset(header.get("available", [])))


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a dataset manifest JSON; stat-checks file refs."""
    with open(path) as f:
        raw = json.load(f)
    root = os.path.dirname(os.path.abspath(path))
    cases = []
    seen = set()
    for entry in raw.get("cases", []):
        cid = entry.get("id")
        if cid in seen:
            raise ValidationError(f"duplicate case id {cid!r}")
        seen.add(cid)
        split = entry.get("split")
        if split not in SPLITS:
            raise ValidationError(f"case {cid!r}: unknown split {split!r}")
        image = entry.get("image")
        label = entry.get("label")
        if image is None:
            raise ValidationError(f"case {cid!r}: missing image path")
        if split in ("labeled", "val", "pseudo") and label is None:
            raise ValidationError(f"case {cid!r}: split {split!r} requires a label path")
        if split == "unlabeled" and label is not None:
            raise ValidationError(f"case {cid!r}: unlabeled case must not carry a label path")
        if not os.path.exists(os.path.join(root, image)):
            raise ValidationError(f"case {cid!r}: dangling image reference {image!r}")
        if label is not None and not os.path.exists(os.path.join(root, label)):
            raise ValidationError(f"case {cid!r}: dangling label reference {label!r}")
        cases.append(CaseEntry(cid, image, label, split))
    return DatasetManifest(cases, root=root)


def save_manifest(manifest: DatasetManifest, path):
    raw = {"cases": [
        {k: v for k, v in
         {"id": c.case_id, "image": c.image, "label": c.label, "split": c.split}.items()
         if v is not None}
        for c in manifest.cases]}
    with open(path, "w") as f:
        json.dump(raw, f, indent=2, sort_keys=True)
        f.write("\n")
