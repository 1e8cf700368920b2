"""Dataset model: patch file format, manifests, splits, provenance.

Patch files use a minimal raw container ("QPAT") so signed float
susceptibility-like values round-trip exactly. Manifests are JSON with a
stable key order so diffs stay readable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

MAGIC = b"QPAT"
PATCH_VERSION = 1
PATCH_SIZE = 64

LABELS = ("rim", "nonrim", "ambiguous")
SPLITS = ("train", "test")
SOURCES = ("phantom", "synthetic", "denoised", "external")


class FormatError(Exception):
    """Malformed patch file (bad magic, header, or payload length)."""


class IntegrityError(Exception):
    """Manifest fails internal consistency (ids, parents, leakage inputs)."""


def validate_patch(data: np.ndarray) -> None:
    """Raise ValueError unless `data` is a valid C x 64 x 64 patch."""
    if data.ndim != 3:
        raise ValueError(f"patch must be CxHxW, got shape {data.shape}")
    c, h, w = data.shape
    if c not in (1, 3):
        raise ValueError(f"patch channels must be 1 or 3, got {c}")
    if (h, w) != (PATCH_SIZE, PATCH_SIZE):
        raise ValueError(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}, got {h}x{w}")
    if not np.all(np.isfinite(data)):
        raise ValueError("patch contains non-finite values")
    if data.min() < -1.0 or data.max() > 1.0:
        raise ValueError("patch values must lie in [-1, 1]")
    if c == 3:
        prob = data[2]
        if prob.min() < 0.0 or prob.max() > 1.0:
            raise ValueError("probability channel must lie in [0, 1]")


def write_patch(data: np.ndarray, path: str | Path) -> None:
    """Write a patch as magic | u16 version | u32 C,H,W | float32 LE payload."""
    data = np.asarray(data, dtype=np.float32)
    validate_patch(data)
    c, h, w = data.shape
    header = MAGIC + struct.pack("<HIII", PATCH_VERSION, c, h, w)
    payload = data.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_patch(path: str | Path) -> np.ndarray:
    """Read a QPAT file; lossless inverse of write_patch at float32."""
    raw = Path(path).read_bytes()
    if len(raw) < 18:
        raise FormatError(f"{path}: truncated header, {len(raw)} bytes < 18")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    version, c, h, w = struct.unpack("<HIII", raw[4:18])
    if version != PATCH_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    expected = 18 + 4 * c * h * w
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for C={c} H={h} W={w}, got {len(raw)}"
        )
    data = np.frombuffer(raw[18:], dtype="<f4").reshape(c, h, w).copy()
    validate_patch(data)
    return data


@dataclass
class LesionRecord:
    id: str
    file: str
    label: str
    split: str
    source: str
    parent_id: str | None = None
    seed_or_latent_ref: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"bad label {self.label!r}")
        if self.split not in SPLITS:
            raise ValueError(f"bad split {self.split!r}")
        if self.source not in SOURCES:
            raise ValueError(f"bad source {self.source!r}")


@dataclass
class Manifest:
    channels: int
    records: list[LesionRecord] = field(default_factory=list)
    version: int = 1

    @property
    def class_counts(self) -> dict[str, int]:
        counts = {label: 0 for label in LABELS}
        for rec in self.records:
            counts[rec.label] += 1
        return counts

    def by_id(self) -> dict[str, LesionRecord]:
        return {rec.id: rec for rec in self.records}

    def select(self, label: str | None = None, split: str | None = None,
               source: str | None = None) -> list[LesionRecord]:
        out = []
        for rec in self.records:
            if label is not None and rec.label != label:
                continue
            if split is not None and rec.split != split:
                continue
            if source is not None and rec.source != source:
                continue
            out.append(rec)
        return out


def validate_manifest(manifest: Manifest) -> None:
    """Check id uniqueness, parent resolution, and the denoising contract."""
    ids = [rec.id for rec in manifest.records]
    if len(ids) != len(set(ids)):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise IntegrityError(f"duplicate record ids: {dupes[:5]}")
    index = manifest.by_id()
    for rec in manifest.records:
        if rec.parent_id is not None and rec.parent_id not in index:
            raise IntegrityError(f"{rec.id}: unresolved parent_id {rec.parent_id!r}")
        if rec.source == "denoised":
            if rec.label != "rim":
                raise IntegrityError(f"{rec.id}: denoised record must carry label rim")
            if rec.parent_id is None:
                raise IntegrityError(f"{rec.id}: denoised record needs a parent")
            parent = index[rec.parent_id]
            if parent.label != "ambiguous":
                raise IntegrityError(
                    f"{rec.id}: denoised parent {parent.id} must be ambiguous, "
                    f"got {parent.label}"
                )


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    validate_manifest(manifest)
    doc = {
        "version": manifest.version,
        "channels": manifest.channels,
        "class_counts": manifest.class_counts,
        "records": [asdict(rec) for rec in manifest.records],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> Manifest:
    doc = json.loads(Path(path).read_text())
    records = [LesionRecord(**rec) for rec in doc["records"]]
    manifest = Manifest(channels=doc["channels"], records=records,
                        version=doc["version"])
    validate_manifest(manifest)
    return manifest


def _ancestry(rec_id: str, index: dict[str, LesionRecord]) -> set[str]:
    chain = set()
    cur: str | None = rec_id
    while cur is not None:
        if cur in chain:
            raise IntegrityError(f"parent cycle through {cur}")
        chain.add(cur)
        parent = index[cur].parent_id
        if parent is not None and parent not in index:
            raise IntegrityError(f"{cur}: unresolved parent_id {parent!r}")
        cur = parent
    return chain


def split_leakage_check(manifest: Manifest) -> list[tuple[str, str]]:
    """Return (test_id, train_id) pairs that share ancestry across splits."""
    index = manifest.by_id()
    lineages = {rec.id: _ancestry(rec.id, index) for rec in manifest.records}
    train = [r for r in manifest.records if r.split == "train"]
    violations = []
    for test_rec in manifest.records:
        if test_rec.split != "test":
            continue
        for train_rec in train:
            if lineages[test_rec.id] & lineages[train_rec.id]:
                violations.append((test_rec.id, train_rec.id))
    return violations


@dataclass
class ClassStats:
    counts: dict[str, int]
    total: int
    imbalance_ratio: float | None  # minority rim fraction; None when undefined


def class_stats(manifest: Manifest) -> ClassStats:
    counts = manifest.class_counts
    total = len(manifest.records)
    ratio = counts["rim"] / total if total > 0 else None
    return ClassStats(counts=counts, total=total, imbalance_ratio=ratio)


def load_patches(manifest: Manifest, root: str | Path,
                 records: list[LesionRecord] | None = None) -> np.ndarray:
    """Stack patches for `records` (default: all) into an N x C x H x W array."""
    root = Path(root)
    if records is None:
        records = manifest.records
    if not records:
        return np.zeros((0, manifest.channels, PATCH_SIZE, PATCH_SIZE), np.float32)
    return np.stack([read_patch(root / rec.file) for rec in records])
