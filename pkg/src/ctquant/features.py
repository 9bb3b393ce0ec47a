"""Continuous feature ingestion and fusion-input assembly.

The deep-feature vector x1 normally comes from an external model; for
self-contained runs `stub_featurize` produces a deterministic 512-dim
descriptor of the heart crop (256-bin HU histogram + 8x8x4 mean pooling).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .biomarkers import BIOMARKER_NAMES, STATUS_OK, BiomarkerVector
from .errors import (
    ArityMismatch,
    DuplicateScanId,
    EmptyMask,
    NonFiniteValue,
    TooFewRecords,
)
from .volume_io import HU_MAX, HU_MIN, CtVolume, LabelMask, MaskSchema, check_alignment

DEEP_WIDTH = 512
_HIST_BINS = 256
_POOL_SHAPE = (8, 8, 4)


@dataclass
class FeatureRecord:
    scan_id: str
    x1: np.ndarray                       # (512,)
    biomarkers: BiomarkerVector
    label: int | None = None             # 1 CVD-positive, 0 CVD-negative

    def __post_init__(self):
        self.x1 = np.asarray(self.x1, dtype=float).ravel()
        if self.x1.size != DEEP_WIDTH:
            raise ArityMismatch(
                f"{self.scan_id}: x1 has {self.x1.size} entries, "
                f"expected {DEEP_WIDTH}")
        if not np.all(np.isfinite(self.x1)):
            raise NonFiniteValue(f"{self.scan_id}: non-finite x1 entries")
        for name in BIOMARKER_NAMES:
            v = self.biomarkers.values[name]
            if self.biomarkers.ok(name) and not math.isfinite(v):
                raise NonFiniteValue(f"{self.scan_id}: non-finite {name}")


@dataclass
class NormalizationStats:
    """Per-feature z-score statistics fitted on a training split."""

    x1_mean: np.ndarray
    x1_std: np.ndarray
    biom_mean: dict
    biom_std: dict

    STD_FLOOR = 1e-8

    def to_json_dict(self):
        return {
            "x1_mean": self.x1_mean.tolist(),
            "x1_std": self.x1_std.tolist(),
            "biom_mean": self.biom_mean,
            "biom_std": self.biom_std,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(x1_mean=np.asarray(d["x1_mean"], float),
                   x1_std=np.asarray(d["x1_std"], float),
                   biom_mean={k: float(v) for k, v in d["biom_mean"].items()},
                   biom_std={k: float(v) for k, v in d["biom_std"].items()})


def stub_featurize(v: CtVolume, heart: LabelMask) -> np.ndarray:
    """Deterministic 512-dim heart-crop descriptor.

    First 256 entries: HU histogram over [-1024, 4095] of the crop around the
    heart labels. Last 256: mean HU of an 8x8x4 partition of the crop
    (empty cells are 0).
    """
    if heart.schema is not MaskSchema.PERICARDIUM:
        raise EmptyMask("featurizer needs a pericardium-schema mask")
    check_alignment(v, heart)
    fg = heart.data > 0
    if not fg.any():
        raise EmptyMask("heart mask is empty")
    idx = np.argwhere(fg)
    lo = idx.min(axis=0)
    hi = idx.max(axis=0) + 1
    crop = v.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].astype(float)

    hist, _ = np.histogram(crop, bins=_HIST_BINS, range=(HU_MIN, HU_MAX + 1))
    pooled = np.zeros(_POOL_SHAPE)
    edges = [np.linspace(0, crop.shape[k], _POOL_SHAPE[k] + 1).astype(int)
             for k in range(3)]
    for i in range(_POOL_SHAPE[0]):
        for j in range(_POOL_SHAPE[1]):
            for k in range(_POOL_SHAPE[2]):
                cell = crop[edges[0][i]:edges[0][i + 1],
                            edges[1][j]:edges[1][j + 1],
                            edges[2][k]:edges[2][k + 1]]
                if cell.size:
                    pooled[i, j, k] = cell.mean()
    return np.concatenate([hist.astype(float), pooled.ravel()])


# --- record file io ---------------------------------------------------------

def _x1_columns():
    return [f"x1_{i:03d}" for i in range(DEEP_WIDTH)]


def export_features(path, records):
    """Write records to CSV (or JSON when the suffix is .json)."""
    path = Path(path)
    if path.suffix == ".json":
        docs = []
        for r in records:
            doc = {"scan_id": r.scan_id, "x1": r.x1.tolist()}
            doc.update(r.biomarkers.to_json_dict())
            if r.label is not None:
                doc["label"] = r.label
            docs.append(doc)
        path.write_text(json.dumps(docs) + "\n")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scan_id", *_x1_columns(), *BIOMARKER_NAMES,
                         *[f"{n}_status" for n in BIOMARKER_NAMES], "label"])
        for r in records:
            writer.writerow([
                r.scan_id,
                *[repr(float(x)) for x in r.x1],
                *[repr(float(r.biomarkers.values[n])) for n in BIOMARKER_NAMES],
                *[r.biomarkers.status[n] for n in BIOMARKER_NAMES],
                "" if r.label is None else r.label,
            ])


def import_features(path):
    """Read and validate FeatureRecords from CSV or JSON."""
    path = Path(path)
    records = []
    if path.suffix == ".json":
        for doc in json.loads(path.read_text()):
            bv = BiomarkerVector.from_json_dict(doc)
            label = doc.get("label")
            records.append(FeatureRecord(
                scan_id=doc["scan_id"], x1=np.asarray(doc["x1"], float),
                biomarkers=bv, label=None if label is None else int(label)))
    else:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            expected = ["scan_id", *_x1_columns(), *BIOMARKER_NAMES,
                        *[f"{n}_status" for n in BIOMARKER_NAMES], "label"]
            if header != expected:
                raise ArityMismatch(
                    f"{path}: header has {len(header)} columns, "
                    f"expected {len(expected)}")
            ncol = len(expected)
            for lineno, row in enumerate(reader, start=2):
                if len(row) != ncol:
                    raise ArityMismatch(
                        f"{path}:{lineno}: {len(row)} columns, expected {ncol}")
                x1 = np.array([float(x) for x in row[1:1 + DEEP_WIDTH]])
                bv = BiomarkerVector()
                base = 1 + DEEP_WIDTH
                for k, name in enumerate(BIOMARKER_NAMES):
                    bv.values[name] = float(row[base + k])
                    bv.status[name] = row[base + len(BIOMARKER_NAMES) + k]
                raw_label = row[-1]
                label = None if raw_label == "" else int(raw_label)
                records.append(FeatureRecord(scan_id=row[0], x1=x1,
                                             biomarkers=bv, label=label))
    seen = set()
    for r in records:
        if r.scan_id in seen:
            raise DuplicateScanId(f"duplicate scan_id {r.scan_id!r}")
        seen.add(r.scan_id)
    return records


# --- normalization ----------------------------------------------------------

def fit_normalizer(records) -> NormalizationStats:
    """Z-score statistics over a training split (population std, floored)."""
    if len(records) < 2:
        raise TooFewRecords(f"need >= 2 records, got {len(records)}")
    x1 = np.stack([r.x1 for r in records])
    floor = NormalizationStats.STD_FLOOR
    biom_mean, biom_std = {}, {}
    for name in BIOMARKER_NAMES:
        vals = np.array([r.biomarkers.values[name] for r in records
                         if r.biomarkers.ok(name)])
        if vals.size:
            biom_mean[name] = float(vals.mean())
            biom_std[name] = float(max(vals.std(), floor))
        else:
            biom_mean[name] = 0.0
            biom_std[name] = 1.0
    return NormalizationStats(
        x1_mean=x1.mean(axis=0),
        x1_std=np.maximum(x1.std(axis=0), floor),
        biom_mean=biom_mean,
        biom_std=biom_std)


def apply_normalizer(stats: NormalizationStats, record: FeatureRecord):
    """Return (x1_normalized, biomarker_vector_normalized) as arrays.

    Biomarker fields that are not ok are imputed to 0 (the training mean).
    """
    z1 = (record.x1 - stats.x1_mean) / stats.x1_std
    zb = np.zeros(len(BIOMARKER_NAMES))
    for k, name in enumerate(BIOMARKER_NAMES):
        if record.biomarkers.ok(name):
            zb[k] = ((record.biomarkers.values[name] - stats.biom_mean[name])
                     / stats.biom_std[name])
    return z1, zb


def normalize_batch(stats, records):
    """Stacked (B, 512) and (B, 18) arrays for a record list."""
    pairs = [apply_normalizer(stats, r) for r in records]
    return (np.stack([p[0] for p in pairs]),
            np.stack([p[1] for p in pairs]))
