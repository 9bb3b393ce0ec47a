"""The 18 discrete quantitative biomarkers.

Groups:
  pericardial fat   PFATV, PFATM, PFATSTD
  calcification     CACS, CACV, ACS, ACV
  aorta morphology  ATI, AMD, AMDSTD
  heart morphology  CHR, CLD, CSD, CTR
  lung texture      LLR, RLR, LHR, RHR

Threshold conventions: fat HU in [-190, -30] inclusive, calcium HU >= 130
inclusive, high lung attenuation strictly > -200, low strictly < -950.
Standard deviations are population (divide by n).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

from . import mask_geometry as geo
from .errors import (
    CtQuantError,
    DegenerateConic,
    DegenerateShape,
    EmptyMask,
    MultipleComponents,
    SchemaMismatch,
)
from .volume_io import CtVolume, LabelMask, MaskSchema, check_alignment, voxel_volume_mm3

FAT_HU_LO = -190
FAT_HU_HI = -30
CALCIUM_HU_MIN = 130
LUNG_HIGH_HU = -200
LUNG_LOW_HU = -950
AGATSTON_SLAB_MM = 3.0
AGATSTON_MIN_AREA_MM2 = 1.0

STATUS_OK = "ok"
STATUS_EMPTY = "empty-input"
STATUS_FAILED = "failed"

BIOMARKER_NAMES = (
    "PFATV", "PFATM", "PFATSTD",
    "CACS", "CACV", "ACS", "ACV",
    "ATI", "AMD", "AMDSTD",
    "CHR", "CLD", "CSD", "CTR",
    "LLR", "RLR", "LHR", "RHR",
)

BIOMARKER_GROUPS = {
    "pericardial_fat": ("PFATV", "PFATM", "PFATSTD"),
    "calcification": ("CACS", "CACV", "ACS", "ACV"),
    "aorta_shape": ("AMD", "AMDSTD", "ATI"),
    "heart_morphology": ("CHR", "CLD", "CSD", "CTR"),
    "lung_texture": ("LLR", "RLR", "LHR", "RHR"),
}


@dataclass
class BiomarkerVector:
    """The 18 scalar biomarkers of one scan plus per-field status flags."""

    values: dict = field(default_factory=dict)
    status: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in BIOMARKER_NAMES:
            self.values.setdefault(name, math.nan)
            self.status.setdefault(name, STATUS_FAILED)

    def set(self, name, value, status=STATUS_OK):
        if name not in BIOMARKER_NAMES:
            raise KeyError(name)
        self.values[name] = float(value)
        self.status[name] = status

    def __getitem__(self, name):
        return self.values[name]

    def ok(self, name) -> bool:
        return self.status[name] == STATUS_OK

    def assert_invariants(self):
        """Range checks that must hold whenever the involved fields are ok."""
        for name in ("PFATV", "CACS", "CACV", "ACS", "ACV", "AMD", "AMDSTD",
                     "CLD", "CSD"):
            if self.ok(name):
                assert self.values[name] >= 0, f"{name} negative"
        for name in ("CHR", "CTR", "LLR", "RLR", "LHR", "RHR"):
            if self.ok(name):
                assert 0.0 <= self.values[name] <= 1.0, f"{name} out of [0,1]"
        if self.ok("ATI"):
            assert self.values["ATI"] >= 1.0 - 1e-9, "ATI below 1"
        if self.ok("CLD") and self.ok("CSD"):
            assert self.values["CLD"] >= self.values["CSD"], "CLD < CSD"

    def as_row(self):
        return [self.values[n] for n in BIOMARKER_NAMES]

    def to_json_dict(self):
        return {
            "biomarkers": {n: self.values[n] for n in BIOMARKER_NAMES},
            "status": {n: self.status[n] for n in BIOMARKER_NAMES},
        }

    @classmethod
    def from_json_dict(cls, d):
        out = cls()
        for n in BIOMARKER_NAMES:
            out.values[n] = float(d["biomarkers"][n])
            out.status[n] = d["status"][n]
        return out


def _require_schema(mask: LabelMask, schema: MaskSchema):
    if mask.schema is not schema:
        raise SchemaMismatch(
            f"expected {schema.value} mask, got {mask.schema.value}")


# --- (i) pericardial fat ----------------------------------------------------

def pericardial_fat(v: CtVolume, m: LabelMask):
    """PFATV (mm^3), PFATM (HU), PFATSTD (HU) from the pericardium label."""
    _require_schema(m, MaskSchema.PERICARDIUM)
    check_alignment(v, m)
    fat = (m.data == 1) & (v.data >= FAT_HU_LO) & (v.data <= FAT_HU_HI)
    n = int(fat.sum())
    out = BiomarkerVector()
    out.set("PFATV", n * voxel_volume_mm3(v))
    if n == 0:
        out.status["PFATM"] = STATUS_EMPTY
        out.status["PFATSTD"] = STATUS_EMPTY
    else:
        hu = v.data[fat].astype(float)
        out.set("PFATM", hu.mean())
        out.set("PFATSTD", hu.std())
    return out


# --- (ii) calcification -----------------------------------------------------

def agatston_weight(peak_hu: float) -> int:
    """4-level density weight; 0 means the lesion is excluded."""
    if peak_hu < 130:
        return 0
    if peak_hu < 200:
        return 1
    if peak_hu < 300:
        return 2
    if peak_hu < 400:
        return 3
    return 4


def _slab_assignment(nz: int, sz: float):
    """Map each z slice to its 3 mm slab by slice-center position."""
    centers = (np.arange(nz) + 0.5) * sz
    return np.floor(centers / AGATSTON_SLAB_MM).astype(int)


def _agatston_score(lesion3d: np.ndarray, hu3d: np.ndarray, spacing) -> float:
    """Score one label's refined lesion grid using 3 mm slab aggregation."""
    sx, sy, sz = spacing
    nz = lesion3d.shape[2]
    slab_of = _slab_assignment(nz, sz)
    pixel_area = sx * sy
    score = 0.0
    struct = ndimage.generate_binary_structure(2, 2)
    for slab in np.unique(slab_of):
        zsel = slab_of == slab
        present = lesion3d[:, :, zsel].any(axis=2)
        if not present.any():
            continue
        peak = np.where(lesion3d[:, :, zsel], hu3d[:, :, zsel], -10000).max(axis=2)
        labels, nles = ndimage.label(present, structure=struct)
        for k in range(1, nles + 1):
            sel = labels == k
            area = sel.sum() * pixel_area
            if area < AGATSTON_MIN_AREA_MM2:
                continue
            score += area * agatston_weight(float(peak[sel].max()))
    return score


def calcium_scores(v: CtVolume, m: LabelMask):
    """CACS, CACV, ACS, ACV for the coronary (1) and aortic (2) labels."""
    _require_schema(m, MaskSchema.CALCIUM)
    check_alignment(v, m)
    out = BiomarkerVector()
    hu = v.data.astype(float)
    dense = hu >= CALCIUM_HU_MIN
    vv = voxel_volume_mm3(v)
    for label, vol_name, score_name in ((1, "CACV", "CACS"), (2, "ACV", "ACS")):
        refined = (m.data == label) & dense
        out.set(vol_name, int(refined.sum()) * vv)
        out.set(score_name, _agatston_score(refined, hu, v.spacing))
    return out


# --- (iii) aorta morphology -------------------------------------------------

def aorta_morphology(m: LabelMask):
    """ATI, AMD (mm), AMDSTD (mm) from the aorta tube mask."""
    _require_schema(m, MaskSchema.AORTA)
    out = BiomarkerVector()
    mask = m.data == 1
    try:
        cl = geo.extract_centerline(mask, m.spacing)
        sections = geo.cross_sections(mask, m.spacing, cl, interval_mm=1.0)
    except (EmptyMask, MultipleComponents, DegenerateShape):
        for name in ("ATI", "AMD", "AMDSTD"):
            out.status[name] = STATUS_FAILED
        return out
    diameters = np.array([s.max_diameter_mm for s in sections])
    out.set("ATI", cl.arc_length_mm / cl.chord_mm)
    out.set("AMD", diameters.max())
    out.set("AMDSTD", diameters.std())
    return out


# --- (iv) heart morphology --------------------------------------------------

def heart_morphology(v: CtVolume, heart: LabelMask, lungs: LabelMask):
    """CHR, CLD (mm), CSD (mm), CTR."""
    _require_schema(heart, MaskSchema.PERICARDIUM)
    _require_schema(lungs, MaskSchema.LUNGS)
    check_alignment(v, heart)
    check_alignment(v, lungs)
    out = BiomarkerVector()

    chambers = heart.data == 2
    pericardium = heart.data == 1
    n_ch = int(chambers.sum())
    n_pc = int(pericardium.sum())
    if n_ch + n_pc == 0:
        for name in ("CHR", "CLD", "CSD", "CTR"):
            out.status[name] = STATUS_EMPTY
        return out
    out.set("CHR", n_ch / (n_ch + n_pc))

    sx, sy, _ = heart.spacing
    if n_ch == 0:
        out.status["CLD"] = STATUS_EMPTY
        out.status["CSD"] = STATUS_EMPTY
    else:
        # maximal-chamber-area axial slice stands in for the four-chamber view
        areas = chambers.sum(axis=(0, 1))
        z_ch = int(np.argmax(areas))
        sl = chambers[:, :, z_ch]
        boundary = sl & ~ndimage.binary_erosion(
            sl, structure=ndimage.generate_binary_structure(2, 1))
        ii, jj = np.nonzero(boundary)
        pts = np.stack([ii * sx, jj * sy], axis=1)
        try:
            fit = geo.fit_ellipse(pts)
            out.set("CLD", fit.semi_major_mm)
            out.set("CSD", fit.semi_minor_mm)
        except (DegenerateConic, CtQuantError):
            out.status["CLD"] = STATUS_FAILED
            out.status["CSD"] = STATUS_FAILED

    whole_heart = chambers | pericardium
    z_heart = int(np.argmax(whole_heart.sum(axis=(0, 1))))
    slice_sel = np.zeros_like(whole_heart)
    slice_sel[:, :, z_heart] = True
    heart_width = geo.axial_extent_mm(heart.data, heart.spacing, (1, 2), axis=0,
                                      restrict=slice_sel)
    lung_width = geo.axial_extent_mm(lungs.data, lungs.spacing, (1, 2), axis=0,
                                     restrict=slice_sel)
    if lung_width <= 0:
        out.status["CTR"] = STATUS_EMPTY
    else:
        out.set("CTR", heart_width / lung_width)
    return out


# --- (v) lung texture -------------------------------------------------------

def lung_texture(v: CtVolume, m: LabelMask):
    """LLR, RLR (low attenuation) and LHR, RHR (high attenuation) ratios."""
    _require_schema(m, MaskSchema.LUNGS)
    check_alignment(v, m)
    out = BiomarkerVector()
    for label, low_name, high_name in ((1, "LLR", "LHR"), (2, "RLR", "RHR")):
        lung = m.data == label
        n = int(lung.sum())
        if n == 0:
            out.status[low_name] = STATUS_EMPTY
            out.status[high_name] = STATUS_EMPTY
            continue
        hu = v.data[lung]
        out.set(low_name, int((hu < LUNG_LOW_HU).sum()) / n)
        out.set(high_name, int((hu > LUNG_HIGH_HU).sum()) / n)
    return out


# --- composition ------------------------------------------------------------

def extract_all(v: CtVolume, pericardium=None, calcium=None, aorta=None,
                lungs=None) -> BiomarkerVector:
    """All 18 biomarkers; missing masks flag their group, never abort."""
    out = BiomarkerVector()

    def merge(part, names):
        for name in names:
            out.values[name] = part.values[name]
            out.status[name] = part.status[name]

    if pericardium is not None:
        merge(pericardial_fat(v, pericardium), ("PFATV", "PFATM", "PFATSTD"))
    if calcium is not None:
        merge(calcium_scores(v, calcium), ("CACS", "CACV", "ACS", "ACV"))
    if aorta is not None:
        merge(aorta_morphology(aorta), ("ATI", "AMD", "AMDSTD"))
    if pericardium is not None and lungs is not None:
        merge(heart_morphology(v, pericardium, lungs),
              ("CHR", "CLD", "CSD", "CTR"))
    if lungs is not None:
        merge(lung_texture(v, lungs), ("LLR", "RLR", "LHR", "RHR"))
    out.assert_invariants()
    return out


# --- serialization ----------------------------------------------------------

def csv_header():
    return ["scan_id", *BIOMARKER_NAMES,
            *[f"{n}_status" for n in BIOMARKER_NAMES]]


def to_csv_row(scan_id: str, bv: BiomarkerVector):
    return [scan_id,
            *[repr(float(bv.values[n])) for n in BIOMARKER_NAMES],
            *[bv.status[n] for n in BIOMARKER_NAMES]]


def write_csv(path, rows):
    """rows: iterable of (scan_id, BiomarkerVector)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(csv_header())
        for scan_id, bv in rows:
            writer.writerow(to_csv_row(scan_id, bv))


def read_csv(path):
    """Inverse of write_csv; yields (scan_id, BiomarkerVector)."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            bv = BiomarkerVector()
            for n in BIOMARKER_NAMES:
                bv.values[n] = float(row[n])
                bv.status[n] = row[f"{n}_status"]
            out.append((row["scan_id"], bv))
    return out
