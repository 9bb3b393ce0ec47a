"""Synthetic scenes with analytically known biomarkers.

Each phantom is built from continuous geometry (ellipsoids, tubes, boxes),
so the expected biomarker values come from closed-form formulas rather than
the voxel grid. Stated tolerances absorb voxelization error. The Agatston
expectation is the one exception: it comes from `brute_force_agatston`, an
independent exhaustive implementation sharing only the documented slab rule.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .biomarkers import BIOMARKER_NAMES, STATUS_EMPTY, STATUS_FAILED, STATUS_OK
from .errors import OutOfBounds
from .volume_io import CtVolume, LabelMask, MaskSchema

BACKGROUND_HU = -1000
SOFT_TISSUE_HU = 40


@dataclass
class HeartSpec:
    center_mm: tuple            # ellipsoid center
    semi_axes_mm: tuple         # outer (pericardium) semi-axes
    chamber_axes_mm: tuple      # inner (chamber) semi-axes, same center
    fat_hu: int = -100          # HU painted on the shell


@dataclass
class AortaSpec:
    kind: str                   # "straight" or "half_torus"
    radius_mm: float
    # straight: tube along z from start_mm, length length_mm
    start_mm: tuple = (0.0, 0.0, 0.0)
    length_mm: float = 0.0
    # half_torus: x >= center x, circle in the x-z plane
    center_mm: tuple = (0.0, 0.0, 0.0)
    ring_radius_mm: float = 0.0


@dataclass
class InsertSpec:
    label: int                  # 1 coronary, 2 aortic
    corner_mm: tuple
    size_mm: tuple
    hu: int


@dataclass
class LungSpec:
    center_mm: tuple
    semi_axes_mm: tuple
    base_hu: int = -500
    low_fraction: float = 0.0   # voxels repainted below -950
    high_fraction: float = 0.0  # voxels repainted above -200
    low_hu: int = -980
    high_hu: int = -100


@dataclass
class PhantomSpec:
    name: str
    dims: tuple
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    heart: HeartSpec | None = None
    aorta: AortaSpec | None = None
    inserts: list = field(default_factory=list)
    left_lung: LungSpec | None = None
    right_lung: LungSpec | None = None
    seed: int = 0

    def to_json_dict(self):
        return asdict(self)

    @classmethod
    def from_json_dict(cls, d):
        def tup(sub, *keys):
            sub = dict(sub)
            for k in keys:
                sub[k] = tuple(sub[k])
            return sub

        d = tup(d, "dims", "spacing_mm")
        if d.get("heart"):
            d["heart"] = HeartSpec(**tup(d["heart"], "center_mm",
                                         "semi_axes_mm", "chamber_axes_mm"))
        if d.get("aorta"):
            d["aorta"] = AortaSpec(**tup(d["aorta"], "start_mm", "center_mm"))
        d["inserts"] = [InsertSpec(**tup(i, "corner_mm", "size_mm"))
                        for i in d.get("inserts", [])]
        for key in ("left_lung", "right_lung"):
            if d.get(key):
                d[key] = LungSpec(**tup(d[key], "center_mm", "semi_axes_mm"))
        return cls(**d)


@dataclass
class GroundTruth:
    """Expected biomarker values with per-field absolute tolerances."""

    values: dict
    tolerances: dict
    expected_status: dict

    def to_json_dict(self):
        return {"values": self.values, "tolerances": self.tolerances,
                "expected_status": self.expected_status}

    @classmethod
    def from_json_dict(cls, d):
        return cls(values=d["values"], tolerances=d["tolerances"],
                   expected_status=d["expected_status"])

    def check(self, bv):
        """Compare a BiomarkerVector; returns {name: (ok, got, want, tol)}."""
        report = {}
        for name in BIOMARKER_NAMES:
            want_status = self.expected_status[name]
            if bv.status[name] != want_status:
                report[name] = (False, bv.status[name], want_status, None)
                continue
            if want_status != STATUS_OK:
                report[name] = (True, bv.status[name], want_status, None)
                continue
            want = self.values[name]
            tol = self.tolerances[name]
            got = bv.values[name]
            report[name] = (abs(got - want) <= tol, got, want, tol)
        return report


# --- voxelization helpers ---------------------------------------------------
# voxel centers sit at index * spacing on each axis

def _grids(dims, spacing):
    x = np.arange(dims[0]) * spacing[0]
    y = np.arange(dims[1]) * spacing[1]
    z = np.arange(dims[2]) * spacing[2]
    return np.meshgrid(x, y, z, indexing="ij", sparse=True)


def _check_bounds(dims, spacing, lo, hi, what):
    top = [(n - 1) * s for n, s in zip(dims, spacing)]
    for k in range(3):
        if lo[k] < 0 or hi[k] > top[k]:
            raise OutOfBounds(
                f"{what} spans [{lo[k]:.1f}, {hi[k]:.1f}] mm on axis {k}, "
                f"grid covers [0, {top[k]:.1f}]")


def _ellipsoid(dims, spacing, center, axes):
    gx, gy, gz = _grids(dims, spacing)
    return (((gx - center[0]) / axes[0]) ** 2
            + ((gy - center[1]) / axes[1]) ** 2
            + ((gz - center[2]) / axes[2]) ** 2) <= 1.0


def _straight_tube(dims, spacing, spec: AortaSpec):
    gx, gy, gz = _grids(dims, spacing)
    x0, y0, z0 = spec.start_mm
    radial = (gx - x0) ** 2 + (gy - y0) ** 2
    return (radial <= spec.radius_mm ** 2) \
        & (gz >= z0) & (gz <= z0 + spec.length_mm)


def _half_torus(dims, spacing, spec: AortaSpec):
    gx, gy, gz = _grids(dims, spacing)
    cx, cy, cz = spec.center_mm
    ring = np.sqrt((gx - cx) ** 2 + (gz - cz) ** 2) - spec.ring_radius_mm
    return (ring ** 2 + (gy - cy) ** 2 <= spec.radius_mm ** 2) & (gx >= cx)


def _box(dims, spacing, corner, size):
    gx, gy, gz = _grids(dims, spacing)
    return ((gx >= corner[0]) & (gx < corner[0] + size[0])
            & (gy >= corner[1]) & (gy < corner[1] + size[1])
            & (gz >= corner[2]) & (gz < corner[2] + size[2]))


def _ellipsoid_volume(axes):
    return 4.0 / 3.0 * math.pi * axes[0] * axes[1] * axes[2]


# --- generation -------------------------------------------------------------

def generate(spec: PhantomSpec):
    """Voxelize the scene.

    Returns (CtVolume, masks dict with keys pericardium/calcium/aorta/lungs,
    GroundTruth).
    """
    dims = tuple(spec.dims)
    spacing = tuple(float(s) for s in spec.spacing_mm)
    hu = np.full(dims, BACKGROUND_HU, dtype=np.int16)
    peri = np.zeros(dims, dtype=np.uint8)
    calc = np.zeros(dims, dtype=np.uint8)
    aorta = np.zeros(dims, dtype=np.uint8)
    lungs = np.zeros(dims, dtype=np.uint8)
    rng = np.random.default_rng(spec.seed)

    for label, lung in ((1, spec.left_lung), (2, spec.right_lung)):
        if lung is None:
            continue
        c, a = lung.center_mm, lung.semi_axes_mm
        _check_bounds(dims, spacing, [c[k] - a[k] for k in range(3)],
                      [c[k] + a[k] for k in range(3)], f"lung {label}")
        sel = _ellipsoid(dims, spacing, c, a)
        lungs[sel] = label
        hu[sel] = lung.base_hu
        idx = np.argwhere(sel)
        n = len(idx)
        draw = rng.permutation(n)
        n_low = int(round(lung.low_fraction * n))
        n_high = int(round(lung.high_fraction * n))
        for rows, value in ((draw[:n_low], lung.low_hu),
                            (draw[n_low:n_low + n_high], lung.high_hu)):
            hu[idx[rows, 0], idx[rows, 1], idx[rows, 2]] = value

    if spec.heart is not None:
        h = spec.heart
        _check_bounds(dims, spacing,
                      [h.center_mm[k] - h.semi_axes_mm[k] for k in range(3)],
                      [h.center_mm[k] + h.semi_axes_mm[k] for k in range(3)],
                      "heart")
        outer = _ellipsoid(dims, spacing, h.center_mm, h.semi_axes_mm)
        inner = _ellipsoid(dims, spacing, h.center_mm, h.chamber_axes_mm)
        peri[outer] = 1
        peri[inner] = 2
        hu[outer & ~inner] = h.fat_hu
        hu[inner] = SOFT_TISSUE_HU

    if spec.aorta is not None:
        a = spec.aorta
        if a.kind == "straight":
            x0, y0, z0 = a.start_mm
            _check_bounds(dims, spacing,
                          (x0 - a.radius_mm, y0 - a.radius_mm, z0),
                          (x0 + a.radius_mm, y0 + a.radius_mm,
                           z0 + a.length_mm), "aorta")
            sel = _straight_tube(dims, spacing, a)
        elif a.kind == "half_torus":
            cx, cy, cz = a.center_mm
            reach = a.ring_radius_mm + a.radius_mm
            _check_bounds(dims, spacing,
                          (cx, cy - a.radius_mm, cz - reach),
                          (cx + reach, cy + a.radius_mm, cz + reach), "aorta")
            sel = _half_torus(dims, spacing, a)
        else:
            raise OutOfBounds(f"unknown aorta kind {a.kind!r}")
        aorta[sel] = 1
        hu[sel] = SOFT_TISSUE_HU

    for ins in spec.inserts:
        _check_bounds(dims, spacing, ins.corner_mm,
                      [ins.corner_mm[k] + ins.size_mm[k] for k in range(3)],
                      "insert")
        sel = _box(dims, spacing, ins.corner_mm, ins.size_mm)
        calc[sel] = ins.label
        hu[sel] = ins.hu

    origin = (0.0, 0.0, 0.0)
    volume = CtVolume(dims=dims, spacing=spacing, origin=origin, data=hu)

    def mask(data, schema):
        return LabelMask(dims=dims, spacing=spacing, origin=origin,
                        data=data, schema=schema)

    masks = {
        "pericardium": mask(peri, MaskSchema.PERICARDIUM),
        "calcium": mask(calc, MaskSchema.CALCIUM),
        "aorta": mask(aorta, MaskSchema.AORTA),
        "lungs": mask(lungs, MaskSchema.LUNGS),
    }
    truth = _ground_truth(spec, volume, masks)
    return volume, masks, truth


def _ground_truth(spec: PhantomSpec, volume, masks) -> GroundTruth:
    values = {n: 0.0 for n in BIOMARKER_NAMES}
    tol = {n: 0.0 for n in BIOMARKER_NAMES}
    status = {n: STATUS_OK for n in BIOMARKER_NAMES}
    spacing = spec.spacing_mm

    def rel(name, value, frac):
        values[name] = value
        tol[name] = abs(value) * frac

    def diameter_tol(name, value):
        values[name] = value
        tol[name] = max(1.0, 0.02 * abs(value))

    if spec.heart is not None:
        h = spec.heart
        shell = _ellipsoid_volume(h.semi_axes_mm) \
            - _ellipsoid_volume(h.chamber_axes_mm)
        if -190 <= h.fat_hu <= -30:
            rel("PFATV", shell, 0.05)
            values["PFATM"] = float(h.fat_hu)
            tol["PFATM"] = 0.5
            values["PFATSTD"] = 0.0
            tol["PFATSTD"] = 0.5
        else:
            values["PFATV"] = 0.0
            status["PFATM"] = STATUS_EMPTY
            status["PFATSTD"] = STATUS_EMPTY
        chamber_frac = (_ellipsoid_volume(h.chamber_axes_mm)
                        / _ellipsoid_volume(h.semi_axes_mm))
        values["CHR"] = chamber_frac
        tol["CHR"] = 0.02
        cld = max(h.chamber_axes_mm[0], h.chamber_axes_mm[1])
        csd = min(h.chamber_axes_mm[0], h.chamber_axes_mm[1])
        diameter_tol("CLD", cld)
        diameter_tol("CSD", csd)
    else:
        values["PFATV"] = 0.0
        for n in ("PFATM", "PFATSTD", "CHR", "CLD", "CSD", "CTR"):
            status[n] = STATUS_EMPTY

    if spec.heart is not None and spec.left_lung and spec.right_lung:
        heart_width = 2 * spec.heart.semi_axes_mm[0]
        left = spec.left_lung.center_mm[0] - spec.left_lung.semi_axes_mm[0]
        right = spec.right_lung.center_mm[0] + spec.right_lung.semi_axes_mm[0]
        values["CTR"] = heart_width / (right - left)
        tol["CTR"] = 0.02
    elif spec.heart is not None:
        status["CTR"] = STATUS_EMPTY

    if spec.aorta is not None:
        a = spec.aorta
        ati = 1.0 if a.kind == "straight" else math.pi / 2
        rel("ATI", ati, 0.03)
        diameter_tol("AMD", 2 * a.radius_mm)
        values["AMDSTD"] = 0.0
        # straight tube sections are near-identical circles; curved tubes pick
        # up mild obliquity near the trimmed ends
        tol["AMDSTD"] = 0.5 if a.kind == "straight" else 1.0
    else:
        for n in ("ATI", "AMD", "AMDSTD"):
            status[n] = STATUS_FAILED

    for label, vol_name in ((1, "CACV"), (2, "ACV")):
        analytic = sum(math.prod(i.size_mm) for i in spec.inserts
                       if i.label == label and i.hu >= 130)
        rel(vol_name, analytic, 0.05 if analytic else 0.0)
    # scores come from the independent exhaustive oracle, exact by contract
    cacs, acs = brute_force_agatston(volume, masks["calcium"])
    values["CACS"] = cacs
    values["ACS"] = acs
    tol["CACS"] = 1e-9
    tol["ACS"] = 1e-9

    for label, spec_lung, low_name, high_name in (
            (1, spec.left_lung, "LLR", "LHR"),
            (2, spec.right_lung, "RLR", "RHR")):
        if spec_lung is None:
            status[low_name] = STATUS_EMPTY
            status[high_name] = STATUS_EMPTY
            continue
        values[low_name] = spec_lung.low_fraction
        values[high_name] = spec_lung.high_fraction
        tol[low_name] = 0.02
        tol[high_name] = 0.02

    return GroundTruth(values=values, tolerances=tol, expected_status=status)


# --- independent Agatston oracle --------------------------------------------

def brute_force_agatston(v: CtVolume, m: LabelMask):
    """Exhaustive per-voxel Agatston scoring for both labels.

    Deliberately shares no code with the biomarkers module beyond the
    documented conventions: slab of a slice is floor(center_z / 3 mm), 2D
    lesions by 8-connectivity, area floor 1 mm^2, weights 1/2/3/4 at peak HU
    breakpoints 130/200/300/400.
    """
    sx, sy, sz = v.spacing
    nx, ny, nz = v.data.shape
    results = []
    for label in (1, 2):
        voxels = [(i, j, k) for i, j, k in zip(*np.nonzero(m.data == label))
                  if v.data[i, j, k] >= 130]
        slabs = {}
        for i, j, k in voxels:
            slab = int(((k + 0.5) * sz) // 3.0)
            slabs.setdefault(slab, {})
            cell = slabs[slab].setdefault((i, j), -10000)
            slabs[slab][(i, j)] = max(cell, int(v.data[i, j, k]))
        total = 0.0
        for cells in slabs.values():
            unvisited = set(cells)
            while unvisited:
                seed = unvisited.pop()
                lesion = [seed]
                stack = [seed]
                while stack:
                    ci, cj = stack.pop()
                    for di in (-1, 0, 1):
                        for dj in (-1, 0, 1):
                            nb = (ci + di, cj + dj)
                            if nb in unvisited:
                                unvisited.remove(nb)
                                lesion.append(nb)
                                stack.append(nb)
                area = len(lesion) * sx * sy
                if area < 1.0:
                    continue
                peak = max(cells[p] for p in lesion)
                if peak >= 400:
                    w = 4
                elif peak >= 300:
                    w = 3
                elif peak >= 200:
                    w = 2
                elif peak >= 130:
                    w = 1
                else:
                    w = 0
                total += area * w
        results.append(total)
    return results[0], results[1]


# --- bundled scenes ---------------------------------------------------------

def bundled_specs():
    """Five standard verification scenes, keyed by name."""
    heart = HeartSpec(center_mm=(150, 80, 45), semi_axes_mm=(60, 45, 40),
                      chamber_axes_mm=(45, 30, 28), fat_hu=-100)
    lungs = dict(
        left_lung=LungSpec(center_mm=(42, 80, 45), semi_axes_mm=(35, 55, 42),
                           low_fraction=0.05, high_fraction=0.10),
        right_lung=LungSpec(center_mm=(258, 80, 45), semi_axes_mm=(35, 55, 42),
                            low_fraction=0.08, high_fraction=0.04))
    straight = AortaSpec(kind="straight", radius_mm=15.0,
                         start_mm=(150.0, 170.0, 5.0), length_mm=80.0)

    def insert(label, x, hu, size=(3, 3, 3)):
        return InsertSpec(label=label, corner_mm=(x, 210, 10),
                          size_mm=size, hu=hu)

    specs = {}
    specs["baseline"] = PhantomSpec(
        name="baseline", dims=(300, 230, 91), heart=heart, aorta=straight,
        inserts=[insert(1, 10, 150), insert(1, 20, 250),
                 insert(2, 30, 350), insert(2, 40, 450)],
        seed=11, **lungs)
    specs["torus"] = PhantomSpec(
        name="torus", dims=(300, 230, 161),
        heart=heart,
        aorta=AortaSpec(kind="half_torus", radius_mm=8.0,
                        center_mm=(150.0, 195.0, 80.0), ring_radius_mm=60.0),
        inserts=[insert(1, 10, 180), insert(2, 30, 420)],
        seed=12, **lungs)
    specs["boundary_calcium"] = PhantomSpec(
        name="boundary_calcium", dims=(300, 230, 91), heart=heart,
        aorta=straight,
        inserts=[insert(1, 10, 130), insert(1, 20, 200),
                 insert(1, 30, 300), insert(1, 40, 400),
                 insert(2, 50, 129),                 # below threshold
                 insert(2, 60, 160)],
        seed=13, **lungs)
    specs["emphysema"] = PhantomSpec(
        name="emphysema", dims=(300, 230, 91),
        heart=HeartSpec(center_mm=(150, 80, 45), semi_axes_mm=(50, 40, 36),
                        chamber_axes_mm=(34, 22, 20), fat_hu=-120),
        aorta=straight,
        left_lung=LungSpec(center_mm=(42, 80, 45), semi_axes_mm=(35, 55, 42),
                           low_fraction=0.30, high_fraction=0.02),
        right_lung=LungSpec(center_mm=(258, 80, 45), semi_axes_mm=(35, 55, 42),
                            low_fraction=0.25, high_fraction=0.03),
        seed=14)
    specs["dense_fat"] = PhantomSpec(
        name="dense_fat", dims=(300, 230, 91),
        heart=HeartSpec(center_mm=(150, 80, 45), semi_axes_mm=(58, 48, 40),
                        chamber_axes_mm=(40, 40, 30), fat_hu=-35),
        aorta=AortaSpec(kind="straight", radius_mm=10.0,
                        start_mm=(150.0, 170.0, 5.0), length_mm=70.0),
        inserts=[insert(1, 10, 199), insert(1, 20, 299),
                 insert(2, 30, 399), insert(2, 40, 1200)],
        seed=15, **lungs)
    return specs


def save_spec(spec: PhantomSpec, path):
    Path(path).write_text(json.dumps(spec.to_json_dict(), indent=2) + "\n")


def load_spec(path) -> PhantomSpec:
    return PhantomSpec.from_json_dict(json.loads(Path(path).read_text()))
