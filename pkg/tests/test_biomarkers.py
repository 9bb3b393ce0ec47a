import math

import numpy as np
import pytest

from conftest import make_mask, make_volume, straight_tube
from ctquant.biomarkers import (
    BIOMARKER_NAMES,
    STATUS_EMPTY,
    STATUS_FAILED,
    STATUS_OK,
    BiomarkerVector,
    agatston_weight,
    aorta_morphology,
    calcium_scores,
    extract_all,
    heart_morphology,
    lung_texture,
    pericardial_fat,
    read_csv,
    write_csv,
)
from ctquant.errors import SchemaMismatch
from ctquant.volume_io import MaskSchema


def test_biomarker_names_complete():
    assert len(BIOMARKER_NAMES) == 18
    assert len(set(BIOMARKER_NAMES)) == 18


# --- pericardial fat --------------------------------------------------------

def test_fat_thresholds_inclusive():
    hu = np.array([[[-191, -190, -100, -30, -29]]], dtype=np.int16)
    v = make_volume(hu)
    m = make_mask(np.ones_like(hu), MaskSchema.PERICARDIUM)
    out = pericardial_fat(v, m)
    assert out["PFATV"] == 3.0           # -190, -100, -30 qualify
    assert out["PFATM"] == pytest.approx((-190 - 100 - 30) / 3)


def test_fat_constant_shell():
    hu = np.full((10, 10, 100), -100, dtype=np.int16)
    v = make_volume(hu)
    m = make_mask(np.ones_like(hu), MaskSchema.PERICARDIUM)
    out = pericardial_fat(v, m)
    assert out["PFATV"] == 10000.0
    assert out["PFATM"] == -100.0
    assert out["PFATSTD"] == 0.0


def test_fat_empty_flags():
    hu = np.zeros((3, 3, 3), dtype=np.int16)
    v = make_volume(hu)
    m = make_mask(np.ones_like(hu), MaskSchema.PERICARDIUM)
    out = pericardial_fat(v, m)
    assert out["PFATV"] == 0.0 and out.ok("PFATV")
    assert out.status["PFATM"] == STATUS_EMPTY
    assert out.status["PFATSTD"] == STATUS_EMPTY


def test_fat_population_std():
    hu = np.zeros((2, 1, 1), dtype=np.int16)
    hu[0], hu[1] = -100, -120
    v = make_volume(hu)
    m = make_mask(np.ones_like(hu), MaskSchema.PERICARDIUM)
    out = pericardial_fat(v, m)
    assert out["PFATSTD"] == pytest.approx(10.0)   # population, not sample


def test_fat_wrong_schema():
    hu = np.zeros((2, 2, 2), dtype=np.int16)
    with pytest.raises(SchemaMismatch):
        pericardial_fat(make_volume(hu),
                        make_mask(np.ones_like(hu), MaskSchema.LUNGS))


# --- calcium ----------------------------------------------------------------

def test_agatston_weight_breakpoints():
    assert agatston_weight(129) == 0
    assert agatston_weight(130) == 1
    assert agatston_weight(199) == 1
    assert agatston_weight(200) == 2
    assert agatston_weight(299) == 2
    assert agatston_weight(300) == 3
    assert agatston_weight(399) == 3
    assert agatston_weight(400) == 4
    assert agatston_weight(2000) == 4


def slab_scene(pixels, hu_value, spacing=(1.0, 1.0, 3.0)):
    """One 3 mm slab with a single square lesion of `pixels` per side."""
    data = np.full((20, 20, 1), -1000, dtype=np.int16)
    mask = np.zeros_like(data, dtype=np.uint8)
    data[5:5 + pixels, 5:5 + pixels, 0] = hu_value
    mask[5:5 + pixels, 5:5 + pixels, 0] = 1
    return (make_volume(data, spacing),
            make_mask(mask, MaskSchema.CALCIUM, spacing))


def test_hand_agatston_10mm2_at_250():
    # 10 mm^2 lesion at 250 HU in one 3 mm slice: weight 2 -> score 20
    data = np.full((20, 20, 1), -1000, dtype=np.int16)
    mask = np.zeros_like(data, dtype=np.uint8)
    data[5:10, 5:7, 0] = 250
    mask[5:10, 5:7, 0] = 1
    v = make_volume(data, (1.0, 1.0, 3.0))
    m = make_mask(mask, MaskSchema.CALCIUM, (1.0, 1.0, 3.0))
    out = calcium_scores(v, m)
    assert out["CACS"] == 20.0
    assert out["CACV"] == 30.0          # 10 voxels * 3 mm^3


def test_agatston_below_130_excluded():
    v, m = slab_scene(4, 120)
    out = calcium_scores(v, m)
    assert out.as_row()[3:7] == [0.0, 0.0, 0.0, 0.0]


def test_agatston_sub_mm2_lesion_dropped():
    # one 0.5 x 0.5 mm pixel: area 0.25 mm^2 < 1 -> excluded from score
    spacing = (0.5, 0.5, 3.0)
    data = np.full((8, 8, 1), -1000, dtype=np.int16)
    mask = np.zeros_like(data, dtype=np.uint8)
    data[3, 3, 0] = 500
    mask[3, 3, 0] = 1
    out = calcium_scores(make_volume(data, spacing),
                         make_mask(mask, MaskSchema.CALCIUM, spacing))
    assert out["CACS"] == 0.0
    assert out["CACV"] == pytest.approx(0.75)   # volume is not area-filtered


def test_agatston_translation_invariance():
    spacing = (1.0, 1.0, 3.0)
    scores = []
    for shift in (0, 3, 7):
        data = np.full((25, 25, 1), -1000, dtype=np.int16)
        mask = np.zeros_like(data, dtype=np.uint8)
        data[2 + shift: 6 + shift, 4:7, 0] = 320
        mask[2 + shift: 6 + shift, 4:7, 0] = 1
        out = calcium_scores(make_volume(data, spacing),
                             make_mask(mask, MaskSchema.CALCIUM, spacing))
        scores.append(out["CACS"])
    assert scores[0] == scores[1] == scores[2] == 36.0


def test_agatston_peak_hu_across_slab():
    # thin slices resampled to one 3 mm slab; weight from the slab peak
    spacing = (1.0, 1.0, 1.0)
    data = np.full((10, 10, 3), -1000, dtype=np.int16)
    mask = np.zeros_like(data, dtype=np.uint8)
    data[4:6, 4:6, 0] = 150
    data[4:6, 4:6, 1] = 450
    data[4:6, 4:6, 2] = 150
    mask[4:6, 4:6, :] = 1
    out = calcium_scores(make_volume(data, spacing),
                         make_mask(mask, MaskSchema.CALCIUM, spacing))
    assert out["CACS"] == 16.0          # 4 mm^2 * weight 4, single slab


def test_coronary_and_aortic_labels_separate():
    spacing = (1.0, 1.0, 3.0)
    data = np.full((20, 20, 1), -1000, dtype=np.int16)
    mask = np.zeros_like(data, dtype=np.uint8)
    data[2:4, 2:4, 0] = 150
    mask[2:4, 2:4, 0] = 1
    data[10:12, 10:12, 0] = 450
    mask[10:12, 10:12, 0] = 2
    out = calcium_scores(make_volume(data, spacing),
                         make_mask(mask, MaskSchema.CALCIUM, spacing))
    assert out["CACS"] == 4.0
    assert out["ACS"] == 16.0
    assert out["CACV"] == 12.0 and out["ACV"] == 12.0


# --- aorta ------------------------------------------------------------------

def test_aorta_straight_tube():
    mask = straight_tube()
    m = make_mask(mask.astype(np.uint8), MaskSchema.AORTA)
    out = aorta_morphology(m)
    assert 1.0 - 1e-9 <= out["ATI"] <= 1.02
    assert out["AMD"] == pytest.approx(10.0, abs=1.0)
    assert out["AMDSTD"] <= 0.5


def test_aorta_empty_mask_flags_failed():
    m = make_mask(np.zeros((10, 10, 10), dtype=np.uint8), MaskSchema.AORTA)
    out = aorta_morphology(m)
    for name in ("ATI", "AMD", "AMDSTD"):
        assert out.status[name] == STATUS_FAILED


# --- heart ------------------------------------------------------------------

def ellipsoid(shape, center, axes):
    x, y, z = np.meshgrid(*[np.arange(n, dtype=float) for n in shape],
                          indexing="ij", sparse=True)
    return (((x - center[0]) / axes[0]) ** 2
            + ((y - center[1]) / axes[1]) ** 2
            + ((z - center[2]) / axes[2]) ** 2) <= 1.0


def test_chamber_heart_ratio():
    shape = (40, 40, 40)
    heart = np.zeros(shape, dtype=np.uint8)
    heart[5:25, 5:25, 5:25] = 1
    heart[10:20, 10:20, 10:20] = 2     # 1000 of 8000 voxels
    lungs = np.zeros(shape, dtype=np.uint8)
    lungs[0:3, :, :] = 1
    lungs[37:40, :, :] = 2
    v = make_volume(np.zeros(shape))
    out = heart_morphology(v, make_mask(heart, MaskSchema.PERICARDIUM),
                           make_mask(lungs, MaskSchema.LUNGS))
    assert out["CHR"] == pytest.approx(1000 / 8000)


def test_chamber_ellipse_axes():
    shape = (100, 80, 60)
    heart = np.zeros(shape, dtype=np.uint8)
    outer = ellipsoid(shape, (50, 40, 30), (48, 36, 25))
    inner = ellipsoid(shape, (50, 40, 30), (45, 30, 20))
    heart[outer] = 1
    heart[inner] = 2
    lungs = np.zeros(shape, dtype=np.uint8)
    lungs[0:2, :, :] = 1
    lungs[98:100, :, :] = 2
    v = make_volume(np.zeros(shape))
    out = heart_morphology(v, make_mask(heart, MaskSchema.PERICARDIUM),
                           make_mask(lungs, MaskSchema.LUNGS))
    assert out["CLD"] == pytest.approx(45.0, abs=1.0)
    assert out["CSD"] == pytest.approx(30.0, abs=1.0)
    assert out["CLD"] >= out["CSD"]


def test_ctr_ratio():
    shape = (100, 20, 20)
    heart = np.zeros(shape, dtype=np.uint8)
    heart[30:70, 8:12, 8:12] = 1       # heart width 40
    lungs = np.zeros(shape, dtype=np.uint8)
    lungs[5:30, 8:12, 8:12] = 1
    lungs[70:95, 8:12, 8:12] = 2       # lung span 5..94 -> 90
    v = make_volume(np.zeros(shape))
    out = heart_morphology(v, make_mask(heart, MaskSchema.PERICARDIUM),
                           make_mask(lungs, MaskSchema.LUNGS))
    assert out["CTR"] == pytest.approx(40 / 90, abs=0.01)


def test_heart_empty_flags():
    shape = (10, 10, 10)
    v = make_volume(np.zeros(shape))
    out = heart_morphology(
        v, make_mask(np.zeros(shape, dtype=np.uint8), MaskSchema.PERICARDIUM),
        make_mask(np.zeros(shape, dtype=np.uint8), MaskSchema.LUNGS))
    for name in ("CHR", "CLD", "CSD", "CTR"):
        assert out.status[name] == STATUS_EMPTY


# --- lungs ------------------------------------------------------------------

def test_lung_thresholds_strict():
    hu = np.array([[[-951, -950, -500, -200, -199]]], dtype=np.int16)
    v = make_volume(hu)
    m = make_mask(np.ones_like(hu), MaskSchema.LUNGS)   # all left lung
    out = lung_texture(v, m)
    assert out["LLR"] == pytest.approx(1 / 5)           # only -951 < -950
    assert out["LHR"] == pytest.approx(1 / 5)           # only -199 > -200
    assert out.status["RLR"] == STATUS_EMPTY


def test_lung_half_and_half():
    hu = np.full((10, 10, 2), -100, dtype=np.int16)
    hu[:, :, 1] = -980
    v = make_volume(hu)
    m = make_mask(np.ones_like(hu), MaskSchema.LUNGS)
    out = lung_texture(v, m)
    assert out["LHR"] == 0.5
    assert out["LLR"] == 0.5


def test_lung_between_thresholds():
    hu = np.full((4, 4, 4), -500, dtype=np.int16)
    v = make_volume(hu)
    m = make_mask(np.full_like(hu, 2), MaskSchema.LUNGS)
    out = lung_texture(v, m)
    assert out["RLR"] == 0.0 and out["RHR"] == 0.0


# --- composition ------------------------------------------------------------

def test_extract_all_missing_aorta():
    shape = (10, 10, 10)
    v = make_volume(np.full(shape, -100, dtype=np.int16))
    peri = make_mask(np.ones(shape, dtype=np.uint8), MaskSchema.PERICARDIUM)
    lungs = make_mask(np.zeros(shape, dtype=np.uint8), MaskSchema.LUNGS)
    calcium = make_mask(np.zeros(shape, dtype=np.uint8), MaskSchema.CALCIUM)
    out = extract_all(v, pericardium=peri, calcium=calcium, lungs=lungs)
    assert out.status["ATI"] == STATUS_FAILED
    assert out.ok("PFATV") and out.ok("CACS")


def test_extract_all_on_phantom(baseline_phantom):
    _, volume, masks, truth = baseline_phantom
    out = extract_all(volume, pericardium=masks["pericardium"],
                      calcium=masks["calcium"], aorta=masks["aorta"],
                      lungs=masks["lungs"])
    assert all(out.ok(n) for n in BIOMARKER_NAMES)
    report = truth.check(out)
    assert all(ok for ok, *_ in report.values()), report


def test_csv_round_trip(tmp_path):
    bv = BiomarkerVector()
    for k, name in enumerate(BIOMARKER_NAMES):
        bv.set(name, 0.1 * k + 1 / 3, STATUS_OK)
    bv.status["AMD"] = STATUS_FAILED
    bv.values["AMD"] = math.nan
    write_csv(tmp_path / "b.csv", [("scan1", bv)])
    [(sid, back)] = read_csv(tmp_path / "b.csv")
    assert sid == "scan1"
    for name in BIOMARKER_NAMES:
        assert back.status[name] == bv.status[name]
        if name != "AMD":
            assert back.values[name] == bv.values[name]   # repr round trip
