import math

import numpy as np
import pytest

from conftest import make_mask, make_volume
from ctquant.biomarkers import (
    BIOMARKER_NAMES,
    STATUS_EMPTY,
    STATUS_FAILED,
    calcium_scores,
    extract_all,
)
from ctquant.errors import OutOfBounds
from ctquant.phantom import (
    AortaSpec,
    HeartSpec,
    InsertSpec,
    LungSpec,
    PhantomSpec,
    brute_force_agatston,
    bundled_specs,
    generate,
    load_spec,
    save_spec,
)
from ctquant.volume_io import MaskSchema


def test_bundled_specs_present():
    specs = bundled_specs()
    assert len(specs) >= 5
    assert all(name == spec.name for name, spec in specs.items())


def test_empty_spec_background_only():
    spec = PhantomSpec(name="empty", dims=(12, 12, 12))
    volume, masks, truth = generate(spec)
    assert np.all(volume.data == -1000)
    assert all(np.all(m.data == 0) for m in masks.values())
    bv = extract_all(volume, **masks)
    report = truth.check(bv)
    assert all(ok for ok, *_ in report.values()), report
    assert truth.expected_status["ATI"] == STATUS_FAILED
    assert truth.expected_status["PFATM"] == STATUS_EMPTY
    assert bv["PFATV"] == 0.0


def test_generation_deterministic_per_seed():
    spec = bundled_specs()["emphysema"]
    v1, m1, _ = generate(spec)
    v2, m2, _ = generate(spec)
    assert np.array_equal(v1.data, v2.data)
    assert all(np.array_equal(m1[k].data, m2[k].data) for k in m1)
    spec2 = PhantomSpec.from_json_dict(spec.to_json_dict())
    spec2.seed = spec.seed + 1
    v3, _, _ = generate(spec2)
    assert not np.array_equal(v1.data, v3.data)


def test_out_of_bounds_rejected():
    spec = PhantomSpec(
        name="oob", dims=(20, 20, 20),
        heart=HeartSpec(center_mm=(10, 10, 10), semi_axes_mm=(15, 5, 5),
                        chamber_axes_mm=(5, 2, 2)))
    with pytest.raises(OutOfBounds):
        generate(spec)


def test_fat_shell_volume_analytic():
    spec = PhantomSpec(
        name="shell", dims=(80, 80, 80),
        heart=HeartSpec(center_mm=(40, 40, 40), semi_axes_mm=(30, 25, 20),
                        chamber_axes_mm=(20, 15, 12), fat_hu=-100))
    volume, masks, truth = generate(spec)
    analytic = 4 / 3 * math.pi * (30 * 25 * 20 - 20 * 15 * 12)
    voxel = int(((masks["pericardium"].data == 1)
                 & (volume.data == -100)).sum())
    assert voxel == pytest.approx(analytic, rel=0.05)
    assert truth.values["PFATV"] == pytest.approx(analytic)


def test_straight_tube_truth_ati_is_one():
    spec = bundled_specs()["baseline"]
    assert spec.aorta.kind == "straight"
    _, _, truth = generate(spec)
    assert truth.values["ATI"] == 1.0


def test_spec_json_round_trip(tmp_path):
    spec = bundled_specs()["torus"]
    save_spec(spec, tmp_path / "s.json")
    back = load_spec(tmp_path / "s.json")
    assert back == spec


def test_ground_truth_json_round_trip(baseline_phantom):
    from ctquant.phantom import GroundTruth
    *_, truth = baseline_phantom
    back = GroundTruth.from_json_dict(truth.to_json_dict())
    assert back == truth


# --- brute force Agatston oracle --------------------------------------------

def test_brute_force_matches_module_on_phantom(baseline_phantom):
    _, volume, masks, _ = baseline_phantom
    cacs, acs = brute_force_agatston(volume, masks["calcium"])
    bv = calcium_scores(volume, masks["calcium"])
    assert bv["CACS"] == cacs
    assert bv["ACS"] == acs


def test_brute_force_matches_module_random_grids():
    rng = np.random.default_rng(9)
    for _ in range(15):
        spacing = (1.0, 1.0, float(rng.choice([1.0, 1.5, 3.0])))
        hu = np.full((14, 14, 6), -1000, dtype=np.int16)
        labels = np.zeros_like(hu, dtype=np.uint8)
        blob = rng.random(hu.shape) < 0.15
        hu[blob] = rng.integers(100, 600, size=int(blob.sum()))
        labels[blob] = rng.integers(1, 3, size=int(blob.sum()))
        v = make_volume(hu, spacing)
        m = make_mask(labels, MaskSchema.CALCIUM, spacing)
        cacs, acs = brute_force_agatston(v, m)
        bv = calcium_scores(v, m)
        assert bv["CACS"] == pytest.approx(cacs, abs=1e-9)
        assert bv["ACS"] == pytest.approx(acs, abs=1e-9)


def test_brute_force_weight_four_branch():
    hu = np.full((10, 10, 1), -1000, dtype=np.int16)
    labels = np.zeros_like(hu, dtype=np.uint8)
    hu[2:5, 2:5, 0] = 400
    labels[2:5, 2:5, 0] = 1
    v = make_volume(hu, (1.0, 1.0, 3.0))
    m = make_mask(labels, MaskSchema.CALCIUM, (1.0, 1.0, 3.0))
    cacs, acs = brute_force_agatston(v, m)
    assert cacs == 36.0 and acs == 0.0


def test_brute_force_sub_area_floor():
    hu = np.full((10, 10, 1), -1000, dtype=np.int16)
    labels = np.zeros_like(hu, dtype=np.uint8)
    hu[4, 4, 0] = 500
    labels[4, 4, 0] = 1
    v = make_volume(hu, (0.5, 0.5, 3.0))
    m = make_mask(labels, MaskSchema.CALCIUM, (0.5, 0.5, 3.0))
    assert brute_force_agatston(v, m) == (0.0, 0.0)


# --- full suite --------------------------------------------------------------

def test_all_bundled_phantoms_within_tolerances():
    for name, spec in bundled_specs().items():
        volume, masks, truth = generate(spec)
        bv = extract_all(volume, pericardium=masks["pericardium"],
                         calcium=masks["calcium"], aorta=masks["aorta"],
                         lungs=masks["lungs"])
        report = truth.check(bv)
        bad = {k: r for k, r in report.items() if not r[0]}
        assert not bad, f"{name}: {bad}"
        assert set(report) == set(BIOMARKER_NAMES)
