import numpy as np
import pytest

from ctquant.biomarkers import BIOMARKER_NAMES, STATUS_OK, BiomarkerVector
from ctquant.features import FeatureRecord
from ctquant.phantom import bundled_specs, generate
from ctquant.volume_io import CtVolume, LabelMask, MaskSchema


def make_volume(data, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data, dtype=np.int16)
    return CtVolume(dims=data.shape, spacing=spacing, origin=(0.0, 0.0, 0.0),
                    data=data)


def make_mask(data, schema, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data, dtype=np.uint8)
    return LabelMask(dims=data.shape, spacing=spacing, origin=(0.0, 0.0, 0.0),
                     data=data, schema=schema)


def straight_tube(shape=(40, 40, 90), center=(20.0, 20.0), radius=5.0,
                  z0=5, z1=85):
    """Axis-aligned tube along z; 80 mm long by default at 1 mm spacing."""
    x, y, z = np.meshgrid(*[np.arange(n, dtype=float) for n in shape],
                          indexing="ij", sparse=True)
    return (((x - center[0]) ** 2 + (y - center[1]) ** 2) <= radius ** 2) \
        & (z >= z0) & (z <= z1)


def make_record(scan_id, rng, label=None, signal=0.0, signal_name="CACS"):
    """Feature record with noise everywhere except an optional biomarker."""
    bv = BiomarkerVector()
    for name in BIOMARKER_NAMES:
        value = rng.normal()
        if name == signal_name:
            value += signal
        bv.set(name, float(value), STATUS_OK)
    return FeatureRecord(scan_id=scan_id, x1=rng.normal(size=512),
                         biomarkers=bv, label=label)


def make_cohort(n, rng, signal=2.0, signal_name="CACS"):
    return [make_record(f"s{i:04d}", rng, label=i % 2,
                        signal=signal * (i % 2), signal_name=signal_name)
            for i in range(n)]


@pytest.fixture(scope="session")
def baseline_phantom():
    """The bundled baseline scene, generated once per test session."""
    spec = bundled_specs()["baseline"]
    volume, masks, truth = generate(spec)
    return spec, volume, masks, truth
