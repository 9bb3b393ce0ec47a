"""Volumetric data model and the `.ctqh` file format.

A volume is stored as a JSON header (``*.ctqh``) plus a raw little-endian
payload file. Voxel data is linearized x-fastest: ``index = x + nx*(y + ny*z)``.
In-memory arrays are shaped ``(nx, ny, nz)`` and indexed ``data[x, y, z]``;
``ravel(order="F")`` reproduces the on-disk ordering exactly.

Axis convention: x = left-right, y = anterior-posterior, z = inferior-superior.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumMismatch,
    DimsMismatch,
    IllegalLabel,
    IoFailure,
    MalformedHeader,
    MissingFile,
    SizeMismatch,
)

log = logging.getLogger("ctquant.volume_io")

MAGIC = "CTQV"
FORMAT_VERSION = 1

HU_MIN = -1024
HU_MAX = 4095


class MaskSchema(Enum):
    """Anatomical label schemas. Values map label -> meaning."""

    PERICARDIUM = "pericardium"   # 0 background, 1 pericardium, 2 chambers
    CALCIUM = "calcium"           # 0 background, 1 coronary, 2 aortic calc
    AORTA = "aorta"               # 0 background, 1 aorta
    LUNGS = "lungs"               # 0 background, 1 left, 2 right

    @property
    def allowed_labels(self):
        return {
            MaskSchema.PERICARDIUM: (0, 1, 2),
            MaskSchema.CALCIUM: (0, 1, 2),
            MaskSchema.AORTA: (0, 1),
            MaskSchema.LUNGS: (0, 1, 2),
        }[self]


@dataclass
class CtVolume:
    """A 3D grid of Hounsfield-unit samples.

    ``data`` is int16, shape (nx, ny, nz), read-only after construction.
    ``clamped_voxels`` counts samples that were outside [-1024, 4095] at load.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    data: np.ndarray
    clamped_voxels: int = 0

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(nx, ny, nz) < 1:
            raise SizeMismatch(f"dims must be >= 1, got {self.dims}")
        if min(self.spacing) <= 0:
            raise MalformedHeader(f"spacing must be positive, got {self.spacing}")
        if self.data.shape != (nx, ny, nz):
            raise SizeMismatch(
                f"data shape {self.data.shape} does not match dims {self.dims}")
        if self.data.dtype != np.int16:
            self.data = self.data.astype(np.int16)
        self.data.flags.writeable = False


@dataclass
class LabelMask:
    """A 3D label grid aligned voxel-for-voxel to a CtVolume."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    data: np.ndarray
    schema: MaskSchema

    def __post_init__(self):
        nx, ny, nz = self.dims
        if self.data.shape != (nx, ny, nz):
            raise SizeMismatch(
                f"mask shape {self.data.shape} does not match dims {self.dims}")
        if self.data.dtype != np.uint8:
            self.data = self.data.astype(np.uint8)
        present = np.unique(self.data)
        allowed = self.schema.allowed_labels
        bad = [int(v) for v in present if int(v) not in allowed]
        if bad:
            raise IllegalLabel(
                f"labels {bad} not allowed by schema {self.schema.value}")
        self.data.flags.writeable = False


@dataclass
class VolumeHeader:
    """Parsed `.ctqh` header."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    dtype: str                 # "i16" or "u8"
    data_file: str
    crc32: int
    version: int = FORMAT_VERSION
    magic: str = MAGIC


def voxel_volume_mm3(v) -> float:
    """Volume of one voxel in mm^3 (product of the spacing components)."""
    sx, sy, sz = v.spacing
    return sx * sy * sz


def check_alignment(v: CtVolume, m: LabelMask):
    """Reject masks whose grid does not match the paired volume."""
    if v.dims != m.dims:
        raise DimsMismatch(f"volume dims {v.dims} != mask dims {m.dims}")
    if not np.allclose(v.spacing, m.spacing):
        raise DimsMismatch(
            f"volume spacing {v.spacing} != mask spacing {m.spacing}")


# --- header parsing ---------------------------------------------------------

def _read_header(header_path) -> VolumeHeader:
    path = Path(header_path)
    if not path.is_file():
        raise MissingFile(f"header not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"cannot parse {path}: {exc}") from exc

    try:
        if raw["magic"] != MAGIC:
            raise MalformedHeader(f"bad magic {raw['magic']!r}")
        if raw["version"] != FORMAT_VERSION:
            raise MalformedHeader(f"unsupported version {raw['version']}")
        if raw.get("order", "x-fastest") != "x-fastest":
            raise MalformedHeader(f"unsupported order {raw['order']!r}")
        if raw.get("endianness", "little") != "little":
            raise MalformedHeader(f"unsupported endianness {raw['endianness']!r}")
        dims = tuple(int(d) for d in raw["dims"])
        spacing = tuple(float(s) for s in raw["spacing_mm"])
        origin = tuple(float(o) for o in raw["origin_mm"])
        dtype = raw["dtype"]
        if dtype not in ("i16", "u8"):
            raise MalformedHeader(f"unsupported dtype {dtype!r}")
        crc = int(raw["crc32"], 16)
        data_file = raw["data_file"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeader(f"missing or invalid field in {path}: {exc}") from exc

    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise MalformedHeader("dims/spacing_mm/origin_mm must be triples")
    if min(dims) < 1:
        raise MalformedHeader(f"dims must be >= 1, got {dims}")
    if min(spacing) <= 0:
        raise MalformedHeader(f"spacing must be positive, got {spacing}")
    return VolumeHeader(dims=dims, spacing=spacing, origin=origin,
                        dtype=dtype, data_file=data_file, crc32=crc)


def _read_payload(header_path, hdr: VolumeHeader) -> bytes:
    data_path = Path(header_path).parent / hdr.data_file
    if not data_path.is_file():
        raise MissingFile(f"payload not found: {data_path}")
    payload = data_path.read_bytes()
    if zlib.crc32(payload) & 0xFFFFFFFF != hdr.crc32:
        raise ChecksumMismatch(f"crc32 mismatch for {data_path}")
    return payload


def _write_pair(header_path, dims, spacing, origin, dtype, payload: bytes):
    header_path = Path(header_path)
    data_file = header_path.stem + ".raw"
    header = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "dims": list(dims),
        "spacing_mm": list(spacing),
        "origin_mm": list(origin),
        "dtype": dtype,
        "order": "x-fastest",
        "endianness": "little",
        "data_file": data_file,
        "crc32": f"{zlib.crc32(payload) & 0xFFFFFFFF:08x}",
    }
    try:
        header_path.parent.mkdir(parents=True, exist_ok=True)
        (header_path.parent / data_file).write_bytes(payload)
        header_path.write_text(json.dumps(header, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {header_path}: {exc}") from exc


# --- public io --------------------------------------------------------------

def load_volume(header_path) -> CtVolume:
    """Load a CtVolume from a `.ctqh` header; HU outside range are clamped."""
    hdr = _read_header(header_path)
    if hdr.dtype != "i16":
        raise MalformedHeader(f"expected dtype i16 for a volume, got {hdr.dtype}")
    payload = _read_payload(header_path, hdr)
    nx, ny, nz = hdr.dims
    expected = nx * ny * nz * 2
    if len(payload) != expected:
        raise SizeMismatch(
            f"payload is {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype="<i2")
    clamped = int(np.count_nonzero((flat < HU_MIN) | (flat > HU_MAX)))
    if clamped:
        log.warning("%s: clamped %d HU samples to [%d, %d]",
                    header_path, clamped, HU_MIN, HU_MAX)
        flat = np.clip(flat, HU_MIN, HU_MAX)
    data = flat.astype(np.int16).reshape(hdr.dims, order="F")
    return CtVolume(dims=hdr.dims, spacing=hdr.spacing, origin=hdr.origin,
                    data=data, clamped_voxels=clamped)


def save_volume(v: CtVolume, header_path):
    """Write header + raw payload so that load_volume is the exact inverse."""
    payload = v.data.ravel(order="F").astype("<i2").tobytes()
    _write_pair(header_path, v.dims, v.spacing, v.origin, "i16", payload)


def load_mask(header_path, schema: MaskSchema) -> LabelMask:
    """Load a LabelMask, validating every voxel against the schema."""
    hdr = _read_header(header_path)
    if hdr.dtype != "u8":
        raise MalformedHeader(f"expected dtype u8 for a mask, got {hdr.dtype}")
    payload = _read_payload(header_path, hdr)
    nx, ny, nz = hdr.dims
    expected = nx * ny * nz
    if len(payload) != expected:
        raise SizeMismatch(
            f"payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(hdr.dims, order="F").copy()
    return LabelMask(dims=hdr.dims, spacing=hdr.spacing, origin=hdr.origin,
                     data=data, schema=schema)


def save_mask(m: LabelMask, header_path):
    payload = m.data.ravel(order="F").tobytes()
    _write_pair(header_path, m.dims, m.spacing, m.origin, "u8", payload)
