"""Shared fixtures: NIfTI fixture writer, small volumes, hypothesis profile."""

from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crossmark.volume import Volume3D

settings.register_profile(
    "crossmark",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("crossmark")


def write_nifti(
    path,
    data: np.ndarray,
    spacing=(1.0, 1.0, 1.0),
    datatype: int = 16,
    scl_slope: float = 0.0,
    scl_inter: float = 0.0,
    origin=(0.0, 0.0, 0.0),
    magic: bytes = b"n+1\x00",
    dim0: int = 3,
    truncate_payload: int = 0,
    sform: bool = True,
):
    """Hand-rolled NIfTI-1 writer (independent of the loader under test)."""
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    dims = data.shape
    struct.pack_into("<8h", header, 40, dim0, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, datatype)
    bitpix = {2: 8, 4: 16, 8: 32, 16: 32}.get(datatype, 32)
    struct.pack_into("<h", header, 72, bitpix)
    struct.pack_into("<8f", header, 76, 1.0, spacing[0], spacing[1], spacing[2], 0, 0, 0, 0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, scl_slope, scl_inter)
    if sform:
        struct.pack_into("<h", header, 254, 1)
        struct.pack_into("<4f", header, 280, spacing[0], 0, 0, origin[0])
        struct.pack_into("<4f", header, 296, 0, spacing[1], 0, origin[1])
        struct.pack_into("<4f", header, 312, 0, 0, spacing[2], origin[2])
    header[344:348] = magic
    np_dtype = {4: "<i2", 16: "<f4"}.get(datatype, "<f4")
    payload = np.asarray(data).astype(np_dtype).tobytes(order="F")
    if truncate_payload:
        payload = payload[:-truncate_payload]
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00" * 4)  # header extension flag, data starts at 352
        fh.write(payload)
    return path


@pytest.fixture
def nifti_writer():
    return write_nifti


def make_volume(data: np.ndarray, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Volume3D:
    data = np.asarray(data, dtype=np.float32)
    return Volume3D(dims=data.shape, spacing=spacing, origin=origin, data=data)


@pytest.fixture
def ramp_volume_x():
    """64^3 volume with v(x, y, z) = x."""
    x = np.arange(64, dtype=np.float32)
    data = np.broadcast_to(x[:, None, None], (64, 64, 64)).copy()
    return make_volume(data, spacing=(1.0, 1.0, 1.0))
