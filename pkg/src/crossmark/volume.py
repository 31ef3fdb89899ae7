"""Volumes, landmark sets, and the file formats they travel in.

World coordinates are ``origin + index * spacing`` (mm), axis-aligned; no
rotation is applied even when a NIfTI header carries one (a warning is
emitted instead, since the supported datasets are resampled to a common
axis-aligned grid).
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class NiftiFormatError(ValueError):
    """Raised when a NIfTI-1 file cannot be decoded."""


class LandmarkFormatError(ValueError):
    """Raised when a landmark CSV cannot be parsed."""


@dataclass(frozen=True)
class Volume3D:
    """A 3D scalar grid with physical spacing (mm) and world origin.

    ``data`` is float32 with shape ``dims``, stored x-fastest (Fortran
    order), so ``data[x, y, z]`` indexes naturally. Instances are immutable
    and safe to share across threads.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be 3 positive integers, got {dims}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {spacing}")
        if len(origin) != 3 or not all(np.isfinite(origin)):
            raise ValueError(f"origin must be 3 finite reals, got {origin}")
        data = np.asarray(self.data, dtype=np.float32)
        if data.shape != dims:
            raise ValueError(f"data shape {data.shape} != dims {dims}")
        if not np.isfinite(data).all():
            raise ValueError("volume data contains non-finite values")
        data = np.asfortranarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "data", data)

    def world_to_voxel(self, point) -> np.ndarray:
        """Continuous voxel coordinates of a world-mm point (may be out of bounds)."""
        p = np.asarray(point, dtype=np.float64)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_to_world(self, index) -> np.ndarray:
        """World-mm position of a (possibly fractional) voxel index."""
        i = np.asarray(index, dtype=np.float64)
        return np.asarray(self.origin) + i * np.asarray(self.spacing)


@dataclass(frozen=True)
class Landmark:
    id: str
    position: np.ndarray  # (3,) world mm

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        if pos.shape != (3,) or not np.isfinite(pos).all():
            raise ValueError(f"landmark {self.id!r}: position must be 3 finite reals")
        pos.setflags(write=False)
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True)
class LandmarkSet:
    """Named world-coordinate points; ids are unique within a set."""

    entries: tuple[Landmark, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise LandmarkFormatError(f"duplicate landmark id(s): {', '.join(dup)}")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def get(self, lm_id: str) -> Landmark:
        for e in self.entries:
            if e.id == lm_id:
                return e
        raise KeyError(lm_id)

    def positions(self) -> np.ndarray:
        return np.stack([e.position for e in self.entries]) if self.entries else np.zeros((0, 3))


@dataclass(frozen=True)
class LandmarkPairSet:
    """Corresponding landmarks of one subject in two volumes, paired by id."""

    subject_id: str
    mri: LandmarkSet
    us: LandmarkSet

    def __post_init__(self):
        if set(self.mri.ids()) != set(self.us.ids()):
            only_m = sorted(set(self.mri.ids()) - set(self.us.ids()))
            only_u = sorted(set(self.us.ids()) - set(self.mri.ids()))
            raise ValueError(
                f"subject {self.subject_id!r}: landmark ids differ between sets "
                f"(mri-only: {only_m}, us-only: {only_u})"
            )

    def __len__(self):
        return len(self.mri)

    def pairs(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """(id, mri position, us position) triples, ordered by the mri set."""
        return [(e.id, e.position, self.us.get(e.id).position) for e in self.mri]


# NIfTI-1 header field offsets (little-endian, 348-byte header).
_NIFTI_DTYPES = {4: np.dtype("<i2"), 16: np.dtype("<f4")}


def load_nifti(path) -> Volume3D:
    """Load an uncompressed single-file NIfTI-1 volume (int16 or float32).

    Spacing comes from pixdim, the origin from the sform/qform offset
    fields (zero when absent); scl slope/intercept are applied when set.
    Rotation parts of the transform are ignored with a warning.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 348:
        raise NiftiFormatError(f"{path}: file too short for a NIfTI-1 header")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise NiftiFormatError(f"{path}: two-file NIfTI ('ni1' magic) is not supported")
    if magic != b"n+1\x00":
        raise NiftiFormatError(f"{path}: bad magic {magic!r}, not a single-file NIfTI-1")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        raise NiftiFormatError(f"{path}: bad magic (header size {sizeof_hdr}, not little-endian NIfTI-1)")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise NiftiFormatError(f"{path}: expected 3 dimensions, header declares {dim[0]}")
    dims = (int(dim[1]), int(dim[2]), int(dim[3]))
    if any(d <= 0 for d in dims):
        raise NiftiFormatError(f"{path}: non-positive dimension in {dims}")
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise NiftiFormatError(f"{path}: unsupported datatype code {datatype} (need int16=4 or float32=16)")
    dtype = _NIFTI_DTYPES[datatype]
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise NiftiFormatError(f"{path}: non-positive pixdim {spacing}")
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)

    origin = (0.0, 0.0, 0.0)
    if sform_code > 0:
        srow = np.array(struct.unpack_from("<12f", raw, 280), dtype=np.float64).reshape(3, 4)
        origin = tuple(srow[:, 3])
        rot = srow[:, :3]
        if not np.allclose(rot, np.diag(np.diag(rot)), atol=1e-4):
            warnings.warn(f"{path}: non-axis-aligned sform; rotation ignored", stacklevel=2)
    elif qform_code > 0:
        quat = struct.unpack_from("<3f", raw, 256)
        origin = struct.unpack_from("<3f", raw, 268)
        if any(abs(q) > 1e-4 for q in quat):
            warnings.warn(f"{path}: non-identity qform rotation ignored", stacklevel=2)

    start = int(vox_offset) if vox_offset >= 348 else 352
    n = dims[0] * dims[1] * dims[2]
    payload = raw[start : start + n * dtype.itemsize]
    if len(payload) < n * dtype.itemsize:
        raise NiftiFormatError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {n * dtype.itemsize})"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F").astype(np.float32)
    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        data = data * np.float32(scl_slope) + np.float32(scl_inter)
    return Volume3D(dims=dims, spacing=spacing, origin=tuple(float(o) for o in origin), data=data)


def save_raw_volume(volume: Volume3D, stem) -> tuple[Path, Path]:
    """Write `<stem>.meta` (text manifest) + `<stem>.raw` (LE float32, x-fastest)."""
    stem = Path(stem)
    meta_path = stem.with_suffix(".meta")
    raw_path = stem.with_suffix(".raw")
    lines = [
        "format = crossmark-raw-v1",
        "dims = {} {} {}".format(*volume.dims),
        "spacing = {:.17g} {:.17g} {:.17g}".format(*volume.spacing),
        "origin = {:.17g} {:.17g} {:.17g}".format(*volume.origin),
    ]
    meta_path.write_text("\n".join(lines) + "\n")
    raw_path.write_bytes(volume.data.astype("<f4").tobytes(order="F"))
    return meta_path, raw_path


def load_raw_volume(meta_path) -> Volume3D:
    """Load a volume saved by :func:`save_raw_volume` (pass the .meta path)."""
    meta_path = Path(meta_path)
    fields = {}
    for line in meta_path.read_text().splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    if fields.get("format") != "crossmark-raw-v1":
        raise ValueError(f"{meta_path}: not a crossmark raw-volume manifest")
    dims = tuple(int(v) for v in fields["dims"].split())
    spacing = tuple(float(v) for v in fields["spacing"].split())
    origin = tuple(float(v) for v in fields["origin"].split())
    raw_path = meta_path.with_suffix(".raw")
    payload = raw_path.read_bytes()
    n = dims[0] * dims[1] * dims[2]
    if len(payload) < 4 * n:
        raise ValueError(f"{raw_path}: truncated payload ({len(payload)} bytes, expected {4 * n})")
    data = np.frombuffer(payload, dtype="<f4", count=n).reshape(dims, order="F")
    return Volume3D(dims=dims, spacing=spacing, origin=origin, data=data)


def normalize_intensity(volume: Volume3D) -> Volume3D:
    """Clip to the [0.5, 99.5] percentiles of nonzero voxels, map to [0, 1].

    Zero voxels (e.g. outside an acquisition mask) stay exactly 0.
    """
    data = volume.data
    nonzero = data[data != 0]
    if nonzero.size == 0:
        raise ValueError("normalize_intensity: volume is all zeros")
    lo, hi = np.percentile(nonzero.astype(np.float64), [0.5, 99.5])
    if hi == lo:
        out = (data != 0).astype(np.float32)
    else:
        out = np.clip((data.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)
        out[data == 0] = 0.0
    return Volume3D(dims=volume.dims, spacing=volume.spacing, origin=volume.origin, data=out)


_LANDMARK_HEADER = ["id", "x_mm", "y_mm", "z_mm"]


def load_landmarks_csv(path) -> LandmarkSet:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LandmarkFormatError(f"{path}: empty file") from None
        if [h.strip() for h in header] != _LANDMARK_HEADER:
            raise LandmarkFormatError(
                f"{path}: bad header {header!r}, expected {','.join(_LANDMARK_HEADER)}"
            )
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise LandmarkFormatError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            lm_id = row[0].strip()
            try:
                pos = [float(v) for v in row[1:]]
            except ValueError:
                raise LandmarkFormatError(
                    f"{path}:{lineno}: non-numeric coordinate in {row[1:]!r}"
                ) from None
            entries.append(Landmark(lm_id, np.array(pos)))
    return LandmarkSet(tuple(entries))


def save_landmarks_csv(landmarks: LandmarkSet, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_LANDMARK_HEADER)
        for e in landmarks:
            writer.writerow([e.id] + [f"{v:.17g}" for v in e.position])
    return path


@dataclass(frozen=True)
class SubjectPaths:
    """One row of a subject pairing manifest; volume/landmark paths are resolved."""

    subject_id: str
    mri_volume: Path
    us_volume: Path
    mri_landmarks: Path
    us_landmarks: Path


_MANIFEST_HEADER = ["subject_id", "mri_volume", "us_volume", "mri_landmarks", "us_landmarks"]


def load_manifest(path) -> list[SubjectPaths]:
    """Read a pairing manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != _MANIFEST_HEADER:
            raise ValueError(f"{path}: bad manifest header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
            rows.append(
                SubjectPaths(
                    subject_id=row[0].strip(),
                    mri_volume=base / row[1].strip(),
                    us_volume=base / row[2].strip(),
                    mri_landmarks=base / row[3].strip(),
                    us_landmarks=base / row[4].strip(),
                )
            )
    ids = [r.subject_id for r in rows]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate subject ids")
    return rows


def save_manifest(rows: list[SubjectPaths], path) -> Path:
    """Write a pairing manifest with paths stored relative to its directory."""
    path = Path(path)
    base = path.parent
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MANIFEST_HEADER)
        for r in rows:
            writer.writerow(
                [r.subject_id]
                + [str(Path(p).relative_to(base)) for p in (r.mri_volume, r.us_volume, r.mri_landmarks, r.us_landmarks)]
            )
    return path


def load_pairs(paths: SubjectPaths) -> LandmarkPairSet:
    return LandmarkPairSet(
        subject_id=paths.subject_id,
        mri=load_landmarks_csv(paths.mri_landmarks),
        us=load_landmarks_csv(paths.us_landmarks),
    )
