"""2.5D patch series: three adjacent in-plane slices stacked along one axis.

A series around a world point is a 42x42x3 block: the in-plane window spans
voxel indices [c-21, c+20] on the two perpendicular axes, the three slices
sit at indices c-1, c, c+1 along the stacking axis (c = center snapped to
the nearest voxel). Out-of-volume voxels read as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume3D

PATCH_SIZE = 42
N_SLICES = 3
AXES = ("x", "y", "z")
_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}

# The in-plane window is asymmetric because 42 is even: [c-21, c+20].
_LO = PATCH_SIZE // 2
_HI = PATCH_SIZE - _LO


@dataclass(frozen=True)
class PatchSeries:
    """pixels[u, v, s]: u, v index the two non-stacking axes in x<y<z order,
    s the three slices at axis index c-1, c, c+1."""

    axis: str
    center_world: np.ndarray
    pixels: np.ndarray  # (42, 42, 3) float32

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {self.axis!r}")
        center = np.asarray(self.center_world, dtype=np.float64)
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if center.shape != (3,):
            raise ValueError("center_world must be a 3-vector")
        if pixels.shape != (PATCH_SIZE, PATCH_SIZE, N_SLICES):
            raise ValueError(f"pixels must be {PATCH_SIZE}x{PATCH_SIZE}x{N_SLICES}, got {pixels.shape}")
        if not np.isfinite(pixels).all():
            raise ValueError("patch contains non-finite values")
        center.setflags(write=False)
        pixels.setflags(write=False)
        object.__setattr__(self, "center_world", center)
        object.__setattr__(self, "pixels", pixels)

    def channels_first(self) -> np.ndarray:
        """(3, 42, 42) view for the encoder: slices as input channels."""
        return np.ascontiguousarray(np.moveaxis(self.pixels, 2, 0))


@dataclass(frozen=True)
class Patch25D:
    """The three per-axis series of one landmark, sharing a center."""

    x: PatchSeries
    y: PatchSeries
    z: PatchSeries

    def __post_init__(self):
        if not (
            np.array_equal(self.x.center_world, self.y.center_world)
            and np.array_equal(self.x.center_world, self.z.center_world)
        ):
            raise ValueError("all three series must share center_world")
        if (self.x.axis, self.y.axis, self.z.axis) != AXES:
            raise ValueError("series must be ordered (x, y, z) by stacking axis")

    def series(self, axis: str) -> PatchSeries:
        return getattr(self, axis)


def _padded_crop(arr: np.ndarray, starts, sizes) -> np.ndarray:
    """Crop arr at [start, start+size) per axis, reading 0 outside."""
    out = np.zeros(tuple(sizes), dtype=np.float32)
    src, dst = [], []
    for start, size, dim in zip(starts, sizes, arr.shape):
        lo = max(start, 0)
        hi = min(start + size, dim)
        if lo >= hi:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def extract_series(volume: Volume3D, center_world, axis: str) -> PatchSeries:
    """Cut the 42x42x3 series around a world point, zero-padded at borders."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    center_world = np.asarray(center_world, dtype=np.float64)
    c = np.rint(volume.world_to_voxel(center_world)).astype(int)
    a = _AXIS_INDEX[axis]
    inplane = [i for i in range(3) if i != a]
    # Reorder data to (u, v, stack) then crop with zero fill.
    arr = np.transpose(volume.data, inplane + [a])
    starts = (c[inplane[0]] - _LO, c[inplane[1]] - _LO, c[a] - 1)
    pixels = _padded_crop(arr, starts, (PATCH_SIZE, PATCH_SIZE, N_SLICES))
    return PatchSeries(axis=axis, center_world=center_world, pixels=pixels)


def extract_25d(volume: Volume3D, center_world) -> Patch25D:
    return Patch25D(
        x=extract_series(volume, center_world, "x"),
        y=extract_series(volume, center_world, "y"),
        z=extract_series(volume, center_world, "z"),
    )


def rotate_bilinear(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate a 2D image around its center, bilinear resampling, zero fill."""
    if angle_deg == 0.0:
        return image.astype(np.float32, copy=True)
    h, w = image.shape
    cu, cv = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    uu, vv = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    du, dv = uu - cu, vv - cv
    # Inverse map: sample the source at the back-rotated grid position.
    su = cos_t * du + sin_t * dv + cu
    sv = -sin_t * du + cos_t * dv + cv
    u0 = np.floor(su).astype(int)
    v0 = np.floor(sv).astype(int)
    fu = su - u0
    fv = sv - v0
    out = np.zeros_like(image, dtype=np.float64)
    for ou, ov, weight in (
        (0, 0, (1 - fu) * (1 - fv)),
        (0, 1, (1 - fu) * fv),
        (1, 0, fu * (1 - fv)),
        (1, 1, fu * fv),
    ):
        ui, vi = u0 + ou, v0 + ov
        valid = (ui >= 0) & (ui < h) & (vi >= 0) & (vi < w)
        out[valid] += weight[valid] * image[ui[valid], vi[valid]]
    return out.astype(np.float32)


def apply_augmentation(series: PatchSeries, angle_deg: float, hflip: bool, vflip: bool) -> PatchSeries:
    """Apply one in-plane transform to all three slices of a series.

    Horizontal flip mirrors the second in-plane axis (columns), vertical
    flip the first (rows); rotation happens before the flips.
    """
    pixels = series.pixels
    if angle_deg != 0.0:
        pixels = np.stack([rotate_bilinear(pixels[:, :, s], angle_deg) for s in range(N_SLICES)], axis=2)
    if hflip:
        pixels = pixels[:, ::-1, :]
    if vflip:
        pixels = pixels[::-1, :, :]
    return PatchSeries(axis=series.axis, center_world=series.center_world, pixels=np.ascontiguousarray(pixels))


ROTATION_RANGE_DEG = 15.0


def draw_augmentation(rng: np.random.Generator) -> tuple[float, bool, bool]:
    """One augmentation draw: rotation angle in +-15 deg, two fair coin flips."""
    angle = float(rng.uniform(-ROTATION_RANGE_DEG, ROTATION_RANGE_DEG))
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    return angle, hflip, vflip


def augment_pair(anchor: PatchSeries, positive: PatchSeries, rng) -> tuple[PatchSeries, PatchSeries]:
    """Draw one transform and apply it identically to both series."""
    if anchor.axis != positive.axis:
        raise ValueError(f"axis mismatch: {anchor.axis} vs {positive.axis}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    angle, hflip, vflip = draw_augmentation(rng)
    return (
        apply_augmentation(anchor, angle, hflip, vflip),
        apply_augmentation(positive, angle, hflip, vflip),
    )


NEGATIVE_MAX_OFFSET_MM = 10.0
NEGATIVE_MIN_DISTANCE_MM = 1.5


def sample_negative_center(true_center, rng) -> np.ndarray:
    """Mismatched-patch center: uniform per-axis offset in [-10, 10] mm,
    resampled while the offset lands inside the 1.5 mm exclusion ball."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    true_center = np.asarray(true_center, dtype=np.float64)
    while True:
        offset = rng.uniform(-NEGATIVE_MAX_OFFSET_MM, NEGATIVE_MAX_OFFSET_MM, size=3)
        if np.linalg.norm(offset) >= NEGATIVE_MIN_DISTANCE_MM:
            return true_center + offset


def dump_series(series: PatchSeries, stem) -> None:
    """Write a patch as raw float32 plus a text manifest (fixture inspection)."""
    from pathlib import Path

    stem = Path(stem)
    stem.with_suffix(".raw").write_bytes(series.pixels.astype("<f4").tobytes(order="C"))
    lines = [
        "format = crossmark-patch-v1",
        f"axis = {series.axis}",
        "center_world = {:.17g} {:.17g} {:.17g}".format(*series.center_world),
        f"shape = {PATCH_SIZE} {PATCH_SIZE} {N_SLICES}",
    ]
    stem.with_suffix(".meta").write_text("\n".join(lines) + "\n")


def load_series(stem) -> PatchSeries:
    from pathlib import Path

    stem = Path(stem)
    fields = {}
    for line in stem.with_suffix(".meta").read_text().splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    if fields.get("format") != "crossmark-patch-v1":
        raise ValueError(f"{stem}: not a crossmark patch manifest")
    pixels = np.frombuffer(stem.with_suffix(".raw").read_bytes(), dtype="<f4").reshape(
        PATCH_SIZE, PATCH_SIZE, N_SLICES
    )
    center = np.array([float(v) for v in fields["center_world"].split()])
    return PatchSeries(axis=fields["axis"], center_world=center, pixels=pixels)
