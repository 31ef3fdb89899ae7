"""Paired pseudo-MRI / pseudo-US phantoms with exactly known correspondences.

The reference volume is a composite of anisotropic Gaussian blobs (two
intensity classes), curvilinear tubes, and a smooth background. The query
volume is the same anatomy pushed through a smooth low-frequency sinusoidal
deformation, then degraded with a gamma remap, partial contrast inversion of
one blob class, multiplicative Rayleigh speckle, anisotropic blur, and a
conical fan mask. Landmarks ride the deformation in closed form, so ground
truth is exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .volume import Landmark, LandmarkPairSet, LandmarkSet, Volume3D, normalize_intensity

FAN_MARGIN_MM = 12.0
LANDMARK_SEPARATION_MM = 8.0
SPECKLE_SCALE = 0.25
INVERSION_STRENGTH = 0.7


@dataclass(frozen=True)
class SynthSpec:
    dims: tuple[int, int, int] = (128, 128, 128)
    spacing: tuple[float, float, float] = (0.5, 0.5, 0.5)
    n_blobs: int = 40
    n_tubes: int = 12
    n_landmarks: int = 16
    max_shift_mm: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_landmarks < 1:
            raise ValueError("n_landmarks must be >= 1")
        if self.max_shift_mm < 0:
            raise ValueError("max_shift_mm must be nonnegative")
        if min(self.dims) < 64:
            raise ValueError("dims must be at least 64 voxels per axis")


@dataclass(frozen=True)
class Deformation:
    """Sum of 3 low-frequency sinusoidal modes per axis, world-mm in and out."""

    amplitudes: np.ndarray  # (3 axes, n_modes)
    wavevectors: np.ndarray  # (3 axes, n_modes, 3) rad/mm
    phases: np.ndarray  # (3 axes, n_modes)
    max_shift_mm: float

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points)
        if not np.issubdtype(pts.dtype, np.floating):
            pts = pts.astype(np.float64)
        p = np.atleast_2d(pts)  # evaluation stays in the caller's float dtype
        dt = p.dtype
        out = np.zeros_like(p)
        for axis in range(3):
            phase = p @ self.wavevectors[axis].T.astype(dt) + self.phases[axis].astype(dt)
            out[:, axis] = np.sin(phase) @ self.amplitudes[axis].astype(dt)
        return out if pts.ndim == 2 else out[0]


def evaluate_deformation(deformation: Deformation, point) -> np.ndarray:
    """Displacement (mm) of the field at a world point."""
    return deformation(point)


@dataclass(frozen=True)
class SynthSubject:
    subject_id: str
    mri: Volume3D
    us: Volume3D
    pairs: LandmarkPairSet
    deformation: Deformation
    fan_zero_fraction: float


def _world_axes(spec: SynthSpec):
    return [np.arange(d) * s for d, s in zip(spec.dims, spec.spacing)]


def _add_blob(field: np.ndarray, axes, center, sigmas, amplitude):
    """Separable anisotropic Gaussian bump, evaluated only inside 3.5 sigma."""
    profiles = []
    slices = []
    for ax, c, s in zip(axes, center, sigmas):
        lo = np.searchsorted(ax, c - 3.5 * s)
        hi = np.searchsorted(ax, c + 3.5 * s)
        if lo >= hi:
            return
        slices.append(slice(lo, hi))
        profiles.append(np.exp(-0.5 * ((ax[lo:hi] - c) / s) ** 2))
    bump = amplitude * profiles[0][:, None, None] * profiles[1][None, :, None] * profiles[2][None, None, :]
    field[tuple(slices)] += bump


def _splat_tube(field: np.ndarray, axes, control_points, radius, amplitude, n_samples=160):
    """Max-splat Gaussian spheres along a quadratic Bezier curve."""
    t = np.linspace(0.0, 1.0, n_samples)[:, None]
    p0, p1, p2 = control_points
    curve = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2
    for point in curve:
        slices, profiles = [], []
        ok = True
        for ax, c in zip(axes, point):
            lo = np.searchsorted(ax, c - 3.0 * radius)
            hi = np.searchsorted(ax, c + 3.0 * radius)
            if lo >= hi:
                ok = False
                break
            slices.append(slice(lo, hi))
            profiles.append(np.exp(-0.5 * ((ax[lo:hi] - c) / radius) ** 2))
        if not ok:
            continue
        bump = amplitude * profiles[0][:, None, None] * profiles[1][None, :, None] * profiles[2][None, None, :]
        region = field[tuple(slices)]
        np.maximum(region, bump, out=region)


def _build_anatomy(spec: SynthSpec, rng: np.random.Generator):
    """Composite anatomy plus the per-class blob fields needed downstream."""
    axes = _world_axes(spec)
    extent = np.array([ax[-1] for ax in axes])
    background = np.full(spec.dims, 0.15, dtype=np.float64)
    for _ in range(3):
        center = rng.uniform(0.2, 0.8, 3) * extent
        sigmas = rng.uniform(0.25, 0.5, 3) * extent
        _add_blob(background, axes, center, sigmas, rng.uniform(0.1, 0.3))
    class_fields = [np.zeros(spec.dims), np.zeros(spec.dims)]
    margin = 6.0
    for _ in range(spec.n_blobs):
        center = rng.uniform(margin, extent - margin)
        sigmas = rng.uniform(1.5, 5.0, 3)
        amplitude = rng.uniform(0.35, 1.0)
        _add_blob(class_fields[int(rng.integers(2))], axes, center, sigmas, amplitude)
    tubes = np.zeros(spec.dims)
    for _ in range(spec.n_tubes):
        control = [rng.uniform(margin, extent - margin) for _ in range(3)]
        _splat_tube(tubes, axes, control, radius=rng.uniform(0.8, 2.0), amplitude=rng.uniform(0.3, 0.7))
    composite = background + class_fields[0] + class_fields[1] + tubes
    return composite, class_fields


def _place_landmarks(mri: Volume3D, spec: SynthSpec, rng: np.random.Generator) -> LandmarkSet:
    """The strongest gradient-magnitude maxima in the central region,
    greedily kept at >= 8 mm separation."""
    smoothed = ndimage.gaussian_filter(mri.data.astype(np.float64), sigma=2.0, mode="reflect")
    grads = np.gradient(smoothed, *mri.spacing)
    mag = np.sqrt(sum(g**2 for g in grads))
    local_max = mag == ndimage.maximum_filter(mag, size=3, mode="constant", cval=np.inf)
    # Keep landmarks central so fan masking and search boxes stay supported.
    extent_min = min(d * s for d, s in zip(spec.dims, spec.spacing))
    interior_mm = min(16.0, extent_min / 4.0)
    masks = []
    for d, s in zip(spec.dims, spec.spacing):
        lo = int(np.ceil(interior_mm / s))
        hi = d - lo
        m = np.zeros(d, dtype=bool)
        m[lo:hi] = True
        masks.append(m)
    central = masks[0][:, None, None] & masks[1][None, :, None] & masks[2][None, None, :]
    candidates = np.argwhere(local_max & central)
    if len(candidates) == 0:
        raise RuntimeError("landmark placement found no gradient maxima")
    order = np.argsort(-mag[tuple(candidates.T)])
    separation = LANDMARK_SEPARATION_MM
    for _attempt in range(4):
        chosen: list[np.ndarray] = []
        for idx in order:
            pos = candidates[idx] * np.asarray(mri.spacing) + np.asarray(mri.origin)
            if all(np.linalg.norm(pos - q) >= separation for q in chosen):
                chosen.append(pos)
            if len(chosen) == spec.n_landmarks:
                break
        if len(chosen) == spec.n_landmarks:
            entries = tuple(
                Landmark(f"L{i + 1:02d}", pos) for i, pos in enumerate(chosen)
            )
            return LandmarkSet(entries)
        separation *= 0.8
    raise RuntimeError(
        f"landmark placement failed: only {len(chosen)} of {spec.n_landmarks} at >= {separation:.1f} mm"
    )


def _make_deformation(spec: SynthSpec, rng: np.random.Generator, extent: np.ndarray) -> Deformation:
    n_modes = 3
    amplitudes = rng.uniform(0.5, 1.0, size=(3, n_modes))
    phases = rng.uniform(0.0, 2 * np.pi, size=(3, n_modes))
    wavelengths = rng.uniform(64.0, 128.0, size=(3, n_modes))
    directions = rng.normal(size=(3, n_modes, 3))
    directions /= np.linalg.norm(directions, axis=2, keepdims=True)
    wavevectors = 2 * np.pi / wavelengths[:, :, None] * directions
    raw = Deformation(amplitudes=amplitudes, wavevectors=wavevectors, phases=phases, max_shift_mm=0.0)
    if spec.max_shift_mm == 0.0:
        return Deformation(
            amplitudes=np.zeros_like(amplitudes), wavevectors=wavevectors, phases=phases, max_shift_mm=0.0
        )
    # Scale so the max magnitude over a dense grid equals max_shift_mm; the
    # 0.5% headroom covers the continuous maximum between grid points.
    grid = np.stack(
        np.meshgrid(*(np.linspace(0, e, 40) for e in extent), indexing="ij"), axis=-1
    ).reshape(-1, 3)
    max_mag = np.linalg.norm(raw(grid), axis=1).max() * 1.005
    factor = spec.max_shift_mm / max_mag
    return Deformation(
        amplitudes=amplitudes * factor,
        wavevectors=wavevectors,
        phases=phases,
        max_shift_mm=spec.max_shift_mm,
    )


def _trilinear_sample(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample a volume at continuous voxel coords (n, 3); zero outside."""
    return ndimage.map_coordinates(
        np.ascontiguousarray(data), coords.T, order=1, mode="constant", cval=0.0, prefilter=False
    )


def _invert_deformation_on_grid(deformation: Deformation, spec: SynthSpec, n_iter=30, tol=1e-3) -> np.ndarray:
    """Solve x = y - d(x) per grid point y by fixed-point iteration.

    The field is Lipschitz < 1 by construction (low frequencies, small
    amplitudes), so the iteration converges geometrically; tol is in mm and
    sits far below the voxel pitch.
    """
    axes = _world_axes(spec)
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3).astype(np.float32)
    x = grid.copy()
    for _ in range(n_iter):
        x_new = grid - deformation(x).astype(np.float32)
        delta = np.abs(x_new - x).max()
        x = x_new
        if delta < tol:
            break
    return x.astype(np.float64)


def _fan_mask(spec: SynthSpec, protected_points: np.ndarray):
    """Cone from an apex above the +z face, half-angle fit so every protected
    point clears the boundary by FAN_MARGIN_MM."""
    axes = _world_axes(spec)
    extent = np.array([ax[-1] for ax in axes])
    apex = np.array([extent[0] / 2.0, extent[1] / 2.0, extent[2] + 10.0])
    axis_dir = np.array([0.0, 0.0, -1.0])
    rel = protected_points - apex
    dist = np.linalg.norm(rel, axis=1)
    cosang = (rel @ axis_dir) / dist
    beta = np.arccos(np.clip(cosang, -1.0, 1.0))
    theta = float(np.max(beta + np.arcsin(np.minimum(FAN_MARGIN_MM / dist, 1.0))))
    theta = min(theta + 0.02, np.pi / 2 - 0.05)
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    rel_g = grid - apex
    dist_g = np.linalg.norm(rel_g, axis=-1)
    cos_g = np.einsum("xyzc,c->xyz", rel_g, axis_dir) / dist_g
    mask = np.arccos(np.clip(cos_g, -1.0, 1.0)) <= theta
    return mask, float(1.0 - mask.mean())


def generate_subject(spec: SynthSpec, subject_id: str = "s000") -> SynthSubject:
    """Build one paired subject; bit-identical for identical specs."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    axes = _world_axes(spec)
    extent = np.array([ax[-1] for ax in axes])

    composite, class_fields = _build_anatomy(spec, rng)
    mri = normalize_intensity(
        Volume3D(dims=spec.dims, spacing=spec.spacing, origin=(0.0, 0.0, 0.0), data=composite)
    )
    mri_landmarks = _place_landmarks(mri, spec, rng)
    deformation = _make_deformation(spec, rng, extent)

    us_landmarks = LandmarkSet(
        tuple(
            Landmark(e.id, e.position + deformation(e.position))
            for e in mri_landmarks
        )
    )
    pairs = LandmarkPairSet(subject_id=subject_id, mri=mri_landmarks, us=us_landmarks)

    # Query image: pull anatomy back through the inverse warp...
    inv = _invert_deformation_on_grid(deformation, spec)
    inv_voxels = inv / np.asarray(spec.spacing)
    us = _trilinear_sample(mri.data.astype(np.float64), inv_voxels).reshape(spec.dims)
    # ...then degrade: gamma, partial inversion of one blob class, speckle, blur, fan.
    gamma = rng.uniform(0.6, 1.6)
    us = np.clip(us, 0.0, 1.0) ** gamma
    inverted_class = int(rng.integers(2))
    class_field = class_fields[inverted_class]
    peak = class_field.max()
    if peak > 0:
        warped_class = np.clip(
            _trilinear_sample(class_field, inv_voxels).reshape(spec.dims) / peak, 0.0, 1.0
        )
        us = us + INVERSION_STRENGTH * warped_class * (1.0 - 2.0 * us)
    speckle = rng.rayleigh(SPECKLE_SCALE, size=spec.dims)
    us = us * (speckle / (SPECKLE_SCALE * np.sqrt(np.pi / 2.0)))
    blur_sigma_vox = rng.uniform(1.0, 2.0, size=3)
    us = ndimage.gaussian_filter(us, sigma=blur_sigma_vox, mode="reflect")
    protected = np.concatenate([mri_landmarks.positions(), us_landmarks.positions()])
    mask, zero_fraction = _fan_mask(spec, protected)
    us = np.where(mask, np.abs(us), 0.0)
    us_vol = normalize_intensity(
        Volume3D(dims=spec.dims, spacing=spec.spacing, origin=(0.0, 0.0, 0.0), data=us)
    )
    return SynthSubject(
        subject_id=subject_id,
        mri=mri,
        us=us_vol,
        pairs=pairs,
        deformation=deformation,
        fan_zero_fraction=zero_fraction,
    )


def generate_cohort(spec: SynthSpec, n_subjects: int) -> list[SynthSubject]:
    """Independent subjects from per-subject child seeds of ``spec.seed``."""
    children = np.random.SeedSequence(spec.seed).spawn(n_subjects)
    subjects = []
    for i, child in enumerate(children):
        sub_spec = replace(spec, seed=int(child.generate_state(1)[0]))
        subjects.append(generate_subject(sub_spec, subject_id=f"s{i:03d}"))
    return subjects
