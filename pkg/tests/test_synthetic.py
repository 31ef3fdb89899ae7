import numpy as np
import pytest
from scipy import ndimage

from crossmark.evaluation import compute_mtre
from crossmark.patches import extract_series
from crossmark.synthetic import (
    Deformation,
    SynthSpec,
    evaluate_deformation,
    generate_cohort,
    generate_subject,
)


@pytest.fixture(scope="module")
def default_subject():
    return generate_subject(SynthSpec(seed=7), "s000")


class TestDeformation:
    def test_zero_coefficients_zero_field(self):
        d = Deformation(
            amplitudes=np.zeros((3, 3)),
            wavevectors=np.ones((3, 3, 3)) * 0.05,
            phases=np.zeros((3, 3)),
            max_shift_mm=0.0,
        )
        pts = np.random.default_rng(0).uniform(0, 60, (100, 3))
        assert np.all(evaluate_deformation(d, pts) == 0)

    def test_field_matches_planted_pairs_exactly(self, default_subject):
        s = default_subject
        for lm_id, m, u in s.pairs.pairs():
            d = evaluate_deformation(s.deformation, m)
            assert np.allclose(m + d, u, atol=1e-12)

    def test_magnitude_bounded_on_dense_sample(self, default_subject):
        s = default_subject
        rng = np.random.default_rng(1)
        pts = rng.uniform(0, 63.5, (10_000, 3))
        mags = np.linalg.norm(evaluate_deformation(s.deformation, pts), axis=1)
        assert mags.max() <= s.deformation.max_shift_mm + 1e-9

    def test_single_point_evaluation_shape(self, default_subject):
        out = evaluate_deformation(default_subject.deformation, np.array([10.0, 20.0, 30.0]))
        assert out.shape == (3,)


class TestGenerateSubject:
    def test_zero_shift_gives_identical_landmarks(self):
        spec = SynthSpec(dims=(96, 96, 96), n_blobs=25, n_tubes=6, n_landmarks=6, max_shift_mm=0.0, seed=3)
        s = generate_subject(spec, "s")
        for _i, m, u in s.pairs.pairs():
            assert np.array_equal(m, u)
        assert compute_mtre(s.pairs) == 0.0

    def test_deterministic_for_seed(self):
        spec = SynthSpec(dims=(96, 96, 96), n_blobs=20, n_tubes=5, n_landmarks=5, seed=11)
        a = generate_subject(spec, "s")
        b = generate_subject(spec, "s")
        assert np.array_equal(a.mri.data, b.mri.data)
        assert np.array_equal(a.us.data, b.us.data)
        for ea, eb in zip(a.pairs.us, b.pairs.us):
            assert ea.id == eb.id and np.array_equal(ea.position, eb.position)

    def test_mtre_bounded_by_max_shift(self, default_subject):
        assert compute_mtre(default_subject.pairs) <= default_subject.deformation.max_shift_mm

    def test_requested_landmark_count_and_separation(self, default_subject):
        s = default_subject
        positions = s.pairs.mri.positions()
        assert len(positions) == 16
        for i in range(len(positions)):
            for j in range(i + 1, len(positions)):
                assert np.linalg.norm(positions[i] - positions[j]) >= 8.0 - 1e-9

    def test_volumes_normalized_unit_range(self, default_subject):
        for vol in (default_subject.mri, default_subject.us):
            assert vol.data.min() >= 0.0
            assert vol.data.max() <= 1.0

    def test_fan_zero_fraction_in_band(self, default_subject):
        assert 0.03 <= default_subject.fan_zero_fraction <= 0.6

    def test_us_landmarks_have_full_patch_support(self, default_subject):
        s = default_subject
        for lm in s.pairs.us:
            for axis in ("x", "y", "z"):
                mid = extract_series(s.us, lm.position, axis).pixels[:, :, 1]
                assert np.count_nonzero(mid) / mid.size >= 0.9

    def test_structural_correspondence_ncc(self, default_subject):
        # Inverse-deform the query volume and correlate against the blurred
        # reference inside the fan support.
        s = default_subject
        rng = np.random.default_rng(2)
        mri_blur = ndimage.gaussian_filter(s.mri.data.astype(np.float64), 1.5)
        pts_vox = rng.uniform(4, 123, (20_000, 3))
        pts_world = pts_vox * np.asarray(s.us.spacing)
        undeformed_pos = pts_world + evaluate_deformation(s.deformation, pts_world)
        us_vals = ndimage.map_coordinates(
            s.us.data.astype(np.float64), (undeformed_pos / np.asarray(s.us.spacing)).T, order=1
        )
        mri_vals = ndimage.map_coordinates(mri_blur, pts_vox.T, order=1)
        mask = us_vals != 0
        a = us_vals[mask] - us_vals[mask].mean()
        b = mri_vals[mask] - mri_vals[mask].mean()
        ncc = float(a @ b / np.sqrt((a @ a) * (b @ b)))
        assert ncc > 0.3

    def test_query_differs_from_reference(self, default_subject):
        s = default_subject
        # The degradations must actually change the image.
        diff = np.abs(s.us.data - s.mri.data)
        assert diff.mean() > 0.01


class TestCohort:
    def test_cohort_subjects_distinct_and_deterministic(self):
        spec = SynthSpec(dims=(96, 96, 96), n_blobs=15, n_tubes=4, n_landmarks=4, seed=5)
        a = generate_cohort(spec, 2)
        b = generate_cohort(spec, 2)
        assert [s.subject_id for s in a] == ["s000", "s001"]
        assert not np.array_equal(a[0].mri.data, a[1].mri.data)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.mri.data, sb.mri.data)
            assert np.array_equal(sa.us.data, sb.us.data)


class TestSpecValidation:
    def test_landmark_count_positive(self):
        with pytest.raises(ValueError, match="n_landmarks"):
            SynthSpec(n_landmarks=0)

    def test_negative_shift_rejected(self):
        with pytest.raises(ValueError, match="max_shift"):
            SynthSpec(max_shift_mm=-1.0)
