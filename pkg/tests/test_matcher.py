import numpy as np
import pytest

from crossmark import matcher as mt
from crossmark.encoder import init_encoder_params
from crossmark.volume import Landmark, LandmarkSet

from conftest import make_volume


def stub_scores(candidates, fn, supported=None):
    totals = np.array([fn(c) for c in candidates])
    per_axis = np.stack([totals / 3] * 3, axis=1)
    mask = np.ones(len(candidates), dtype=bool) if supported is None else supported(candidates)
    totals = np.where(mask, totals, -np.inf)
    return totals, per_axis, mask


class TestCandidateGrid:
    def test_default_grid_has_9261_points(self):
        cfg = mt.SearchConfig(range_mm=5.0, step_mm=0.5)
        grid = mt.candidate_grid(np.zeros(3), cfg)
        assert len(grid) == 21**3 == 9261

    def test_single_step_grid_has_27_points(self):
        cfg = mt.SearchConfig(range_mm=0.5, step_mm=0.5)
        assert len(mt.candidate_grid(np.zeros(3), cfg)) == 27

    def test_contains_center(self):
        cfg = mt.SearchConfig(range_mm=2.0, step_mm=0.5)
        center = np.array([3.3, -1.2, 9.9])
        grid = mt.candidate_grid(center, cfg)
        assert any(np.array_equal(row, center) for row in grid)

    def test_symmetric_under_reflection(self):
        cfg = mt.SearchConfig(range_mm=2.0, step_mm=1.0)
        center = np.array([1.0, 2.0, 3.0])
        grid = mt.candidate_grid(center, cfg)
        rows = {tuple(np.round(r, 9)) for r in grid}
        reflected = {tuple(np.round(2 * center - r, 9)) for r in grid}
        assert rows == reflected

    def test_lexicographic_ordering(self):
        cfg = mt.SearchConfig(range_mm=1.0, step_mm=1.0)
        grid = mt.candidate_grid(np.zeros(3), cfg)
        offs = [tuple(r) for r in grid]
        assert offs == sorted(offs)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError, match="step_mm"):
            mt.SearchConfig(range_mm=1.0, step_mm=2.0)
        with pytest.raises(ValueError, match="positive"):
            mt.SearchConfig(range_mm=0.0, step_mm=0.5)


class TestMatchResultInvariants:
    def test_total_must_equal_axis_sum(self):
        with pytest.raises(ValueError, match="per-axis sum"):
            mt.MatchResult("L1", np.zeros(3), 1.0, np.array([0.2, 0.2, 0.2]), 1, False)


def _dummy_vols():
    v = make_volume(np.ones((32, 32, 32)), spacing=(1, 1, 1))
    return v, v


class TestMatchLandmark:
    def test_planted_distance_stub_recovers_optimum_exactly(self):
        mri, us = _dummy_vols()
        center = np.array([16.0, 16.0, 16.0])
        target = center + np.array([2.0, -1.5, 0.5])
        cfg = mt.SearchConfig(range_mm=5.0, step_mm=0.5)

        def score(cands):
            return stub_scores(cands, lambda c: -np.linalg.norm(c - target))

        r = mt.match_landmark(mri, us, "L1", center, None, None, cfg, score_fn=score)
        assert np.array_equal(r.predicted_us_world, target)
        assert not r.extended

    def test_all_equal_scores_pick_center(self):
        mri, us = _dummy_vols()
        center = np.array([16.0, 16.0, 16.0])
        cfg = mt.SearchConfig(range_mm=2.0, step_mm=1.0)

        def score(cands):
            return stub_scores(cands, lambda c: 1.0)

        r = mt.match_landmark(mri, us, "L1", center, None, None, cfg, score_fn=score)
        assert np.array_equal(r.predicted_us_world, center)

    def test_tie_break_smaller_displacement_then_lex(self):
        mri, us = _dummy_vols()
        center = np.array([16.0, 16.0, 16.0])
        cfg = mt.SearchConfig(range_mm=1.0, step_mm=1.0)

        # Score 1.0 on the six unit-offset neighbors, 0 elsewhere: the
        # lexicographically smallest unit offset (-1, 0, 0) must win.
        def score(cands):
            def f(c):
                d = np.abs(c - center)
                return 1.0 if np.isclose(np.sum(d), 1.0) and np.isclose(np.max(d), 1.0) else 0.0

            return stub_scores(cands, f)

        r = mt.match_landmark(mri, us, "L1", center, None, None, cfg, score_fn=score)
        assert np.array_equal(r.predicted_us_world, center + np.array([-1.0, 0.0, 0.0]))

    def test_prediction_within_declared_box(self):
        mri, us = _dummy_vols()
        center = np.array([16.0, 16.0, 16.0])
        cfg = mt.SearchConfig(range_mm=3.0, step_mm=1.0)
        rng = np.random.default_rng(0)

        def score(cands):
            return stub_scores(cands, lambda c: rng.normal())

        r = mt.match_landmark(mri, us, "L1", center, None, None, cfg, score_fn=score)
        assert np.all(np.abs(r.predicted_us_world - center) <= cfg.range_mm + 1e-12)
        assert r.candidates_evaluated <= 7**3

    def test_monotonic_refinement_on_step_halving(self):
        mri, us = _dummy_vols()
        center = np.array([16.0, 16.0, 16.0])
        target = center + np.array([1.3, -0.4, 2.1])  # off-grid optimum

        def score(cands):
            return stub_scores(cands, lambda c: -np.linalg.norm(c - target))

        best = {}
        for step in (2.0, 1.0, 0.5):
            cfg = mt.SearchConfig(range_mm=4.0, step_mm=step)
            r = mt.match_landmark(mri, us, "L1", center, None, None, cfg, score_fn=score)
            best[step] = r.score_total
        assert best[1.0] >= best[2.0]
        assert best[0.5] >= best[1.0]

    def test_extension_used_when_all_skipped(self):
        mri, us = _dummy_vols()
        center = np.array([16.0, 16.0, 16.0])
        cfg = mt.SearchConfig(range_mm=1.0, step_mm=1.0, extend_factor=2.0)
        target = center + np.array([2.0, 0.0, 0.0])  # only reachable after extension

        def score(cands):
            # The whole initial grid (corner norm sqrt(3) < 1.9) lacks support.
            return stub_scores(
                cands,
                lambda c: -np.linalg.norm(c - target),
                supported=lambda cs: np.linalg.norm(cs - center, axis=1) > 1.9,
            )

        r = mt.match_landmark(mri, us, "L1", center, None, None, cfg, score_fn=score)
        assert r.extended
        assert np.array_equal(r.predicted_us_world, target)

    def test_failure_after_extension_raises_with_diagnostics(self):
        mri, us = _dummy_vols()
        cfg = mt.SearchConfig(range_mm=1.0, step_mm=1.0)

        def score(cands):
            return stub_scores(cands, lambda c: 0.0, supported=lambda cs: np.zeros(len(cs), bool))

        with pytest.raises(mt.MatchFailure) as err:
            mt.match_landmark(mri, us, "L1", np.array([16.0, 16.0, 16.0]), None, None, cfg, score_fn=score)
        assert err.value.landmark_id == "L1"
        assert len(err.value.diagnostics["attempts"]) == 2

    def test_similarity_floor_triggers_extension(self):
        mri, us = _dummy_vols()
        center = np.array([16.0, 16.0, 16.0])
        cfg = mt.SearchConfig(range_mm=1.0, step_mm=1.0, similarity_floor=0.5)
        target = center + np.array([2.0, 0.0, 0.0])

        def score(cands):
            return stub_scores(cands, lambda c: 1.0 if np.allclose(c, target) else 0.0)

        r = mt.match_landmark(mri, us, "L1", center, None, None, cfg, score_fn=score)
        assert r.extended and np.array_equal(r.predicted_us_world, target)


class TestEncoderBackedScoring:
    """Real-encoder paths on small volumes; stub injected at the encoder level."""

    def _setup(self):
        rng = np.random.default_rng(7)
        data = rng.random((48, 48, 48)).astype(np.float32) + 0.1
        vol = make_volume(data, spacing=(1, 1, 1))
        return vol, init_encoder_params(0), init_encoder_params(1)

    def test_score_candidate_total_is_axis_sum_and_bounded(self):
        vol, pm, pu = self._setup()
        center = np.array([24.0, 24.0, 24.0])
        feats = mt.reference_features(vol, center, pm)
        total, per_axis = mt.score_candidate(feats, vol, center + 1.0, pu)
        assert total == pytest.approx(per_axis.sum(), abs=1e-12)
        assert -3.0 - 1e-9 <= total <= 3.0 + 1e-9

    def test_self_similarity_scores_three(self):
        vol, pm, _ = self._setup()
        center = np.array([24.0, 24.0, 24.0])
        feats = mt.reference_features(vol, center, pm)
        total, per_axis = mt.score_candidate(feats, vol, center, pm)
        assert total == pytest.approx(3.0, abs=1e-5)
        assert np.allclose(per_axis, 1.0, atol=1e-5)

    def test_stub_encoder_patch_mean_hand_value(self, monkeypatch):
        constant = make_volume(np.full((48, 48, 48), 0.5), spacing=(1, 1, 1))

        def stub_encode(params, series):
            return np.full(32, float(series.pixels.mean()) + 0.1)

        monkeypatch.setattr(mt, "encode_series", stub_encode)
        center = np.array([24.0, 24.0, 24.0])
        feats = mt.reference_features(constant, center, None)
        total, per_axis = mt.score_candidate(feats, constant, center, None)
        # Replicated constants always have cosine 1 per axis.
        assert total == pytest.approx(3.0, abs=1e-9)

    def test_argmax_invariant_to_positive_feature_scaling(self):
        vol, pm, pu = self._setup()
        center = np.array([24.0, 24.0, 24.0])
        cfg = mt.SearchConfig(range_mm=1.0, step_mm=1.0, min_us_support=0.0)
        r1 = mt.match_landmark(vol, vol, "L1", center, pm, pu, cfg)

        scaled = pu.copy()
        # Scaling the last affine layer scales every feature vector by 2.5.
        scaled["mlp2.weight"].data = scaled["mlp2.weight"].data * 2.5
        scaled["mlp2.bias"].data = scaled["mlp2.bias"].data * 2.5
        r2 = mt.match_landmark(vol, vol, "L1", center, pm, scaled, cfg)
        assert np.array_equal(r1.predicted_us_world, r2.predicted_us_world)

    def test_deterministic_bit_for_bit(self):
        vol, pm, pu = self._setup()
        center = np.array([24.0, 24.0, 24.0])
        cfg = mt.SearchConfig(range_mm=1.0, step_mm=1.0)
        r1 = mt.match_landmark(vol, vol, "L1", center, pm, pu, cfg)
        r2 = mt.match_landmark(vol, vol, "L1", center, pm, pu, cfg)
        assert np.array_equal(r1.predicted_us_world, r2.predicted_us_world)
        assert r1.score_total == r2.score_total
        assert np.array_equal(r1.score_per_axis, r2.score_per_axis)

    def test_low_support_candidates_skipped(self):
        rng = np.random.default_rng(8)
        data = np.zeros((48, 48, 48), dtype=np.float32)
        data[:26] = rng.random((26, 48, 48)) + 0.1  # half the volume is dead
        vol = make_volume(data, spacing=(1, 1, 1))
        pm, pu = init_encoder_params(0), init_encoder_params(1)
        center = np.array([24.0, 24.0, 24.0])
        cfg = mt.SearchConfig(range_mm=2.0, step_mm=1.0, min_us_support=0.6)
        r = mt.match_landmark(vol, vol, "L1", center, pm, pu, cfg)
        # Candidates deep in the dead half fall below the support threshold.
        assert r.candidates_evaluated < 5**3
        assert r.predicted_us_world[0] <= 25.0


class TestMatchAll:
    def _subject(self, n_landmarks=6):
        rng = np.random.default_rng(9)
        data = rng.random((48, 48, 48)).astype(np.float32) + 0.1
        vol = make_volume(data, spacing=(1, 1, 1))
        landmarks = LandmarkSet(
            tuple(Landmark(f"L{i:02d}", rng.uniform(18, 30, 3)) for i in range(n_landmarks))
        )
        return vol, landmarks

    def test_results_ordered_by_id_and_complete(self):
        vol, landmarks = self._subject()
        pm, pu = init_encoder_params(0), init_encoder_params(1)
        cfg = mt.SearchConfig(range_mm=1.0, step_mm=1.0)
        results, failures = mt.match_all(vol, vol, landmarks, pm, pu, cfg)
        assert [r.landmark_id for r in results] == sorted(landmarks.ids())
        assert failures == {}

    def test_failures_isolated(self):
        rng = np.random.default_rng(10)
        data = np.zeros((48, 48, 48), dtype=np.float32)
        data[:, :, 24:] = rng.random((48, 48, 24)) + 0.1
        vol = make_volume(data, spacing=(1, 1, 1))
        pm, pu = init_encoder_params(0), init_encoder_params(1)
        landmarks = LandmarkSet(
            (
                Landmark("L00", np.array([24.0, 24.0, 36.0])),  # supported
                Landmark("L01", np.array([24.0, 24.0, 6.0])),  # dead zone, must fail
            )
        )
        cfg = mt.SearchConfig(range_mm=1.0, step_mm=1.0, min_us_support=0.5, max_extensions=1)
        results, failures = mt.match_all(vol, vol, landmarks, pm, pu, cfg)
        assert [r.landmark_id for r in results] == ["L00"]
        assert list(failures) == ["L01"]

    def test_csv_round_trip_identical_predictions(self, tmp_path):
        vol, landmarks = self._subject(4)
        pm, pu = init_encoder_params(0), init_encoder_params(1)
        cfg = mt.SearchConfig(range_mm=1.0, step_mm=1.0)
        results, _ = mt.match_all(vol, vol, landmarks, pm, pu, cfg)
        path = mt.write_matches_csv(results, tmp_path / "m.csv")
        predicted, scores, extended = mt.read_matches_csv(path)
        for r in results:
            assert np.array_equal(predicted.get(r.landmark_id).position, r.predicted_us_world)
            assert scores[r.landmark_id] == r.score_total
            assert extended[r.landmark_id] == r.extended

    def test_threads_do_not_change_output(self, tmp_path):
        vol, landmarks = self._subject(4)
        pm, pu = init_encoder_params(0), init_encoder_params(1)
        cfg = mt.SearchConfig(range_mm=1.0, step_mm=1.0)
        seq, _ = mt.match_all(vol, vol, landmarks, pm, pu, cfg, threads=1)
        par, _ = mt.match_all(vol, vol, landmarks, pm, pu, cfg, threads=2)
        p1 = mt.write_matches_csv(seq, tmp_path / "seq.csv")
        p2 = mt.write_matches_csv(par, tmp_path / "par.csv")
        assert p1.read_bytes() == p2.read_bytes()
