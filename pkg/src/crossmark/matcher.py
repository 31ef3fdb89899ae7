"""Bounded similarity search: locate each reference landmark in the query volume.

For one landmark the reference volume is encoded once (three per-axis
feature vectors); every candidate point on a [-range, +range] mm grid around
the landmark gets its query-volume series encoded per axis, scored by cosine
similarity, and the scores are summed over the three axes. The argmax wins,
with deterministic tie-breaking (smaller displacement first, then
lexicographic offset order).
"""

from __future__ import annotations

import concurrent.futures
import csv
import multiprocessing
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .encoder import EncoderParams, encode_batch, encode_series
from .patches import AXES, extract_series
from .training import cosine_similarity
from .volume import LandmarkSet, Volume3D


@dataclass(frozen=True)
class SearchConfig:
    range_mm: float = 5.0
    step_mm: float = 0.5
    similarity_floor: float = float("-inf")
    extend_factor: float = 2.0
    max_extensions: int = 1
    min_us_support: float = 0.5
    encode_chunk: int = 128

    def __post_init__(self):
        if self.range_mm <= 0 or self.step_mm <= 0:
            raise ValueError("SearchConfig: range_mm and step_mm must be positive")
        if self.step_mm > self.range_mm:
            raise ValueError("SearchConfig: step_mm must not exceed range_mm")
        if not 0.0 <= self.min_us_support <= 1.0:
            raise ValueError("SearchConfig: min_us_support must be in [0, 1]")


@dataclass(frozen=True)
class MatchResult:
    landmark_id: str
    predicted_us_world: np.ndarray  # (3,) mm
    score_total: float
    score_per_axis: np.ndarray  # (3,)
    candidates_evaluated: int
    extended: bool

    def __post_init__(self):
        pred = np.asarray(self.predicted_us_world, dtype=np.float64)
        per_axis = np.asarray(self.score_per_axis, dtype=np.float64)
        if abs(self.score_total - per_axis.sum()) > 1e-9:
            raise ValueError("MatchResult: score_total must equal the per-axis sum")
        pred.setflags(write=False)
        per_axis.setflags(write=False)
        object.__setattr__(self, "predicted_us_world", pred)
        object.__setattr__(self, "score_per_axis", per_axis)


class MatchFailure(RuntimeError):
    """No candidate survived the support filter / similarity floor."""

    def __init__(self, landmark_id: str, diagnostics: dict):
        self.landmark_id = landmark_id
        self.diagnostics = diagnostics
        super().__init__(f"no match for landmark {landmark_id!r}: {diagnostics}")


def candidate_grid(center, cfg: SearchConfig) -> np.ndarray:
    """Cartesian product of per-axis offsets {-range, ..., -step, 0, step, ..., +range}.

    Rows are ordered lexicographically by offset (x slowest), and always
    include the center.
    """
    center = np.asarray(center, dtype=np.float64)
    k = int(np.floor(cfg.range_mm / cfg.step_mm + 1e-9))
    offsets = np.arange(-k, k + 1, dtype=np.float64) * cfg.step_mm
    ox, oy, oz = np.meshgrid(offsets, offsets, offsets, indexing="ij")
    grid_offsets = np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=1)
    return center[None, :] + grid_offsets


def reference_features(mri_vol: Volume3D, landmark_pos, params_mri: EncoderParams) -> np.ndarray:
    """(3, 32) feature vectors of the reference landmark, one per axis."""
    return np.stack([encode_series(params_mri, extract_series(mri_vol, landmark_pos, axis)) for axis in AXES])


def score_candidate(mri_feats: np.ndarray, us_vol: Volume3D, candidate, params_us: EncoderParams):
    """Summed per-axis cosine similarity of one candidate; total is in [-3, 3]."""
    per_axis = np.array(
        [
            cosine_similarity(mri_feats[i], encode_series(params_us, extract_series(us_vol, candidate, axis)))
            for i, axis in enumerate(AXES)
        ]
    )
    return float(per_axis.sum()), per_axis


def _score_grid(
    mri_feats: np.ndarray,
    us_vol: Volume3D,
    candidates: np.ndarray,
    params_us: EncoderParams,
    cfg: SearchConfig,
):
    """Scores for every candidate with enough query support.

    Returns (totals (n,), per_axis (n, 3), supported mask (n,)); skipped
    candidates carry -inf totals.
    """
    n = len(candidates)
    totals = np.full(n, -np.inf)
    per_axis = np.zeros((n, 3))
    supported = np.zeros(n, dtype=bool)
    refs = mri_feats.astype(np.float64)
    ref_norms = np.linalg.norm(refs, axis=1)
    chunk = max(cfg.encode_chunk, 1)
    for start in range(0, n, chunk):
        cands = candidates[start : start + chunk]
        m = len(cands)
        pixels = np.empty((m, 3, 3, 42, 42), dtype=np.float32)  # (cand, axis, C, H, W)
        support = np.empty(m)
        for i, cand in enumerate(cands):
            mids = []
            for a, axis in enumerate(AXES):
                series = extract_series(us_vol, cand, axis)
                pixels[i, a] = series.channels_first()
                mids.append(series.pixels[:, :, 1])
            support[i] = np.count_nonzero(np.stack(mids)) / (3 * 42 * 42)
        ok = support >= cfg.min_us_support
        idx = np.flatnonzero(ok)
        supported[start : start + m] = ok
        if not idx.size:
            continue
        for a in range(3):
            feats = encode_batch(params_us, pixels[idx, a]).astype(np.float64)
            norms = np.linalg.norm(feats, axis=1)
            if np.any(norms == 0):
                raise ValueError("cosine similarity of a zero-norm vector is undefined")
            per_axis[start + idx, a] = (feats @ refs[a]) / (norms * ref_norms[a])
        totals[start + idx] = per_axis[start + idx].sum(axis=1)
    return totals, per_axis, supported


def _select_best(candidates: np.ndarray, center: np.ndarray, totals: np.ndarray) -> int:
    """Argmax with ties broken by smaller displacement, then lexicographic offset."""
    best = totals.max()
    ties = np.flatnonzero(totals == best)
    offsets = candidates[ties] - center[None, :]
    dist2 = np.einsum("ij,ij->i", offsets, offsets)
    order = np.lexsort((offsets[:, 2], offsets[:, 1], offsets[:, 0], dist2))
    return int(ties[order[0]])


def match_landmark(
    mri_vol: Volume3D,
    us_vol: Volume3D,
    landmark_id: str,
    landmark_pos,
    params_mri: EncoderParams,
    params_us: EncoderParams,
    cfg: SearchConfig = SearchConfig(),
    score_fn=None,
) -> MatchResult:
    """Locate one reference landmark in the query volume.

    ``score_fn(candidates) -> (totals, per_axis, supported)`` may replace the
    encoder scoring (stubs in tests). If every candidate is skipped or the
    best score sits below the similarity floor, the search is repeated once
    with the range multiplied by ``extend_factor`` and the result flagged
    ``extended``; failing that, :class:`MatchFailure` is raised.
    """
    center = np.asarray(landmark_pos, dtype=np.float64)
    mri_feats = None
    if score_fn is None:
        mri_feats = reference_features(mri_vol, center, params_mri)

    attempts = []
    search_cfg = cfg
    for attempt in range(1 + max(cfg.max_extensions, 0)):
        extended = attempt > 0
        candidates = candidate_grid(center, search_cfg)
        if score_fn is None:
            totals, per_axis, supported = _score_grid(mri_feats, us_vol, candidates, params_us, search_cfg)
        else:
            totals, per_axis, supported = score_fn(candidates)
        n_supported = int(np.count_nonzero(supported))
        best_score = totals.max() if n_supported else float("-inf")
        attempts.append(
            {
                "range_mm": search_cfg.range_mm,
                "grid_size": len(candidates),
                "supported": n_supported,
                "best_score": best_score,
            }
        )
        if n_supported and best_score >= cfg.similarity_floor:
            i = _select_best(candidates, center, totals)
            return MatchResult(
                landmark_id=landmark_id,
                predicted_us_world=candidates[i],
                score_total=float(totals[i]),
                score_per_axis=per_axis[i],
                candidates_evaluated=n_supported,
                extended=extended,
            )
        search_cfg = replace(search_cfg, range_mm=search_cfg.range_mm * cfg.extend_factor)
    raise MatchFailure(landmark_id, {"attempts": attempts})


# -- whole-subject matching ---------------------------------------------------

_WORKER_CTX: dict = {}


def _init_worker(mri_vol, us_vol, params_mri, params_us, cfg):
    _WORKER_CTX.update(mri=mri_vol, us=us_vol, pm=params_mri, pu=params_us, cfg=cfg)


def _match_one(task):
    lm_id, pos = task
    try:
        result = match_landmark(
            _WORKER_CTX["mri"], _WORKER_CTX["us"], lm_id, pos, _WORKER_CTX["pm"], _WORKER_CTX["pu"], _WORKER_CTX["cfg"]
        )
        return lm_id, result, None
    except MatchFailure as exc:
        return lm_id, None, exc.diagnostics


def match_all(
    mri_vol: Volume3D,
    us_vol: Volume3D,
    landmarks: LandmarkSet,
    params_mri: EncoderParams,
    params_us: EncoderParams,
    cfg: SearchConfig = SearchConfig(),
    threads: int = 1,
) -> tuple[list[MatchResult], dict[str, dict]]:
    """Match every landmark (ordered by id); failures are collected, not raised.

    ``threads > 1`` fans landmarks out to worker processes; each landmark's
    computation is identical either way, so results match the sequential
    path bit for bit.
    """
    tasks = [(e.id, e.position) for e in sorted(landmarks, key=lambda e: e.id)]
    results: list[MatchResult] = []
    failures: dict[str, dict] = {}
    if threads <= 1 or len(tasks) <= 1:
        _init_worker(mri_vol, us_vol, params_mri, params_us, cfg)
        outcomes = [_match_one(t) for t in tasks]
    else:
        ctx = multiprocessing.get_context("fork")
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=min(threads, len(tasks)),
            mp_context=ctx,
            initializer=_init_worker,
            initargs=(mri_vol, us_vol, params_mri, params_us, cfg),
        ) as pool:
            outcomes = list(pool.map(_match_one, tasks))
    for lm_id, result, failure in outcomes:
        if result is not None:
            results.append(result)
        else:
            failures[lm_id] = failure
    return results, failures


MATCH_CSV_HEADER = ["id", "x_mm", "y_mm", "z_mm", "score", "extended"]


def write_matches_csv(results: list[MatchResult], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MATCH_CSV_HEADER)
        for r in results:
            writer.writerow(
                [r.landmark_id]
                + [f"{v:.17g}" for v in r.predicted_us_world]
                + [f"{r.score_total:.17g}", int(r.extended)]
            )
    return path


def read_matches_csv(path) -> tuple[LandmarkSet, dict[str, float], dict[str, bool]]:
    """Reload a match CSV as (predicted landmark set, scores, extended flags)."""
    from .volume import Landmark

    path = Path(path)
    entries, scores, extended = [], {}, {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != MATCH_CSV_HEADER:
            raise ValueError(f"{path}: bad match CSV header {header!r}")
        for row in reader:
            if not row:
                continue
            entries.append(Landmark(row[0], np.array([float(v) for v in row[1:4]])))
            scores[row[0]] = float(row[4])
            extended[row[0]] = bool(int(row[5]))
    return LandmarkSet(tuple(entries)), scores, extended
