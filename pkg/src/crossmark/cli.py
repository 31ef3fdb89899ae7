"""Single executable wiring the pipeline: synth, train, match, sift-match,
eval, patch-dump.

Exit codes: 0 success, 1 usage error, 2 data error, 3 match failure.
Every run prints its resolved configuration; all randomness flows from
--seed, and output files are byte-identical across reruns with identical
inputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, matcher, sift3d, training
from .encoder import CheckpointError, load_checkpoint
from .patches import AXES, dump_series, extract_series
from .synthetic import SynthSpec, generate_cohort
from .volume import (
    LandmarkFormatError,
    LandmarkSet,
    NiftiFormatError,
    SubjectPaths,
    Volume3D,
    load_landmarks_csv,
    load_manifest,
    load_nifti,
    load_pairs,
    load_raw_volume,
    normalize_intensity,
    save_landmarks_csv,
    save_manifest,
    save_raw_volume,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NO_MATCH = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit2(f"{self.prog}: error: {message}")


class SystemExit2(Exception):
    """Usage error carrying the message; mapped to exit code 1."""


def _print_config(args: argparse.Namespace):
    print("resolved config:")
    for key, value in sorted(vars(args).items()):
        if key == "func":
            continue
        print(f"  {key} = {value}")


def _load_volume_any(path) -> Volume3D:
    path = Path(path)
    if path.suffix == ".nii":
        return load_nifti(path)
    if path.suffix in (".meta", ".raw"):
        return load_raw_volume(path.with_suffix(".meta"))
    raise ValueError(f"{path}: unknown volume format (expected .nii or .meta/.raw)")


def _load_subject(paths: SubjectPaths) -> training.SubjectData:
    return training.SubjectData(
        subject_id=paths.subject_id,
        mri=normalize_intensity(_load_volume_any(paths.mri_volume)),
        us=normalize_intensity(_load_volume_any(paths.us_volume)),
        pairs=load_pairs(paths),
    )


# -- subcommands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(
        dims=tuple(args.dims),
        n_landmarks=args.n_landmarks,
        max_shift_mm=args.max_shift_mm,
        seed=args.seed,
    )
    rows = []
    for subject in generate_cohort(spec, args.subjects):
        sid = subject.subject_id
        save_raw_volume(subject.mri, out / f"{sid}_mri")
        save_raw_volume(subject.us, out / f"{sid}_us")
        save_landmarks_csv(subject.pairs.mri, out / f"{sid}_mri_landmarks.csv")
        save_landmarks_csv(subject.pairs.us, out / f"{sid}_us_landmarks.csv")
        rows.append(
            SubjectPaths(
                subject_id=sid,
                mri_volume=out / f"{sid}_mri.meta",
                us_volume=out / f"{sid}_us.meta",
                mri_landmarks=out / f"{sid}_mri_landmarks.csv",
                us_landmarks=out / f"{sid}_us_landmarks.csv",
            )
        )
        print(f"wrote subject {sid} (fan zeroes {subject.fan_zero_fraction:.0%})")
    save_manifest(rows, out / "manifest.csv")
    print(f"manifest: {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    subjects = [_load_subject(p) for p in load_manifest(args.manifest)]
    cfg = training.TrainConfig(
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        temperature=args.temperature,
        negatives_per_anchor=args.negatives,
        weight_decay=args.weight_decay,
        seed=args.seed,
    )
    result = training.train(
        subjects,
        cfg,
        out_dir=args.out,
        log_fn=lambda e, tr, va: print(f"epoch {e}: train {tr:.4f}  val {va:.4f}", file=sys.stderr),
    )
    print(f"checkpoint: {result.checkpoint_dir} (best epoch {result.best_epoch}, val {result.best_val_loss:.4f})")
    print(f"split: train={list(result.split.train)} val={list(result.split.val)} test={list(result.split.test)}")
    return EXIT_OK


def _search_config(args) -> matcher.SearchConfig:
    return matcher.SearchConfig(
        range_mm=args.range_mm,
        step_mm=args.step_mm,
        similarity_floor=args.similarity_floor,
        min_us_support=args.min_us_support,
    )


def cmd_match(args) -> int:
    params_mri, params_us, _meta = load_checkpoint(args.checkpoint)
    cfg = _search_config(args)
    any_failures = False
    if args.manifest:
        out_dir = Path(args.out_dir or ".")
        out_dir.mkdir(parents=True, exist_ok=True)
        for paths in load_manifest(args.manifest):
            subject = _load_subject(paths)
            results, failures = matcher.match_all(
                subject.mri, subject.us, subject.pairs.mri, params_mri, params_us, cfg, threads=args.threads
            )
            matcher.write_matches_csv(results, out_dir / f"{subject.subject_id}.csv")
            print(f"{subject.subject_id}: {len(results)} matched, {len(failures)} failed")
            any_failures |= bool(failures)
    else:
        mri = normalize_intensity(_load_volume_any(args.mri))
        us = normalize_intensity(_load_volume_any(args.us))
        landmarks = load_landmarks_csv(args.landmarks)
        results, failures = matcher.match_all(mri, us, landmarks, params_mri, params_us, cfg, threads=args.threads)
        matcher.write_matches_csv(results, args.out)
        print(f"{len(results)} matched, {len(failures)} failed -> {args.out}")
        any_failures = bool(failures)
    return EXIT_NO_MATCH if any_failures else EXIT_OK


def cmd_sift_match(args) -> int:
    any_failures = False
    if args.manifest:
        out_dir = Path(args.out_dir or ".")
        out_dir.mkdir(parents=True, exist_ok=True)
        for paths in load_manifest(args.manifest):
            subject = _load_subject(paths)
            results, failures = sift3d.sift_match_all(subject.mri, subject.us, subject.pairs.mri)
            matcher.write_matches_csv(results, out_dir / f"{subject.subject_id}.csv")
            print(f"{subject.subject_id}: {len(results)} matched, {len(failures)} failed")
            any_failures |= bool(failures)
    else:
        mri = normalize_intensity(_load_volume_any(args.mri))
        us = normalize_intensity(_load_volume_any(args.us))
        landmarks = load_landmarks_csv(args.landmarks)
        if args.keypoints_out:
            ss = sift3d.build_scale_space(us)
            keypoints = sift3d.detect_keypoints(ss)
            sift3d.write_keypoints_csv(keypoints, args.keypoints_out)
        results, failures = sift3d.sift_match_all(mri, us, landmarks)
        matcher.write_matches_csv(results, args.out)
        print(f"{len(results)} matched, {len(failures)} failed -> {args.out}")
        any_failures = bool(failures)
    return EXIT_NO_MATCH if any_failures else EXIT_OK


def _evaluate_subject(paths: SubjectPaths, pred_csv, method: str):
    pairs = load_pairs(paths)
    predicted, _scores, _extended = matcher.read_matches_csv(pred_csv)
    gt_subset = LandmarkSet(tuple(e for e in pairs.us if e.id in set(predicted.ids())))
    errors, _mean = evaluation.landmark_error(gt_subset, predicted)
    severity = evaluation.severity_class(evaluation.compute_mtre(pairs))
    report = evaluation.case_report(paths.subject_id, severity, errors, method)
    return report, errors


def cmd_eval(args) -> int:
    landmark_rows = []
    if args.pred_dir:
        if not args.pairs:
            raise ValueError("--pred-dir requires --pairs")
        reports = []
        for paths in load_manifest(args.pairs):
            pred_csv = Path(args.pred_dir) / f"{paths.subject_id}.csv"
            report, errors = _evaluate_subject(paths, pred_csv, args.method)
            reports.append(report)
            for lm_id in sorted(errors):
                landmark_rows.append((paths.subject_id, lm_id, errors[lm_id], args.method))
        text, rows = evaluation.report_table({args.method: reports})
    else:
        if not (args.pred and args.gt and args.pairs):
            raise ValueError("eval needs --pred, --gt and --pairs (or --pred-dir with --pairs)")
        gt = load_landmarks_csv(args.gt)
        predicted, _scores, _extended = matcher.read_matches_csv(args.pred)
        gt_subset = LandmarkSet(tuple(e for e in gt if e.id in set(predicted.ids())))
        errors, _mean = evaluation.landmark_error(gt_subset, predicted)
        rows_by_id = {p.subject_id: p for p in load_manifest(args.pairs)}
        subject_id = args.subject or (next(iter(rows_by_id)) if len(rows_by_id) == 1 else None)
        if subject_id is None or subject_id not in rows_by_id:
            raise ValueError("--subject is required when the manifest lists several subjects")
        severity = evaluation.severity_class(evaluation.compute_mtre(load_pairs(rows_by_id[subject_id])))
        report = evaluation.case_report(subject_id, severity, errors, args.method)
        for lm_id in sorted(errors):
            landmark_rows.append((subject_id, lm_id, errors[lm_id], args.method))
        text, rows = evaluation.report_table({args.method: [report]})
    evaluation.write_report_csv(rows, args.out)
    per_landmark_path = Path(args.out).with_name(Path(args.out).stem + "_landmarks.csv")
    import csv as _csv

    with per_landmark_path.open("w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["subject", "landmark", "error_mm", "method"])
        for row in landmark_rows:
            writer.writerow([row[0], row[1], f"{row[2]:.17g}", row[3]])
    print(text)
    print(f"report: {args.out}")
    print(f"per-landmark errors: {per_landmark_path}")
    return EXIT_OK


def cmd_patch_dump(args) -> int:
    volume = _load_volume_any(args.volume)
    if not args.no_normalize:
        volume = normalize_intensity(volume)
    series = extract_series(volume, np.array(args.center), args.axis)
    dump_series(series, args.out)
    print(f"patch: {Path(args.out).with_suffix('.raw')} + manifest")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="crossmark", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="chatty diagnostics on stderr")
    parser.add_argument("--seed", type=int, default=None, dest="global_seed", help="global seed (subcommand --seed wins)")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        dest="global_threads",
        help="parallelism cap (subcommand --threads wins; default: all cores)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate paired synthetic subjects")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-shift-mm", type=float, default=3.0)
    p.add_argument("--dims", type=int, nargs=3, default=[128, 128, 128])
    p.add_argument("--n-landmarks", type=int, default=16)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the twin encoders")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--negatives", type=int, default=4)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="similarity-search landmarks in the query volume")
    p.add_argument("--mri", help="reference volume (single-subject form)")
    p.add_argument("--us", help="query volume (single-subject form)")
    p.add_argument("--landmarks", help="reference landmark CSV (single-subject form)")
    p.add_argument("--manifest", help="subject manifest (batch form)")
    p.add_argument("--out", default="matches.csv")
    p.add_argument("--out-dir", help="per-subject output directory (batch form)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--range-mm", type=float, default=5.0)
    p.add_argument("--step-mm", type=float, default=0.5)
    p.add_argument("--similarity-floor", type=float, default=float("-inf"))
    p.add_argument("--min-us-support", type=float, default=0.5)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("sift-match", help="volumetric SIFT baseline matching")
    p.add_argument("--mri")
    p.add_argument("--us")
    p.add_argument("--landmarks")
    p.add_argument("--manifest")
    p.add_argument("--out", default="sift_matches.csv")
    p.add_argument("--out-dir")
    p.add_argument("--keypoints-out", help="optional keypoint dump CSV")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sift_match)

    p = sub.add_parser("eval", help="landmark identification error report")
    p.add_argument("--pred", help="match CSV (single-subject form)")
    p.add_argument("--gt", help="ground-truth landmark CSV (single-subject form)")
    p.add_argument("--pred-dir", help="directory of per-subject match CSVs (batch form)")
    p.add_argument("--pairs", help="subject manifest (severity classification)")
    p.add_argument("--subject", help="subject id for single-subject severity lookup")
    p.add_argument("--method", default="CL")
    p.add_argument("--out", default="report.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("patch-dump", help="dump one 42x42x3 patch for inspection")
    p.add_argument("--volume", required=True)
    p.add_argument("--center", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--out", required=True, help="output stem (.raw/.meta)")
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_patch_dump)
    return parser


def _resolve_globals(args: argparse.Namespace):
    """Subcommand-level --seed/--threads win over the global flags."""
    if getattr(args, "seed", None) in (None,) and args.global_seed is not None:
        args.seed = args.global_seed
    if getattr(args, "seed", None) is None:
        args.seed = 0
    if hasattr(args, "threads"):
        if args.threads is None:
            args.threads = args.global_threads if args.global_threads is not None else (os.cpu_count() or 1)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit2 as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    _resolve_globals(args)
    _print_config(args)
    try:
        return args.func(args)
    except matcher.MatchFailure as exc:
        print(f"match failure: {exc}", file=sys.stderr)
        return EXIT_NO_MATCH
    except (
        NiftiFormatError,
        LandmarkFormatError,
        CheckpointError,
        sift3d.SiftError,
        FileNotFoundError,
        ValueError,
        RuntimeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
