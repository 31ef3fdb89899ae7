#!/usr/bin/env python3
"""Run the full synthetic pipeline (synth -> train -> match -> eval) in one go.

Defaults are sized for a quick desk run; pass --full for the 20-subject
configuration used by the acceptance suite.

    python scripts/run_synthetic_pipeline.py --out /tmp/crossmark_demo
"""

import argparse
import sys
import time
from pathlib import Path

from crossmark.cli import main as crossmark


def run(args):
    out = Path(args.out)
    data = out / "data"
    ckpt = out / "ckpt"
    matches = out / "matches"

    if args.full:
        subjects, dims, landmarks, epochs, step = 20, 128, 16, 12, 1.0
    else:
        subjects, dims, landmarks, epochs, step = 4, 96, 6, 4, 1.0

    steps = [
        [
            "synth",
            "--out", str(data),
            "--subjects", str(subjects),
            "--seed", str(args.seed),
            "--dims", str(dims), str(dims), str(dims),
            "--n-landmarks", str(landmarks),
            "--max-shift-mm", "3.0",
        ],
        [
            "train",
            "--manifest", str(data / "manifest.csv"),
            "--out", str(ckpt),
            "--epochs", str(epochs),
            "--batch-size", "64",
            "--lr", "1e-3",
            "--seed", str(args.seed),
        ],
        [
            "match",
            "--manifest", str(data / "manifest.csv"),
            "--checkpoint", str(ckpt),
            "--out-dir", str(matches),
            "--range-mm", "5.0",
            "--step-mm", str(step),
            "--threads", str(args.threads),
        ],
        [
            "eval",
            "--pairs", str(data / "manifest.csv"),
            "--pred-dir", str(matches),
            "--out", str(out / "report.csv"),
        ],
    ]
    for argv in steps:
        print(f"\n=== crossmark {' '.join(argv)}")
        t0 = time.time()
        code = crossmark(argv)
        print(f"=== done in {time.time() - t0:.0f}s (exit {code})")
        if code != 0:
            return code
    print(f"\nreport: {out / 'report.csv'}")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="pipeline_out")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--threads", type=int, default=2)
    parser.add_argument("--full", action="store_true", help="acceptance-scale configuration")
    sys.exit(run(parser.parse_args()))
