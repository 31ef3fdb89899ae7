"""Landmark-error metrics, brain-shift severity bins, paired t-test, reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import LandmarkPairSet, LandmarkSet

SEVERITIES = ("Small", "Medium", "Large")


def landmark_error(gt: LandmarkSet, pred: LandmarkSet) -> tuple[dict[str, float], float]:
    """Per-id Euclidean distance (mm) between ground truth and prediction,
    plus the mean over landmarks."""
    if set(gt.ids()) != set(pred.ids()):
        missing = sorted(set(gt.ids()) ^ set(pred.ids()))
        raise ValueError(f"landmark_error: id sets differ ({missing})")
    errors = {e.id: float(np.linalg.norm(e.position - pred.get(e.id).position)) for e in gt}
    return errors, float(np.mean(list(errors.values())))


def compute_mtre(pairs: LandmarkPairSet) -> float:
    """Mean distance between paired ground-truth landmarks (pre-correction shift)."""
    if len(pairs) == 0:
        raise ValueError("compute_mtre: empty pair set")
    dists = [float(np.linalg.norm(m - u)) for _, m, u in pairs.pairs()]
    return float(np.mean(dists))


def severity_class(mtre_mm: float) -> str:
    """Small below 3 mm, Medium for [3, 6], Large above 6 (both bounds Medium)."""
    if mtre_mm < 0 or not np.isfinite(mtre_mm):
        raise ValueError(f"severity_class: mTRE must be a nonnegative real, got {mtre_mm}")
    if mtre_mm < 3.0:
        return "Small"
    if mtre_mm <= 6.0:
        return "Medium"
    return "Large"


# -- paired t-test -------------------------------------------------------------


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-12) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) via the continued fraction, accurate to ~1e-10."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: int) -> float:
    """Two-sided p-value of Student's t via I_x(df/2, 1/2), x = df/(df+t^2)."""
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired-samples t-test of per-case means a vs b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired_t_test: need two equal-length vectors, got {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError(f"paired_t_test: need at least 2 pairs, got {n}")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, df=df, degenerate=True)
        return TTestResult(t=math.copysign(math.inf, mean), p=0.0, df=df, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t=t, p=t_two_sided_p(t, df), df=df)


# -- per-case reporting ---------------------------------------------------------


@dataclass(frozen=True)
class CaseReport:
    subject_id: str
    severity: str
    mean_error_mm: float
    std_error_mm: float
    n_landmarks: int
    method: str

    def __post_init__(self):
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be one of {SEVERITIES}, got {self.severity!r}")
        if self.n_landmarks < 1:
            raise ValueError("n_landmarks must be >= 1")
        if self.mean_error_mm < 0 or self.std_error_mm < 0:
            raise ValueError("mean/std errors must be nonnegative")


def case_report(subject_id: str, severity: str, errors: dict[str, float], method: str) -> CaseReport:
    values = np.array(list(errors.values()), dtype=np.float64)
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return CaseReport(
        subject_id=subject_id,
        severity=severity,
        mean_error_mm=float(values.mean()),
        std_error_mm=std,
        n_landmarks=values.size,
        method=method,
    )


def pooled_stats(cases: list[CaseReport]) -> dict[str, tuple[float, float]]:
    """Two pooling conventions over a method's cases.

    case-weighted: mean and sample std of the per-case means (each case
    counts once). landmark-weighted: every landmark counts once; the std
    combines within-case and between-case variance from the summaries.
    """
    means = np.array([c.mean_error_mm for c in cases])
    stds = np.array([c.std_error_mm for c in cases])
    ns = np.array([c.n_landmarks for c in cases])
    case_mean = float(means.mean())
    case_std = float(means.std(ddof=1)) if len(cases) > 1 else 0.0
    total = int(ns.sum())
    lw_mean = float((ns * means).sum() / total)
    if total > 1:
        ss = ((ns - 1) * stds**2).sum() + (ns * (means - lw_mean) ** 2).sum()
        lw_std = float(np.sqrt(ss / (total - 1)))
    else:
        lw_std = 0.0
    return {"case_weighted": (case_mean, case_std), "landmark_weighted": (lw_mean, lw_std)}


def _subject_sort_key(subject_id: str):
    return (0, int(subject_id), "") if subject_id.isdigit() else (1, 0, subject_id)


def report_table(cases_by_method: dict[str, list[CaseReport]]) -> tuple[str, list[dict]]:
    """Per-case table plus pooled footers for each method.

    Returns the formatted text and the CSV-ready rows (columns: subject,
    severity, n, mean_mm, std_mm, method). Pooled rows use the pseudo
    subjects ``ALL/case-weighted`` and ``ALL/landmark-weighted``.
    """
    if not cases_by_method:
        raise ValueError("report_table: no methods given")
    methods = list(cases_by_method)
    subject_sets = {m: {(c.subject_id, c.severity) for c in cases} for m, cases in cases_by_method.items()}
    reference = subject_sets[methods[0]]
    for m in methods[1:]:
        if subject_sets[m] != reference:
            raise ValueError(f"report_table: subject sets differ between {methods[0]!r} and {m!r}")

    subjects = sorted({c.subject_id for c in cases_by_method[methods[0]]}, key=_subject_sort_key)
    by_key = {(c.subject_id, c.method): c for m in methods for c in cases_by_method[m]}

    rows: list[dict] = []
    lines = []
    header = f"{'case':>18}  " + "  ".join(f"{m:>18}" for m in methods)
    lines.append(header)
    for sid in subjects:
        cells = []
        severity = by_key[(sid, methods[0])].severity
        for m in methods:
            c = by_key[(sid, m)]
            cells.append(f"{c.mean_error_mm:.2f}±{c.std_error_mm:.2f}")
            rows.append(
                {
                    "subject": sid,
                    "severity": c.severity,
                    "n": c.n_landmarks,
                    "mean_mm": c.mean_error_mm,
                    "std_mm": c.std_error_mm,
                    "method": m,
                }
            )
        lines.append(f"{sid + ' (' + severity + ')':>18}  " + "  ".join(f"{c:>18}" for c in cells))
    for convention in ("case_weighted", "landmark_weighted"):
        cells = []
        for m in methods:
            mean, std = pooled_stats(cases_by_method[m])[convention]
            cells.append(f"{mean:.2f}±{std:.2f}")
            rows.append(
                {
                    "subject": f"ALL/{convention.replace('_', '-')}",
                    "severity": "-",
                    "n": sum(c.n_landmarks for c in cases_by_method[m]),
                    "mean_mm": mean,
                    "std_mm": std,
                    "method": m,
                }
            )
        lines.append(f"{'ALL (' + convention + ')':>18}  " + "  ".join(f"{c:>18}" for c in cells))
    return "\n".join(lines), rows


REPORT_CSV_HEADER = ["subject", "severity", "n", "mean_mm", "std_mm", "method"]


def write_report_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_CSV_HEADER)
        for row in rows:
            writer.writerow(
                [row["subject"], row["severity"], row["n"], f"{row['mean_mm']:.17g}", f"{row['std_mm']:.17g}", row["method"]]
            )
    return path


def read_report_csv(path) -> list[dict]:
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != REPORT_CSV_HEADER:
            raise ValueError(f"{path}: bad report header {header!r}")
        for row in reader:
            if not row:
                continue
            rows.append(
                {
                    "subject": row[0],
                    "severity": row[1],
                    "n": int(row[2]),
                    "mean_mm": float(row[3]),
                    "std_mm": float(row[4]),
                    "method": row[5],
                }
            )
    return rows
