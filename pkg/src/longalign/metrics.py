"""Evaluation metrics and analysis harnesses.

C-index and AUC are rank statistics (invariant under strictly increasing
score transforms) with ties counted as 0.5. Confidence intervals come from a
percentile bootstrap over exam-level resamples: lo/hi are the 2.5th/97.5th
percentiles of the bootstrap distribution at the default 0.95 level, with
exactly `iterations` valid resamples (resamples on which the metric is
undefined are redrawn and counted).
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import RiskTarget
from .errors import DataError
from .fields import ncc as field_ncc
from .fields import njd_percent


@dataclass
class EvalRecord:
    """One scored exam: fused risk vector plus outcome metadata."""

    exam_id: str
    risk: np.ndarray
    target: RiskTarget
    followup_years: float
    cancer_year: float | None
    density_category: str | None = None

    def __post_init__(self):
        self.risk = np.asarray(self.risk, dtype=np.float64)
        if self.risk.shape != (6,):
            raise DataError(f"risk must be a 6-vector, got shape {self.risk.shape}")


@dataclass
class CIResult:
    point: float
    lo: float
    hi: float
    level: float = 0.95
    iterations: int = 1000
    redraws: int = 0


def _score_at_year(record: EvalRecord, year: int) -> float:
    return float(record.risk[min(max(year, 1), 5) - 1])


def c_index(records: list[EvalRecord], score_year: int | None = None) -> float:
    """Censoring-aware concordance of risk scores.

    Pair (i, j) is comparable when i has an observed event at t_i and
    t_i < min(t_j, followup_j); it is concordant when i's risk at year
    ceil(t_i) exceeds j's at the same year (`score_year` forces a fixed year
    instead). Score ties count 0.5.
    """
    if len(records) < 2:
        raise ValueError("c_index needs at least 2 records")
    concordant = 0.0
    comparable = 0
    for i, ri in enumerate(records):
        if ri.cancer_year is None:
            continue
        t_i = ri.cancer_year
        year = score_year if score_year is not None else int(math.ceil(t_i))
        for j, rj in enumerate(records):
            if j == i:
                continue
            t_j = rj.cancer_year if rj.cancer_year is not None else math.inf
            if not (t_i < min(t_j, rj.followup_years)):
                continue
            comparable += 1
            si = _score_at_year(ri, year)
            sj = _score_at_year(rj, year)
            if si > sj:
                concordant += 1.0
            elif si == sj:
                concordant += 0.5
    if comparable == 0:
        raise ValueError("c_index undefined: no comparable pairs")
    return concordant / comparable


def auc_year(records: list[EvalRecord], k: int) -> float:
    """Rank-based AUC of the year-k risk among records observed at year k."""
    if not 1 <= k <= 5:
        raise ValueError("k must be in 1..5")
    scores, labels = [], []
    for r in records:
        if r.target.mask[k - 1] == 1:
            scores.append(float(r.risk[k - 1]))
            labels.append(int(r.target.target[k - 1]))
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    if not pos or not neg:
        raise ValueError(f"auc undefined for year {k}: only one class present")
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def bootstrap_ci(metric, records, iterations: int = 1000, level: float = 0.95, seed: int = 0) -> CIResult:
    """Percentile bootstrap of `metric` over exam-level resamples.

    Deterministic given the seed; each iteration's index stream is derived
    from (seed, iteration, attempt), so iterations are order-independent.
    Undefined resamples (metric raises ValueError) are redrawn, up to 10
    attempts each, and counted in `redraws`.
    """
    point = metric(records)  # propagate if undefined on the full set
    n = len(records)
    values = np.empty(iterations, dtype=np.float64)
    redraws = 0
    for it in range(iterations):
        for attempt in range(10):
            rng = np.random.default_rng([seed, it, attempt])
            resample = [records[i] for i in rng.integers(0, n, size=n)]
            try:
                values[it] = metric(resample)
                break
            except ValueError:
                redraws += 1
        else:
            raise ValueError(f"bootstrap iteration {it} undefined after 10 redraws")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return CIResult(point=float(point), lo=float(lo), hi=float(hi), level=level,
                    iterations=iterations, redraws=redraws)


REGISTRATION_COLUMNS = ("ncc_before", "ncc_affine", "ncc_final", "njd_percent")


def registration_report(ckpt, pairs, iterations: int = 1000, seed: int = 0) -> dict:
    """Per-pair and aggregate registration quality for a checkpoint.

    Columns, in order: ncc_before, ncc_affine, ncc_final, njd_percent.
    Aggregates are means with percentile-bootstrap confidence intervals.
    """
    from .regnet import load_model, register  # local import to avoid a cycle at module load

    if not pairs:
        raise ValueError("registration_report needs at least one pair")
    model = load_model(ckpt) if not isinstance(ckpt, torch.nn.Module) else ckpt
    rows = []
    for current, prior in pairs:
        out = register(model, current, prior)
        rows.append(
            {
                "ncc_before": float(field_ncc(prior, current)),
                "ncc_affine": float(field_ncc(out.warped_affine, current)),
                "ncc_final": float(field_ncc(out.warped_final, current)),
                "njd_percent": njd_percent(out.phi_final),
            }
        )
    report: dict = {"pairs": rows}
    for col_seed, col in enumerate(REGISTRATION_COLUMNS):
        values = [r[col] for r in rows]
        ci = bootstrap_ci(lambda vs: float(np.mean(vs)), values, iterations=iterations, seed=seed + col_seed)
        report[col] = {"mean": ci.point, "lo": ci.lo, "hi": ci.hi}
    return report


def stratified_report(records: list[EvalRecord], iterations: int = 1000, seed: int = 0) -> dict[str, CIResult]:
    """Per-density-stratum C-index with bootstrap CIs; undefined strata are skipped."""
    strata: dict[str, list[EvalRecord]] = {}
    for r in records:
        strata.setdefault(r.density_category or "unknown", []).append(r)
    out: dict[str, CIResult] = {}
    for name in sorted(strata):
        subset = strata[name]
        try:
            out[name] = bootstrap_ci(c_index, subset, iterations=iterations, seed=seed)
        except ValueError as exc:
            warnings.warn(f"stratum {name!r} skipped: {exc}")
    return out


def weight_sweep(train_fn, alphas, iterations: int = 200, seed: int = 0) -> list[dict]:
    """Evaluate the alignment-weight trade-off.

    `train_fn(alpha)` must train one FeatAlign-family model and return
    (eval records, feature-field NJD percent). Each output row carries the
    alpha, the C-index, the five yearly AUCs, and the feature-field NJD.
    """
    rows = []
    for alpha in alphas:
        records, feat_njd = train_fn(alpha)
        row = {"alpha": float(alpha), "c_index": c_index(records)}
        for k in range(1, 6):
            try:
                row[f"auc_{k}"] = auc_year(records, k)
            except ValueError:
                row[f"auc_{k}"] = float("nan")
        row["njd_percent"] = float(feat_njd)
        rows.append(row)
    return rows


def metrics_filename(variant: str, dataset: str, seed: int) -> str:
    return f"{variant}_{dataset}_{seed}.metrics.csv"


def metric_rows(records: list[EvalRecord], iterations: int = 1000, seed: int = 0) -> list[dict]:
    """Standard evaluation table: C-index and yearly AUCs with CIs."""
    rows = []
    ci = bootstrap_ci(c_index, records, iterations=iterations, seed=seed)
    rows.append({"metric": "c_index", "point": ci.point, "lo": ci.lo, "hi": ci.hi})
    for k in range(1, 6):
        try:
            ci = bootstrap_ci(lambda rs, kk=k: auc_year(rs, kk), records, iterations=iterations, seed=seed + k)
            rows.append({"metric": f"auc_{k}", "point": ci.point, "lo": ci.lo, "hi": ci.hi})
        except ValueError as exc:
            warnings.warn(f"auc_{k} skipped: {exc}")
    return rows


def write_metric_rows(rows: list[dict], csv_path: str | Path, variant: str, seed: int) -> None:
    """CSV (one row per metric with point/lo/hi) plus a JSON mirror."""
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "metric", "point", "lo", "hi"])
        for row in rows:
            writer.writerow([variant, seed, row["metric"], f"{row['point']:.6f}", f"{row['lo']:.6f}", f"{row['hi']:.6f}"])
    mirror = {"variant": variant, "seed": seed, "metrics": rows}
    csv_path.with_suffix(".json").write_text(json.dumps(mirror, indent=2) + "\n")
