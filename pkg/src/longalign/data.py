"""Exam records, manifest ingestion, risk labels, and patient-level splits.

The manifest is a UTF-8 CSV with the exact header
``patient_id,exam_id,laterality,view,date,image_path,density,followup_years,cancer_year``
(ISO dates, blank density/cancer_year meaning absent). Images referenced by a
manifest are single-channel 8- or 16-bit PNGs, normalized to [0, 1] on load.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError, ManifestFormatError, ManifestIntegrityError

MANIFEST_COLUMNS = (
    "patient_id",
    "exam_id",
    "laterality",
    "view",
    "date",
    "image_path",
    "density",
    "followup_years",
    "cancer_year",
)

DAYS_PER_MONTH = 30.44  # fixed date -> month conversion used everywhere

LATERALITIES = ("L", "R")
VIEWS = ("CC", "MLO")


@dataclass(frozen=True)
class ExamRecord:
    """One screening image plus outcome metadata."""

    patient_id: str
    exam_id: str
    laterality: str
    view: str
    acquisition_date: dt.date
    image_path: str
    density_value: float | None
    followup_years: float
    cancer_year: float | None

    def __post_init__(self):
        if self.laterality not in LATERALITIES:
            raise DataError(f"laterality must be one of {LATERALITIES}, got {self.laterality!r}")
        if self.view not in VIEWS:
            raise DataError(f"view must be one of {VIEWS}, got {self.view!r}")
        if self.followup_years < 0:
            raise DataError("followup_years must be >= 0")
        if self.cancer_year is not None and not (0 <= self.cancer_year <= self.followup_years):
            raise DataError(
                f"cancer_year {self.cancer_year} outside [0, followup_years={self.followup_years}]"
            )


@dataclass(frozen=True)
class ScreeningPair:
    """A prior/current exam pair for one patient, laterality and view."""

    prior: ExamRecord
    current: ExamRecord
    delta_t_months: float

    def __post_init__(self):
        for f in ("patient_id", "laterality", "view"):
            if getattr(self.prior, f) != getattr(self.current, f):
                raise DataError(f"prior and current disagree on {f}")
        if self.prior.acquisition_date >= self.current.acquisition_date:
            raise DataError("prior acquisition date must strictly precede current")
        if self.delta_t_months <= 0:
            raise DataError("delta_t_months must be > 0")


def months_between(earlier: dt.date, later: dt.date) -> float:
    return (later - earlier).days / DAYS_PER_MONTH


def make_pair(prior: ExamRecord, current: ExamRecord) -> ScreeningPair:
    return ScreeningPair(prior, current, months_between(prior.acquisition_date, current.acquisition_date))


@dataclass(frozen=True)
class RiskTarget:
    """Six-element binary label vector plus its observability mask.

    Entries 0..4 mean "cancer diagnosed within k+1 years of the exam"; entry 5
    is the complement of entry 4 (cancer-free at five years). mask[k] = 0
    means the outcome at that horizon is unobserved and must be ignored by
    every loss and metric.
    """

    target: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        for name, vec in (("target", self.target), ("mask", self.mask)):
            if vec.shape != (6,):
                raise DataError(f"{name} must be a 6-vector, got shape {vec.shape}")
            if not np.isin(vec, (0.0, 1.0)).all():
                raise DataError(f"{name} entries must be 0 or 1")


def build_risk_target(exam: ExamRecord, horizon: int = 5) -> RiskTarget:
    """Label and mask for the 1..5-year risks plus the cancer-free complement.

    target[k-1] = 1 iff diagnosed within k years; mask[k-1] = 1 iff the k-year
    status is known (diagnosed by k, or followed at least k years). The sixth
    entry complements the fifth and shares its mask.
    """
    if horizon != 5:
        raise ValueError("the six-element layout is fixed; horizon must be 5")
    target = np.zeros(6, dtype=np.float32)
    mask = np.zeros(6, dtype=np.float32)
    for k in range(1, 6):
        diagnosed_by_k = exam.cancer_year is not None and exam.cancer_year <= k
        target[k - 1] = 1.0 if diagnosed_by_k else 0.0
        mask[k - 1] = 1.0 if (diagnosed_by_k or exam.followup_years >= k) else 0.0
    mask[5] = mask[4]
    target[5] = 1.0 - target[4]
    return RiskTarget(target, mask)


def load_manifest(path: str | Path) -> list[ExamRecord]:
    """Parse a manifest CSV into exam records.

    Raises ManifestFormatError for a bad header or unparsable cell (with the
    line number) and ManifestIntegrityError for duplicate (patient_id,
    exam_id) keys.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records: list[ExamRecord] = []
    seen: set[tuple[str, str]] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestFormatError(f"{path}: empty file, expected header row") from None
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            missing = [c for c in MANIFEST_COLUMNS if c not in header]
            if missing:
                raise ManifestFormatError(f"{path}: missing required column(s): {', '.join(missing)}")
            raise ManifestFormatError(
                f"{path}: header must be exactly {','.join(MANIFEST_COLUMNS)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestFormatError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} cells, got {len(row)}")
            cells = dict(zip(MANIFEST_COLUMNS, (c.strip() for c in row)))
            try:
                record = ExamRecord(
                    patient_id=cells["patient_id"],
                    exam_id=cells["exam_id"],
                    laterality=cells["laterality"],
                    view=cells["view"],
                    acquisition_date=dt.date.fromisoformat(cells["date"]),
                    image_path=cells["image_path"],
                    density_value=float(cells["density"]) if cells["density"] else None,
                    followup_years=float(cells["followup_years"]),
                    cancer_year=float(cells["cancer_year"]) if cells["cancer_year"] else None,
                )
            except (ValueError, DataError) as exc:
                raise ManifestFormatError(f"{path}:{lineno}: {exc}") from exc
            key = (record.patient_id, record.exam_id)
            if key in seen:
                raise ManifestIntegrityError(f"{path}:{lineno}: duplicate (patient_id, exam_id) {key}")
            seen.add(key)
            records.append(record)
    return records


def save_manifest(records: list[ExamRecord], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.patient_id,
                    r.exam_id,
                    r.laterality,
                    r.view,
                    r.acquisition_date.isoformat(),
                    r.image_path,
                    "" if r.density_value is None else f"{r.density_value:g}",
                    f"{r.followup_years:g}",
                    "" if r.cancer_year is None else f"{r.cancer_year:g}",
                ]
            )


def build_pairs(records: list[ExamRecord]) -> list[ScreeningPair]:
    """Pair each exam with the most recent earlier exam of the same series.

    A series is one (patient, laterality, view) combination; exams without an
    earlier exam in their series yield no pair.
    """
    series: dict[tuple[str, str, str], list[ExamRecord]] = {}
    for r in records:
        series.setdefault((r.patient_id, r.laterality, r.view), []).append(r)
    pairs = []
    for exams in series.values():
        ordered = sorted(exams, key=lambda r: (r.acquisition_date, r.exam_id))
        for prior, current in zip(ordered[:-1], ordered[1:]):
            pairs.append(make_pair(prior, current))
    return pairs


def split_patients(records: list[ExamRecord], ratios=(5, 2, 3), seed: int = 0) -> dict[str, str]:
    """Assign every patient to train/val/test at (roughly) the given ratios.

    Deterministic for a fixed seed; all exams of one patient land in the same
    split; split sizes are within one patient of the exact fractions.
    """
    if not records:
        raise DataError("cannot split an empty record list")
    patients = sorted({r.patient_id for r in records})
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(patients)))
    total = sum(ratios)
    n = len(patients)
    n_train = int(round(n * ratios[0] / total))
    n_val = int(round(n * ratios[1] / total))
    n_val = min(n_val, n - n_train)
    assignment: dict[str, str] = {}
    for pos, idx in enumerate(order):
        if pos < n_train:
            split = "train"
        elif pos < n_train + n_val:
            split = "val"
        else:
            split = "test"
        assignment[patients[idx]] = split
    return assignment


def density_categories(values: list[float], k: int = 3) -> list[str]:
    """Tertile labels ('low'/'med'/'high') with group sizes differing by <= 1.

    Assignment is by empirical quantile rank; ties are broken by stable input
    order.
    """
    if k != 3:
        raise ValueError("only three density groups are supported")
    if not values:
        raise DataError("density_categories needs at least one value")
    n = len(values)
    order = np.argsort(np.asarray(values), kind="stable")
    sizes = [n // 3 + (1 if i < n % 3 else 0) for i in range(3)]
    labels = ["low"] * n
    names = ("low", "med", "high")
    pos = 0
    for group, size in enumerate(sizes):
        for idx in order[pos : pos + size]:
            labels[idx] = names[group]
        pos += size
    return labels


def load_image(path: str | Path) -> torch.Tensor:
    """Load a single-channel PNG as a (1, H, W) float32 tensor in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype in (np.uint16, np.int32):
        scale = 65535.0
    else:
        raise DataError(f"{path}: unsupported PNG sample type {arr.dtype}")
    return torch.from_numpy(arr.astype(np.float32) / scale).unsqueeze(0)


def save_image(image: torch.Tensor | np.ndarray, path: str | Path) -> None:
    """Write a (1, H, W) or (H, W) float image in [0, 1] as a 16-bit PNG."""
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise DataError(f"expected single-channel image, got shape {arr.shape}")
        arr = arr[0]
    arr16 = np.clip(np.round(arr * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr16, mode="I;16").save(Path(path))
