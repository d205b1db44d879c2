"""Synthetic dataset synthesis and loading for the experiment commands.

A dataset directory holds ``manifest.csv``, ``splits.json``, an ``images/``
folder with one 16-bit PNG per exam, and a ``fields/`` folder with one
ground-truth displacement field per pair (binary float32 plus JSON sidecar,
named after the current exam).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    ExamRecord,
    ScreeningPair,
    build_pairs,
    build_risk_target,
    density_categories,
    load_image,
    load_manifest,
    save_image,
    save_manifest,
    split_patients,
)
from .errors import ConfigError, DataError
from .fields import load_field, save_field
from .phantom import PhantomSpec, generate_phantom_pair
from .risk import RiskExample


@dataclass
class SynthConfig:
    n_patients: int = 20
    height: int = 256
    width: int = 128
    deform_amplitude_min: float = 2.0
    deform_amplitude_max: float = 8.0
    deform_smoothness: float = 128.0
    cancer_fraction: float = 0.35
    lesion_growth_min: float = 0.5
    lesion_growth_max: float = 3.0
    split_ratios: tuple[int, int, int] = (5, 2, 3)
    seed: int = 0

    def __post_init__(self):
        self.split_ratios = tuple(self.split_ratios)
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if not 0.0 <= self.cancer_fraction <= 1.0:
            raise ConfigError("cancer_fraction must be in [0, 1]")
        if self.deform_amplitude_min < 0 or self.deform_amplitude_max < self.deform_amplitude_min:
            raise ConfigError("invalid deform amplitude range")


_DENSITY_CYCLE = ("low", "med", "high")


def patient_spec(config: SynthConfig, index: int) -> PhantomSpec:
    """Deterministic per-patient phantom parameters."""
    rng = np.random.default_rng([config.seed, index])
    has_cancer = rng.uniform() < config.cancer_fraction
    growth = float(rng.uniform(config.lesion_growth_min, config.lesion_growth_max)) if has_cancer else 0.0
    amplitude = float(rng.uniform(config.deform_amplitude_min, config.deform_amplitude_max))
    return PhantomSpec(
        height=config.height,
        width=config.width,
        density_level=_DENSITY_CYCLE[index % 3],
        lesion_growth=growth,
        deform_amplitude=amplitude,
        deform_smoothness=config.deform_smoothness,
        seed=config.seed * 1_000_003 + index,
    )


def synthesize_dataset(config: SynthConfig, out_dir: str | Path) -> Path:
    """Write a full phantom dataset; byte-identical for identical configs."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "fields").mkdir(parents=True, exist_ok=True)
    records: list[ExamRecord] = []
    for i in range(config.n_patients):
        spec = patient_spec(config, i)
        prior_img, current_img, phi_gt, pair, _ = generate_phantom_pair(spec)
        save_image(prior_img, out / "images" / pair.prior.image_path)
        save_image(current_img, out / "images" / pair.current.image_path)
        save_field(phi_gt, out / "fields" / f"{pair.current.exam_id}.bin")
        records.extend([pair.prior, pair.current])
    save_manifest(records, out / "manifest.csv")
    splits = split_patients(records, ratios=config.split_ratios, seed=config.seed)
    (out / "splits.json").write_text(json.dumps(splits, sort_keys=True, indent=2) + "\n")
    return out


def load_splits(dataset_dir: str | Path) -> dict[str, str]:
    path = Path(dataset_dir) / "splits.json"
    if not path.exists():
        raise DataError(f"missing splits file: {path}")
    return json.loads(path.read_text())


def _pairs_for_split(dataset_dir: Path, split: str) -> list[ScreeningPair]:
    records = load_manifest(dataset_dir / "manifest.csv")
    splits = load_splits(dataset_dir)
    pairs = build_pairs(records)
    return [p for p in pairs if splits.get(p.current.patient_id) == split]


def load_reg_pairs(dataset_dir: str | Path, split: str, with_fields: bool = False):
    """Image pairs (current, prior) for one split, optionally with phi_gt."""
    dataset_dir = Path(dataset_dir)
    out = []
    for pair in _pairs_for_split(dataset_dir, split):
        current = load_image(dataset_dir / "images" / pair.current.image_path)
        prior = load_image(dataset_dir / "images" / pair.prior.image_path)
        if with_fields:
            phi_gt = load_field(dataset_dir / "fields" / f"{pair.current.exam_id}.bin")
            out.append((current, prior, phi_gt))
        else:
            out.append((current, prior))
    return out


def load_risk_examples(dataset_dir: str | Path, split: str) -> list[RiskExample]:
    """Risk examples for one split; density tertiles are computed over all exams."""
    dataset_dir = Path(dataset_dir)
    records = load_manifest(dataset_dir / "manifest.csv")
    splits = load_splits(dataset_dir)
    pairs = build_pairs(records)
    current_ids = [p.current.exam_id for p in pairs]
    densities = [p.current.density_value for p in pairs]
    if all(d is not None for d in densities) and densities:
        category_of = dict(zip(current_ids, density_categories(densities)))
    else:
        category_of = {}
    examples = []
    for pair in pairs:
        if splits.get(pair.current.patient_id) != split:
            continue
        label = build_risk_target(pair.current)
        examples.append(
            RiskExample(
                current=load_image(dataset_dir / "images" / pair.current.image_path),
                prior=load_image(dataset_dir / "images" / pair.prior.image_path),
                delta_t_months=pair.delta_t_months,
                target=label.target,
                mask=label.mask,
                exam_id=pair.current.exam_id,
                patient_id=pair.current.patient_id,
                followup_years=pair.current.followup_years,
                cancer_year=pair.current.cancer_year,
                density_value=pair.current.density_value,
                density_category=category_of.get(pair.current.exam_id),
            )
        )
    return examples


def make_risk_examples(specs: list[PhantomSpec]) -> list[RiskExample]:
    """In-memory risk examples straight from phantom specs (no files)."""
    examples = []
    densities = []
    for spec in specs:
        prior, current, _, pair, label = generate_phantom_pair(spec)
        densities.append(pair.current.density_value)
        examples.append(
            RiskExample(
                current=current,
                prior=prior,
                delta_t_months=pair.delta_t_months,
                target=label.target,
                mask=label.mask,
                exam_id=pair.current.exam_id,
                patient_id=pair.current.patient_id,
                followup_years=pair.current.followup_years,
                cancer_year=pair.current.cancer_year,
                density_value=pair.current.density_value,
            )
        )
    for ex, cat in zip(examples, density_categories(densities)):
        ex.density_category = cat
    return examples
