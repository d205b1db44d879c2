"""Synthetic breast-like phantom pairs with known deformations and labels.

Each pair is built from one tissue image: a smooth multi-octave noise
background inside a half-elliptic outline, fibroglandular texture whose
contrast scales with the density level, and an optional Gaussian lesion whose
amplitude and radius grow with ``lesion_growth``. The prior image is the
current-timepoint tissue (with the smaller lesion) warped by a random smooth
displacement field plus a global intensity perturbation and faint noise.

The synthesis field is a random translation plus three low-frequency
sinusoidal harmonics per channel, rescaled so the largest displacement
magnitude equals ``deform_amplitude``. Wavelengths are drawn from
[smoothness, 2*smoothness] pixels, so gradients are bounded by
4*pi*amplitude/smoothness; with ``deform_smoothness >= 16*deform_amplitude``
the map is guaranteed fold-free (all Jacobian determinants positive), and so
is its inverse. The returned ground-truth field ``phi_gt`` is the numerical
inverse of the synthesis field: warping the prior by ``phi_gt`` reproduces the
current image up to the lesion change and intensity perturbation, which makes
``phi_gt`` directly comparable to a registration output.

Outcome rule (fixed so labels are reproducible): ``lesion_growth == 0`` means
cancer-free with follow-up drawn from [3, 8] years; otherwise the diagnosis
falls at ``clip(5 / (1 + lesion_growth), 0.5, 5)`` years after the current
exam and follow-up extends one year past it.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import ExamRecord, RiskTarget, ScreeningPair, build_risk_target, make_pair
from .fields import warp

FOLD_FREE_SMOOTHNESS_FACTOR = 16.0

_DENSITY_TEXTURE = {"low": 0.25, "med": 0.50, "high": 0.80}
_DENSITY_PERCENT = {"low": 15.0, "med": 45.0, "high": 75.0}


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one synthetic screening pair."""

    height: int = 256
    width: int = 128
    density_level: str = "med"
    lesion_growth: float = 0.0
    deform_amplitude: float = 4.0
    deform_smoothness: float = 128.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 64 or self.width < 64:
            raise ValueError("phantom height and width must be >= 64")
        if self.density_level not in _DENSITY_TEXTURE:
            raise ValueError(f"density_level must be one of {tuple(_DENSITY_TEXTURE)}")
        if self.lesion_growth < 0:
            raise ValueError("lesion_growth must be >= 0")
        if self.deform_amplitude < 0:
            raise ValueError("deform_amplitude must be >= 0")
        if self.deform_smoothness <= 0:
            raise ValueError("deform_smoothness must be > 0")


def _noise_octave(rng: np.random.Generator, height: int, width: int, cells: int) -> np.ndarray:
    """Smooth value noise: a coarse Gaussian grid upsampled bilinearly."""
    ch = max(2, cells)
    cw = max(2, int(round(cells * width / height)))
    coarse = rng.standard_normal((ch, cw)).astype(np.float32)
    t = torch.from_numpy(coarse).unsqueeze(0).unsqueeze(0)
    fine = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=True)
    return fine[0, 0].numpy()


def _breast_mask(height: int, width: int) -> np.ndarray:
    rr, cc = np.mgrid[0:height, 0:width].astype(np.float32)
    d = ((rr - height / 2) / (0.48 * height)) ** 2 + (cc / (0.88 * width)) ** 2
    return 1.0 / (1.0 + np.exp((d - 1.0) * 18.0))


def _lesion(height: int, width: int, center, sigma: float, amplitude: float) -> np.ndarray:
    if amplitude <= 0:
        return np.zeros((height, width), dtype=np.float32)
    rr, cc = np.mgrid[0:height, 0:width].astype(np.float32)
    d2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2
    return (amplitude * np.exp(-d2 / (2 * sigma ** 2))).astype(np.float32)


def _synthesis_field(rng: np.random.Generator, spec: PhantomSpec) -> torch.Tensor:
    """Random translation + low-frequency sinusoids, scaled to the amplitude."""
    h, w = spec.height, spec.width
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float32)
    u = np.zeros((2, h, w), dtype=np.float32)
    for ch in range(2):
        u[ch] += rng.uniform(-1.0, 1.0)  # translation component
        for _ in range(3):
            wavelength = rng.uniform(spec.deform_smoothness, 2 * spec.deform_smoothness)
            direction = rng.uniform(0, 2 * np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.3, 1.0)
            k = 2 * np.pi / wavelength
            u[ch] += amp * np.sin(k * (np.cos(direction) * rr + np.sin(direction) * cc) + phase)
    if spec.deform_amplitude == 0:
        return torch.zeros(2, h, w)
    mag = np.sqrt(u[0] ** 2 + u[1] ** 2)
    peak = float(mag.max())
    if peak > 0:
        u *= spec.deform_amplitude / peak
    return torch.from_numpy(u)


def invert_field(u: torch.Tensor, iterations: int = 40) -> torch.Tensor:
    """Fixed-point inverse of a displacement field: compose(u, inv) ~ 0.

    Converges when the field's gradients are below 1 in magnitude, which the
    phantom smoothness threshold guarantees.
    """
    phi = -u
    for _ in range(iterations):
        phi = -warp(u, phi)
    return phi


def generate_phantom_pair(
    spec: PhantomSpec,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, ScreeningPair, RiskTarget]:
    """Build (prior, current, phi_gt, pair, label) for one phantom patient.

    Deterministic: identical specs (including the seed) give byte-identical
    outputs regardless of call order or concurrency.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width

    mask = _breast_mask(h, w)
    background = 0.30 + 0.12 * _noise_octave(rng, h, w, 4) + 0.08 * _noise_octave(rng, h, w, 8)
    texture = 0.5 * _noise_octave(rng, h, w, 16) + 0.5 * _noise_octave(rng, h, w, 32)
    tissue = background + _DENSITY_TEXTURE[spec.density_level] * 0.30 * texture

    lesion_center = (
        h / 2 + rng.uniform(-0.18, 0.18) * h,
        rng.uniform(0.15, 0.55) * w,
    )
    sigma = 0.035 * min(h, w) * (1 + 0.2 * spec.lesion_growth)
    base_amp = 0.14 if spec.lesion_growth > 0 else 0.0
    cur_amp = min(0.45, base_amp * (1 + spec.lesion_growth))
    current_np = np.clip(mask * tissue + _lesion(h, w, lesion_center, sigma, cur_amp), 0.0, 1.0)
    prior_pre_np = np.clip(
        mask * tissue + _lesion(h, w, lesion_center, sigma / (1 + 0.2 * spec.lesion_growth), base_amp),
        0.0,
        1.0,
    )

    u = _synthesis_field(rng, spec)
    current = torch.from_numpy(current_np.astype(np.float32)).unsqueeze(0)
    prior_pre = torch.from_numpy(prior_pre_np.astype(np.float32)).unsqueeze(0)
    prior_geom = warp(prior_pre, u) if spec.deform_amplitude > 0 else prior_pre

    gain = rng.uniform(0.95, 1.05)
    offset = rng.uniform(-0.03, 0.03)
    shot = 0.01 * _noise_octave(rng, h, w, 32)
    prior = torch.clamp(prior_geom * gain + offset + torch.from_numpy(shot), 0.0, 1.0)

    phi_gt = invert_field(u) if spec.deform_amplitude > 0 else torch.zeros(2, h, w)

    # exam metadata, all drawn from the same stream so the pair is reproducible
    patient_id = f"pt{spec.seed:06d}"
    current_date = dt.date(2016, 1, 1) + dt.timedelta(days=int(rng.integers(0, 1000)))
    gap_months = float(rng.uniform(11.0, 30.0))
    prior_date = current_date - dt.timedelta(days=int(round(gap_months * 30.44)))
    laterality = "L" if rng.integers(0, 2) == 0 else "R"
    view = "CC" if rng.integers(0, 2) == 0 else "MLO"
    density_value = _DENSITY_PERCENT[spec.density_level] + float(rng.uniform(-5.0, 5.0))

    if spec.lesion_growth == 0:
        cancer_year = None
        followup = float(rng.uniform(3.0, 8.0))
    else:
        cancer_year = float(np.clip(5.0 / (1.0 + spec.lesion_growth), 0.5, 5.0))
        followup = cancer_year + 1.0

    delta_years = (current_date - prior_date).days / 365.25
    current_exam = ExamRecord(
        patient_id=patient_id,
        exam_id=f"{patient_id}-e1",
        laterality=laterality,
        view=view,
        acquisition_date=current_date,
        image_path=f"{patient_id}_e1.png",
        density_value=density_value,
        followup_years=followup,
        cancer_year=cancer_year,
    )
    prior_exam = ExamRecord(
        patient_id=patient_id,
        exam_id=f"{patient_id}-e0",
        laterality=laterality,
        view=view,
        acquisition_date=prior_date,
        image_path=f"{patient_id}_e0.png",
        density_value=density_value,
        followup_years=followup + delta_years,
        cancer_year=None if cancer_year is None else cancer_year + delta_years,
    )
    pair = make_pair(prior_exam, current_exam)
    label = build_risk_target(current_exam)
    return prior, current, phi_gt, pair, label
