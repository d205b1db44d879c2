"""Risk prediction over a screening pair, with five alignment variants.

All variants share a residual conv encoder and three prediction levels
(fused / current-only / prior-only), each ending in a cumulative-probability
head that outputs five monotonically non-decreasing yearly risks plus the
five-year cancer-free complement. The variants differ only in how the prior
enters the fused level:

* NoAlign        - concatenated unaligned current and prior features.
* FeatAlign      - a small conv block estimates a field on the feature grid
                   (similarity weight alpha, no field regularization).
* FeatAlignReg   - same block with field regularization weight beta = 0.2.
* ImgAlign       - the prior image is warped by a frozen registration network
                   before encoding.
* ImgFeatAlign   - the frozen registration network's full-resolution field is
                   rescaled to the feature grid and applied there.

Training optimizes the masked risk cross-entropy, plus the feature-alignment
loss for the FeatAlign family (jointly by default; a separate mode pre-trains
the alignment block alone and then freezes it).
"""

from __future__ import annotations

import copy
import enum
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import metrics
from .data import RiskTarget
from .errors import ConfigError
from .fields import jd_penalty, resize_flow, smoothness_penalty, warp
from .regnet import RegCheckpoint, RegConfig, RegNet, load_model


class VariantKind(enum.Enum):
    NO_ALIGN = "NoAlign"
    FEAT_ALIGN = "FeatAlign"
    FEAT_ALIGN_REG = "FeatAlignReg"
    IMG_FEAT_ALIGN = "ImgFeatAlign"
    IMG_ALIGN = "ImgAlign"

    @property
    def uses_feature_alignment(self) -> bool:
        return self in (VariantKind.FEAT_ALIGN, VariantKind.FEAT_ALIGN_REG)

    @property
    def requires_registration(self) -> bool:
        return self in (VariantKind.IMG_FEAT_ALIGN, VariantKind.IMG_ALIGN)

    @property
    def beta(self) -> float:
        # field-regularization weight of the feature-alignment loss
        return 0.2 if self is VariantKind.FEAT_ALIGN_REG else 0.0

    @staticmethod
    def parse(name: str) -> "VariantKind":
        for kind in VariantKind:
            if kind.value == name:
                return kind
        raise ConfigError(f"unknown variant {name!r}; choose from {[k.value for k in VariantKind]}")


@dataclass
class RiskConfig:
    encoder_widths: tuple[int, ...] = (16, 32, 64, 128)
    encoder_blocks: tuple[int, ...] = (2, 2, 2, 2)
    encoder_pool: bool = True  # total stride 32 with the stem pool, 16 without
    alpha: float = 1e-2
    lambda_jd: float = 1e-5
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 12
    max_epochs: int = 100
    lr_halve_patience: int = 5
    early_stop_patience: int = 15
    separate_pretrain_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        self.encoder_blocks = tuple(self.encoder_blocks)
        if len(self.encoder_widths) != len(self.encoder_blocks):
            raise ConfigError("encoder_widths and encoder_blocks must have equal length")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out))
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.skip(x))


class ResEncoder(nn.Module):
    """Residual conv encoder returning the final pre-pooling feature map."""

    def __init__(self, widths, blocks, pool=True, in_channels=1):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1) if pool else nn.Identity(),
        )
        stages = []
        prev = widths[0]
        for i, (w, b) in enumerate(zip(widths, blocks)):
            stride = 1 if i == 0 else 2
            layers = [BasicBlock(prev, w, stride=stride)]
            layers += [BasicBlock(w, w) for _ in range(b - 1)]
            stages.append(nn.Sequential(*layers))
            prev = w
        self.stages = nn.Sequential(*stages)
        self.out_channels = prev

    def forward(self, x):
        return self.stages(self.stem(x))


class FeatureAlignBlock(nn.Module):
    """Estimate a displacement field on the feature grid and apply it.

    Two 3x3 convolutions with batch norm and ReLU in between; the final
    convolution is zero-initialized so the block starts as the identity.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.bn = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, 2, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, f_cur, f_pri):
        if f_cur.shape != f_pri.shape:
            raise ValueError("feature maps must share shape")
        phi = self.conv2(F.relu(self.bn(self.conv1(torch.cat([f_cur, f_pri], dim=1)))))
        return phi, warp(f_pri, phi)


class CumulativeRiskHead(nn.Module):
    """Monotone yearly risks from a base logit plus non-negative hazard steps.

    risk_k = sigmoid(b + sum_{j<=k} softplus(h_j)); the sixth output is
    1 - risk_5. With all-zero parameters and input, risk_k = sigmoid(k ln 2).
    """

    def __init__(self, in_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, 6)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        z = self.fc(pooled)
        base = z[:, :1]
        increments = F.softplus(z[:, 1:])
        risk = torch.sigmoid(base + torch.cumsum(increments, dim=1))
        return torch.cat([risk, 1.0 - risk[:, 4:5]], dim=1)


@dataclass
class RiskOutput:
    fused: torch.Tensor
    current_only: torch.Tensor
    prior_only: torch.Tensor

    def levels(self):
        return (self.fused, self.current_only, self.prior_only)


@dataclass
class FeatureBundle:
    f_cur: torch.Tensor
    f_pri: torch.Tensor
    f_pri_aligned: torch.Tensor | None = None
    f_diff: torch.Tensor | None = None
    phi_feat: torch.Tensor | None = None


def positional_encoding(delta_t_months: torch.Tensor, channels: int) -> torch.Tensor:
    """Sinusoidal time-gap code: channel 2i is sin(dt / 10000^(2i/C)), 2i+1 cos."""
    dt = delta_t_months.reshape(-1, 1).to(torch.float32)
    pairs = torch.arange(0, channels, 2, dtype=torch.float32, device=dt.device)
    div = torch.pow(torch.tensor(10000.0, device=dt.device), pairs / channels)
    angles = dt / div  # (B, ceil(C/2))
    pe = torch.zeros(dt.shape[0], channels, device=dt.device)
    pe[:, 0::2] = torch.sin(angles)
    pe[:, 1::2] = torch.cos(angles[:, : channels // 2])
    return pe


def diff_features(f_cur: torch.Tensor, f_pri_aligned: torch.Tensor, delta_t_months) -> torch.Tensor:
    """Temporal difference features with an additive time-gap encoding."""
    if f_cur.shape != f_pri_aligned.shape:
        raise ValueError("feature maps must share shape")
    dt = torch.as_tensor(delta_t_months, dtype=torch.float32, device=f_cur.device)
    if (dt <= 0).any():
        raise ValueError("delta_t_months must be > 0")
    squeeze = f_cur.dim() == 3
    fc = f_cur.unsqueeze(0) if squeeze else f_cur
    fp = f_pri_aligned.unsqueeze(0) if squeeze else f_pri_aligned
    c = fc.shape[1]
    pe = positional_encoding(dt.expand(fc.shape[0]) if dt.dim() == 0 else dt, c)
    out = fc - fp + pe.view(fc.shape[0], c, 1, 1)
    return out.squeeze(0) if squeeze else out


def feat_loss(f_pri_aligned, f_cur, phi_feat, alpha, beta, lambda_jd=1e-5) -> torch.Tensor:
    """Feature-alignment loss: similarity plus optional field regularization."""
    sim = ((f_pri_aligned - f_cur) ** 2).mean()
    out = alpha * sim
    if beta != 0.0:
        out = out + beta * (smoothness_penalty(phi_feat) + lambda_jd * jd_penalty(phi_feat))
    return out


def risk_loss(out: RiskOutput, target, mask=None) -> torch.Tensor:
    """Masked binary cross-entropy averaged over the three prediction levels."""
    if isinstance(target, RiskTarget):
        mask = torch.as_tensor(target.mask, dtype=torch.float32).unsqueeze(0)
        target = torch.as_tensor(target.target, dtype=torch.float32).unsqueeze(0)
    target = torch.as_tensor(target, dtype=torch.float32)
    mask = torch.as_tensor(mask, dtype=torch.float32)
    if target.dim() == 1:
        target = target.unsqueeze(0)
        mask = mask.unsqueeze(0)
    total = 0.0
    denom = mask.sum()
    if float(denom) == 0.0:
        warnings.warn("risk_loss: every time point is masked; returning 0")
        return torch.zeros((), dtype=torch.float32)
    for pred in out.levels():
        p = pred if pred.dim() == 2 else pred.unsqueeze(0)
        p = torch.clamp(p, 1e-6, 1.0 - 1e-6)
        bce = -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))
        total = total + (mask * bce).sum() / denom
    return total / 3.0


class RiskModel(nn.Module):
    """One alignment variant over the shared encoder and three heads."""

    def __init__(self, kind: VariantKind, config: RiskConfig, reg_model: RegNet | None = None):
        super().__init__()
        if kind.requires_registration and reg_model is None:
            raise ConfigError(f"{kind.value} requires a registration checkpoint")
        if not kind.requires_registration and reg_model is not None:
            raise ConfigError(f"{kind.value} must not be given a registration checkpoint")
        self.kind = kind
        self.config = config
        self.encoder = ResEncoder(config.encoder_widths, config.encoder_blocks, config.encoder_pool)
        c = self.encoder.out_channels
        if kind.uses_feature_alignment:
            self.align = FeatureAlignBlock(c)
        fused_in = 2 * c if kind is VariantKind.NO_ALIGN else 3 * c
        self.head_fused = CumulativeRiskHead(fused_in)
        self.head_current = CumulativeRiskHead(c)
        self.head_prior = CumulativeRiskHead(c)
        if reg_model is not None:
            reg_model.eval()
            for p in reg_model.parameters():
                p.requires_grad_(False)
            self.reg_model = reg_model

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        x = image if image.dim() == 4 else image.unsqueeze(0)
        return self.encoder(x)

    def forward(self, current: torch.Tensor, prior: torch.Tensor, delta_t_months):
        cur = current if current.dim() == 4 else current.unsqueeze(0)
        pri = prior if prior.dim() == 4 else prior.unsqueeze(0)
        f_cur = self.encoder(cur)
        f_pri = self.encoder(pri)

        phi_feat = None
        f_pri_aligned = None
        f_diff = None
        if self.kind is VariantKind.NO_ALIGN:
            fused_in = torch.cat([f_cur, f_pri], dim=1)
        elif self.kind.uses_feature_alignment:
            phi_feat, f_pri_aligned = self.align(f_cur, f_pri)
            f_diff = diff_features(f_cur, f_pri_aligned, delta_t_months)
            fused_in = torch.cat([f_cur, f_pri_aligned, f_diff], dim=1)
        elif self.kind is VariantKind.IMG_ALIGN:
            with torch.no_grad():
                reg_out = self.reg_model(cur, pri)
            f_pri_aligned = self.encoder(reg_out.warped_final)
            f_diff = diff_features(f_cur, f_pri_aligned, delta_t_months)
            fused_in = torch.cat([f_cur, f_pri_aligned, f_diff], dim=1)
        else:  # IMG_FEAT_ALIGN
            with torch.no_grad():
                reg_out = self.reg_model(cur, pri)
            phi_feat = resize_flow(reg_out.phi_final, f_pri.shape[-2:])
            f_pri_aligned = warp(f_pri, phi_feat)
            f_diff = diff_features(f_cur, f_pri_aligned, delta_t_months)
            fused_in = torch.cat([f_cur, f_pri_aligned, f_diff], dim=1)

        out = RiskOutput(
            fused=self.head_fused(fused_in.mean(dim=(2, 3))),
            current_only=self.head_current(f_cur.mean(dim=(2, 3))),
            prior_only=self.head_prior(f_pri.mean(dim=(2, 3))),
        )
        bundle = FeatureBundle(f_cur, f_pri, f_pri_aligned, f_diff, phi_feat)
        return out, bundle


def build_risk_model(kind: VariantKind, config: RiskConfig, reg_ckpt: RegCheckpoint | None = None) -> RiskModel:
    reg_model = load_model(reg_ckpt) if reg_ckpt is not None else None
    if not kind.requires_registration and reg_ckpt is not None:
        raise ConfigError(f"{kind.value} must not be given a registration checkpoint")
    return RiskModel(kind, config, reg_model)


@dataclass
class RiskExample:
    """One training/evaluation item: a loaded pair with its label."""

    current: torch.Tensor
    prior: torch.Tensor
    delta_t_months: float
    target: np.ndarray
    mask: np.ndarray
    exam_id: str
    patient_id: str
    followup_years: float
    cancer_year: float | None
    density_value: float | None = None
    density_category: str | None = None


@dataclass
class RiskCheckpoint:
    kind: VariantKind
    config: RiskConfig
    model_state: dict
    reg_config: RegConfig | None
    best_epoch: int
    best_val_cindex: float
    log: list[dict]


def save_risk_checkpoint(ckpt: RiskCheckpoint, path: str | Path) -> None:
    torch.save(
        {
            "kind": ckpt.kind.value,
            "config": asdict(ckpt.config),
            "model_state": ckpt.model_state,
            "reg_config": None if ckpt.reg_config is None else asdict(ckpt.reg_config),
            "best_epoch": ckpt.best_epoch,
            "best_val_cindex": ckpt.best_val_cindex,
            "log": ckpt.log,
        },
        Path(path),
    )


def load_risk_checkpoint(path: str | Path) -> RiskCheckpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = payload["config"]
    cfg["encoder_widths"] = tuple(cfg["encoder_widths"])
    cfg["encoder_blocks"] = tuple(cfg["encoder_blocks"])
    reg_cfg = payload["reg_config"]
    if reg_cfg is not None:
        reg_cfg["encoder_channels"] = tuple(reg_cfg["encoder_channels"])
        reg_cfg = RegConfig(**reg_cfg)
    return RiskCheckpoint(
        kind=VariantKind.parse(payload["kind"]),
        config=RiskConfig(**cfg),
        model_state=payload["model_state"],
        reg_config=reg_cfg,
        best_epoch=payload["best_epoch"],
        best_val_cindex=payload["best_val_cindex"],
        log=payload["log"],
    )


def load_risk_model(ckpt: RiskCheckpoint) -> RiskModel:
    reg_model = RegNet(ckpt.reg_config) if ckpt.reg_config is not None else None
    model = RiskModel(ckpt.kind, ckpt.config, reg_model)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model


def _batch(examples, indices):
    cur = torch.stack([examples[i].current for i in indices])
    pri = torch.stack([examples[i].prior for i in indices])
    dts = torch.tensor([examples[i].delta_t_months for i in indices], dtype=torch.float32)
    tgt = torch.tensor(np.stack([examples[i].target for i in indices]), dtype=torch.float32)
    msk = torch.tensor(np.stack([examples[i].mask for i in indices]), dtype=torch.float32)
    return cur, pri, dts, tgt, msk


def predict_records(model: RiskModel, examples, batch_size: int = 16) -> list:
    """Fused-level predictions as evaluation records (eval mode, no grad)."""
    was_training = model.training
    model.eval()
    records = []
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            idx = range(start, min(start + batch_size, len(examples)))
            cur, pri, dts, _, _ = _batch(examples, idx)
            out, _ = model(cur, pri, dts)
            for row, i in zip(out.fused.numpy(), idx):
                ex = examples[i]
                records.append(
                    metrics.EvalRecord(
                        exam_id=ex.exam_id,
                        risk=row.astype(np.float64),
                        target=RiskTarget(ex.target, ex.mask),
                        followup_years=ex.followup_years,
                        cancer_year=ex.cancer_year,
                        density_category=ex.density_category,
                    )
                )
    if was_training:
        model.train()
    return records


def _val_cindex(model: RiskModel, examples) -> float:
    records = predict_records(model, examples)
    try:
        return metrics.c_index(records)
    except ValueError:
        warnings.warn("validation C-index undefined (no comparable pairs); using 0.5")
        return 0.5


def _pretrain_alignment(model: RiskModel, examples, config: RiskConfig, progress: bool) -> None:
    """Separate mode phase 1: fit the alignment block alone on frozen features."""
    for p in model.parameters():
        p.requires_grad_(False)
    for p in model.align.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(model.align.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    n = len(examples)
    for epoch in range(config.separate_pretrain_epochs):
        rng = np.random.default_rng([config.seed, 7001, epoch])
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            cur, pri, _, _, _ = _batch(examples, idx)
            with torch.no_grad():
                f_cur = model.encoder(cur)
                f_pri = model.encoder(pri)
            phi, aligned = model.align(f_cur, f_pri)
            loss = feat_loss(aligned, f_cur, phi, config.alpha, model.kind.beta, config.lambda_jd)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if progress:
            print(f"[risk/pretrain] epoch {epoch}: feat loss {loss.detach().item():.6f}")
    for p in model.parameters():
        p.requires_grad_(True)
    for p in model.align.parameters():
        p.requires_grad_(False)


def train_risk(
    train_set,
    val_set,
    kind: VariantKind,
    config: RiskConfig,
    reg_ckpt: RegCheckpoint | None = None,
    mode: str = "joint",
    progress: bool = False,
) -> RiskCheckpoint:
    """Train one variant with validation-C-index model selection.

    The learning rate halves after `lr_halve_patience` consecutive epochs
    without validation improvement and training stops after
    `early_stop_patience`; the best-validation weights are returned.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be nonempty")
    if mode not in ("joint", "separate"):
        raise ConfigError(f"mode must be 'joint' or 'separate', got {mode!r}")
    if mode == "separate" and not kind.uses_feature_alignment:
        raise ConfigError("separate training mode applies to the FeatAlign family only")
    torch.manual_seed(config.seed)
    model = build_risk_model(kind, config, reg_ckpt)

    if mode == "separate":
        _pretrain_alignment(model, train_set, config, progress)

    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(trainable, lr=config.learning_rate, weight_decay=config.weight_decay)
    use_feat_loss = kind.uses_feature_alignment and mode == "joint"

    best_val = -math.inf
    best_epoch = -1
    best_state = copy.deepcopy(model.state_dict())
    stagnant = 0
    log: list[dict] = []
    n = len(train_set)
    model.train()
    for epoch in range(config.max_epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            cur, pri, dts, tgt, msk = _batch(train_set, idx)
            out, bundle = model(cur, pri, dts)
            loss = risk_loss(out, tgt, msk)
            if use_feat_loss:
                loss = loss + feat_loss(
                    bundle.f_pri_aligned, bundle.f_cur, bundle.phi_feat,
                    config.alpha, kind.beta, config.lambda_jd,
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.detach().item())
        val_c = _val_cindex(model, val_set)
        lr_now = opt.param_groups[0]["lr"]
        log.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_cindex": val_c, "lr": lr_now})
        if progress:
            print(f"[risk/{kind.value}] epoch {epoch}: loss {np.mean(losses):.4f} val C {val_c:.4f} lr {lr_now:g}")
        if val_c > best_val + 1e-9:
            best_val = val_c
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            stagnant = 0
        else:
            stagnant += 1
            if stagnant % config.lr_halve_patience == 0:
                for group in opt.param_groups:
                    group["lr"] *= 0.5
            if stagnant >= config.early_stop_patience:
                break

    return RiskCheckpoint(
        kind=kind,
        config=config,
        model_state=best_state,
        reg_config=reg_ckpt.config if reg_ckpt is not None else None,
        best_epoch=best_epoch,
        best_val_cindex=best_val,
        log=log,
    )
