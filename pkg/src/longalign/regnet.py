"""Non-iterative coarse-to-fine registration network for 2D image pairs.

Two parallel convolutional encoder paths (five modules each) feed a decoder
that first predicts a global affine transform from the coarsest features and
then refines it with four dense residual fields at successively doubled
resolution. Each refinement stage re-warps the prior-path features by the
running field, merges them with the current-path features and the expanded
decoder state, runs four windowed-attention blocks, and predicts a residual
displacement that is composed onto the running field. Flow heads and the
affine head are zero-initialized, so a freshly constructed network is exactly
the identity transform.

Training minimizes (1 - NCC(warped_affine, current)) + (1 - NCC(warped_final,
current)) + gamma * (smoothness + lambda_jd * folding penalty) on the final
composed field.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .fields import (
    AffineParams,
    batch_ncc,
    compose,
    identity_grid,
    jd_penalty,
    resize_flow,
    smoothness_penalty,
    warp,
)

DOWNSAMPLE_FACTOR = 16  # five encoder modules, the first stride-1


@dataclass
class RegConfig:
    encoder_channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    window_size: int = 4
    attn_heads: int = 4
    attn_blocks_per_stage: int = 4
    share_encoder: bool = False
    regularize_stages: bool = False
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 20
    epochs: int = 100
    pairs_per_epoch: int = 1500
    gamma: float = 1.0
    lambda_jd: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        if len(self.encoder_channels) != 5:
            raise ConfigError("encoder_channels must have exactly 5 entries")
        if any(c <= 0 for c in self.encoder_channels):
            raise ConfigError("encoder_channels must be positive")
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1")


@dataclass
class RegOutput:
    """Registration result; tensors are batched (B, ...) unless squeezed."""

    affine: AffineParams
    phi_affine: torch.Tensor
    phi_stages: list[torch.Tensor]
    phi_final: torch.Tensor
    warped_affine: torch.Tensor
    warped_final: torch.Tensor
    residuals: list[torch.Tensor] = field(default_factory=list)

    def squeezed(self) -> "RegOutput":
        """Drop the batch dimension (batch size must be 1)."""
        if self.phi_final.dim() != 4 or self.phi_final.shape[0] != 1:
            raise ValueError("squeezed() needs a batch of exactly 1")
        return RegOutput(
            affine=AffineParams(self.affine.A[0], self.affine.t[0]),
            phi_affine=self.phi_affine[0],
            phi_stages=[p[0] for p in self.phi_stages],
            phi_final=self.phi_final[0],
            warped_affine=self.warped_affine[0],
            warped_final=self.warped_final[0],
            residuals=[r[0] for r in self.residuals],
        )


def _window_partition(x: torch.Tensor, wh: int, ww: int) -> torch.Tensor:
    b, h, w, c = x.shape
    x = x.view(b, h // wh, wh, w // ww, ww, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, wh * ww, c)


def _window_reverse(windows: torch.Tensor, wh: int, ww: int, h: int, w: int) -> torch.Tensor:
    b = windows.shape[0] // ((h // wh) * (w // ww))
    x = windows.view(b, h // wh, w // ww, wh, ww, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


class WindowAttention(nn.Module):
    """Multi-head self-attention within non-overlapping windows."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim / heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if attn_mask is not None:
            nw = attn_mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + attn_mask.unsqueeze(0).unsqueeze(2)
            attn = attn.view(bw, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    """Pre-norm windowed attention block, optionally with shifted windows."""

    def __init__(self, dim: int, heads: int, window_size: int, shifted: bool):
        super().__init__()
        self.window_size = window_size
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C, H, W)
        b, c, h, w = x.shape
        wh = min(self.window_size, h)
        ww = min(self.window_size, w)
        pad_h = (wh - h % wh) % wh
        pad_w = (ww - w % ww) % ww
        y = x.permute(0, 2, 3, 1)  # (B, H, W, C)
        if pad_h or pad_w:
            y = F.pad(y, (0, 0, 0, pad_w, 0, pad_h))
        hp, wp = y.shape[1], y.shape[2]
        shift_h = wh // 2 if (self.shifted and hp > wh) else 0
        shift_w = ww // 2 if (self.shifted and wp > ww) else 0

        shortcut = y
        y = self.norm1(y)
        if shift_h or shift_w:
            y = torch.roll(y, shifts=(-shift_h, -shift_w), dims=(1, 2))
            mask = _shift_mask(hp, wp, wh, ww, shift_h, shift_w, y.device, y.dtype)
        else:
            mask = None
        windows = _window_partition(y, wh, ww)
        windows = self.attn(windows, mask)
        y = _window_reverse(windows, wh, ww, hp, wp)
        if shift_h or shift_w:
            y = torch.roll(y, shifts=(shift_h, shift_w), dims=(1, 2))
        y = shortcut + y
        y = y + self.mlp(self.norm2(y))
        if pad_h or pad_w:
            y = y[:, :h, :w]
        return y.permute(0, 3, 1, 2)


def _region_slices(win: int, shift: int) -> tuple[slice, ...]:
    if shift == 0:
        return (slice(0, None),)
    return (slice(0, -win), slice(-win, -shift), slice(-shift, None))


def _shift_mask(hp, wp, wh, ww, shift_h, shift_w, device, dtype) -> torch.Tensor:
    """Standard shifted-window mask: block attention across rolled boundaries."""
    img = torch.zeros(1, hp, wp, 1, device=device)
    cnt = 0
    for hs in _region_slices(wh, shift_h):
        for ws in _region_slices(ww, shift_w):
            img[:, hs, ws, :] = cnt
            cnt += 1
    windows = _window_partition(img, wh, ww).squeeze(-1)  # (nW, wh*ww)
    diff = windows.unsqueeze(1) - windows.unsqueeze(2)
    return torch.where(diff == 0, torch.zeros_like(diff), torch.full_like(diff, -100.0)).to(dtype)


class PatchExpand(nn.Module):
    """Double the spatial resolution via channel-to-space rearrangement."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.proj = nn.Conv2d(dim_in, dim_out * 4, kernel_size=1)
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, x):
        return self.shuffle(self.proj(x))


class DualPathEncoder(nn.Module):
    """Five conv modules per path; the first keeps resolution, the rest halve it."""

    def __init__(self, channels: tuple[int, ...], share: bool):
        super().__init__()
        self.share = share
        self.path_a = self._make_path(channels)
        self.path_b = self.path_a if share else self._make_path(channels)

    @staticmethod
    def _make_path(channels):
        modules = []
        prev = 1
        for i, ch in enumerate(channels):
            stride = 1 if i == 0 else 2
            modules.append(
                nn.Sequential(nn.Conv2d(prev, ch, 3, stride=stride, padding=1), nn.LeakyReLU(0.2))
            )
            prev = ch
        return nn.ModuleList(modules)

    def forward(self, current: torch.Tensor, prior: torch.Tensor):
        feats_cur, feats_pri = [], []
        x, y = current, prior
        for mod_a, mod_b in zip(self.path_a, self.path_b):
            x = mod_a(x)
            y = mod_b(y)
            feats_cur.append(x)
            feats_pri.append(y)
        return feats_cur, feats_pri


def _affine_dense_batch(A: torch.Tensor, t: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Dense displacement of per-sample affines: disp(p) = (A - I)(p - c) + t."""
    grid = identity_grid(h, w, dtype=A.dtype, device=A.device)
    c = torch.tensor([(h - 1) / 2.0, (w - 1) / 2.0], dtype=A.dtype, device=A.device)
    rel = grid - c.view(2, 1, 1)
    eye = torch.eye(2, dtype=A.dtype, device=A.device)
    disp = torch.einsum("bij,jhw->bihw", A - eye, rel)
    return disp + t.view(-1, 2, 1, 1)


class RegNet(nn.Module):
    def __init__(self, config: RegConfig):
        super().__init__()
        self.config = config
        ch = config.encoder_channels
        self.encoder = DualPathEncoder(ch, config.share_encoder)

        c5 = ch[4]
        self.affine_conv = nn.Sequential(
            nn.Conv2d(2 * c5, c5, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c5, c5, 3, padding=1), nn.LeakyReLU(0.2),
        )
        self.affine_head = nn.Linear(c5, 6)
        nn.init.zeros_(self.affine_head.weight)
        nn.init.zeros_(self.affine_head.bias)

        self.expands = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.attn_stages = nn.ModuleList()
        self.flow_heads = nn.ModuleList()
        prev = c5
        for lvl in (3, 2, 1, 0):  # encoder pyramid indices for the four refinements
            c = ch[lvl]
            self.expands.append(PatchExpand(prev, c))
            self.merges.append(nn.Sequential(nn.Conv2d(3 * c, c, 3, padding=1), nn.LeakyReLU(0.2)))
            blocks = [
                SwinBlock(c, config.attn_heads, config.window_size, shifted=(j % 2 == 1))
                for j in range(config.attn_blocks_per_stage)
            ]
            self.attn_stages.append(nn.ModuleList(blocks))
            head = nn.Conv2d(c, 2, 3, padding=1)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.flow_heads.append(head)
            prev = c

    def encode_pair(self, current: torch.Tensor, prior: torch.Tensor):
        """Run both encoder paths; returns two 5-level feature pyramids."""
        if current.shape != prior.shape:
            raise ValueError("current and prior must share shape")
        h, w = current.shape[-2:]
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ValueError(f"image sides must be divisible by {DOWNSAMPLE_FACTOR}, got {h}x{w}")
        return self.encoder(current, prior)

    def decode_coarse_to_fine(self, pyramids, prior: torch.Tensor) -> RegOutput:
        feats_cur, feats_pri = pyramids
        b = feats_cur[0].shape[0]
        h, w = prior.shape[-2:]

        hidden = self.affine_conv(torch.cat([feats_cur[4], feats_pri[4]], dim=1))
        theta = self.affine_head(hidden.mean(dim=(2, 3)))
        eye = torch.eye(2, dtype=theta.dtype, device=theta.device)
        A = eye + theta[:, :4].view(b, 2, 2)
        t5 = theta[:, 4:]  # in coarsest-grid pixels

        phi_stages: list[torch.Tensor] = []
        residuals: list[torch.Tensor] = []
        flow = None
        for i in range(4):
            f_cur = feats_cur[3 - i]
            f_pri = feats_pri[3 - i]
            sh, sw = f_cur.shape[-2:]
            if i == 0:
                flow = _affine_dense_batch(A, t5 * 2.0, sh, sw)  # exact render at first stage
            else:
                flow = resize_flow(flow, (sh, sw))
            hidden = self.expands[i](hidden)
            warped_pri = warp(f_pri, flow)
            x = self.merges[i](torch.cat([f_cur, warped_pri, hidden], dim=1))
            for block in self.attn_stages[i]:
                x = block(x)
            res = self.flow_heads[i](x)
            flow = compose(flow, res)
            hidden = x
            phi_stages.append(flow)
            residuals.append(res)

        scale = h / feats_cur[4].shape[-2]
        t_full = t5 * scale
        phi_affine = _affine_dense_batch(A, t_full, h, w)
        phi_final = phi_stages[-1]
        return RegOutput(
            affine=AffineParams(A, t_full),
            phi_affine=phi_affine,
            phi_stages=phi_stages,
            phi_final=phi_final,
            warped_affine=warp(prior, phi_affine),
            warped_final=warp(prior, phi_final),
            residuals=residuals,
        )

    def forward(self, current: torch.Tensor, prior: torch.Tensor) -> RegOutput:
        return self.decode_coarse_to_fine(self.encode_pair(current, prior), prior)


def reg_loss(
    out: RegOutput,
    current: torch.Tensor,
    prior: torch.Tensor,
    gamma: float = 1.0,
    lambda_jd: float = 1e-5,
    regularize_stages: bool = False,
) -> torch.Tensor:
    """Similarity after affine and final warps plus field regularization."""
    cur = current if current.dim() == 4 else current.unsqueeze(0)
    pri = prior if prior.dim() == 4 else prior.unsqueeze(0)
    sim = (1 - batch_ncc(warp(pri, out.phi_affine), cur).mean()) + (
        1 - batch_ncc(warp(pri, out.phi_final), cur).mean()
    )
    reg = smoothness_penalty(out.phi_final) + lambda_jd * jd_penalty(out.phi_final)
    if regularize_stages:
        for phi in out.phi_stages[:-1]:
            reg = reg + smoothness_penalty(phi) + lambda_jd * jd_penalty(phi)
    return sim + gamma * reg


@dataclass
class RegCheckpoint:
    config: RegConfig
    model_state: dict
    optimizer_state: dict
    last_model_state: dict
    epochs_completed: int
    best_epoch: int
    best_val_ncc: float
    log: list[dict]


def save_checkpoint(ckpt: RegCheckpoint, path: str | Path) -> None:
    payload = {
        "config": asdict(ckpt.config),
        "model_state": ckpt.model_state,
        "optimizer_state": ckpt.optimizer_state,
        "last_model_state": ckpt.last_model_state,
        "epochs_completed": ckpt.epochs_completed,
        "best_epoch": ckpt.best_epoch,
        "best_val_ncc": ckpt.best_val_ncc,
        "log": ckpt.log,
    }
    torch.save(payload, Path(path))


def load_checkpoint(path: str | Path) -> RegCheckpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = payload["config"]
    cfg["encoder_channels"] = tuple(cfg["encoder_channels"])
    return RegCheckpoint(
        config=RegConfig(**cfg),
        model_state=payload["model_state"],
        optimizer_state=payload["optimizer_state"],
        last_model_state=payload["last_model_state"],
        epochs_completed=payload["epochs_completed"],
        best_epoch=payload["best_epoch"],
        best_val_ncc=payload["best_val_ncc"],
        log=payload["log"],
    )


def _stack_pairs(pairs, indices) -> tuple[torch.Tensor, torch.Tensor]:
    cur = torch.stack([pairs[i][0] for i in indices])
    pri = torch.stack([pairs[i][1] for i in indices])
    return cur, pri


def _validate(model: RegNet, pairs, chunk: int = 8) -> float:
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(pairs), chunk):
            idx = range(start, min(start + chunk, len(pairs)))
            cur, pri = _stack_pairs(pairs, idx)
            out = model(cur, pri)
            scores.append(batch_ncc(out.warped_final, cur))
    model.train()
    return float(torch.cat(scores).mean())


def train_registration(
    train_pairs,
    val_pairs,
    config: RegConfig,
    resume_from: RegCheckpoint | None = None,
    progress: bool = False,
) -> RegCheckpoint:
    """Adam training of the registration loss with per-epoch validation NCC.

    Pair sampling per epoch is drawn from a stream seeded by (seed, epoch), so
    a resumed run replays exactly the batches an uninterrupted run would see.
    Returns the checkpoint of the best-validation epoch (plus the last state,
    so training can be resumed).
    """
    if not train_pairs or not val_pairs:
        raise ValueError("training and validation pair sets must be nonempty")
    torch.manual_seed(config.seed)
    model = RegNet(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)

    start_epoch = 0
    best_state = copy.deepcopy(model.state_dict())
    best_val = -math.inf
    best_epoch = -1
    log: list[dict] = []
    if resume_from is not None:
        model.load_state_dict(resume_from.last_model_state)
        opt.load_state_dict(resume_from.optimizer_state)
        start_epoch = resume_from.epochs_completed
        best_state = resume_from.model_state
        best_val = resume_from.best_val_ncc
        best_epoch = resume_from.best_epoch
        log = list(resume_from.log)

    n = len(train_pairs)
    model.train()
    for epoch in range(start_epoch, config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        k = config.pairs_per_epoch
        indices = rng.choice(n, size=k, replace=k > n)
        losses = []
        for start in range(0, k, config.batch_size):
            batch_idx = indices[start : start + config.batch_size]
            cur, pri = _stack_pairs(train_pairs, batch_idx)
            out = model(cur, pri)
            loss = reg_loss(
                out, cur, pri,
                gamma=config.gamma, lambda_jd=config.lambda_jd,
                regularize_stages=config.regularize_stages,
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.detach().item())
        val_ncc = _validate(model, val_pairs)
        if val_ncc > best_val:
            best_val = val_ncc
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        log.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_ncc": val_ncc})
        if progress:
            print(f"[reg] epoch {epoch}: loss {np.mean(losses):.4f} val_ncc {val_ncc:.4f}")

    return RegCheckpoint(
        config=config,
        model_state=best_state,
        optimizer_state=opt.state_dict(),
        last_model_state=copy.deepcopy(model.state_dict()),
        epochs_completed=config.epochs,
        best_epoch=best_epoch,
        best_val_ncc=best_val,
        log=log,
    )


def load_model(ckpt: RegCheckpoint) -> RegNet:
    model = RegNet(ckpt.config)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model


def register(ckpt: RegCheckpoint | RegNet, current: torch.Tensor, prior: torch.Tensor) -> RegOutput:
    """Deterministic forward pass on one pair; returns unbatched fields."""
    model = ckpt if isinstance(ckpt, RegNet) else load_model(ckpt)
    was_training = model.training
    model.eval()
    cur = current if current.dim() == 4 else current.unsqueeze(0)
    pri = prior if prior.dim() == 4 else prior.unsqueeze(0)
    with torch.no_grad():
        out = model(cur, pri)
    if was_training:
        model.train()
    return out.squeezed()
