"""Dense displacement-field math shared by registration and feature alignment.

A displacement field is a float tensor of shape (2, H, W) in pixel units:
channel 0 holds row displacements, channel 1 column displacements. The field
induces the map T(p) = p + disp(p), and images are warped backwards, i.e. the
output at p samples the input at T(p). All functions also accept a leading
batch dimension ((B, 2, H, W) fields, (B, C, H, W) images) and are
differentiable wherever that is claimed in their docstrings.

Difference stencils are fixed so tests can reproduce values exactly:
Jacobians use central differences in the interior and one-sided differences
on the borders; the smoothness penalty uses forward differences with
zero-padded borders.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class AffineParams:
    """Global linear transform about the image centre: T(p) = A (p - c) + c + t.

    A is a 2x2 matrix, t a 2-vector in pixel units, both torch tensors.
    """

    A: torch.Tensor
    t: torch.Tensor

    @staticmethod
    def identity(dtype=torch.float32) -> "AffineParams":
        return AffineParams(torch.eye(2, dtype=dtype), torch.zeros(2, dtype=dtype))

    def scaled(self, factor_r: float, factor_c: float) -> "AffineParams":
        """Same transform expressed on a grid scaled by (factor_r, factor_c)."""
        scale = torch.tensor([factor_r, factor_c], dtype=self.t.dtype, device=self.t.device)
        return AffineParams(self.A, self.t * scale)


def _as_batched(x: torch.Tensor, channels: int) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected ({channels},H,W) or (B,{channels},H,W) tensor, got shape {tuple(x.shape)}")


def _check_spatial_match(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"spatial shapes differ: {tuple(a.shape[-2:])} vs {tuple(b.shape[-2:])}")


def identity_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Pixel-coordinate grid of shape (2, H, W): channel 0 rows, channel 1 cols."""
    rows = torch.arange(height, dtype=dtype, device=device)
    cols = torch.arange(width, dtype=dtype, device=device)
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    return torch.stack([rr, cc], dim=0)


def affine_to_dense(params: AffineParams, height: int, width: int) -> torch.Tensor:
    """Render an affine transform as a dense displacement field (2, H, W)."""
    if height < 1 or width < 1:
        raise ValueError("height and width must be >= 1")
    dtype = params.A.dtype
    grid = identity_grid(height, width, dtype=dtype, device=params.A.device)
    c = torch.tensor([(height - 1) / 2.0, (width - 1) / 2.0], dtype=dtype, device=params.A.device)
    rel = grid - c.view(2, 1, 1)
    mapped = torch.einsum("ij,jhw->ihw", params.A, rel) + c.view(2, 1, 1) + params.t.view(2, 1, 1)
    return mapped - grid


def warp(image: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Backward-warp an image (or feature map) by a displacement field.

    output(p) = bilinear sample of image at p + disp(p), with border
    replication outside the image. Differentiable w.r.t. both arguments.
    """
    img, squeeze_img = _as_batched(image, channels=-1)
    d, _ = _as_batched(disp, channels=2)
    _check_spatial_match(img, d)
    if d.shape[1] != 2:
        raise ValueError(f"displacement field must have 2 channels, got {d.shape[1]}")
    if d.shape[0] != img.shape[0]:
        if d.shape[0] == 1:
            d = d.expand(img.shape[0], -1, -1, -1)
        else:
            raise ValueError("batch sizes of image and field differ")
    _, _, h, w = img.shape
    grid = identity_grid(h, w, dtype=img.dtype, device=img.device)
    pos = grid.unsqueeze(0) + d
    # grid_sample wants normalized (x, y) = (col, row) in [-1, 1], align_corners=True
    norm_c = 2.0 * pos[:, 1] / max(w - 1, 1) - 1.0
    norm_r = 2.0 * pos[:, 0] / max(h - 1, 1) - 1.0
    sample_grid = torch.stack([norm_c, norm_r], dim=-1)
    out = F.grid_sample(img, sample_grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out.squeeze(0) if squeeze_img else out


def compose(outer: torch.Tensor, inner: torch.Tensor) -> torch.Tensor:
    """Field of the composed map T_outer o T_inner.

    disp_out(p) = disp_inner(p) + disp_outer sampled at p + disp_inner(p), so
    warp(warp(I, outer), inner) == warp(I, compose(outer, inner)) up to
    interpolation error.
    """
    o, squeeze = _as_batched(outer, channels=2)
    i, _ = _as_batched(inner, channels=2)
    _check_spatial_match(o, i)
    out = i + warp(o, i)
    return out.squeeze(0) if squeeze else out


def _grad_central(f: torch.Tensor, dim: int) -> torch.Tensor:
    """Central differences along `dim`, one-sided at the two borders."""
    n = f.shape[dim]
    if n < 2:
        raise ValueError("need at least 2 samples along each spatial dim")
    lead = f.narrow(dim, 1, 1) - f.narrow(dim, 0, 1)
    tail = f.narrow(dim, n - 1, 1) - f.narrow(dim, n - 2, 1)
    if n == 2:
        return torch.cat([lead, tail], dim=dim)
    mid = (f.narrow(dim, 2, n - 2) - f.narrow(dim, 0, n - 2)) / 2.0
    return torch.cat([lead, mid, tail], dim=dim)


def jacobian_det(disp: torch.Tensor) -> torch.Tensor:
    """Determinant of the Jacobian of T(p) = p + disp(p), per pixel.

    Returns (H, W) for a (2, H, W) field, (B, H, W) for a batched one.
    """
    d, squeeze = _as_batched(disp, channels=2)
    d_rr = _grad_central(d[:, 0], dim=-2) + 1.0  # dT_row/drow
    d_rc = _grad_central(d[:, 0], dim=-1)        # dT_row/dcol
    d_cr = _grad_central(d[:, 1], dim=-2)        # dT_col/drow
    d_cc = _grad_central(d[:, 1], dim=-1) + 1.0  # dT_col/dcol
    det = d_rr * d_cc - d_rc * d_cr
    return det.squeeze(0) if squeeze else det


def njd_percent(disp: torch.Tensor) -> float:
    """Percentage of pixels with a negative Jacobian determinant."""
    det = jacobian_det(disp)
    return 100.0 * float((det < 0).sum().item()) / det.numel()


def smoothness_penalty(disp: torch.Tensor) -> torch.Tensor:
    """Mean squared Frobenius norm of the spatial gradient of the field.

    Forward differences; the missing last-row/last-column gradients count as
    zero, and the mean is taken over all H*W pixels (and the batch).
    """
    d, _ = _as_batched(disp, channels=2)
    h, w = d.shape[-2:]
    dr = d[..., 1:, :] - d[..., :-1, :]
    dc = d[..., :, 1:] - d[..., :, :-1]
    total = (dr ** 2).sum(dim=(1, 2, 3)) + (dc ** 2).sum(dim=(1, 2, 3))
    return (total / (h * w)).mean()


def jd_penalty(disp: torch.Tensor) -> torch.Tensor:
    """Mean squared hinge on negative Jacobian determinants; 0 iff no folding."""
    det = jacobian_det(disp)
    return (torch.clamp(-det, min=0.0) ** 2).mean()


def ncc(a: torch.Tensor, b: torch.Tensor, window: int | None = None) -> torch.Tensor:
    """Normalized cross-correlation in [-1, 1].

    Default is global: the Pearson correlation of the flattened tensors. If
    either input has (numerically) zero variance the result is 0. With
    `window` set, returns the mean of per-window global NCCs computed over
    non-overlapping window x window tiles.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.numel() < 2:
        raise ValueError("need at least 2 elements")
    if window is not None:
        return _windowed_ncc(a, b, window)
    return _pearson(a.reshape(-1), b.reshape(-1))


def _pearson(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    xc = x - x.mean()
    yc = y - y.mean()
    var_x = (xc ** 2).mean()
    var_y = (yc ** 2).mean()
    if float(var_x.detach()) < 1e-20 or float(var_y.detach()) < 1e-20:
        return torch.zeros((), dtype=x.dtype, device=x.device)
    return (xc * yc).mean() / torch.sqrt(var_x * var_y)


def _windowed_ncc(a: torch.Tensor, b: torch.Tensor, window: int) -> torch.Tensor:
    av, _ = _as_batched(a, channels=-1)
    bv, _ = _as_batched(b, channels=-1)
    ua = F.unfold(av, kernel_size=window, stride=window)  # (B, C*win*win, L)
    ub = F.unfold(bv, kernel_size=window, stride=window)
    ua = ua - ua.mean(dim=1, keepdim=True)
    ub = ub - ub.mean(dim=1, keepdim=True)
    num = (ua * ub).mean(dim=1)
    den = torch.sqrt(torch.clamp((ua ** 2).mean(dim=1) * (ub ** 2).mean(dim=1), min=1e-20))
    cc = torch.where(den > 1e-10, num / den, torch.zeros_like(num))
    return cc.mean()


def batch_ncc(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sample global NCC for (B, ...) tensors, returned as a (B,) tensor."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    bsz = a.shape[0]
    av = a.reshape(bsz, -1)
    bv = b.reshape(bsz, -1)
    ac = av - av.mean(dim=1, keepdim=True)
    bc = bv - bv.mean(dim=1, keepdim=True)
    num = (ac * bc).mean(dim=1)
    den = torch.sqrt(torch.clamp((ac ** 2).mean(dim=1) * (bc ** 2).mean(dim=1), min=1e-24))
    return torch.where(den > 1e-12, num / den, torch.zeros_like(num))


def resize_flow(disp: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Resample a displacement field to a new grid, rescaling displacements.

    Channel 0 is multiplied by new_h/old_h and channel 1 by new_w/old_w so the
    field keeps describing the same physical motion on the new grid.
    """
    d, squeeze = _as_batched(disp, channels=2)
    old_h, old_w = d.shape[-2:]
    new_h, new_w = size
    out = F.interpolate(d, size=size, mode="bilinear", align_corners=False)
    scale = torch.tensor([new_h / old_h, new_w / old_w], dtype=d.dtype, device=d.device)
    out = out * scale.view(1, 2, 1, 1)
    return out.squeeze(0) if squeeze else out


def save_field(disp: torch.Tensor | np.ndarray, path: str | Path) -> None:
    """Write a (2, H, W) field as little-endian float32 with a JSON sidecar."""
    arr = disp.detach().cpu().numpy() if isinstance(disp, torch.Tensor) else np.asarray(disp)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValueError(f"expected (2,H,W) field, got shape {arr.shape}")
    path = Path(path)
    path.write_bytes(arr.astype("<f4").tobytes(order="C"))
    sidecar = {"h": int(arr.shape[1]), "w": int(arr.shape[2]), "units": "px"}
    path.with_suffix(".json").write_text(json.dumps(sidecar) + "\n")


def load_field(path: str | Path) -> torch.Tensor:
    """Read a field written by save_field; validates size against the sidecar."""
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    h, w = int(sidecar["h"]), int(sidecar["w"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != 2 * h * w:
        raise ValueError(f"field file {path} has {raw.size} floats, sidecar says 2*{h}*{w}")
    return torch.from_numpy(raw.reshape(2, h, w).copy())
