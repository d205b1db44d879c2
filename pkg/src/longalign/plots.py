"""Static figures: displacement quivers, Jacobian validity maps, metric charts.

Plots never alter their numeric inputs; in the Jacobian map, red is reserved
for folded pixels (determinant < 0) and the number of red pixels equals the
folded-pixel count exactly.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .fields import jacobian_det


def quiver_plot(disp: torch.Tensor, out_path: str | Path, step: int = 8) -> None:
    """Subsampled displacement vectors; every `step` pixels by default."""
    d = disp.detach().cpu().numpy()
    h, w = d.shape[-2:]
    rr, cc = np.mgrid[0:h:step, 0:w:step]
    dr = d[0, ::step, ::step]
    dc = d[1, ::step, ::step]
    fig, ax = plt.subplots(figsize=(5, 5 * h / max(w, 1)))
    # matplotlib's y axis points up; flip rows so the image convention holds
    ax.quiver(cc, rr, dc, dr, angles="xy", scale_units="xy", scale=1.0, width=0.003)
    ax.set_xlim(-1, w)
    ax.set_ylim(h, -1)
    ax.set_aspect("equal")
    ax.set_title("displacement field")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def jacobian_map(disp: torch.Tensor, out_path: str | Path) -> int:
    """Validity map: blue-to-white for valid pixels, pure red where det < 0.

    Returns the number of red (folded) pixels.
    """
    det = jacobian_det(disp).detach().cpu().numpy()
    folded = det < 0
    rgb = np.zeros(det.shape + (3,), dtype=np.float64)
    valid = ~folded
    if valid.any():
        vmax = max(float(det[valid].max()), 1e-6)
        shade = np.clip(det / vmax, 0.0, 1.0)  # 0 -> deep blue, 1 -> white
        rgb[..., 0] = shade
        rgb[..., 1] = shade
        rgb[..., 2] = 0.55 + 0.45 * shade
    rgb[folded] = (1.0, 0.0, 0.0)
    fig, ax = plt.subplots(figsize=(5, 5 * det.shape[0] / max(det.shape[1], 1)))
    ax.imshow(rgb, interpolation="nearest")
    ax.set_title(f"jacobian determinants ({int(folded.sum())} folded px)")
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return int(folded.sum())


def density_bars(strata: dict[str, dict], out_path: str | Path) -> None:
    """Bar chart of per-density C-index with CI whiskers.

    `strata` maps stratum name -> {"point", "lo", "hi"}.
    """
    order = [s for s in ("low", "med", "high") if s in strata] + [
        s for s in sorted(strata) if s not in ("low", "med", "high")
    ]
    points = [strata[s]["point"] for s in order]
    los = [strata[s]["point"] - strata[s]["lo"] for s in order]
    his = [strata[s]["hi"] - strata[s]["point"] for s in order]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(range(len(order)), points, yerr=[los, his], capsize=4, color="#6699cc")
    ax.set_xticks(range(len(order)))
    ax.set_xticklabels(order)
    ax.set_ylabel("C-index")
    ax.set_xlabel("density category")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def weighting_curves(rows: list[dict], out_path: str | Path) -> None:
    """C-index and yearly AUC versus the alignment weight (log x axis)."""
    alphas = [r["alpha"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    ax1.plot(alphas, [r["c_index"] for r in rows], marker="o")
    ax1.set_xscale("log")
    ax1.set_xlabel("alignment weight")
    ax1.set_ylabel("C-index")
    for k in range(1, 6):
        key = f"auc_{k}"
        if all(key in r for r in rows):
            ax2.plot(alphas, [r[key] for r in rows], marker="o", label=f"{k}-year")
    ax2.set_xscale("log")
    ax2.set_xlabel("alignment weight")
    ax2.set_ylabel("AUC")
    ax2.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
