import numpy as np
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "desk",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("desk")

torch.manual_seed(0)


def smooth_field(h, w, amplitude, rng, wavelength=None, dtype=torch.float64):
    """Random smooth displacement field built from a few sinusoids."""
    if wavelength is None:
        wavelength = max(h, w)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    u = np.zeros((2, h, w))
    for ch in range(2):
        for _ in range(3):
            k = 2 * np.pi / (wavelength * rng.uniform(1.0, 2.0))
            theta = rng.uniform(0, 2 * np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            u[ch] += rng.uniform(0.3, 1.0) * np.sin(k * (np.cos(theta) * rr + np.sin(theta) * cc) + phase)
    mag = np.sqrt(u[0] ** 2 + u[1] ** 2).max()
    if mag > 0:
        u *= amplitude / mag
    return torch.tensor(u, dtype=dtype)


def fd_gradient(fn, x, eps=1e-3):
    """Central finite-difference gradient of a scalar function of a tensor."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn(x))
        flat[i] = orig - eps
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def autograd_gradient(fn, x):
    xg = x.clone().detach().requires_grad_(True)
    fn(xg).backward()
    return xg.grad.detach()


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def gradient_check(fn, x, eps=1e-3, tol=1e-2) -> float:
    err = relative_error(autograd_gradient(fn, x), fd_gradient(fn, x, eps=eps))
    assert err < tol, f"gradient mismatch: relative error {err:.4f} >= {tol}"
    return err
