"""Gaussian-pyramid downsampling and SSIM, shared by both networks.

Everything here accepts either numpy arrays or torch tensors and returns the
same kind it was given. Torch inputs keep their autograd graph, so ``ssim_loss``
can be used directly as a training term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "PyramidSpec",
    "SsimParams",
    "gaussian_kernel1d",
    "reflect_indices",
    "gaussian_downsample",
    "ssim",
    "ssim_loss",
    "upsample_bicubic",
]


@dataclass(frozen=True)
class PyramidSpec:
    factor: int = 8
    kernel_sigma: float = 1.0
    kernel_size: int = 5

    def __post_init__(self):
        if self.factor not in (2, 4, 8, 16):
            raise ValueError(f"pyramid factor must be one of 2, 4, 8, 16, got {self.factor}")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 3, got {self.kernel_size}")
        if self.kernel_sigma <= 0:
            raise ValueError("kernel_sigma must be positive")

    @property
    def levels(self) -> int:
        return int(round(math.log2(self.factor)))


@dataclass(frozen=True)
class SsimParams:
    """Stabilizers and windowing for SSIM.

    ``window`` is ``"global"`` (one statistic over the whole image) or
    ``"sliding"``, in which case ``window_size``/``stride`` define the local
    windows and the result is their mean.
    """

    c1: float = 0.02
    c2: float = 0.06
    window: str = "global"
    window_size: int = 8
    stride: int = 4

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM stabilizers C1 and C2 must be positive")
        if self.window not in ("global", "sliding"):
            raise ValueError(f"unknown SSIM window mode {self.window!r}")
        if self.window == "sliding" and (self.window_size < 2 or self.stride < 1):
            raise ValueError("sliding window needs window_size >= 2 and stride >= 1")


def _to_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, False
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return torch.from_numpy(np.ascontiguousarray(arr)), True


def _back(t: torch.Tensor, was_numpy: bool):
    if was_numpy:
        out = t.detach().cpu().numpy()
        return out.item() if out.ndim == 0 else out
    return t


def gaussian_kernel1d(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    """Sampled, unit-sum Gaussian taps."""
    half = size // 2
    x = torch.arange(-half, half + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).to(dtype)


def reflect_indices(n: int, pad: int) -> np.ndarray:
    """Source indices for reflect padding (``d c b | a b c d | c b a``).

    Works for any ``pad``, including pads longer than the axis, by folding
    with period ``2 * (n - 1)``.
    """
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _blur_decimate_axis(t: torch.Tensor, axis: int, kernel: torch.Tensor) -> torch.Tensor:
    n = t.shape[axis]
    pad = kernel.numel() // 2
    idx = torch.from_numpy(reflect_indices(n, pad)).to(t.device)
    moved = t.movedim(axis, -1)
    lead = moved.shape[:-1]
    padded = moved.index_select(-1, idx).reshape(-1, 1, n + 2 * pad)
    blurred = F.conv1d(padded, kernel.view(1, 1, -1))
    out = blurred[..., ::2].reshape(*lead, -1)
    return out.movedim(-1, axis)


def gaussian_downsample(img, spec: PyramidSpec = PyramidSpec(), ndim: int = 2):
    """Reduce the trailing ``ndim`` axes by ``spec.factor``.

    Each pyramid level blurs with a separable reflect-padded Gaussian and keeps
    every even sample, so ``log2(factor)`` levels give the full reduction.
    Leading axes are treated as a batch.
    """
    t, was_numpy = _to_tensor(img)
    if t.ndim < ndim:
        raise ValueError(f"expected at least {ndim} dimensions, got shape {tuple(t.shape)}")
    spatial = t.shape[-ndim:]
    if any(s % spec.factor for s in spatial):
        raise ValueError(
            f"image dims {tuple(spatial)} not divisible by pyramid factor {spec.factor}"
        )
    if not t.is_floating_point():
        t = t.to(torch.float64)
    kernel = gaussian_kernel1d(spec.kernel_size, spec.kernel_sigma, dtype=t.dtype).to(t.device)
    for _ in range(spec.levels):
        for axis in range(t.ndim - ndim, t.ndim):
            t = _blur_decimate_axis(t, axis, kernel)
    return _back(t, was_numpy)


def _moments(a: torch.Tensor, b: torch.Tensor, p: SsimParams):
    if p.window == "global":
        mu_a = a.mean(dim=(-2, -1))
        mu_b = b.mean(dim=(-2, -1))
        da = a - mu_a[..., None, None]
        db = b - mu_b[..., None, None]
        var_a = (da * da).mean(dim=(-2, -1))
        var_b = (db * db).mean(dim=(-2, -1))
        cov = (da * db).mean(dim=(-2, -1))
        return mu_a, mu_b, var_a, var_b, cov
    h, w = a.shape[-2:]
    if p.window_size > min(h, w):
        raise ValueError(f"SSIM window {p.window_size} larger than image {h}x{w}")
    lead = a.shape[:-2]
    a4 = a.reshape(-1, 1, h, w)
    b4 = b.reshape(-1, 1, h, w)

    def pool(x):
        return F.avg_pool2d(x, p.window_size, p.stride).reshape(*lead, -1)

    mu_a, mu_b = pool(a4), pool(b4)
    var_a = pool(a4 * a4) - mu_a * mu_a
    var_b = pool(b4 * b4) - mu_b * mu_b
    cov = pool(a4 * b4) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def _ssim_tensor(a: torch.Tensor, b: torch.Tensor, p: SsimParams) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"SSIM dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim < 2 or a.shape[-1] * a.shape[-2] < 2:
        raise ValueError("SSIM needs 2D images with at least 2 pixels")
    mu_a, mu_b, var_a, var_b, cov = _moments(a, b, p)
    num = (2 * mu_a * mu_b + p.c1) * (2 * cov + p.c2)
    den = (mu_a * mu_a + mu_b * mu_b + p.c1) * (var_a + var_b + p.c2)
    s = num / den
    if p.window == "sliding":
        s = s.mean(dim=-1)
    return s


def ssim(a, b, p: SsimParams = SsimParams()):
    """Structural similarity of two images (or two equal-shaped batches).

    Uses the standard form with ``2*mu_a*mu_b`` in the luminance numerator and
    population (1/N) moments. Returns a scalar for 2D inputs and one value per
    image for batched ``(..., H, W)`` inputs.
    """
    ta, na = _to_tensor(a)
    tb, nb = _to_tensor(b)
    if ta.dtype != tb.dtype:
        common = torch.promote_types(ta.dtype, tb.dtype)
        ta, tb = ta.to(common), tb.to(common)
    return _back(_ssim_tensor(ta, tb, p), na and nb)


def ssim_loss(a, b, p: SsimParams = SsimParams()):
    """``1 - ssim``; batched inputs are averaged to one scalar."""
    s = ssim(a, b, p)
    if isinstance(s, torch.Tensor):
        return 1 - s.mean()
    return float(1 - np.mean(s))


def upsample_bicubic(img, factor: int):
    """Bicubic enlargement of the trailing two axes, clamped to [-1, 1]."""
    t, was_numpy = _to_tensor(img)
    h, w = t.shape[-2:]
    lead = t.shape[:-2]
    up = F.interpolate(t.reshape(-1, 1, h, w), scale_factor=factor, mode="bicubic", align_corners=False)
    up = up.clamp(-1.0, 1.0).reshape(*lead, h * factor, w * factor)
    return _back(up, was_numpy)
