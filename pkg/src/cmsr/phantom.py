"""Procedural paired phantoms standing in for micro-CT / clinical-CT data.

The high-resolution volume is a body envelope of soft tissue around two lung
lobes filled with a porous wall/air texture. The low-resolution partner is an
8x pyramid reduction of it, pushed through a "modality gap" (blur, contrast
curve, noise, offset) so that it is *not* a plain downsample.

Intensities are HU-like: air near -1000, soft tissue near +40.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import PyramidSpec, gaussian_downsample
from .volumeio import Volume

__all__ = ["ModalityGap", "PhantomSpec", "generate_phantom_pair", "value_noise", "spec_to_json"]

AIR_HU = -1000.0
TISSUE_HU = 40.0
_GAMMA_WINDOW = (-1000.0, 200.0)


@dataclass(frozen=True)
class ModalityGap:
    """Device differences applied to the downsampled volume.

    ``contrast_gamma`` is a log2 exponent: the contrast curve is
    ``u ** 2**contrast_gamma`` on the [-1000, 200] window, so 0 means no change
    and negative values brighten the mid-range.
    ``blur_sigma`` is in low-resolution voxels, noise and shift in HU.
    """

    blur_sigma: float = 0.6
    contrast_gamma: float = -0.5
    noise_sigma: float = 40.0
    intensity_shift: float = 120.0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise_sigma and blur_sigma must be >= 0")

    @classmethod
    def zero(cls) -> "ModalityGap":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    hr_dims: tuple[int, int, int] = (64, 64, 64)
    structure_scale: float = 6.0
    gap: ModalityGap = field(default_factory=ModalityGap)
    hr_spacing_um: float = 50.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.hr_dims)
        object.__setattr__(self, "hr_dims", dims)
        if len(dims) != 3 or any(d <= 0 or d % 8 for d in dims):
            raise ValueError(f"hr_dims must be positive multiples of 8, got {dims}")
        if self.structure_scale <= 0:
            raise ValueError("structure_scale must be positive")


def spec_to_json(spec: PhantomSpec) -> str:
    return json.dumps(asdict(spec), indent=2)


def value_noise(shape, cell: float, rng: np.random.Generator, octaves: int = 3) -> np.ndarray:
    """Multi-octave lattice noise, standardized to zero mean / unit variance."""
    out = np.zeros(shape)
    amp = 1.0
    for o in range(octaves):
        step = max(cell / 2**o, 1.0)
        lattice_shape = [int(np.ceil(s / step)) + 4 for s in shape]
        lattice = rng.standard_normal(lattice_shape)
        coords = np.meshgrid(*[np.arange(s) / step + 1.5 for s in shape], indexing="ij")
        out += amp * ndimage.map_coordinates(lattice, coords, order=3, mode="nearest")
        amp *= 0.5
    return (out - out.mean()) / out.std()


def _hr_volume(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    nz, ny, nx = spec.hr_dims
    z, y, x = np.meshgrid(
        *[(np.arange(n) + 0.5) / n * 2 - 1 for n in (nz, ny, nx)], indexing="ij"
    )
    vol = np.full(spec.hr_dims, AIR_HU)

    body_r = rng.uniform(0.84, 0.92, size=2)
    body = (y / body_r[0]) ** 2 + (x / body_r[1]) ** 2 < 1.0
    vol[body] = TISSUE_HU + 15.0 * value_noise(spec.hr_dims, 4 * spec.structure_scale, rng, octaves=1)[body]

    lung = np.zeros(spec.hr_dims, dtype=bool)
    for side in (-1, 1):
        cz = rng.uniform(-0.1, 0.1)
        cy = rng.uniform(-0.1, 0.1)
        cx = side * rng.uniform(0.34, 0.42)
        rz, ry, rx = rng.uniform(0.55, 0.72), rng.uniform(0.45, 0.55), rng.uniform(0.24, 0.3)
        lung |= ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 < 1.0
    lung &= body

    texture = value_noise(spec.hr_dims, spec.structure_scale, rng)
    wall_width = rng.uniform(0.25, 0.35)
    walls = np.abs(texture) < wall_width
    alveoli = AIR_HU + 80.0 + 30.0 * value_noise(spec.hr_dims, 2 * spec.structure_scale, rng, octaves=1)
    parenchyma = np.where(walls, -60.0 + 40.0 * texture, alveoli)

    # tumour-like solid nodules inside the lung
    centres = np.argwhere(lung)
    for _ in range(int(rng.integers(1, 4))):
        c = centres[rng.integers(len(centres))]
        r = rng.uniform(1.0, 2.0) * spec.structure_scale
        blob = (
            ((np.arange(nz)[:, None, None] - c[0]) ** 2)
            + ((np.arange(ny)[None, :, None] - c[1]) ** 2)
            + ((np.arange(nx)[None, None, :] - c[2]) ** 2)
        ) < r * r
        parenchyma = np.where(blob, TISSUE_HU + 20.0, parenchyma)

    vol[lung] = parenchyma[lung]
    return vol


def _apply_gap(lr: np.ndarray, gap: ModalityGap, rng: np.random.Generator) -> np.ndarray:
    if gap.blur_sigma > 0:
        lr = ndimage.gaussian_filter(lr, gap.blur_sigma, mode="reflect")
    if gap.contrast_gamma != 0:
        lo, hi = _GAMMA_WINDOW
        u = np.clip((lr - lo) / (hi - lo), 0.0, 1.0)
        lr = lo + (hi - lo) * u ** (2.0 ** gap.contrast_gamma)
    if gap.noise_sigma > 0:
        lr = lr + rng.normal(0.0, gap.noise_sigma, size=lr.shape)
    if gap.intensity_shift != 0:
        lr = lr + gap.intensity_shift
    return lr


def generate_phantom_pair(
    spec: PhantomSpec, pyramid: PyramidSpec = PyramidSpec()
) -> tuple[Volume, Volume]:
    """Build the (high-res, low-res) phantom pair, fully determined by ``spec``."""
    if pyramid.factor != 8:
        raise ValueError("phantom pairs are defined for an 8x pyramid")
    rng = np.random.default_rng(spec.seed)
    hr = _hr_volume(spec, rng).astype(np.float32)
    # downsample the stored float32 volume so a zero gap reproduces it exactly
    lr = gaussian_downsample(hr, pyramid, ndim=3)
    if spec.gap != ModalityGap.zero():
        lr = _apply_gap(lr.astype(np.float64), spec.gap, np.random.default_rng([spec.seed, 1])).astype(np.float32)
    s = spec.hr_spacing_um
    tag = f"phantom{spec.seed}"
    return (
        Volume(hr, (s, s, s), "phantom_hr", volume_id=f"{tag}_hr"),
        Volume(lr, (8 * s, 8 * s, 8 * s), "phantom_lr", volume_id=f"{tag}_lr"),
    )
