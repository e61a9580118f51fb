"""Generator and discriminator architectures for both stages.

All networks take single-channel images shaped ``(N, 1, H, W)`` in [-1, 1].
Generators end in ``tanh``; discriminators end in a sigmoid and emit one
score per image, shape ``(N,)``.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from torch import nn

__all__ = [
    "ResidualBlock",
    "TranslationGenerator",
    "PatchDiscriminator",
    "SrGenerator",
    "SrDiscriminator",
    "weights_fingerprint",
]


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, norm: bool = True):
        super().__init__()
        layers = [nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect")]
        if norm:
            layers.append(nn.InstanceNorm2d(channels, affine=True))
        layers += [nn.ReLU(inplace=True), nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect")]
        if norm:
            layers.append(nn.InstanceNorm2d(channels, affine=True))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.body(x)


class TranslationGenerator(nn.Module):
    """Resolution-preserving residual FCN used for G1 and G2.

    ``n_blocks=0`` collapses to conv -> ReLU -> conv -> tanh, the 2-layer
    instantiation used for gradient checks.
    """

    def __init__(self, width: int = 32, n_blocks: int = 6, norm: bool = True):
        super().__init__()
        self.head = nn.Sequential(nn.Conv2d(1, width, 3, padding=1, padding_mode="reflect"), nn.ReLU(inplace=True))
        self.blocks = nn.Sequential(*[ResidualBlock(width, norm) for _ in range(n_blocks)])
        self.tail = nn.Conv2d(width, 1, 3, padding=1, padding_mode="reflect")

    def forward(self, x):
        return torch.tanh(self.tail(self.blocks(self.head(x))))


class PatchDiscriminator(nn.Module):
    """Strided conv stack scoring local patches; the patch logits are averaged
    before the sigmoid so each image gets one score."""

    def __init__(self, width: int = 32, n_down: int = 4):
        super().__init__()
        layers: list[nn.Module] = []
        ch_in = 1
        for k in range(n_down):
            ch_out = width * 2 ** min(k, 3)
            layers += [nn.Conv2d(ch_in, ch_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            ch_in = ch_out
        layers.append(nn.Conv2d(ch_in, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return torch.sigmoid(self.net(x).mean(dim=(1, 2, 3)))


class SrGenerator(nn.Module):
    """Residual trunk followed by three x2 sub-pixel stages (x8 overall)."""

    upscale_factor = 8

    def __init__(self, width: int = 64, n_blocks: int = 8):
        super().__init__()
        self.head = nn.Sequential(nn.Conv2d(1, width, 3, padding=1, padding_mode="reflect"), nn.PReLU(width))
        self.blocks = nn.Sequential(*[ResidualBlock(width, norm=False) for _ in range(n_blocks)])
        self.fuse = nn.Conv2d(width, width, 3, padding=1, padding_mode="reflect")
        ups: list[nn.Module] = []
        for _ in range(3):
            ups += [nn.Conv2d(width, 4 * width, 3, padding=1, padding_mode="reflect"), nn.PixelShuffle(2), nn.PReLU(width)]
        self.upsample = nn.Sequential(*ups)
        self.tail = nn.Conv2d(width, 1, 3, padding=1, padding_mode="reflect")

    def forward(self, x):
        h = self.head(x)
        h = h + self.fuse(self.blocks(h))
        return torch.tanh(self.tail(self.upsample(h)))


class SrDiscriminator(nn.Module):
    def __init__(self, width: int = 32, n_down: int = 4):
        super().__init__()
        layers: list[nn.Module] = []
        ch_in = 1
        for k in range(n_down):
            ch_out = width * 2 ** min(k, 3)
            layers += [nn.Conv2d(ch_in, ch_out, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            ch_in = ch_out
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(ch_in, 1)

    def forward(self, x):
        h = self.features(x).mean(dim=(2, 3))
        return torch.sigmoid(self.head(h)).squeeze(1)


def weights_fingerprint(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        arr = t.detach().cpu().contiguous().numpy()
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
