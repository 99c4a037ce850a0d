from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class SplitAttentionConfig:
    channels: int = 32
    radix: int = 2
    cardinality: int = 1
    reduction: int = 4

    def __post_init__(self):
        for name in ("channels", "radix", "cardinality", "reduction"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.channels % self.cardinality:
            raise ConfigError(
                f"channels ({self.channels}) not divisible by cardinality ({self.cardinality})")

    @property
    def inter_channels(self):
        inter = max(self.channels * self.radix // self.reduction, 8)
        return -(-inter // self.cardinality) * self.cardinality


def init_weights(module):
    """Fan-in Kaiming for conv/linear weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class RadixSoftmax(nn.Module):
    def __init__(self, radix, cardinality):
        super().__init__()
        self.radix = radix
        self.cardinality = cardinality

    def forward(self, x):
        # x: (B, cardinality * radix * C/card) laid out cardinal-major
        batch = x.size(0)
        if self.radix > 1:
            x = x.view(batch, self.cardinality, self.radix, -1)
            return F.softmax(x, dim=2).reshape(batch, -1)
        return torch.sigmoid(x)


class SplitAttentionBlock(nn.Module):
    """Stride-1 split-attention residual block.

    ``out = x + scale * sum_r a_r * U_r`` where ``U_r`` are the radix splits
    of a grouped 3x3 conv and ``a_r`` the per-channel radix weights. The
    learnable ``scale`` starts at zero so a fresh block is the identity.
    """

    def __init__(self, cfg=SplitAttentionConfig()):
        super().__init__()
        self.cfg = cfg
        C, r, g = cfg.channels, cfg.radix, cfg.cardinality
        self.conv = nn.Conv2d(C, C * r, 3, padding=1, groups=g)
        self.act = nn.SiLU()
        self.fc1 = nn.Conv2d(C, cfg.inter_channels, 1, groups=g)
        self.fc2 = nn.Conv2d(cfg.inter_channels, C * r, 1, groups=g)
        self.rsoftmax = RadixSoftmax(r, g)
        self.scale = nn.Parameter(torch.zeros(1, C, 1, 1))
        init_weights(self)

    def radix_weights(self, x):
        u = self.act(self.conv(x))
        B, _, H, W = u.shape
        cfg = self.cfg
        u = u.view(B, cfg.cardinality, cfg.radix, cfg.channels // cfg.cardinality, H, W)
        gap = u.sum(dim=2).mean(dim=(3, 4)).reshape(B, cfg.channels, 1, 1)
        a = self.fc2(F.relu(self.fc1(gap)))
        a = self.rsoftmax(a.flatten(1))
        return u, a.view(B, cfg.cardinality, cfg.radix, -1, 1, 1)

    def forward(self, x):
        if x.dim() != 4 or x.size(1) != self.cfg.channels:
            raise ConfigError(f"expected (B, {self.cfg.channels}, H, W) input, got {tuple(x.shape)}")
        u, a = self.radix_weights(x)
        agg = (u * a).sum(dim=2).reshape_as(x)
        return x + self.scale * agg


class BaseEncoder(nn.Module):
    """Stem conv, split-attention stack, one 3x3 refinement conv."""

    def __init__(self, channels=32, blocks=2, radix=2, cardinality=1, reduction=4):
        super().__init__()
        cfg = SplitAttentionConfig(channels, radix, cardinality, reduction)
        self.stem = nn.Sequential(nn.Conv2d(1, channels, 3, padding=1), nn.SiLU())
        self.blocks = nn.Sequential(*[SplitAttentionBlock(cfg) for _ in range(blocks)])
        self.refine = nn.Conv2d(channels, channels, 3, padding=1)
        init_weights(self)

    def forward(self, image):
        if image.dim() == 2:
            image = image[None, None]
        if image.dim() != 4 or image.size(1) != 1:
            raise ValidationError(f"encoder expects single-channel input, got {tuple(image.shape)}")
        if not torch.isfinite(image).all():
            raise ValidationError("encoder input contains non-finite values")
        return self.refine(self.blocks(self.stem(image)))
