from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import SplitAttentionBlock, SplitAttentionConfig, init_weights
from .errors import ValidationError


def rms_normalize(x, eps=1e-12):
    """Divide each sample by its root-mean-square activation."""
    return x * torch.rsqrt(x.pow(2).mean(dim=(1, 2, 3), keepdim=True) + eps)


class MetaSpatialAttention(nn.Module):
    """Spatial gate whose conv kernel is generated per sample.

    A small conditioning MLP maps per-channel mean/std statistics of the
    input to the weights and bias of a 1-output-channel conv; the gate is
    the sigmoid of that conv.
    """

    def __init__(self, channels, hidden=32, kernel_size=3, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.kernel_size = kernel_size
        self.eps = eps
        self.hyper = nn.Sequential(
            nn.Linear(2 * channels, hidden),
            nn.ReLU(),
            nn.Linear(hidden, channels * kernel_size ** 2 + 1),
        )
        init_weights(self)
        nn.init.normal_(self.hyper[2].weight, std=hidden ** -0.5)

    def generate(self, f):
        mean = f.mean(dim=(2, 3))
        std = torch.sqrt(f.var(dim=(2, 3), unbiased=False) + self.eps)
        params = self.hyper(torch.cat([mean, std], dim=1))
        B, k = f.size(0), self.kernel_size
        # fan-in scaling keeps the generated logits O(1) like a regular conv
        weight = params[:, :-1].reshape(B, self.channels, k, k) * (self.channels * k * k) ** -0.5
        return weight, params[:, -1]

    def forward(self, f):
        B, C, H, W = f.shape
        # the gate sees a scale-free copy so its logits stay O(1)
        x = rms_normalize(f)
        weight, bias = self.generate(x)
        logits = F.conv2d(x.reshape(1, B * C, H, W), weight, bias,
                          padding=self.kernel_size // 2, groups=B)
        gate = torch.sigmoid(logits).view(B, 1, H, W)
        return gate * f, gate[:, 0]


@dataclass
class DecodeOutput:
    fused: torch.Tensor      # (B, 1, H, W) in [0, 1]
    attention: torch.Tensor  # (B, H, W) gate values


class BaseDecoder(nn.Module):
    def __init__(self, channels=32, blocks=2, radix=2, cardinality=1, reduction=4, hyper_hidden=32):
        super().__init__()
        self.attention = MetaSpatialAttention(channels, hyper_hidden)
        cfg = SplitAttentionConfig(channels, radix, cardinality, reduction)
        self.blocks = nn.Sequential(*[SplitAttentionBlock(cfg) for _ in range(blocks)])
        self.head = nn.Conv2d(channels, 1, 3, padding=1)
        init_weights(self.blocks)
        init_weights(self.head)

    def forward(self, fd, fn):
        if fd.shape != fn.shape:
            raise ValidationError(f"decoder inputs differ: {tuple(fd.shape)} vs {tuple(fn.shape)}")
        gated, att = self.attention(fd + fn)
        # the diversity loss lowers the gate's overall level; only its
        # spatial pattern should matter for the reconstruction
        fused = torch.sigmoid(self.head(self.blocks(rms_normalize(gated))))
        return DecodeOutput(fused, att)
