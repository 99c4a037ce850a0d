"""Two-branch local feature module and the cross-modal fusion step."""
import copy
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import init_weights
from .errors import ConfigError, ValidationError
from .neighborhood import dense_attention, neighborhood_attention


@dataclass(frozen=True)
class NatConfig:
    window: int = 7
    heads: int = 2
    head_dim: int = 16

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be an odd positive integer, got {self.window}")
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigError("heads and head_dim must be positive")

    @property
    def channels(self):
        return self.heads * self.head_dim


class DetailSalience(nn.Module):
    """Conv, then a dual-pooling channel gate added onto a residual branch."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.channels = channels
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        init_weights(self)

    def gates(self, fc):
        pooled = (F.avg_pool2d(fc, 3, stride=1, padding=1, count_include_pad=False)
                  + F.max_pool2d(fc, 3, stride=1, padding=1))
        g = pooled.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(g))))

    def forward(self, f):
        if f.size(1) != self.channels:
            raise ConfigError(f"DSM built for {self.channels} channels, got {f.size(1)}")
        fc = self.conv(f)
        w = self.gates(fc)[:, :, None, None]
        return w * fc + fc


class NeighborhoodAttention2d(nn.Module):
    def __init__(self, channels, cfg=NatConfig()):
        super().__init__()
        if cfg.channels != channels:
            raise ConfigError(
                f"heads * head_dim = {cfg.channels} must equal channel width {channels}")
        self.cfg = cfg
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        init_weights(self)

    def _heads(self, f):
        B, C, H, W = f.shape
        h, d = self.cfg.heads, self.cfg.head_dim
        qkv = self.qkv(f).view(B, 3, h, d, H, W).permute(1, 0, 2, 4, 5, 3)
        q, k, v = (t.reshape(B * h, H, W, d) for t in qkv)
        return q * d ** -0.5, k, v

    def _merge(self, out, f):
        B, C, H, W = f.shape
        out = out.view(B, self.cfg.heads, H, W, self.cfg.head_dim).permute(0, 1, 4, 2, 3)
        return self.proj(out.reshape(B, C, H, W))

    def forward(self, f, return_weights=False, backend=None):
        q, k, v = self._heads(f)
        out, attn = neighborhood_attention(q, k, v, self.cfg.window, backend=backend)
        out = self._merge(out, f)
        return (out, attn) if return_weights else out

    def dense(self, f):
        """Global self-attention with the same projections (reference path)."""
        q, k, v = self._heads(f)
        out, _ = dense_attention(q, k, v)
        return self._merge(out, f)


class LocalSignificant(nn.Module):
    """Parallel NAT (detail) and DSM (salient) branches over one feature map."""

    def __init__(self, channels, nat_cfg=NatConfig(), dsm_reduction=4, use_dsm=True):
        super().__init__()
        self.use_dsm = use_dsm
        self.nat = NeighborhoodAttention2d(channels, nat_cfg)
        # kept even when bypassed so ablations share one parameter layout
        self.dsm = DetailSalience(channels, dsm_reduction)

    def forward(self, fB):
        salient = self.dsm(fB) if self.use_dsm else fB
        return BranchPair(detail=self.nat(fB), salient=salient)


@dataclass
class BranchPair:
    detail: torch.Tensor
    salient: torch.Tensor

    def __post_init__(self):
        if self.detail.shape != self.salient.shape:
            raise ValidationError("branch outputs must share batch and spatial dims")

    def zeros_like(self):
        return BranchPair(torch.zeros_like(self.detail), torch.zeros_like(self.salient))


class FusionLayer(nn.Module):
    """Per-modality LSM split followed by the summed second pass.

    With ``crossed=True`` the summed detail features go through DSM and
    the summed salient features through NAT; ``crossed=False`` keeps each
    sum on its own branch type.
    """

    def __init__(self, channels=32, nat_cfg=None, dsm_reduction=4, use_dsm=True,
                 share_lsm=True, crossed=True):
        super().__init__()
        nat_cfg = nat_cfg or NatConfig(head_dim=channels // 2)
        self.crossed = crossed
        self.use_dsm = use_dsm
        self.lsm_ir = LocalSignificant(channels, nat_cfg, dsm_reduction, use_dsm)
        self.lsm_vis = self.lsm_ir if share_lsm else copy.deepcopy(self.lsm_ir)
        self.post_dsm = DetailSalience(channels, dsm_reduction)
        self.post_nat = NeighborhoodAttention2d(channels, nat_cfg)
        if not share_lsm:
            init_weights(self.lsm_vis)

    def lsm_split(self, fB, modality="ir"):
        return (self.lsm_ir if modality == "ir" else self.lsm_vis)(fB)

    def fuse_features(self, ir, vis):
        if ir.detail.shape != vis.detail.shape:
            raise ValidationError(
                f"modality shapes differ: {tuple(ir.detail.shape)} vs {tuple(vis.detail.shape)}")
        detail_sum = ir.detail + vis.detail
        salient_sum = ir.salient + vis.salient
        dsm = self.post_dsm if self.use_dsm else (lambda t: t)
        if self.crossed:
            return dsm(detail_sum), self.post_nat(salient_sum)
        return self.post_nat(detail_sum), dsm(salient_sum)

    def forward(self, f_ir, f_vis):
        return self.fuse_features(self.lsm_split(f_ir, "ir"), self.lsm_split(f_vis, "vis"))
