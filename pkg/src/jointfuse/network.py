import copy
from dataclasses import dataclass, fields

import torch
from torch import nn

from .decoder import BaseDecoder
from .encoder import BaseEncoder, init_weights
from .fusion import FusionLayer, NatConfig


@dataclass
class NetConfig:
    channels: int = 32
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    radix: int = 2
    cardinality: int = 1
    reduction: int = 4
    nat_window: int = 7
    nat_heads: int = 2
    dsm_reduction: int = 4
    hyper_hidden: int = 32
    use_dsm: bool = True
    share_encoder: bool = True
    share_lsm: bool = True
    crossed: bool = True

    @classmethod
    def from_mapping(cls, values):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})


@dataclass
class FusionOutput:
    fused: torch.Tensor
    attention: torch.Tensor
    recon_ir: torch.Tensor = None
    recon_vis: torch.Tensor = None


class FusionNet(nn.Module):
    """Encoder, two-branch fusion layer and decoder for IR / visible-luma pairs."""

    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or NetConfig()
        self.cfg = cfg
        C = cfg.channels
        self.encoder_ir = BaseEncoder(C, cfg.encoder_blocks, cfg.radix, cfg.cardinality, cfg.reduction)
        if cfg.share_encoder:
            self.encoder_vis = self.encoder_ir
        else:
            self.encoder_vis = copy.deepcopy(self.encoder_ir)
            init_weights(self.encoder_vis)
        nat_cfg = NatConfig(cfg.nat_window, cfg.nat_heads, C // cfg.nat_heads)
        self.fusion = FusionLayer(C, nat_cfg, cfg.dsm_reduction, cfg.use_dsm, cfg.share_lsm, cfg.crossed)
        self.decoder = BaseDecoder(C, cfg.decoder_blocks, cfg.radix, cfg.cardinality,
                                   cfg.reduction, cfg.hyper_hidden)

    def encode(self, ir, vis_y):
        return self.encoder_ir(ir), self.encoder_vis(vis_y)

    def forward(self, ir, vis_y, reconstruct=True):
        f_ir, f_vis = self.encode(ir, vis_y)
        b_ir = self.fusion.lsm_split(f_ir, "ir")
        b_vis = self.fusion.lsm_split(f_vis, "vis")
        out = self.decoder(*self.fusion.fuse_features(b_ir, b_vis))
        result = FusionOutput(out.fused, out.attention)
        if reconstruct:
            # each source alone through the same fusion/decoder path
            result.recon_ir = self.decoder(*self.fusion.fuse_features(b_ir, b_ir.zeros_like())).fused
            result.recon_vis = self.decoder(*self.fusion.fuse_features(b_vis.zeros_like(), b_vis)).fused
        return result

    @torch.no_grad()
    def fuse(self, ir, vis_y):
        return self.forward(ir, vis_y, reconstruct=False).fused

    def dsm_parameters(self):
        return [p for name, p in self.named_parameters() if ".dsm." in name or "post_dsm" in name]
