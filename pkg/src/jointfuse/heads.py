"""Small detection and segmentation heads used as loss providers.

They stand in for full detectors/segmenters: a module with members
``det(images, annotations) -> list of (K_i, 4) tensors`` and
``seg(images) -> (B, C, H, W) logits`` can replace them (see the
``heads`` config key).
"""
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import init_weights
from .errors import ValidationError


def _conv_stack(widths):
    layers = []
    for cin, cout in zip(widths[:-1], widths[1:]):
        layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.SiLU()]
    return nn.Sequential(*layers)


def box_masks(boxes, height, width, dtype=torch.float32):
    """Binary (K, H, W) masks of the pixel centres inside each normalized
    xyxy box; a box smaller than a pixel still covers its centre pixel."""
    boxes = torch.as_tensor(boxes, dtype=torch.float64).reshape(-1, 4)
    ys = (torch.arange(height, dtype=torch.float64) + 0.5) / height
    xs = (torch.arange(width, dtype=torch.float64) + 0.5) / width
    inside_y = (ys[None] >= boxes[:, 1:2]) & (ys[None] <= boxes[:, 3:4])
    inside_x = (xs[None] >= boxes[:, 0:1]) & (xs[None] <= boxes[:, 2:3])
    m = inside_y[:, :, None] & inside_x[:, None, :]
    for i in range(m.shape[0]):
        if not m[i].any():
            cy = min(int(((boxes[i, 1] + boxes[i, 3]) / 2) * height), height - 1)
            cx = min(int(((boxes[i, 0] + boxes[i, 2]) / 2) * width), width - 1)
            m[i, cy, cx] = True
    return m.to(dtype)


def coord_channels(images):
    """Append normalized x and y pixel-centre coordinates as two channels."""
    B, _, H, W = images.shape
    ys = (torch.arange(H, dtype=images.dtype, device=images.device) + 0.5) / H
    xs = (torch.arange(W, dtype=images.dtype, device=images.device) + 0.5) / W
    grid = torch.stack(torch.meshgrid(xs, ys, indexing="xy"))
    return torch.cat([images, grid.expand(B, 2, H, W)], dim=1)


class DetectionHead(nn.Module):
    """Coordinate-aware conv backbone, per-box average pooling and a
    linear regressor emitting one normalized xyxy box per object."""

    def __init__(self, width=16):
        super().__init__()
        self.backbone = _conv_stack([3, width, width, width])
        self.regress = nn.Linear(width, 4)
        init_weights(self)

    def forward(self, images, annotations):
        if images.dim() != 4 or images.size(1) != 1:
            raise ValidationError(f"detection head expects (B, 1, H, W), got {tuple(images.shape)}")
        if len(annotations) != images.size(0):
            raise ValidationError("one annotation set per image required")
        feats = self.backbone(coord_channels(images))
        _, _, H, W = feats.shape
        preds = []
        for b, ann in enumerate(annotations):
            targets = torch.as_tensor(ann.targets, dtype=feats.dtype)
            if len(targets) == 0:
                preds.append(feats.new_zeros(0, 4))
                continue
            m = box_masks(targets, H, W, feats.dtype)
            pooled = torch.einsum("khw,chw->kc", m, feats[b]) / m.sum(dim=(1, 2))[:, None]
            preds.append(self.regress(pooled))
        return preds


class SegmentationHead(nn.Module):
    def __init__(self, class_count, width=16):
        super().__init__()
        self.class_count = class_count
        self.backbone = _conv_stack([1, width, width])
        self.classify = nn.Conv2d(width, class_count, 3, padding=1)
        init_weights(self)

    def forward(self, images):
        if images.dim() != 4 or images.size(1) != 1:
            raise ValidationError(f"segmentation head expects (B, 1, H, W), got {tuple(images.shape)}")
        return self.classify(self.backbone(images))


def freeze(module):
    """Stop parameter updates; gradients still flow to the inputs."""
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def unfreeze(module):
    for p in module.parameters():
        p.requires_grad_(True)
    module.train()
    return module
