"""Fusion, detection and segmentation losses combined into the total objective."""
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class LossConfig:
    alpha1: float = 0.1  # diversity
    alpha2: float = 6.0  # infrared reconstruction
    alpha3: float = 1.0  # visible reconstruction
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ConfigError("ssim_window must be odd")


@dataclass
class LossBreakdown:
    ssim: float
    div: float
    mse_ir: float
    mse_vis: float
    mff: float
    det: float
    seg: float
    total: float
    det_ir: float = 0.0
    det_vis: float = 0.0
    det_fused: float = 0.0

    FIELDS = ("ssim", "div", "mse_ir", "mse_vis", "mff", "det", "seg", "total",
              "det_ir", "det_vis", "det_fused")

    @classmethod
    def from_parts(cls, cfg, ssim, div, mse_ir, mse_vis, det_ir=0.0, det_vis=0.0, det_fused=0.0, seg=0.0):
        # python float (binary64) arithmetic so the identities hold to rounding
        mff = mff_loss(div, ssim, mse_ir, mse_vis, cfg)
        det = detection_loss_total(det_ir, det_vis, det_fused)
        return cls(ssim, div, mse_ir, mse_vis, mff, det, seg, total_loss(mff, det, seg),
                   det_ir, det_vis, det_fused)

    def as_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# structural similarity

def gaussian_kernel1d(size, sigma, dtype=torch.float64):
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    return (g / g.sum()).to(dtype)


def _window_mean(x, kernel):
    """Gaussian-weighted local mean; the window is truncated at the border
    and its weights renormalised over in-image pixels."""
    k = kernel.numel()
    kh = kernel.view(1, 1, k, 1)
    kw = kernel.view(1, 1, 1, k)
    def blur(t):
        t = F.conv2d(t, kh, padding=(k // 2, 0))
        return F.conv2d(t, kw, padding=(0, k // 2))
    ones = torch.ones((1, 1) + x.shape[2:], dtype=x.dtype, device=x.device)
    return blur(x) / blur(ones)


def ssim_map(a, b, cfg=LossConfig()):
    """Local SSIM for (B, 1, H, W) tensors."""
    kernel = gaussian_kernel1d(cfg.ssim_window, cfg.ssim_sigma, a.dtype).to(a.device)
    mu_a, mu_b = _window_mean(a, kernel), _window_mean(b, kernel)
    var_a = _window_mean(a * a, kernel) - mu_a ** 2
    var_b = _window_mean(b * b, kernel) - mu_b ** 2
    cov = _window_mean(a * b, kernel) - mu_a * mu_b
    c1, c2 = cfg.ssim_c1, cfg.ssim_c2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, cfg=LossConfig()):
    return ssim_map(_as4d(a), _as4d(b), cfg).mean()


def ssim_loss(fused, ir, vis_y, cfg=LossConfig()):
    if not fused.shape == ir.shape == vis_y.shape:
        raise ValidationError(
            f"shape mismatch: {tuple(fused.shape)}, {tuple(ir.shape)}, {tuple(vis_y.shape)}")
    return 0.5 * (1 - ssim(fused, ir, cfg)) + 0.5 * (1 - ssim(fused, vis_y, cfg))


def _as4d(x):
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x


# ---------------------------------------------------------------------------
# attention diversity

def diversity_loss(att):
    """Diversity penalty of an (m, n) attention matrix, or the batch mean
    over a stack of them."""
    if att.numel() == 0:
        raise ValidationError("attention matrix is empty")
    if att.dim() == 2:
        att = att[None]
    per_row = 1 - att.max(dim=-1).values
    loss = -per_row.mean(dim=-1) + att.mean(dim=(-2, -1))
    return loss.mean()


# ---------------------------------------------------------------------------
# reconstruction

def mse(a, b):
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def reconstruction_losses(ir, recon_ir, vis_y, recon_vis):
    return mse(ir, recon_ir), mse(vis_y, recon_vis)


def mff_loss(div, ssim_value, mse_ir, mse_vis, cfg=LossConfig()):
    return cfg.alpha1 * div + ssim_value + cfg.alpha2 * mse_ir + cfg.alpha3 * mse_vis


# ---------------------------------------------------------------------------
# detection

def smooth_l1(x, beta=1.0):
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * x ** 2 / beta, ax - 0.5 * beta)


def detection_regression_loss(pred, classes, targets):
    """Smooth-L1 box regression over foreground objects.

    ``pred`` and ``targets`` are (K, 4) aligned row by row with ``classes``
    (K,); rows with class 0 are background and contribute nothing. The sum
    is divided by the number of foreground objects.
    """
    classes = torch.as_tensor(classes, dtype=torch.int64)
    targets = torch.as_tensor(targets, dtype=pred.dtype, device=pred.device)
    if pred.shape != targets.shape or pred.shape[:1] != classes.shape:
        raise ValidationError(
            f"{tuple(pred.shape)} predictions vs {tuple(targets.shape)} targets, {len(classes)} classes")
    fg = classes >= 1
    n_fg = int(fg.sum())
    if n_fg == 0:
        return pred.new_zeros(()) + 0.0 * pred.sum()  # +0.0, graph kept
    per_obj = smooth_l1(pred - targets).sum(dim=1)
    return (per_obj * fg.to(pred.dtype)).sum() / n_fg


def detection_loss_total(loss_ir, loss_vis, loss_fused):
    return loss_ir + loss_vis + loss_fused


# ---------------------------------------------------------------------------
# segmentation

def segmentation_loss(logits, mask):
    """Mean per-pixel cross-entropy; ``logits`` is (B, C, H, W) or (C, H, W)."""
    if logits.dim() == 3:
        logits, mask = logits[None], mask[None]
    mask = torch.as_tensor(mask, dtype=torch.int64, device=logits.device)
    C = logits.size(1)
    if mask.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValidationError(f"mask {tuple(mask.shape)} does not match logits {tuple(logits.shape)}")
    if mask.numel() and (mask.min() < 0 or mask.max() >= C):
        raise ValidationError(f"mask index outside [0, {C})")
    logp = torch.log_softmax(logits, dim=1)
    return -logp.gather(1, mask[:, None]).mean()


def total_loss(mff, det, seg):
    return mff + det + seg
