"""Joint optimisation of the fusion network under detection and
segmentation drivers, with plateau LR decay, checkpoints and ablations."""
import csv
import importlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .config import TrainConfig, format_config, parse_config
from .data import PairDataset, reattach_color, rgb_to_ycbcr
from .errors import NonFiniteLossError, ValidationError
from .heads import DetectionHead, SegmentationHead, freeze
from .losses import (LossBreakdown, detection_regression_loss, diversity_loss,
                     reconstruction_losses, segmentation_loss, ssim_loss)
from .metrics import evaluate_fused, format_table
from .network import FusionNet, NetConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr") + LossBreakdown.FIELDS


class TaskHeads(nn.Module):
    def __init__(self, class_count, width=16):
        super().__init__()
        self.det = DetectionHead(width)
        self.seg = SegmentationHead(class_count, width)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    lr: float = 0.001
    best_loss: float = math.inf
    plateau_count: int = 0
    best_epoch: int = -1


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def lr_schedule(state, epoch_loss, cfg):
    """Plateau rule: decay after ``plateau_patience`` epochs without an
    improvement of at least ``plateau_threshold`` on the best epoch loss."""
    if epoch_loss < state.best_loss - cfg.plateau_threshold:
        state.best_loss = epoch_loss
        state.plateau_count = 0
    else:
        state.plateau_count += 1
        if state.plateau_count >= cfg.plateau_patience:
            state.lr *= cfg.plateau_factor
            state.plateau_count = 0
    return state


def detection_loss(det_head, images, annotations):
    preds = det_head(images, annotations)
    classes = np.concatenate([a.classes for a in annotations])
    targets = np.concatenate([a.targets for a in annotations])
    return detection_regression_loss(torch.cat(preds), classes, targets)


def compute_losses(model, heads, batch, cfg):
    """Forward pass and every loss term; returns (total tensor, breakdown)."""
    out = model(batch.ir, batch.vis_y)
    lc = cfg.loss
    l_ssim = ssim_loss(out.fused, batch.ir, batch.vis_y, lc)
    l_div = diversity_loss(out.attention)
    mse_ir, mse_vis = reconstruction_losses(batch.ir, out.recon_ir, batch.vis_y, out.recon_vis)
    total = lc.alpha1 * l_div + l_ssim + lc.alpha2 * mse_ir + lc.alpha3 * mse_vis

    det_ir = det_vis = det_fused = seg = 0.0
    have_boxes = all(a is not None for a in batch.annotations)
    if cfg.use_det_loss and have_boxes:
        # the source-image terms are constant w.r.t. the fusion weights; they
        # stay tensors so the total is still differentiable in the inputs
        t_ir = detection_loss(heads.det, batch.ir, batch.annotations)
        t_vis = detection_loss(heads.det, batch.vis_y, batch.annotations)
        t_det = detection_loss(heads.det, out.fused, batch.annotations)
        det_ir, det_vis, det_fused = t_ir.item(), t_vis.item(), t_det.item()
        total = total + t_ir + t_vis + t_det
    if cfg.use_seg_loss and batch.masks is not None:
        t_seg = segmentation_loss(heads.seg(out.fused), batch.masks)
        seg = t_seg.item()
        total = total + t_seg

    parts = LossBreakdown.from_parts(lc, l_ssim.item(), l_div.item(), mse_ir.item(), mse_vis.item(),
                                     det_ir, det_vis, det_fused, seg)
    return total, parts


def train_step(model, heads, batch, state, optimizer, cfg):
    total, parts = compute_losses(model, heads, batch, cfg)
    if not math.isfinite(parts.total) or not torch.isfinite(total):
        raise NonFiniteLossError(f"non-finite loss {parts.as_dict()} on batch {batch.ids}", batch.ids)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    state.step += 1
    return state, parts


def warmup_heads(heads, dataset, cfg):
    """Fit the task heads on the source images, then freeze them."""
    if cfg.head_warmup_steps:
        opt = torch.optim.Adam(heads.parameters(), lr=cfg.head_lr)
        step, epoch = 0, 0
        while step < cfg.head_warmup_steps:
            for batch in dataset.batches(cfg.batch_size, epoch, cfg.seed + 1, cfg.shuffle):
                loss = 0.0
                for img in (batch.ir, batch.vis_y):
                    if all(a is not None for a in batch.annotations):
                        loss = loss + detection_loss(heads.det, img, batch.annotations)
                    if batch.masks is not None:
                        loss = loss + segmentation_loss(heads.seg(img), batch.masks)
                if not torch.is_tensor(loss):
                    return freeze(heads)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                step += 1
                if step >= cfg.head_warmup_steps:
                    break
            epoch += 1
    return freeze(heads)


def make_heads(cfg):
    """Toy heads, or an external plug-in named ``package.module:factory``.

    The factory is called as ``factory(class_count, width)`` and must return
    an ``nn.Module`` with ``det(images, annotations)`` and ``seg(images)``
    members following the toy heads' conventions.
    """
    if cfg.heads == "toy":
        return TaskHeads(cfg.class_count, cfg.head_width)
    mod_name, _, attr = cfg.heads.partition(":")
    factory = getattr(importlib.import_module(mod_name), attr)
    return factory(cfg.class_count, cfg.head_width)


def build(cfg):
    seed_everything(cfg.seed)
    model = FusionNet(cfg.net)
    heads = make_heads(cfg)
    return model, heads


def make_optimizer(model, cfg):
    return torch.optim.Adam([p for p in model.parameters() if p.requires_grad],
                            lr=cfg.lr, betas=(0.9, 0.999))


def save_checkpoint(path, model, heads, optimizer, state, cfg):
    arrays = {**ckpt.module_arrays(model, "model"), **ckpt.module_arrays(heads, "heads")}
    if optimizer is not None:
        arrays.update(ckpt.optimizer_arrays(optimizer))
    meta = {"net": asdict(cfg.net), "class_count": cfg.class_count, "head_width": cfg.head_width,
            "state": asdict(state), "config": format_config(cfg)}
    ckpt.save_arrays(path, arrays, meta)


def load_model(path):
    """Rebuild the fusion network (and heads) from an archive."""
    arrays, meta = ckpt.load_arrays(path)
    model = FusionNet(NetConfig.from_mapping(meta["net"]))
    ckpt.load_module(model, arrays, "model")
    heads = make_heads(parse_config(meta["config"]))
    ckpt.load_module(heads, arrays, "heads")
    return model.eval(), freeze(heads), meta


@dataclass
class TrainResult:
    out_dir: Path
    log_path: Path
    best_path: Path
    last_path: Path
    history: list = field(default_factory=list)
    state: TrainState = None


def _read_log(path, max_step):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh)]
    return rows[:1] + [r for r in rows[1:] if int(r[0]) <= max_step]


def run_training(dataset_or_manifest, cfg=None, out_dir="runs/train", resume=False, stop_after_epoch=None):
    """Warm up and freeze the heads, then train the fusion network.

    ``stop_after_epoch`` ends the run early after that many epochs (used to
    emulate an interruption); ``resume`` continues from ``last.ckpt``.
    """
    cfg = cfg or TrainConfig()
    dataset = dataset_or_manifest
    if not isinstance(dataset, PairDataset):
        dataset = PairDataset(dataset_or_manifest, cfg.class_count)
    if len(dataset) == 0:
        raise ValidationError("manifest lists no image pairs")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path, best_path, last_path = out_dir / "loss_log.csv", out_dir / "best.ckpt", out_dir / "last.ckpt"

    model, heads = build(cfg)
    state = TrainState(lr=cfg.lr)
    if resume and last_path.is_file():
        arrays, meta = ckpt.load_arrays(last_path)
        ckpt.load_module(model, arrays, "model")
        ckpt.load_module(heads, arrays, "heads")
        freeze(heads)
        state = TrainState(**meta["state"])
        optimizer = make_optimizer(model, cfg)
        ckpt.load_optimizer(optimizer, arrays)
        rows = _read_log(log_path, state.step)
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    else:
        warmup_heads(heads, dataset, cfg)
        optimizer = make_optimizer(model, cfg)
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_COLUMNS)
    (out_dir / "config.txt").write_text(format_config(cfg))

    history = []
    model.train()
    for epoch in range(state.epoch, cfg.epochs):
        for group in optimizer.param_groups:
            group["lr"] = state.lr
        totals = []
        for batch in dataset.batches(cfg.batch_size, epoch, cfg.seed, cfg.shuffle):
            try:
                state, parts = train_step(model, heads, batch, state, optimizer, cfg)
            except NonFiniteLossError as exc:
                dump = {"step": state.step, "epoch": epoch, "batch_ids": exc.batch_ids, "error": str(exc)}
                (out_dir / "nonfinite_dump.json").write_text(json.dumps(dump, indent=2))
                raise
            history.append(parts)
            totals.append(parts.total)
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([state.step, epoch, repr(state.lr)]
                                        + [repr(getattr(parts, k)) for k in LossBreakdown.FIELDS])
        epoch_loss = float(np.mean(totals))
        improved = epoch_loss < state.best_loss - cfg.plateau_threshold
        lr_schedule(state, epoch_loss, cfg)
        state.epoch = epoch + 1
        if improved:
            state.best_epoch = epoch
            save_checkpoint(best_path, model, heads, None, state, cfg)
        save_checkpoint(last_path, model, heads, optimizer, state, cfg)
        log.info("epoch %d loss %.5f lr %.2e", epoch, epoch_loss, state.lr)
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
            break
    return TrainResult(out_dir, log_path, best_path, last_path, history, state)


def read_loss_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# inference and ablation

def fuse_dataset(model, dataset):
    """Fused luminance per id as float64 arrays in [0, 1]."""
    model.eval()
    fused = {}
    for s in dataset.samples:
        ir = torch.as_tensor(s.ir, dtype=torch.float32)[None, None]
        vy = torch.as_tensor(s.vis_y, dtype=torch.float32)[None, None]
        fused[s.id] = model.fuse(ir, vy)[0, 0].double().numpy()
    return fused


def fuse_pair(model, pair):
    """Fuse one ImagePair; returns (fused luminance, colour image)."""
    y, cbcr = rgb_to_ycbcr(pair.visible)
    ir = torch.as_tensor(pair.infrared, dtype=torch.float32)[None, None]
    vy = torch.as_tensor(y, dtype=torch.float32)[None, None]
    fused_y = model.eval().fuse(ir, vy)[0, 0].double().numpy()
    return fused_y, reattach_color(fused_y, cbcr)


def evaluate_model(model, dataset):
    fused = fuse_dataset(model, dataset)
    rows = {s.id: evaluate_fused(fused[s.id], s.ir, s.vis_y) for s in dataset.samples}
    return {k: float(np.mean([r[k] for r in rows.values()])) for k in next(iter(rows.values()))}


ABLATIONS = (
    ("w/o DSM", "no_dsm", {"use_dsm": False}),
    ("w/o L_Det", "no_det", {"use_det_loss": False}),
    ("w/o L_Seg", "no_seg", {"use_seg_loss": False}),
    ("w/o L_Det,Seg", "no_det_seg", {"use_det_loss": False, "use_seg_loss": False}),
    ("Full model", "full", {}),
)
ABLATION_COLUMNS = ("ssim", "psnr", "mse", "cc", "cv")


@dataclass
class AblationResult:
    rows: dict
    table: str
    ssim_direction_holds: bool


def run_ablation(manifest, cfg=None, out_dir="runs/ablation", eval_manifest=None):
    cfg = cfg or TrainConfig()
    out_dir = Path(out_dir)
    train_set = PairDataset(manifest, cfg.class_count)
    eval_set = PairDataset(eval_manifest, cfg.class_count) if eval_manifest is not None else train_set
    rows = {}
    for label, slug, changes in ABLATIONS:
        result = run_training(train_set, cfg.variant(**changes), out_dir / slug)
        model, _, _ = load_model(result.best_path)
        rows[label] = evaluate_model(model, eval_set)
    holds = rows["Full model"]["ssim"] >= rows["w/o L_Det,Seg"]["ssim"]
    table = format_table(list(rows.items()), ABLATION_COLUMNS, title="Ablation")
    table += ("\nfull-model SSIM >= w/o L_Det,Seg SSIM: " + ("yes" if holds else "no (soft expectation)"))
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("variant",) + ABLATION_COLUMNS)
        for label, vals in rows.items():
            w.writerow([label] + [repr(vals[c]) for c in ABLATION_COLUMNS])
    (out_dir / "ablation.txt").write_text(table + "\n")
    return AblationResult(rows, table, holds)
