import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from jointfuse import trainer
from jointfuse.config import TrainConfig
from jointfuse.data import DatasetManifest, PairDataset
from jointfuse.errors import ConfigError, FormatError, NonFiniteLossError, ValidationError
from jointfuse.losses import LossBreakdown, LossConfig
from jointfuse.network import FusionOutput, NetConfig
from jointfuse.trainer import (TrainState, build, compute_losses, detection_loss, fuse_pair,
                               load_model, lr_schedule, read_loss_log, run_training, warmup_heads)

TINY_NET = NetConfig(channels=8, encoder_blocks=1, decoder_blocks=1, nat_heads=2, hyper_hidden=8)


def tiny(**kw):
    base = dict(epochs=2, batch_size=2, head_warmup_steps=4, head_width=4, net=TINY_NET)
    base.update(kw)
    return TrainConfig(**base)


def _schedule(losses, **kw):
    cfg = TrainConfig(lr=1e-3, **kw)
    state = TrainState(lr=cfg.lr)
    for v in losses:
        lr_schedule(state, v, cfg)
    return state.lr


def test_lr_schedule_examples():
    assert _schedule([1, 0.9, 0.8]) == 1e-3
    assert _schedule([1, 1, 1, 1]) == pytest.approx(1e-4, rel=1e-12)
    assert _schedule([1, 1.1, 0.9, 1.1, 1.1]) == 1e-3
    # counter restarts after a decay
    assert _schedule([1] * 6) == pytest.approx(1e-4, rel=1e-12)
    assert _schedule([1] * 7) == pytest.approx(1e-5, rel=1e-12)
    # improvements smaller than the threshold do not count
    assert _schedule([1, 1 - 5e-5, 1 - 9e-5, 1 - 9.9e-5]) == pytest.approx(1e-4, rel=1e-12)


def test_config_rejects_zero_epochs():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)


def test_empty_manifest_rejected(tmp_path):
    manifest = DatasetManifest(tmp_path, "train", [])
    with pytest.raises(ValidationError):
        run_training(manifest, tiny(), tmp_path / "out")


def _log_values(path):
    return [[r[k] for k in r] for r in read_loss_log(path)]


def test_determinism_and_log_arithmetic(small_manifest, tmp_path):
    a = run_training(small_manifest, tiny(), tmp_path / "a")
    b = run_training(small_manifest, tiny(), tmp_path / "b")
    assert a.log_path.read_bytes() == b.log_path.read_bytes()
    rows = read_loss_log(a.log_path)
    assert len(rows) == 4  # 2 epochs x ceil(3 / 2) batches
    lc = LossConfig()
    for r in rows:
        v = {k: float(r[k]) for k in LossBreakdown.FIELDS}
        mff = lc.alpha1 * v["div"] + v["ssim"] + lc.alpha2 * v["mse_ir"] + lc.alpha3 * v["mse_vis"]
        assert math.isclose(v["mff"], mff, rel_tol=1e-9)
        assert math.isclose(v["det"], v["det_ir"] + v["det_vis"] + v["det_fused"], rel_tol=1e-9)
        assert math.isclose(v["total"], v["mff"] + v["det"] + v["seg"], rel_tol=1e-9)


def test_resume_matches_uninterrupted(small_manifest, tmp_path):
    cfg = tiny(epochs=3)
    full = run_training(small_manifest, cfg, tmp_path / "full")
    part = run_training(small_manifest, cfg, tmp_path / "part", stop_after_epoch=1)
    assert part.state.epoch == 1
    resumed = run_training(small_manifest, cfg, tmp_path / "part", resume=True)
    assert resumed.state.step == full.state.step
    assert full.log_path.read_bytes() == resumed.log_path.read_bytes()
    m1, _, _ = load_model(full.last_path)
    m2, _, _ = load_model(resumed.last_path)
    for p, q in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p, q)


def test_heads_frozen_during_training(small_manifest, tmp_path):
    cfg = tiny(epochs=1)
    dataset = PairDataset(small_manifest, cfg.class_count)
    _, heads = build(cfg)
    warmup_heads(heads, dataset, cfg)
    result = run_training(dataset, cfg, tmp_path / "run")
    _, trained_heads, _ = load_model(result.last_path)
    for p, q in zip(heads.state_dict().values(), trained_heads.state_dict().values()):
        assert torch.equal(p, q)
    assert all(not p.requires_grad for p in trained_heads.parameters())


def test_warmup_changes_head_weights(small_manifest):
    cfg = tiny()
    _, heads = build(cfg)
    before = [p.detach().clone() for p in heads.parameters()]
    warmup_heads(heads, PairDataset(small_manifest, cfg.class_count), cfg)
    assert any(not torch.equal(a, b) for a, b in zip(before, heads.parameters()))


def _double_batch(small_manifest, cfg):
    return next(PairDataset(small_manifest, cfg.class_count).batches(2, dtype=torch.float64))


def test_detection_gradient_reduces_to_fused_term(small_manifest):
    cfg = tiny()
    model, heads = build(cfg)
    model.double()
    trainer.freeze(heads.double())
    batch = _double_batch(small_manifest, cfg)
    params = list(model.parameters())

    with_det, _ = compute_losses(model, heads, batch, cfg.variant(use_seg_loss=False))
    g_with = torch.autograd.grad(with_det, params, allow_unused=True)
    without, _ = compute_losses(model, heads, batch, cfg.variant(use_seg_loss=False, use_det_loss=False))
    g_without = torch.autograd.grad(without, params, allow_unused=True)
    fused = model(batch.ir, batch.vis_y, reconstruct=False).fused
    g_f = torch.autograd.grad(detection_loss(heads.det, fused, batch.annotations), params, allow_unused=True)
    zero = torch.zeros(())
    for a, b, c in zip(g_with, g_without, g_f):
        a, b, c = (zero if t is None else t for t in (a, b, c))
        torch.testing.assert_close(a - b, c.expand_as(a - b) if c.dim() == 0 else c, rtol=1e-9, atol=1e-12)


def test_no_dsm_variant_leaves_dsm_without_gradient(small_manifest):
    cfg = tiny(use_dsm=False)
    model, heads = build(cfg)
    trainer.freeze(heads)
    batch = next(PairDataset(small_manifest, cfg.class_count).batches(2))
    total, _ = compute_losses(model, heads, batch, cfg)
    total.backward()
    dsm = model.dsm_parameters()
    assert dsm and all(p.grad is None or not p.grad.any() for p in dsm)
    others = [p for p in model.parameters() if all(p is not q for q in dsm)]
    assert any(p.grad is not None and p.grad.any() for p in others)


class _PerfectStub(torch.nn.Module):
    """Returns the inputs unchanged as fused image and reconstructions."""

    def __init__(self, att):
        super().__init__()
        self.att = att

    def forward(self, ir, vis_y):
        return FusionOutput(ir.clone(), self.att, ir.clone(), vis_y.clone())


def test_perfect_reconstruction_leaves_only_diversity():
    img = torch.rand(2, 1, 16, 16, dtype=torch.float64)
    att = torch.rand(2, 16, 16, dtype=torch.float64)
    batch = SimpleNamespace(ir=img, vis_y=img.clone(), annotations=[None, None], masks=None)
    cfg = tiny()
    _, parts = compute_losses(_PerfectStub(att), None, batch, cfg)
    assert parts.mse_ir == 0 and parts.mse_vis == 0
    assert abs(parts.ssim) < 1e-12
    assert abs(parts.mff - cfg.loss.alpha1 * parts.div) < 1e-12


def test_nonfinite_loss_dumps_state(small_manifest, tmp_path, monkeypatch):
    real = trainer.compute_losses

    def poisoned(model, heads, batch, cfg):
        total, parts = real(model, heads, batch, cfg)
        return total * float("nan"), parts

    monkeypatch.setattr(trainer, "compute_losses", poisoned)
    with pytest.raises(NonFiniteLossError):
        run_training(small_manifest, tiny(), tmp_path / "bad")
    dump = json.loads((tmp_path / "bad" / "nonfinite_dump.json").read_text())
    assert dump["step"] == 0 and len(dump["batch_ids"]) == 2


def test_plugin_heads(small_manifest, tmp_path, monkeypatch):
    (tmp_path / "myheads.py").write_text(
        "from jointfuse.trainer import TaskHeads\n"
        "class Wide(TaskHeads):\n"
        "    pass\n"
        "def make(class_count, width):\n"
        "    return Wide(class_count, 2 * width)\n")
    monkeypatch.syspath_prepend(str(tmp_path))
    cfg = tiny(epochs=1, heads="myheads:make")
    result = run_training(small_manifest, cfg, tmp_path / "run")
    _, heads, _ = load_model(result.best_path)
    assert type(heads).__name__ == "Wide"
    with pytest.raises(ConfigError):
        tiny(heads="nocolon")


def test_load_model_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not an archive at all")
    with pytest.raises(FormatError):
        load_model(p)


def test_fuse_pair_output(small_manifest, tmp_path):
    from jointfuse.data import load_pair
    result = run_training(small_manifest, tiny(epochs=1), tmp_path / "run")
    model, _, _ = load_model(result.best_path)
    _, ir, vis, _ = small_manifest.entries[0]
    y, rgb = fuse_pair(model, load_pair(ir, vis))
    assert y.shape == (16, 16) and rgb.shape == (16, 16, 3)
    assert 0 <= y.min() and y.max() <= 1 and 0 <= rgb.min() and rgb.max() <= 1


def test_run_ablation_small(small_manifest, tmp_path):
    res = trainer.run_ablation(small_manifest, tiny(epochs=1, head_warmup_steps=0), tmp_path / "abl")
    assert list(res.rows) == [label for label, _, _ in trainer.ABLATIONS]
    lines = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    assert len(lines) == 6 and lines[0] == "variant,ssim,psnr,mse,cc,cv"
    assert "Full model" in res.table and "w/o DSM" in res.table
