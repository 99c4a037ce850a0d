import pytest
import torch

from jointfuse.errors import ConfigError, ValidationError
from jointfuse.fusion import (BranchPair, DetailSalience, FusionLayer, LocalSignificant, NatConfig,
                              NeighborhoodAttention2d)
from jointfuse.gradcheck import check_gradients, module_tensors, projected

D = torch.float64


def test_dsm_zero_fc_gives_one_and_a_half():
    dsm = DetailSalience(8).double()
    with torch.no_grad():
        for fc in (dsm.fc1, dsm.fc2):
            fc.weight.zero_()
            fc.bias.zero_()
    f = torch.randn(2, 8, 5, 5, dtype=D)
    torch.testing.assert_close(dsm(f), 1.5 * dsm.conv(f), rtol=0, atol=1e-14)


def test_dsm_zero_input():
    dsm = DetailSalience(8)
    assert not dsm(torch.zeros(1, 8, 4, 4)).any()


def test_dsm_gates_in_open_interval():
    dsm = DetailSalience(8)
    w = dsm.gates(dsm.conv(torch.randn(3, 8, 6, 6)))
    assert (w > 0).all() and (w < 1).all()


def test_dsm_channel_mismatch():
    with pytest.raises(ConfigError):
        DetailSalience(8)(torch.randn(1, 4, 3, 3))


def test_dsm_gradients():
    dsm = DetailSalience(6).double()
    f = torch.randn(2, 6, 5, 5, dtype=D, requires_grad=True)
    res = check_gradients(lambda: dsm(f).sum(), module_tensors(dsm, f))
    assert res.max_error < 1e-4, res


def test_nat_config_validation():
    with pytest.raises(ConfigError):
        NatConfig(window=4)
    with pytest.raises(ConfigError):
        NeighborhoodAttention2d(32, NatConfig(heads=2, head_dim=8))


def test_nat_module_equals_dense_for_large_window():
    nat = NeighborhoodAttention2d(8, NatConfig(window=9, heads=2, head_dim=4)).double()
    f = torch.randn(2, 8, 6, 7, dtype=D)
    assert (nat(f) - nat.dense(f)).abs().max() < 1e-6


def test_nat_constant_input():
    nat = NeighborhoodAttention2d(8, NatConfig(window=3, heads=2, head_dim=4)).double()
    f = torch.ones(1, 8, 6, 6, dtype=D) * torch.randn(1, 8, 1, 1, dtype=D)
    out, attn = nat(f, return_weights=True)
    torch.testing.assert_close(attn, torch.full_like(attn, 1 / 9))
    torch.testing.assert_close(out, out[..., :1, :1].expand_as(out))


def test_nat_gradients():
    nat = NeighborhoodAttention2d(4, NatConfig(window=3, heads=2, head_dim=2)).double()
    f = torch.randn(1, 4, 5, 6, dtype=D, requires_grad=True)
    res = check_gradients(lambda: projected(nat(f)), module_tensors(nat, f))
    assert res.max_error < 1e-4, res


def test_lsm_branch_independence():
    lsm = LocalSignificant(8, NatConfig(3, 2, 4))
    f = torch.randn(1, 8, 5, 5)
    before = lsm(f)
    with torch.no_grad():
        for p in lsm.nat.parameters():
            p.add_(1.0)
    after = lsm(f)
    assert torch.equal(before.salient, after.salient)
    assert not torch.equal(before.detail, after.detail)
    assert before.detail.shape == before.salient.shape == f.shape


def test_lsm_without_dsm_is_identity_branch():
    lsm = LocalSignificant(8, NatConfig(3, 2, 4), use_dsm=False)
    f = torch.randn(1, 8, 5, 5)
    assert torch.equal(lsm(f).salient, f)


def _pairs(shape=(1, 8, 6, 6), seed=0):
    g = torch.Generator().manual_seed(seed)
    mk = lambda: BranchPair(torch.randn(shape, generator=g, dtype=D), torch.randn(shape, generator=g, dtype=D))
    return mk(), mk()


def test_fuse_features_symmetric():
    layer = FusionLayer(8, NatConfig(3, 2, 4)).double()
    a, b = _pairs()
    for x, y in zip(layer.fuse_features(a, b), layer.fuse_features(b, a)):
        assert torch.equal(x, y)


def test_fuse_features_zero_partner():
    layer = FusionLayer(8, NatConfig(3, 2, 4)).double()
    a, _ = _pairs()
    fd, fn = layer.fuse_features(a, a.zeros_like())
    assert torch.equal(fd, layer.post_dsm(a.detail))
    assert torch.equal(fn, layer.post_nat(a.salient))


def test_uncrossed_variant_routes_sums_to_own_branch():
    layer = FusionLayer(8, NatConfig(3, 2, 4), crossed=False).double()
    a, b = _pairs()
    fd, fn = layer.fuse_features(a, b)
    assert torch.equal(fd, layer.post_nat(a.detail + b.detail))
    assert torch.equal(fn, layer.post_dsm(a.salient + b.salient))


def test_fuse_features_shape_mismatch():
    layer = FusionLayer(8, NatConfig(3, 2, 4))
    a, _ = _pairs((1, 8, 6, 6))
    b, _ = _pairs((1, 8, 5, 6))
    with pytest.raises(ValidationError):
        layer.fuse_features(a.__class__(a.detail.float(), a.salient.float()),
                            b.__class__(b.detail.float(), b.salient.float()))


def test_fuse_features_gradients_wrt_inputs():
    layer = FusionLayer(4, NatConfig(3, 2, 2)).double()
    a, b = _pairs((1, 4, 5, 5))
    leaves = {f"{n}.{k}": getattr(p, k).requires_grad_() for n, p in (("ir", a), ("vis", b))
              for k in ("detail", "salient")}
    fn = lambda: sum(projected(t, seed=i) for i, t in enumerate(layer.fuse_features(a, b)))
    res = check_gradients(fn, leaves)
    assert res.max_error < 1e-4, res


def test_lsm_split_pipeline_gradients():
    lsm = LocalSignificant(4, NatConfig(3, 2, 2)).double()
    f = torch.randn(1, 4, 5, 5, dtype=D, requires_grad=True)
    fn = lambda: projected(lsm(f).detail) + projected(lsm(f).salient, seed=2)
    res = check_gradients(fn, module_tensors(lsm, f))
    assert res.max_error < 1e-4, res


def test_unshared_lsm_has_separate_parameters():
    layer = FusionLayer(8, NatConfig(3, 2, 4), share_lsm=False)
    assert layer.lsm_ir is not layer.lsm_vis
    assert not torch.equal(layer.lsm_ir.nat.qkv.weight, layer.lsm_vis.nat.qkv.weight)
