import numpy as np
import pytest
import torch
import torch.nn.functional as F

from egorender.nets import (EgoDPNet, FrameFeatureNet, MultiScaleDiscriminator, NetError, PatchDiscriminator,
                            RandomFeaturePyramid, RenderNet, UV_LOSS_WEIGHT, count_parameters, discriminator_forward,
                            egodp_loss, egodp_predict, iuv_to_targets, load_checkpoint, rendernet_forward,
                            save_checkpoint)

torch.manual_seed(0)


@pytest.fixture(scope="module")
def dpnet():
    torch.manual_seed(1)
    return EgoDPNet(10, input_size=(64, 64))


def test_param_budgets():
    assert count_parameters(EgoDPNet()) < 5_000_000
    assert count_parameters(RenderNet(6)) < 8_000_000
    assert count_parameters(PatchDiscriminator(9)) < 3_000_000
    D = MultiScaleDiscriminator(6)
    assert all(count_parameters(d) < 3_000_000 for d in D.scales)


def test_fea_net_has_more_trainables_than_im_tex():
    tm = 10 * 64 * 64 * 3
    im_tex = count_parameters(RenderNet(6)) + tm
    fea_net = count_parameters(RenderNet(16)) + count_parameters(FrameFeatureNet(16))
    assert fea_net > im_tex


def test_predict_structurally_valid_and_deterministic(dpnet, rng):
    img = rng.integers(0, 256, (64, 64, 3)).astype(np.uint8)
    a = egodp_predict(dpnet, img)
    a.check()
    assert a.part.min() >= 0 and a.part.max() <= 10
    assert (a.uv >= 0).all() and (a.uv <= 1).all()
    const = np.full((64, 64, 3), 0.3)
    b1, b2 = egodp_predict(dpnet, const), egodp_predict(dpnet, const)
    assert np.array_equal(b1.part, b2.part) and np.array_equal(b1.uv, b2.uv)
    with pytest.raises(NetError):
        egodp_predict(dpnet, np.zeros((32, 64, 3)))


def test_dpnet_shapes(dpnet):
    logits, uv = dpnet(torch.rand(2, 3, 64, 64))
    assert logits.shape == (2, 11, 64, 64) and uv.shape == (2, 10, 2, 64, 64)
    assert uv.min() >= 0 and uv.max() <= 1


def _random_gt(rng, B=2, H=8, W=8, P=10):
    part = torch.from_numpy(rng.integers(0, P + 1, (B, H, W)))
    uv = torch.from_numpy(rng.random((B, 2, H, W))).float()
    return part, uv


def test_loss_near_zero_for_exact_prediction(rng):
    part, gt_uv = _random_gt(rng)
    logits = F.one_hot(part, 11).permute(0, 3, 1, 2).float() * 50.0
    uv = gt_uv[:, None].expand(-1, 10, -1, -1, -1).clone()
    floor = F.cross_entropy(logits, part)
    loss = egodp_loss(logits, uv, part, gt_uv)
    assert loss.item() - floor.item() <= 1e-6
    assert loss.item() <= 1e-6


def test_loss_permutation_invariant(rng):
    part, gt_uv = _random_gt(rng, B=4)
    logits = torch.randn(4, 11, 8, 8)
    uv = torch.rand(4, 10, 2, 8, 8)
    perm = torch.tensor([2, 0, 3, 1])
    a = egodp_loss(logits, uv, part, gt_uv)
    b = egodp_loss(logits[perm], uv[perm], part[perm], gt_uv[perm])
    assert torch.allclose(a, b, atol=1e-6)


def test_uv_term_matches_monte_carlo_oracle():
    rng = np.random.default_rng(7)
    B, H, W = 4, 64, 64
    part = torch.from_numpy(rng.integers(1, 11, (B, H, W)))
    gt_uv = torch.from_numpy(rng.random((B, 2, H, W))).float()
    logits = torch.zeros(B, 11, H, W)
    uv = torch.full((B, 10, 2, H, W), 0.5)
    ce = F.cross_entropy(logits, part)
    uv_term = (egodp_loss(logits, uv, part, gt_uv) - ce).item() / UV_LOSS_WEIGHT
    # independent oracle: clamped smooth-L1 (beta 0.5) averaged over uniform draws
    x = np.abs(np.random.default_rng(8).random(2_000_000) - 0.5)
    beta = 0.5
    mc = np.where(x < beta, 0.5 * x * x / beta, x - 0.5 * beta).mean()
    assert abs(mc - 1 / 12) < 1e-3
    assert abs(uv_term - mc) < 3e-3


def test_loss_shape_mismatch():
    with pytest.raises(NetError):
        egodp_loss(torch.zeros(1, 11, 8, 8), torch.zeros(1, 10, 2, 8, 8), torch.zeros(1, 4, 4, dtype=torch.long),
                   torch.zeros(1, 2, 4, 4))


def test_iuv_to_targets_round_trip(dpnet, rng):
    a = egodp_predict(dpnet, rng.random((64, 64, 3)))
    part, uv = iuv_to_targets([a])
    assert torch.equal(part[0], torch.from_numpy(a.part).long())


def test_rendernet_contract(rng):
    net = RenderNet(6, base=16, levels=3)
    feat = rng.random((24, 32, 6)).astype(np.float32)
    out = rendernet_forward(net, feat)
    assert out.shape == (24, 32, 3)
    assert out.min() >= 0 and out.max() <= 1
    assert np.array_equal(out, rendernet_forward(net, feat.copy()))
    with pytest.raises(NetError):
        rendernet_forward(net, feat[..., :5])


def test_discriminator_contract():
    torch.manual_seed(3)
    D = MultiScaleDiscriminator(6, ndf=16).eval()
    feat = torch.rand(2, 6, 64, 64, requires_grad=True)
    img = torch.rand(2, 3, 64, 64, requires_grad=True)
    outs = discriminator_forward(D, feat, img)
    assert len(outs) == 3
    sizes = [o.shape[-1] for o in outs]
    assert sizes[0] > sizes[1] > sizes[2]
    for k, s in enumerate(sizes):
        # three stride-2 4x4 convs on the 2^-k input, plus padding growth
        assert abs(s - 64 / 2 ** k / 8) <= 4
    assert all(torch.isfinite(o).all() for o in outs)
    sum(o.sum() for o in outs).backward()
    assert feat.grad.abs().sum() > 0 and img.grad.abs().sum() > 0
    with pytest.raises(NetError):
        discriminator_forward(D, feat, img[..., :32])
    # batch independence: doubling the batch leaves each sample's logits unchanged
    with torch.no_grad():
        one = discriminator_forward(D, feat[:1], img[:1])
        two = discriminator_forward(D, torch.cat([feat[:1]] * 2), torch.cat([img[:1]] * 2))
    for a, b in zip(one, two):
        assert torch.allclose(a[0], b[0], atol=1e-6) and torch.allclose(b[0], b[1], atol=1e-6)


def test_frame_feature_net_channels():
    ffn = FrameFeatureNet(16)
    out = ffn(torch.rand(10, 16, 16, 3))
    assert out.shape == (10 * 16 * 16, 16)


def test_feature_pyramid_frozen_and_seeded():
    a, b = RandomFeaturePyramid(seed=5), RandomFeaturePyramid(seed=5)
    x = torch.rand(1, 3, 32, 32)
    for fa, fb in zip(a(x), b(x)):
        assert torch.equal(fa, fb)
    assert count_parameters(a) == 0


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(4)
    net = RenderNet(6, base=8, levels=2)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    net(torch.rand(1, 6, 16, 16)).mean().backward()
    opt.step()
    tm = torch.rand(5, 3)
    save_checkpoint(tmp_path / "c.ckpt", 7, {"g": net}, {"g": opt}, {"tm": tm}, extra={"k": 1})
    ck = load_checkpoint(tmp_path / "c.ckpt")
    assert ck.step == 7 and ck.meta["extra"] == {"k": 1}
    net2 = ck.build("g")
    for p, q in zip(net.state_dict().values(), net2.state_dict().values()):
        assert torch.equal(p, q)
    assert torch.equal(ck.tensors["tm"], tm)
    opt2 = torch.optim.Adam(net2.parameters(), lr=1e-3)
    opt2.load_state_dict(ck.optimizers["g"])
    s1, s2 = opt.state_dict()["state"], opt2.state_dict()["state"]
    for k in s1:
        assert torch.equal(s1[k]["exp_avg"], s2[k]["exp_avg"])
