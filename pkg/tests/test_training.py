import csv

import numpy as np
import pytest
import torch
import torch.nn as nn

from egorender import counters
from egorender.nets import EgoDPNet, IdentityExtractor, PixelEmbedder
from egorender.training import (VARIANTS, RenderData, TrainConfig, TrainError, adversarial_step_losses,
                                batch_indices, cosine_lr, face_identity_loss, generator_channels,
                                perceptual_loss, render_items, total_generator_loss, train_egodpnet,
                                train_rendernet, EgoPoseProvider)


class ConstD(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, feat, img):
        return [torch.full((img.shape[0], 1, 4 // 2 ** k, 4 // 2 ** k), self.value) for k in range(3)]


class MeanD(nn.Module):
    """Logit = mean image intensity, so an all-ones image scores 1 and an all-zeros image 0."""

    def forward(self, feat, img):
        m = img.mean(dim=(1, 2, 3), keepdim=True)
        return [m.expand(-1, 1, 3, 3) for _ in range(3)]


def _cfg(**kw):
    base = dict(steps=4, batch=2, ego_pose="ground_truth", views=[0], seed=3)
    base.update(kw)
    return TrainConfig(**base)


# --- config and variant table -------------------------------------------------------


def test_paper_defaults():
    c = TrainConfig()
    assert (c.lr_g, c.beta1, c.beta2) == (2e-4, 0.5, 0.999)
    assert (c.lambda_gan, c.lambda_p, c.lambda_face) == (1.0, 10.0, 5.0)
    assert c.lr_tm == pytest.approx(10 * c.lr_g)
    assert not c.face_loss
    with pytest.raises(TrainError):
        TrainConfig(lambda_p=-1).validate()
    with pytest.raises(TrainError):
        TrainConfig.from_dict({"nope": 1})


def test_variant_table():
    T, F = True, False
    expect = {
        "im_tex": (T, T, T, "feature_image", F),
        "ex_tex": (T, T, F, "feature_image", F),
        "only_ego": (T, F, F, "feature_image", F),
        "only_mv": (F, T, T, "feature_image", F),
        "pix2pixhd": (F, F, F, "pose_encoding", F),
        "fea_net": (T, F, F, "feature_image", T),
    }
    assert set(VARIANTS) == set(expect)
    for k, v in expect.items():
        s = VARIANTS[k]
        assert (s.uses_te, s.uses_tm, s.generator_input, s.per_frame_extractor) == (v[0], v[1], v[3], v[4])
        if s.uses_tm:
            assert s.tm_trainable == v[2]
    assert generator_channels("im_tex", 10) == 6
    assert generator_channels("pix2pixhd", 10) == 13
    assert generator_channels("fea_net", 10) == 16


def test_batch_indices_cover_each_epoch():
    seen = np.concatenate([batch_indices(10, 5, 0, s) for s in range(2)])
    assert sorted(seen) == list(range(10))
    assert np.array_equal(batch_indices(10, 5, 0, 3), batch_indices(10, 5, 0, 3))


def test_cosine_lr_schedule():
    assert cosine_lr(1e-3, 0, 100) == 1e-3
    assert cosine_lr(1e-3, 50, 100) == pytest.approx(5e-4, abs=1e-15)
    assert cosine_lr(1e-3, 100, 100) == pytest.approx(0.0, abs=1e-18)
    lrs = [cosine_lr(1.0, s, 40) for s in range(41)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert cosine_lr(2e-4, 7, 0) == 2e-4


# --- losses ----------------------------------------------------------------------------


def test_perceptual_loss_examples():
    torch.manual_seed(0)
    a, b = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    from egorender.nets import RandomFeaturePyramid
    ext = RandomFeaturePyramid()
    assert perceptual_loss(ext, a, a).item() == 0.0
    assert perceptual_loss(ext, a, b).item() == pytest.approx(perceptual_loss(ext, b, a).item(), rel=1e-6)
    assert perceptual_loss(IdentityExtractor(), a, b).item() == pytest.approx((a - b).abs().mean().item(),
                                                                               rel=1e-6)


def test_adversarial_closed_forms():
    feat = torch.zeros(2, 6, 8, 8)
    real, fake = torch.ones(2, 3, 8, 8), torch.zeros(2, 3, 8, 8)
    L_D, L_adv = adversarial_step_losses(ConstD(0.0), feat, real, fake)
    assert L_D.item() == pytest.approx(0.5) and L_adv.item() == pytest.approx(1.0)
    L_D, _ = adversarial_step_losses(MeanD(), feat, real, fake)
    assert L_D.item() == pytest.approx(0.0, abs=1e-12)


def test_face_loss_examples(rng):
    a = torch.rand(2, 3, 40, 40)
    b = torch.rand(2, 3, 40, 40)
    heads = [np.array([20.0, 15.0]), np.array([10.0, 30.0])]
    emb = PixelEmbedder()
    assert face_identity_loss(emb, a, a, heads).item() == 0.0
    assert face_identity_loss(emb, a, b, heads, enabled=False).item() == 0.0
    assert face_identity_loss(emb, a, b, [None, None]).item() == 0.0
    got = face_identity_loss(emb, a, b, heads, radius=0.1).item()
    h = 4
    crops = [(a[0, :, 11:19, 16:24] - b[0, :, 11:19, 16:24]).abs().mean(),
             (a[1, :, 26:34, 6:14] - b[1, :, 26:34, 6:14]).abs().mean()]
    assert got == pytest.approx(float(sum(crops) / 2), rel=1e-6)
    # crop entirely off the image is degenerate and ignored
    assert face_identity_loss(emb, a, b, [np.array([500.0, 500.0]), None]).item() == 0.0


def test_total_generator_loss():
    c = TrainConfig()
    one, zero = torch.tensor(1.0), torch.tensor(0.0)
    assert total_generator_loss(c, {"L_p": one, "L_face": zero, "L_adv": one}).item() == 11.0
    assert total_generator_loss(c, {"L_p": zero, "L_face": zero, "L_adv": zero}).item() == 0.0
    parts = {"L_p": torch.tensor(0.3), "L_face": torch.tensor(0.2), "L_adv": torch.tensor(0.7)}
    c2 = TrainConfig(lambda_p=20.0)
    diff = total_generator_loss(c2, parts) - total_generator_loss(c, parts)
    assert diff.item() == pytest.approx(10 * 0.3, rel=1e-6)


# --- Ego-DPNet stage --------------------------------------------------------------------


def test_egodpnet_training_decreases_and_is_deterministic(small_ds, tmp_path):
    cfg = TrainConfig(stage="dpnet", steps=40, batch=4, seed=1, lr_dp=2e-3)
    a = train_egodpnet(small_ds, cfg, out_dir=tmp_path)
    assert np.mean(a.losses[-5:]) < np.mean(a.losses[:5])
    b = train_egodpnet(small_ds, TrainConfig(stage="dpnet", steps=40, batch=4, seed=1, lr_dp=2e-3))
    assert a.losses[-1] == b.losses[-1]
    rows = list(csv.DictReader(open(tmp_path / "dpnet_loss.csv")))
    assert len(rows) == 40
    assert (tmp_path / "egodpnet.ckpt").exists()


# --- RenderNet stage: wiring -------------------------------------------------------------


@pytest.fixture(scope="module")
def render_data(small_ds):
    return RenderData(small_ds, small_ds.train_ids, [0])


def test_ex_tex_freezes_tm(small_ds, render_data):
    r = train_rendernet(small_ds, _cfg(variant="ex_tex", steps=10), data=render_data,
                        frame_ids=small_ds.train_ids)
    assert r.model.tm_stack().checksum() == r.model.tm_stack().__class__(
        r.tm_initial.data.astype(np.float32).astype(np.float64)).checksum()
    assert not r.model.tm.requires_grad


@pytest.mark.slow
def test_im_tex_updates_tm(small_ds, render_data):
    r = train_rendernet(small_ds, _cfg(variant="im_tex", steps=100), data=render_data,
                        frame_ids=small_ds.train_ids)
    init = r.tm_initial.data.astype(np.float32).astype(np.float64)
    assert r.model.tm_stack().checksum() != type(r.tm_initial)(init).checksum()


def test_only_mv_ignores_ego_content(small_ds, render_data):
    r = train_rendernet(small_ds, _cfg(variant="only_mv", steps=2), data=render_data,
                        frame_ids=small_ds.train_ids)
    out_a = render_items(r.model, render_data, None)
    noisy = RenderData.__new__(RenderData)
    noisy.__dict__.update(render_data.__dict__)
    rng = np.random.default_rng(0)
    noisy.ego = {f: rng.integers(0, 256, im.shape).astype(np.uint8) for f, im in render_data.ego.items()}
    counters.reset()
    out_b = render_items(r.model, noisy, None)
    assert np.array_equal(out_a, out_b)
    assert counters.calls["extract_partial_texture"] == 0


def test_only_ego_has_no_tm_and_pix2pixhd_skips_textures(small_ds, render_data):
    r = train_rendernet(small_ds, _cfg(variant="only_ego", steps=1), data=render_data,
                        frame_ids=small_ds.train_ids)
    assert r.model.tm is None and r.tm_initial is None
    counters.reset()
    r = train_rendernet(small_ds, _cfg(variant="pix2pixhd", steps=3), data=render_data,
                        frame_ids=small_ds.train_ids)
    render_items(r.model, render_data, None)
    assert counters.calls["extract_partial_texture"] == 0
    assert counters.calls["feature_render"] == 0
    assert r.model.tm is None


def test_fea_net_runs(small_ds, render_data):
    counters.reset()
    r = train_rendernet(small_ds, _cfg(variant="fea_net", steps=2), data=render_data,
                        frame_ids=small_ds.train_ids)
    assert r.model.ffn is not None and r.model.generator.in_ch == 16
    assert counters.calls["extract_partial_texture"] >= 4


def test_face_loss_requires_embedder(small_ds, render_data):
    with pytest.raises(TrainError):
        train_rendernet(small_ds, _cfg(face_loss=True), data=render_data)
    r = train_rendernet(small_ds, _cfg(face_loss=True, steps=2), data=render_data, face_embedder=PixelEmbedder())
    assert all(np.isfinite(h["L_face"]) for h in r.history)


def test_view_out_of_range(small_ds):
    with pytest.raises(TrainError):
        train_rendernet(small_ds, _cfg(views=[7]))


def test_predicted_pose_requires_net(small_ds, render_data):
    with pytest.raises(TrainError):
        train_rendernet(small_ds, _cfg(ego_pose="predicted"), data=render_data)


# --- RenderNet stage: determinism and logging -------------------------------------------


def test_precompute_equivalence(small_ds, render_data):
    torch.manual_seed(11)
    net = EgoDPNet(10, input_size=(small_ds.cfg.ego_size,) * 2).eval()
    runs = []
    for pre in (True, False):
        r = train_rendernet(small_ds, _cfg(ego_pose="predicted", precompute=pre, steps=10), egodp=net,
                            data=render_data, frame_ids=small_ds.train_ids)
        runs.append(r)
    assert [h["L_G"] for h in runs[0].history] == [h["L_G"] for h in runs[1].history]
    for p, q in zip(runs[0].model.generator.parameters(), runs[1].model.generator.parameters()):
        assert torch.equal(p, q)
    assert torch.equal(runs[0].model.tm, runs[1].model.tm)


def test_resume_matches_uninterrupted(small_ds, render_data, tmp_path):
    full = train_rendernet(small_ds, _cfg(steps=6), data=render_data, out_dir=tmp_path / "full")
    train_rendernet(small_ds, _cfg(steps=3), data=render_data, out_dir=tmp_path / "part")
    resumed = train_rendernet(small_ds, _cfg(steps=6), data=render_data, out_dir=tmp_path / "part",
                              resume=tmp_path / "part" / "render.ckpt")
    assert [h["step"] for h in resumed.history] == [3, 4, 5]
    assert [h["L_G"] for h in resumed.history] == [h["L_G"] for h in full.history[3:]]
    for p, q in zip(full.model.generator.parameters(), resumed.model.generator.parameters()):
        assert torch.equal(p, q)
    rows = list(csv.DictReader(open(tmp_path / "part" / "loss.csv")))
    assert [int(r["step"]) for r in rows] == list(range(6))


def test_loss_log_decomposition(small_ds, render_data, tmp_path):
    cfg = _cfg(steps=5)
    train_rendernet(small_ds, cfg, data=render_data, out_dir=tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "loss.csv")))
    assert list(rows[0]) == ["step", "L_D", "L_adv", "L_p", "L_face", "L_G"]
    assert len(rows) == 5
    for r in rows:
        v = {k: float(x) for k, x in r.items()}
        recon = cfg.lambda_p * v["L_p"] + cfg.lambda_face * v["L_face"] + cfg.lambda_gan * v["L_adv"]
        assert abs(recon - v["L_G"]) < 1e-6


@pytest.mark.slow
def test_toy_adversarial_smoke(small_ds):
    data = RenderData(small_ds, list(range(20)), [0])
    r = train_rendernet(small_ds, _cfg(steps=200, batch=2), data=data, frame_ids=list(range(20)))
    assert len(r.history) == 200
    assert all(np.isfinite(h["L_D"]) and np.isfinite(h["L_adv"]) for h in r.history)
