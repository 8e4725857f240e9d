import numpy as np
import pytest
import torch

from mossfuse import degradation as deg
from mossfuse import network as N
from mossfuse.imagery import SpectralImage, to_tensor, upsample
from mossfuse.training import build_model, compute_losses


def tiny_config(B=8, b=3, s=2, **kw):
    base = dict(width=8, heads=2, base_blocks=1, decoder_blocks=1, fused_decoder_blocks=1)
    base.update(kw)
    return N.ModelConfig(B, b, s, **base)


def inputs(B, b, s, h, w, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, b, h * s, w * s, generator=g), torch.rand(1, B, h, w, generator=g)


def test_config_round_trip_and_defaults():
    cfg = N.ModelConfig(31, 3, 4)
    assert cfg.width == 32 and cfg.base_blocks == 4 and cfg.fused_decoder_blocks == 4
    assert cfg.psf_kernel_size == 13
    assert N.ModelConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        N.ModelConfig(31, 3, 4, aggregation="nope")


def test_upsample_t_matches_numpy():
    rng = np.random.default_rng(0)
    img = rng.random((5, 6, 3))
    ref = upsample(SpectralImage(img), 4).data
    got = N.upsample_t(torch.from_numpy(img.transpose(2, 0, 1))[None], 4)[0].numpy().transpose(1, 2, 0)
    assert np.abs(got - ref).max() < 1e-5


@pytest.mark.parametrize("H,W,B,b,s", [(32, 32, 8, 3, 2), (64, 64, 31, 3, 4), (40, 40, 16, 4, 4)])
def test_bundle_shapes(H, W, B, b, s):
    model = build_model(tiny_config(B, b, s), seed=0)
    Y, x = inputs(B, b, s, H // s, W // s)
    out = model(Y, x)
    assert out.fused.shape == (1, B, H, W)
    assert out.recon_hrmsi.shape == (1, b, H, W)
    assert out.recon_lrhsi.shape == (1, B, H // s, W // s)
    assert out.recon_lrmsi.shape == (1, b, H // s, W // s)
    for f in out.features.as_tuple():
        assert f.shape == (1, 8, H, W)
    assert out.est_srf.weights.shape == (B, b)


def test_decouple_errors_and_determinism():
    model = build_model(tiny_config(), seed=0).eval()
    Y, x = inputs(8, 3, 2, 6, 6)
    with pytest.raises(ValueError):
        model.decouple(Y, torch.rand(1, 8, 10, 12))
    with pytest.raises(ValueError):
        model(Y, torch.rand(1, 8, 5, 6))
    with torch.no_grad():
        a, b = model(Y, x), model(Y, x)
    assert torch.equal(a.fused, b.fused)
    for u, v in zip(a.features.as_tuple(), b.features.as_tuple()):
        assert torch.equal(u, v)


def test_shared_sum_is_commutative():
    model = build_model(tiny_config(), seed=0).eval()
    Y, x = inputs(8, 3, 2, 6, 6)
    with torch.no_grad():
        out = model(Y, x)
        f = out.features
        swapped = N.DecoupledFeatures(f.shared_x, f.comp_Y, f.shared_Y, f.comp_x)
        a = model.aggregate(f, out.lrhsi_up)
        b = model.aggregate(swapped, out.lrhsi_up)
    assert torch.allclose(a, b, atol=1e-6)


def test_parameter_count_stable():
    a = N.count_parameters(build_model(N.ModelConfig(31, 3, 4), seed=0))
    b = N.count_parameters(build_model(N.ModelConfig(31, 3, 4), seed=1))
    assert a == b and a > 0


def test_reconstruction_gradient_reaches_base_encoder():
    model = build_model(tiny_config(), seed=0)
    Y, x = inputs(8, 3, 2, 6, 6)
    out = model(Y, x)
    (Y - out.recon_hrmsi).abs().mean().backward()
    g = sum(float(p.grad.norm()) for p in model.base_Y.parameters() if p.grad is not None)
    assert g > 0


def dead_parameters(model, seed=3):
    Y, x = inputs(8, 3, 2, 8, 8, seed=seed)
    model.zero_grad()
    compute_losses(model(Y, x), Y, x, model).total.backward()
    return [n for n, p in model.named_parameters()
            if p.grad is None or float(p.grad.abs().sum()) == 0]


def test_every_parameter_receives_gradient():
    # default width; the 1-2 channel gate bottlenecks of tiny test models can
    # start with dead ReLUs
    model = build_model(N.ModelConfig(8, 3, 2), seed=0)
    # the initial PSF is isotropic, where rotating it changes nothing: d/dtheta = 0
    assert dead_parameters(model) == ["degradation.theta"]
    with torch.no_grad():
        model.degradation.raw_lambda[0] += 0.5
    assert dead_parameters(model) == []


def test_estimate_degradation_constraints():
    model = build_model(tiny_config(), seed=0)
    with torch.no_grad():
        model.degradation.raw_lambda.fill_(-30.0)
        model.degradation.raw_srf.normal_()
        model.degradation.raw_srf[0].abs_().add_(0.1)
    psf, srf = model.estimate_degradation()
    assert psf.lambda1 > 0 and psf.lambda2 > 0
    assert np.all(srf.weights >= 0) and np.allclose(srf.weights.sum(0), 1, atol=1e-6)


def test_initial_degradation_is_neutral():
    model = build_model(N.ModelConfig(31, 3, 4), seed=0)
    psf, srf = model.estimate_degradation()
    assert psf.lambda1 == pytest.approx(4.0, rel=1e-5) and psf.theta_k == 0.0
    assert np.allclose(srf.weights, 1 / 31)


def test_conv_degradation_has_no_estimate():
    model = build_model(tiny_config(degradation="conv"), seed=0)
    with pytest.raises(N.DegradationUnavailableError):
        model.estimate_degradation()
    Y, x = inputs(8, 3, 2, 4, 4)
    out = model(Y, x)
    assert out.est_psf is None and out.fused.shape == (1, 8, 8, 8)


def test_checkpoint_round_trip(tmp_path):
    model = build_model(tiny_config(), seed=0).eval()
    Y, x = inputs(8, 3, 2, 6, 6)
    N.save_checkpoint(model, tmp_path / "m.npz", {"note": 1})
    loaded, meta = N.load_checkpoint(tmp_path / "m.npz", return_meta=True)
    assert meta["note"] == 1 and loaded.config == model.config
    with torch.no_grad():
        assert torch.equal(model(Y, x).fused, loaded(Y, x).fused)


def test_merged_checkpoint_round_trip(tmp_path):
    model = build_model(tiny_config(), seed=0).eval()
    Y, x = inputs(8, 3, 2, 6, 6)
    with torch.no_grad():
        before = model(Y, x).fused
        model.merge_reparam()
        after = model(Y, x).fused
    assert (before - after).abs().max() < 1e-4
    N.save_checkpoint(model, tmp_path / "m.npz")
    loaded = N.load_checkpoint(tmp_path / "m.npz")
    with torch.no_grad():
        assert torch.equal(loaded(Y, x).fused, after)


def test_checkpoint_bad_magic(tmp_path):
    np.savez(tmp_path / "bad.npz", __magic__=np.array("OTHER"), __config__=np.array("{}"),
             __meta__=np.array("{}"))
    with pytest.raises(N.CheckpointError):
        N.load_checkpoint(tmp_path / "bad.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(N.CheckpointError):
        N.load_checkpoint(tmp_path / "junk.npz")


def test_fused_residual_starts_at_bicubic():
    model = build_model(tiny_config(), seed=0).eval()
    Y, x = inputs(8, 3, 2, 6, 6)
    with torch.no_grad():
        out = model(Y, x)
    plain = build_model(tiny_config(fused_residual=False), seed=0).eval()
    with torch.no_grad():
        other = plain(Y, x).fused
    dev = (out.fused - out.lrhsi_up).abs().mean()
    assert other.shape == out.fused.shape
    assert dev < 0.1 * (other - out.lrhsi_up).abs().mean()
