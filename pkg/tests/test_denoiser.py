import numpy as np
import pytest
import torch

from flowdiff.denoiser import (
    DenoiserConfig,
    FlowDenoiser,
    flow_loss,
    flow_to_eighth_grid,
    make_denoiser_fn,
    pair_to_cond,
    predict_x0,
)
from flowdiff.flowcore import ImagePair

TINY = dict(base_channels=8, time_embed_dim=32, feature_dim=16, encoder_channels=8)


def make_pair(rng, h=16, w=16):
    return ImagePair(rng.uniform(0, 1, (h, w, 3)), rng.uniform(0, 1, (h, w, 3)))


def build_model(use_correlation=False, radius=1, seed=0, jitter=False, **kw):
    torch.manual_seed(seed)
    cfg = DenoiserConfig(use_correlation=use_correlation, lookup_radius=radius,
                         **{**TINY, **kw})
    model = FlowDenoiser(cfg)
    if jitter:  # the head starts zero-initialized, so outputs would be 0
        with torch.no_grad():
            model.unet.out_conv.weight.normal_(0, 0.1)
            model.unet.out_conv.bias.normal_(0, 0.1)
    return model


class TestPredict:
    def test_output_shape_and_range(self):
        rng = np.random.default_rng(0)
        model = build_model()
        pair = make_pair(rng, 64, 64)
        x_t = rng.standard_normal((64, 64, 2))
        out = predict_x0(model, x_t, 10, pair)
        assert out.shape == (64, 64, 2)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_range_bound_on_extreme_inputs(self):
        rng = np.random.default_rng(1)
        model = build_model(seed=3)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.randn_like(p))
        pair = make_pair(rng)
        out = predict_x0(model, 50.0 * rng.standard_normal((16, 16, 2)), 5, pair)
        assert out.min() >= -1.0 and out.max() <= 1.0
        assert np.isfinite(out).all()

    def test_deterministic_given_weights(self):
        rng = np.random.default_rng(2)
        model = build_model()
        pair = make_pair(rng)
        x_t = rng.standard_normal((16, 16, 2))
        a = predict_x0(model, x_t, 3, pair)
        b = predict_x0(model, x_t, 3, pair)
        assert np.array_equal(a, b)

    def test_correlation_model_requires_corr(self):
        rng = np.random.default_rng(3)
        model = build_model(use_correlation=True)
        pair = make_pair(rng)
        with pytest.raises(ValueError):
            predict_x0(model, np.zeros((16, 16, 2)), 1, pair)

    def test_plain_model_rejects_corr(self):
        rng = np.random.default_rng(4)
        model = build_model()
        pair = make_pair(rng)
        with pytest.raises(ValueError):
            predict_x0(model, np.zeros((16, 16, 2)), 1, pair,
                       corr=np.zeros((2, 2, 36)))

    def test_indivisible_dims_rejected(self):
        rng = np.random.default_rng(5)
        model = build_model()
        pair = ImagePair(np.zeros((12, 16, 3)), np.zeros((12, 16, 3)))
        with pytest.raises(ValueError):
            predict_x0(model, np.zeros((12, 16, 2)), 1, pair)

    def test_corr_feature_has_expected_channels(self):
        # with radius 4 the 1/8-stage input grows by exactly 4*(2*4+1)^2 = 324
        rng = np.random.default_rng(6)
        model = build_model(use_correlation=True, radius=4)
        pair = make_pair(rng, 16, 16)
        cond = pair_to_cond(pair)
        x_t = torch.randn(1, 2, 16, 16)
        corr = model.corr_feature(cond, x_t)
        assert corr.shape == (1, 324, 2, 2)
        bottom = model.unet.down_blocks[-1][0]
        plain = build_model().unet.down_blocks[-1][0]
        in_corr = bottom.conv1.in_channels
        in_plain = plain.conv1.in_channels
        assert in_corr - in_plain == 324

    def test_correlation_path_end_to_end(self):
        rng = np.random.default_rng(7)
        model = build_model(use_correlation=True)
        pair = make_pair(rng)
        x_t = rng.standard_normal((16, 16, 2))
        cond = pair_to_cond(pair)
        corr = model.corr_feature(cond, torch.from_numpy(x_t).float().permute(2, 0, 1)[None])
        out = predict_x0(model, x_t, 2, pair, corr=corr)
        assert out.shape == (16, 16, 2) and np.isfinite(out).all()


class TestFlowToEighthGrid:
    def test_constant_flow_converts_units(self):
        # u = 8 px on a 32-wide image: normalized 0.5, at 1/8 grid 1 cell
        x = torch.zeros(1, 2, 32, 32)
        x[:, 0] = 0.5
        out = flow_to_eighth_grid(x)
        assert out.shape == (1, 4, 4, 2)
        assert torch.allclose(out[..., 0], torch.ones(1, 4, 4))
        assert torch.allclose(out[..., 1], torch.zeros(1, 4, 4))


class TestFlowLoss:
    def test_zero_for_exact_prediction(self):
        x = torch.randn(2, 2, 8, 8)
        valid = torch.ones(2, 8, 8, dtype=torch.bool)
        assert flow_loss(x, x, valid).item() == 0.0

    def test_constant_offset_closed_form(self):
        x = torch.zeros(1, 2, 8, 8)
        valid = torch.ones(1, 8, 8, dtype=torch.bool)
        assert flow_loss(x + 0.25, x, valid).item() == pytest.approx(0.25)
        assert flow_loss(x + 0.25, x, valid, kind="l2").item() == pytest.approx(0.0625)

    def test_matches_masked_mean_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            a = rng.standard_normal((1, 2, 8, 8))
            b = rng.standard_normal((1, 2, 8, 8))
            valid = rng.uniform(size=(1, 8, 8)) > 0.4
            got = flow_loss(torch.from_numpy(a), torch.from_numpy(b),
                            torch.from_numpy(valid)).item()
            acc, n = 0.0, 0
            for y in range(8):
                for x in range(8):
                    if valid[0, y, x]:
                        acc += abs(a[0, 0, y, x] - b[0, 0, y, x])
                        acc += abs(a[0, 1, y, x] - b[0, 1, y, x])
                        n += 2
            assert abs(got - acc / n) <= 1e-6

    def test_invariant_to_invalid_pixels(self):
        rng = np.random.default_rng(9)
        a = torch.from_numpy(rng.standard_normal((1, 2, 8, 8)))
        b = torch.from_numpy(rng.standard_normal((1, 2, 8, 8)))
        valid = torch.from_numpy(rng.uniform(size=(1, 8, 8)) > 0.5)
        base = flow_loss(a, b, valid).item()
        a2 = a.clone()
        a2[:, :, ~valid[0]] = 99.0
        assert flow_loss(a2, b, valid).item() == pytest.approx(base)

    def test_empty_mask_raises(self):
        x = torch.zeros(1, 2, 4, 4)
        with pytest.raises(ValueError):
            flow_loss(x, x, torch.zeros(1, 4, 4, dtype=torch.bool))


def fd_gradient_check(use_correlation, seed, n_slices=4, h=1e-5):
    """Central finite differences vs autograd on random weight entries."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    cfg = DenoiserConfig(use_correlation=use_correlation, lookup_radius=1, **TINY)
    model = FlowDenoiser(cfg).double()
    with torch.no_grad():  # move the zero-initialized head off the clamp kink
        model.unet.out_conv.weight.normal_(0, 0.02)
        model.unet.out_conv.bias.normal_(0, 0.02)

    pair = make_pair(rng, 16, 16)
    cond = pair_to_cond(pair, dtype=torch.float64)
    x0 = torch.from_numpy(rng.uniform(-0.4, 0.4, (1, 2, 16, 16)))
    x_t = x0 + 0.3 * torch.from_numpy(rng.standard_normal((1, 2, 16, 16)))
    t = torch.tensor([int(rng.integers(1, 65))])
    valid = torch.ones(1, 16, 16, dtype=torch.bool)

    def loss_value():
        corr = model.corr_feature(cond, x_t) if use_correlation else None
        return flow_loss(model(x_t, t, cond, corr), x0, valid)

    model.zero_grad()
    loss_value().backward()

    params = [p for p in model.parameters() if p.grad is not None]
    worst = 0.0
    for _ in range(n_slices):
        p = params[rng.integers(len(params))]
        idx = tuple(rng.integers(s) for s in p.shape)
        ag = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss_value().item()
            p[idx] = orig - h
            down = loss_value().item()
            p[idx] = orig
        fd = (up - down) / (2 * h)
        rel = abs(fd - ag) / max(abs(fd), abs(ag), 1e-8)
        worst = max(worst, rel)
    return worst


class TestGradient:
    @pytest.mark.parametrize("use_correlation,seed", [(False, 11), (False, 12),
                                                      (True, 13), (True, 14)])
    def test_loss_gradient_matches_finite_differences(self, use_correlation, seed):
        assert fd_gradient_check(use_correlation, seed) <= 1e-2


class TestDenoiserFn:
    def test_matches_predict_x0_for_plain_model(self):
        rng = np.random.default_rng(15)
        model = build_model()
        pair = make_pair(rng)
        fn = make_denoiser_fn(model)
        x_t = rng.standard_normal((16, 16, 2))
        assert np.allclose(fn(x_t, 4, pair), predict_x0(model, x_t, 4, pair))

    def test_correlation_fn_recomputes_lookup_per_step(self):
        rng = np.random.default_rng(16)
        model = build_model(use_correlation=True, jitter=True)
        pair = make_pair(rng)
        fn = make_denoiser_fn(model)
        x_a = np.zeros((16, 16, 2))
        x_b = np.full((16, 16, 2), 0.5)
        out_a = fn(x_a, 4, pair)
        out_b = fn(x_b, 4, pair)
        # same pair, different noised flow: lookup must change the output
        assert not np.allclose(out_a, out_b)

    def test_fn_handles_pair_switch(self):
        rng = np.random.default_rng(17)
        model = build_model(use_correlation=True, jitter=True)
        p1, p2 = make_pair(rng), make_pair(rng)
        fn = make_denoiser_fn(model)
        x = rng.standard_normal((16, 16, 2))
        a1 = fn(x, 2, p1)
        b = fn(x, 2, p2)
        a2 = fn(x, 2, p1)
        assert np.allclose(a1, a2)
        assert not np.allclose(a1, b)
