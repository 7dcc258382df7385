"""Height/color field and opacity-scale tests."""

import numpy as np
import pytest
import torch

from neuralterrain.encoding import HashEncodingSpec
from neuralterrain.fields import (
    ColorField,
    HeightField,
    OpacityScale,
    logistic_cdf,
    logistic_pdf,
)

from gradcheck import fd_grad_at, probe_parameter_indices, relative_error

SMALL = dict(levels=4, base_resolution=4, max_resolution=32, log2_table_size=10)


def small_spec():
    return HashEncodingSpec(**SMALL)


def gen(seed=42):
    return torch.Generator().manual_seed(seed)


class TestHeightField:
    def test_default_architecture_dimensions(self):
        field = HeightField(generator=gen())
        hidden = field.net.hidden
        assert len(hidden) == 8
        assert hidden[0].in_features == 32
        # Skip connection: layer 5 (index 4) sees hidden + encoding.
        assert hidden[4].in_features == 128 + 32
        for i in (1, 2, 3, 5, 6, 7):
            assert hidden[i].in_features == 128
        assert all(layer.out_features == 128 for layer in hidden)
        assert field.net.head.out_features == 1

    def test_initial_surface_sits_near_the_offset(self):
        field = HeightField(
            small_spec(), height_offset=0.37, generator=gen(), dtype=torch.float64
        )
        pts = torch.rand(200, 2, generator=gen(1), dtype=torch.float64) * 10
        out = field(pts)
        np.testing.assert_allclose(out.detach().numpy(), 0.37, atol=0.05)

    def test_zeroed_head_returns_offset_exactly(self):
        field = HeightField(
            small_spec(), height_offset=1.5, generator=gen(), dtype=torch.float64
        )
        with torch.no_grad():
            field.net.head.weight.zero_()
            field.net.head.bias.zero_()
        pts = torch.rand(50, 2, generator=gen(1), dtype=torch.float64) * 10
        np.testing.assert_array_equal(field(pts).detach().numpy(), 1.5)

    def test_outputs_finite_over_domain(self):
        field = HeightField(small_spec(), generator=gen(), dtype=torch.float64)
        pts = torch.rand(10_000, 2, generator=gen(1), dtype=torch.float64) * 10
        assert torch.isfinite(field(pts)).all()

    def test_forward_is_deterministic(self):
        field = HeightField(small_spec(), generator=gen(), dtype=torch.float64)
        pts = torch.rand(32, 2, generator=gen(1), dtype=torch.float64) * 10
        assert torch.equal(field(pts), field(pts))

    def test_same_seed_same_parameters(self):
        a = HeightField(small_spec(), generator=gen(3))
        b = HeightField(small_spec(), generator=gen(3))
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_parameter_gradients_match_finite_differences(self):
        field = HeightField(small_spec(), generator=gen(), dtype=torch.float64)
        pts = torch.rand(64, 2, generator=gen(1), dtype=torch.float64) * 10
        target = torch.rand(64, generator=gen(2), dtype=torch.float64)

        def loss():
            return ((field(pts) - target) ** 2).mean()

        value = loss()
        rng = np.random.default_rng(42)
        params = dict(field.named_parameters())
        grads = torch.autograd.grad(value, params.values())
        for (name, param), grad in zip(params.items(), grads):
            if "hidden.2" not in name and "head" not in name:
                continue
            flat = grad.flatten()
            for index in probe_parameter_indices(flat, 5, rng):
                fd = fd_grad_at(loss, param, int(index), 1e-4)
                err = relative_error(float(flat[index]), fd)
                assert err < 1e-3, f"{name}[{index}]: {err}"


class TestColorField:
    def test_default_architecture_dimensions(self):
        field = ColorField(generator=gen())
        assert len(field.net.hidden) == 4
        assert field.net.hidden[0].in_features == 32
        assert field.net.head.out_features == 3

    def test_outputs_strictly_inside_unit_interval(self):
        field = ColorField(small_spec(), generator=gen(), dtype=torch.float64)
        pts = torch.rand(10_000, 2, generator=gen(1), dtype=torch.float64) * 10
        out = field(pts)
        assert out.shape == (10_000, 3)
        assert (out > 0).all() and (out < 1).all()

    def test_zero_logits_give_mid_gray(self):
        field = ColorField(small_spec(), generator=gen(), dtype=torch.float64)
        with torch.no_grad():
            field.net.head.weight.zero_()
            field.net.head.bias.zero_()
        pts = torch.rand(10, 2, generator=gen(1), dtype=torch.float64) * 10
        np.testing.assert_array_equal(field(pts).detach().numpy(), 0.5)

    def test_single_channel_output(self):
        field = ColorField(small_spec(), channels=1, generator=gen())
        assert field(torch.rand(4, 2) * 10).shape == (4, 1)

    def test_rejects_unsupported_channel_count(self):
        with pytest.raises(ValueError, match="channels"):
            ColorField(small_spec(), channels=4, generator=gen())

    def test_parameter_gradients_match_finite_differences(self):
        field = ColorField(small_spec(), generator=gen(), dtype=torch.float64)
        pts = torch.rand(64, 2, generator=gen(1), dtype=torch.float64) * 10
        target = torch.rand(64, 3, generator=gen(2), dtype=torch.float64)

        def loss():
            return (field(pts) - target).abs().mean()

        value = loss()
        rng = np.random.default_rng(42)
        params = dict(field.named_parameters())
        grads = torch.autograd.grad(value, params.values())
        for (name, param), grad in zip(params.items(), grads):
            if "hidden.1" not in name and "head" not in name:
                continue
            flat = grad.flatten()
            for index in probe_parameter_indices(flat, 5, rng):
                fd = fd_grad_at(loss, param, int(index), 1e-4)
                err = relative_error(float(flat[index]), fd)
                assert err < 1e-3, f"{name}[{index}]: {err}"


class TestOpacityScale:
    def test_exponential_parameterization_stays_positive(self):
        scale = OpacityScale(initial_s=50.0, dtype=torch.float64)
        assert scale.value == pytest.approx(50.0, rel=1e-12)
        with torch.no_grad():
            scale.rho.fill_(-40.0)
        assert scale.value > 0

    def test_box_height_rule(self):
        """Transition width 4/s equals the normalized box height."""
        scale = OpacityScale.for_box_height(0.25, dtype=torch.float64)
        assert scale.value == pytest.approx(16.0, rel=1e-12)

    def test_gradient_of_s_wrt_raw_parameter(self):
        scale = OpacityScale(initial_s=10.0, dtype=torch.float64)
        s = scale()
        (grad,) = torch.autograd.grad(s, scale.rho)
        assert float(grad) == pytest.approx(10.0, rel=1e-10)

    def test_rejects_nonpositive_initial(self):
        with pytest.raises(ValueError, match="positive"):
            OpacityScale(initial_s=0.0)
        with pytest.raises(ValueError, match="positive"):
            OpacityScale.for_box_height(-1.0)


class TestLogisticFunctions:
    def test_cdf_at_zero_is_half(self):
        for s in (0.1, 1.0, 100.0, 1e4):
            x = torch.tensor(0.0, dtype=torch.float64)
            assert float(logistic_cdf(x, s)) == 0.5

    def test_pdf_is_nonnegative_and_integrates_to_one(self):
        s = 37.0
        x = torch.linspace(-20 / s, 20 / s, 20001, dtype=torch.float64)
        pdf = logistic_pdf(x, s)
        assert (pdf >= 0).all()
        integral = torch.trapezoid(pdf, x)
        assert float(integral) == pytest.approx(1.0, abs=1e-6)

    def test_pdf_matches_cdf_derivative(self):
        rng = np.random.default_rng(42)
        for s in (0.5, 10.0, 300.0):
            xs = torch.tensor(rng.normal(scale=3 / s, size=50))
            step = 1e-6 / s
            fd = (logistic_cdf(xs + step, s) - logistic_cdf(xs - step, s)) / (
                2 * step
            )
            np.testing.assert_allclose(
                logistic_pdf(xs, s).numpy(), fd.numpy(), atol=1e-8, rtol=1e-6
            )

    def test_stable_in_saturated_tails(self):
        x = torch.tensor([700.0, -700.0], dtype=torch.float64)
        cdf = logistic_cdf(x, 1.0)
        pdf = logistic_pdf(x, 1.0)
        assert torch.isfinite(cdf).all() and torch.isfinite(pdf).all()
        np.testing.assert_allclose(cdf.numpy(), [1.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(pdf.numpy(), [0.0, 0.0], atol=1e-15)
