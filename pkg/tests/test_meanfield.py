import math

import numpy as np
import pytest

from noisyprop.activations import Activation
from noisyprop.errors import DomainError, FitError, NoCriticalInitError, UnsupportedActivationError
from noisyprop.meanfield import (
    FLOAT32_MAX,
    FLOAT32_TINY,
    InitSpec,
    LayerTrace,
    NetworkShape,
    TraceKind,
    backprop_covariance_trace,
    backprop_variance_trace,
    chi,
    chi_quadrature,
    correlation_fixed_point,
    correlation_step_general,
    correlation_step_relu_critical,
    correlation_trace,
    correlation_trace_relu_critical,
    critical_init,
    depth_scale,
    fit_depth_scale,
    overflow_depth,
    rectifier_slope,
    variance_fixed_point,
    variance_step,
    variance_trace,
)
from noisyprop.noise import NoiseSpec, second_moment

RELU = Activation.relu()


class TestInitAndShape:
    def test_init_validation(self):
        with pytest.raises(DomainError):
            InitSpec(0.0)
        with pytest.raises(DomainError):
            InitSpec(1.0, -0.1)

    def test_from_variances(self):
        init = InitSpec.from_variances(1.2, 0.04)
        assert init.sigma_w2 == pytest.approx(1.2) and init.sigma_b == pytest.approx(0.2)

    def test_growing_shape(self):
        shape = NetworkShape.growing(10, 3, 1 / 0.6)
        assert shape.widths == (10, 17, 29, 49)
        assert shape.depth == 3

    def test_growing_exact_products_not_bumped(self):
        assert NetworkShape.growing(4, 3, 2.0).widths == (4, 8, 16, 32)


class TestVarianceMap:
    def test_relu_q4(self):
        assert variance_step(4.0, InitSpec(math.sqrt(2)), NoiseSpec.none(), RELU) == pytest.approx(4.0)

    def test_critical_dropout_identity(self, dropout6):
        init = InitSpec(math.sqrt(1.2))
        assert variance_step(4.0, init, dropout6, RELU) == pytest.approx(4.0, abs=1e-12)

    def test_additive_affine(self):
        # sigma_w^2 = 2 init + additive Gaussian sigma=1: slope 1, intercept 2
        init = InitSpec(math.sqrt(2))
        noise = NoiseSpec.gaussian(1.0, additive=True)
        for q in (0.0, 3.0, 10.0):
            assert variance_step(q, init, noise, RELU) == pytest.approx(q + 2.0, abs=1e-12)

    def test_bias_adds(self):
        assert variance_step(2.0, InitSpec(1.0, 0.5), NoiseSpec.none(), RELU) == pytest.approx(1.25)

    def test_trace_monotone_off_critical(self, dropout6):
        base = critical_init(dropout6, RELU)
        up = variance_trace(4.0, 15, InitSpec(base.sigma_w * 1.15), dropout6, RELU).values
        down = variance_trace(4.0, 15, InitSpec(base.sigma_w * 0.85), dropout6, RELU).values
        assert np.all(np.diff(up) > 0) and np.all(np.diff(down) < 0)

    def test_trace_flags_overflow(self):
        tr = variance_trace(1.0, 200, InitSpec.from_variances(4.0), NoiseSpec.none(), RELU)
        g = 2.0
        assert tr.overflow_layer == math.ceil(math.log(FLOAT32_MAX) / math.log(g))
        assert len(tr) == 201 and tr.kind is TraceKind.VARIANCE

    def test_trace_flags_underflow(self):
        tr = variance_trace(1.0, 200, InitSpec.from_variances(1.0), NoiseSpec.none(), RELU)
        assert tr.underflow_layer == math.ceil(math.log(FLOAT32_TINY) / math.log(0.5))

    def test_trace_values_read_only(self):
        tr = variance_trace(1.0, 3, InitSpec(1.0), NoiseSpec.none(), RELU)
        with pytest.raises(ValueError):
            tr.values[0] = 2.0

    def test_rejects_bad_inputs(self):
        with pytest.raises(DomainError):
            variance_step(-1.0, InitSpec(1.0), NoiseSpec.none(), RELU)
        with pytest.raises(DomainError):
            variance_trace(1.0, 0, InitSpec(1.0), NoiseSpec.none(), RELU)


class TestFixedPoints:
    def test_tanh_unit_init_converges(self, tanh):
        fp = variance_fixed_point(InitSpec(1.0), NoiseSpec.none(), tanh, q0=4.0)
        assert fp.converged and fp.residual <= 1e-12
        assert fp.value < 1e-4

    def test_tanh_with_bias_has_positive_fixed_point(self, tanh):
        init = InitSpec(1.5, 0.3)
        fp = variance_fixed_point(init, NoiseSpec.none(), tanh)
        assert fp.converged
        assert variance_step(fp.value, init, NoiseSpec.none(), tanh) == pytest.approx(fp.value, abs=1e-11)

    def test_additive_relu_diverges(self):
        fp = variance_fixed_point(InitSpec(math.sqrt(2)), NoiseSpec.gaussian(1.0, additive=True), RELU)
        assert not fp.converged

    def test_subcritical_bias_fixed_point(self):
        init = InitSpec(1.0, 0.5)
        fp = variance_fixed_point(init, NoiseSpec.none(), RELU)
        assert fp.value == pytest.approx(0.25 / (1 - 0.5), rel=1e-10)

    def test_marginal_identity(self, dropout6):
        fp = variance_fixed_point(critical_init(dropout6, RELU), dropout6, RELU, q0=3.0)
        assert fp.converged and fp.marginal and fp.value == 3.0


class TestCriticalInit:
    @pytest.mark.parametrize(
        "noise, mu2",
        [(NoiseSpec.dropout(0.5), 2.0), (NoiseSpec.gaussian(0.25), 1.0625), (NoiseSpec.laplace(0.5), 1.5),
         (NoiseSpec.poisson(), 2.0), (NoiseSpec.none(), 1.0), (NoiseSpec.gaussian(0.0), 1.0)],
    )
    def test_relu(self, noise, mu2):
        init = critical_init(noise, RELU)
        assert init.sigma_w == pytest.approx(math.sqrt(2 / mu2), abs=1e-12)
        assert init.sigma_b == 0.0
        assert rectifier_slope(init, noise, RELU) == pytest.approx(1.0, abs=1e-12)

    def test_prelu(self):
        init = critical_init(NoiseSpec.dropout(0.8), Activation.prelu(0.3))
        assert init.sigma_w == pytest.approx(math.sqrt(2 / (1.25 * 1.09)), abs=1e-12)

    @pytest.mark.parametrize("noise", [NoiseSpec.gaussian(1.0, additive=True), NoiseSpec.laplace(0.1, additive=True)])
    def test_additive_impossible(self, noise):
        with pytest.raises(NoCriticalInitError):
            critical_init(noise, RELU)

    def test_zero_additive_is_noiseless(self):
        assert critical_init(NoiseSpec.gaussian(0.0, additive=True), RELU).sigma_w == pytest.approx(math.sqrt(2))

    def test_tanh_unsupported(self, tanh):
        with pytest.raises(UnsupportedActivationError):
            critical_init(NoiseSpec.none(), tanh)


class TestCorrelationMap:
    def test_endpoints(self):
        assert correlation_step_relu_critical(1.0, 1.0) == pytest.approx(1.0)
        assert correlation_step_relu_critical(0.0, 1.0) == pytest.approx(1 / math.pi)
        assert correlation_step_relu_critical(1.0, 2.0) == pytest.approx(0.5)

    @pytest.mark.parametrize("c", np.linspace(-0.9, 0.9, 7))
    @pytest.mark.parametrize("mu2", [1.0, 1 / 0.6, 2.0])
    def test_closed_form_matches_quadrature(self, c, mu2):
        init = InitSpec(math.sqrt(2 / mu2))
        noise = NoiseSpec.dropout(1 / mu2)
        c_gen, qa, qb = correlation_step_general(c, 2.0, 2.0, init, noise, RELU)
        assert c_gen == pytest.approx(correlation_step_relu_critical(c, mu2), abs=1e-10)
        assert qa == pytest.approx(2.0) and qb == pytest.approx(2.0)

    def test_general_trace_tanh_increases_correlation(self, tanh):
        tr = correlation_trace(0.2, 1.0, 5, InitSpec(1.5), NoiseSpec.none(), tanh)
        assert tr.kind is TraceKind.CORRELATION and len(tr) == 6
        assert np.all(np.abs(tr.values) <= 1.0)

    def test_fixed_point_noiseless(self):
        fp = correlation_fixed_point(1.0)
        assert fp.value == 1.0 and fp.marginal

    def test_fixed_point_values(self):
        assert correlation_fixed_point(2.0).value == pytest.approx(0.21723362821, abs=1e-9)
        assert correlation_fixed_point(100.0).value < 0.1

    def test_fixed_point_is_fixed(self):
        for mu2 in (1.1, 1.5, 3.0):
            cs = correlation_fixed_point(mu2).value
            assert correlation_step_relu_critical(cs, mu2) == pytest.approx(cs, abs=1e-12)

    def test_flat_trace_from_fixed_point(self):
        cs = correlation_fixed_point(1 / 0.6).value
        tr = correlation_trace_relu_critical(cs, 15, 1 / 0.6)
        assert np.max(np.abs(tr.values - cs)) < 1e-11

    def test_mu2_below_one_rejected(self):
        with pytest.raises(DomainError):
            correlation_step_relu_critical(0.5, 0.9)


class TestChiAndDepthScale:
    def test_chi_noiseless_is_one(self):
        assert chi(1.0, 1.0) == pytest.approx(1.0)

    def test_chi_matches_finite_difference(self):
        mu2 = 2.0
        cs = correlation_fixed_point(mu2).value
        h = 1e-5
        fd = (correlation_step_relu_critical(cs + h, mu2) - correlation_step_relu_critical(cs - h, mu2)) / (2 * h)
        assert chi(cs, mu2) == pytest.approx(fd, abs=1e-6)

    def test_chi_quadrature_matches_closed_form(self):
        mu2 = 1 / 0.6
        cs = correlation_fixed_point(mu2).value
        init = InitSpec(math.sqrt(2 / mu2))
        assert chi_quadrature(cs, 4.0, init, RELU) == pytest.approx(chi(cs, mu2), abs=1e-10)

    def test_depth_scale_decreasing(self):
        xs = [depth_scale(m) for m in (1.1, 1.25, 1.5, 2.0, 3.0)]
        assert all(a > b for a, b in zip(xs, xs[1:]))

    def test_depth_scale_noiseless_infinite(self):
        assert depth_scale(1.0) == math.inf

    def test_depth_scale_value(self):
        assert depth_scale(2.0) == pytest.approx(0.79631, abs=1e-5)


class TestBackprop:
    def test_constant_width_ratio(self):
        noise = NoiseSpec.dropout(0.5)
        shape = NetworkShape.constant(100, 10)
        tr = backprop_variance_trace(shape, critical_init(noise, RELU), noise, RELU)
        np.testing.assert_allclose(tr.values[:-1] / tr.values[1:], 0.5, rtol=1e-14)
        assert tr.values[-1] == 1.0 and len(tr) == 11

    def test_growth_schedule_flat(self):
        noise = NoiseSpec.dropout(0.5)
        shape = NetworkShape.growing(8, 6, second_moment(noise))
        tr = backprop_variance_trace(shape, critical_init(noise, RELU), noise, RELU)
        np.testing.assert_allclose(tr.values, 1.0, rtol=1e-14)

    def test_tanh_uses_forward_trace(self, tanh):
        shape = NetworkShape.constant(10, 3)
        init = InitSpec(1.0)
        fwd = variance_trace(2.0, 3, init, NoiseSpec.none(), tanh)
        tr = backprop_variance_trace(shape, init, NoiseSpec.none(), tanh, forward_trace=fwd)
        assert np.all(np.diff(tr.values) > 0)  # E[tanh'^2] < 1 shrinks errors going down

    def test_forward_trace_length_checked(self):
        fwd = variance_trace(2.0, 3, InitSpec(1.0), NoiseSpec.none(), RELU)
        with pytest.raises(DomainError):
            backprop_variance_trace(NetworkShape.constant(10, 5), InitSpec(1.0), NoiseSpec.none(), RELU,
                                    forward_trace=fwd)

    def test_covariance_trace(self):
        shape = NetworkShape.constant(50, 6)
        tr = backprop_covariance_trace(shape, 0.3)
        assert len(tr) == 6 and tr.values[-1] == 1.0
        np.testing.assert_allclose(tr.values[:-1] / tr.values[1:], 0.3)

    def test_covariance_trace_width_ratio(self):
        shape = NetworkShape((10, 20, 40, 80))
        tr = backprop_covariance_trace(shape, 0.5)
        # layer l gets D_{l+1}/D_{l+2} * chi = 0.25 per step
        np.testing.assert_allclose(tr.values[:-1] / tr.values[1:], 0.25)

    def test_covariance_domain(self):
        with pytest.raises(DomainError):
            backprop_covariance_trace(NetworkShape.constant(5, 1), 0.5)
        with pytest.raises(DomainError):
            backprop_covariance_trace(NetworkShape.constant(5, 4), 1.5)


class TestOverflowDepth:
    def test_example(self, dropout6):
        assert overflow_depth(InitSpec.from_variances(2.0), dropout6) == pytest.approx(173.685, abs=1e-3)

    def test_critical_is_infinite(self, dropout6):
        assert overflow_depth(InitSpec.from_variances(1.2), dropout6) == math.inf

    def test_underflow_side(self, dropout6):
        L = overflow_depth(InitSpec.from_variances(0.5), dropout6)
        assert L == pytest.approx(math.log(FLOAT32_TINY) / math.log(0.5 / 0.6 / 2))

    def test_consistent_with_theory_trace(self, dropout6):
        init = InitSpec.from_variances(2.4)
        tr = variance_trace(1.0, 400, init, dropout6, RELU)
        assert tr.overflow_layer == math.ceil(overflow_depth(init, dropout6))

    def test_domain(self, dropout6):
        with pytest.raises(DomainError):
            overflow_depth(InitSpec(1.0), NoiseSpec.gaussian(1.0, additive=True))
        with pytest.raises(DomainError):
            overflow_depth(InitSpec(1.0, 0.1), dropout6)
        with pytest.raises(DomainError):
            overflow_depth(InitSpec(1.0), dropout6, q0=0.0)


class TestFitDepthScale:
    def test_synthetic_exponential(self):
        xi = 3.7
        layers = np.arange(30)
        values = 0.25 + 0.8 * np.exp(-layers / xi)
        fit = fit_depth_scale(values, 0.25)
        assert fit.xi == pytest.approx(xi, rel=1e-10)
        assert fit.r_squared == pytest.approx(1.0)
        assert fit.layers[0] == 1

    def test_theory_trace(self):
        mu2 = 2.0
        cs = correlation_fixed_point(mu2).value
        fit = fit_depth_scale(correlation_trace_relu_critical(0.0, 40, mu2), cs)
        assert fit.xi == pytest.approx(depth_scale(mu2), rel=0.01)

    def test_drops_floor_layers(self):
        values = np.array([1.0, 0.5, 0.25, 0.125, 1e-12, 0.0625])
        fit = fit_depth_scale(values, 0.0)
        assert 4 not in fit.layers

    def test_contiguous_stops_at_first_gap(self):
        values = np.array([1.0, 0.5, 0.25, 0.125, 1e-12, 0.0625, 0.03])
        fit = fit_depth_scale(values, 0.0, contiguous=True)
        assert list(fit.layers) == [1, 2, 3]

    def test_floor_array(self):
        values = np.exp(-np.arange(10.0))
        fit = fit_depth_scale(values, 0.0, floor=np.full(10, 1e-3))
        assert fit.layers.max() == 6

    def test_too_few_points(self):
        with pytest.raises(FitError):
            fit_depth_scale(np.array([1.0, 0.5, 0.5]), 0.5)

    def test_accepts_layer_trace(self):
        tr = LayerTrace(TraceKind.CORRELATION, np.exp(-np.arange(8.0)), 1.0)
        assert fit_depth_scale(tr, 0.0).xi == pytest.approx(1.0)
