"""Flow-matching core: path identities, targets, loss, time samplers,
Euler integration (exactness on constant fields, first-order convergence
on an analytic Gaussian-to-Gaussian flow)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vam.flow import (
    ContractViolation,
    LogitNormalTime,
    SqrtShiftedTime,
    UniformTime,
    cfm_loss,
    check_flow_time,
    conditional_target,
    default_video_steps,
    integrate,
    interpolate,
    sample_time,
)


def test_interpolate_endpoints():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((4, 5))
    eps = rng.standard_normal((4, 5))
    np.testing.assert_array_equal(interpolate(x0, eps, 0.0), x0)
    np.testing.assert_array_equal(interpolate(x0, eps, 1.0), eps)


def test_interpolate_hand_value():
    assert interpolate(np.array(2.0), np.array(-1.0), 0.25) == pytest.approx(1.25)


def test_interpolate_rejects_mismatch_and_bad_tau():
    with pytest.raises(ContractViolation):
        interpolate(np.zeros(3), np.zeros(4), 0.5)
    with pytest.raises(ContractViolation):
        interpolate(np.zeros(3), np.zeros(3), 1.5)
    with pytest.raises(ContractViolation):
        check_flow_time(-0.01)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_interpolate_affine_in_tau(a, b, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(6)
    eps = rng.standard_normal(6)
    mid = interpolate(x0, eps, (a + b) / 2.0)
    avg = 0.5 * (interpolate(x0, eps, a) + interpolate(x0, eps, b))
    np.testing.assert_allclose(mid, avg, atol=1e-12)


def test_conditional_target_values():
    assert conditional_target(np.array(2.0), np.array(-1.0)) == pytest.approx(-3.0)
    e = np.random.default_rng(1).standard_normal(7)
    np.testing.assert_array_equal(conditional_target(e, e), np.zeros(7))
    np.testing.assert_array_equal(conditional_target(np.zeros(7), e), e)


def test_cfm_loss_values():
    v = np.random.default_rng(2).standard_normal((3, 3))
    assert cfm_loss(v, v) == 0.0
    assert cfm_loss(np.array([1.0, 1.0]), np.array([0.0, 0.0])) == pytest.approx(1.0)
    assert cfm_loss(np.array([3.0]), np.array([1.0])) == pytest.approx(4.0)
    with pytest.raises(ContractViolation):
        cfm_loss(np.zeros(2), np.zeros(3))


# ------------------------------------------------------------------- sampling


def test_logit_normal_midpoint_and_support():
    d = LogitNormalTime(0.0, 1.0)
    assert d.from_normal(0.0) == pytest.approx(0.5)
    samples = d.sample(np.random.default_rng(0), 10_000)
    assert np.all((samples > 0.0) & (samples < 1.0))


def test_logit_normal_rejects_bad_sigma():
    with pytest.raises(ValueError):
        LogitNormalTime(0.0, 0.0)


def test_sqrt_shifted_inverse_cdf_values():
    d = SqrtShiftedTime(0.001)
    # 0.125^(2/3) = 0.25 exactly
    assert d.from_uniform(0.125) == pytest.approx(0.25075)
    assert d.from_uniform(0.0) == pytest.approx(0.001)
    assert d.from_uniform(1.0) == pytest.approx(1.0)


def test_sqrt_shifted_statistics():
    d = SqrtShiftedTime(0.001)
    samples = d.sample(np.random.default_rng(123), 100_000)
    # E[tau] = floor + (1 - floor) * 3/5  (mean of u^(2/3), u uniform, is 3/5)
    assert abs(samples.mean() - 0.6004) < 0.01
    assert samples.min() >= 0.001
    assert samples.max() <= 1.0


def test_logit_normal_median():
    d = LogitNormalTime(0.0, 1.0)
    samples = d.sample(np.random.default_rng(7), 100_000)
    assert abs(np.median(samples) - 0.5) < 0.02


def test_uniform_time_support():
    samples = UniformTime().sample(np.random.default_rng(5), 1000)
    assert np.all((samples >= 0) & (samples <= 1))


def test_sampler_reproducibility():
    for dist in (UniformTime(), LogitNormalTime(0.3, 0.8), SqrtShiftedTime()):
        a = [sample_time(dist, np.random.default_rng(42)) for _ in range(5)]
        b = [sample_time(dist, np.random.default_rng(42)) for _ in range(5)]
        seq = np.random.default_rng(42)
        c = [sample_time(dist, seq) for _ in range(5)]
        assert a == b
        assert len(set(c)) > 1  # a shared generator advances


# ----------------------------------------------------------------- integrate


def test_integrate_constant_field_one_step():
    e = np.array([0.5, -1.0, 2.0])
    c = np.array([1.0, 1.0, 1.0])
    out = integrate(lambda x, t: c, e, 1.0, 0.0, 1)
    np.testing.assert_allclose(out, e - c)


def test_integrate_exact_conditional_field():
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal(6)
    e = rng.standard_normal(6)
    out = integrate(lambda x, t: e - x0, e, 1.0, 0.0, 1)
    np.testing.assert_allclose(out, x0, atol=1e-12)


@given(st.integers(1, 16), st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_integrate_exact_on_state_independent_fields(n_steps, seed):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(4)
    e = rng.standard_normal(4)
    out = integrate(lambda x, t: c, e, 1.0, 0.0, n_steps)
    np.testing.assert_allclose(out, e - c, atol=1e-10)


def test_integrate_degenerate_and_contracts():
    e = np.ones(3)
    out = integrate(lambda x, t: x, e, 1.0, 1.0, 0)
    np.testing.assert_array_equal(out, e)
    with pytest.raises(ContractViolation):
        integrate(lambda x, t: x, e, 0.2, 0.8, 4)
    with pytest.raises(ContractViolation):
        integrate(lambda x, t: x, e, 1.0, 0.0, 0)


def gaussian_flow_field(m0, s0):
    """Marginal velocity field of the 1-D flow from N(0,1) noise to N(m0, s0^2).

    Conditioning on x_tau (jointly Gaussian with x0, eps) gives
    u(x, tau) = (tau - (1 - tau) s0^2) (x - mu_tau) / v_tau - m0 with
    mu_tau = (1 - tau) m0, v_tau = (1 - tau)^2 s0^2 + tau^2.
    """

    def field(x, tau):
        mu = (1 - tau) * m0
        v = (1 - tau) ** 2 * s0**2 + tau**2
        return (tau - (1 - tau) * s0**2) * (x - mu) / v - m0

    return field


def test_integrator_first_order_convergence():
    # closed form: the flow preserves the Gaussian quantile, x(0) = m0 + s0 x(1)
    m0, s0 = 1.5, 0.5
    field = gaussian_flow_field(m0, s0)
    x1 = np.array([0.7, -1.3, 0.1])
    exact = m0 + s0 * x1
    errors = []
    for n in (2, 4, 8, 16):
        approx = integrate(field, x1, 1.0, 0.0, n)
        errors.append(np.abs(approx - exact).max())
    for coarse, fine in zip(errors, errors[1:]):
        assert 1.7 < coarse / fine < 2.3, errors


def test_default_video_steps_rule():
    assert default_video_steps(1.0) == 0
    assert default_video_steps(0.5) == 5
    assert default_video_steps(0.0) == 10
    assert default_video_steps(0.95) == 1
