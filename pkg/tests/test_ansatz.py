"""Envelope ansatz U0 and its divergence b."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quasitrans.ansatz import AnsatzField, Envelope, fit_slope, norms
from quasitrans.errors import AccuracyError


@pytest.fixture(scope="module")
def field(mode, fig1):
    return AnsatzField(mode, Envelope.gaussian(), 3e-4, fig1)


def test_zero_envelope(mode, fig1):
    f = AnsatzField(mode, Envelope.constant(0.0), 3e-4, fig1)
    x1, x2 = np.meshgrid(np.linspace(-3, 3, 7), np.linspace(-5, 5, 9))
    u1, u2 = f.eval_U0(x1, x2)
    assert not np.any(u1) and not np.any(u2) and not np.any(f.eval_b(x1, x2))
    assert norms(f) == {"U0_L2": 0.0, "U0_L4": 0.0, "b_L2": 0.0, "b_L1log": 0.0}


def test_constant_envelope_has_no_divergence(mode, fig1):
    f = AnsatzField(mode, Envelope.constant(1.0), 3e-4, fig1)
    assert not np.any(f.eval_b(np.linspace(-2, 2, 9), np.linspace(-4, 4, 9)))


def test_second_component_vanishes_at_carrier_zeros(field):
    x2 = np.arange(-3, 4) * np.pi / field.k0
    _, u2 = field.eval_U0(np.full(x2.shape, 0.7), x2)
    assert np.all(np.abs(u2) <= 1e-14 * np.abs(field.w2(0.7)) * 2 * field.eps)


def test_divergence_vanishes_on_centre_line(field):
    assert not np.any(field.eval_b(np.linspace(-2, 2, 9), np.zeros(9)))


def test_normal_flux_and_tangential_trace_continuous(field):
    x2 = np.linspace(-4, 4, 17)
    z = np.zeros_like(x2)
    um1, um2 = field.eval_U0(z, x2, side="minus")
    up1, up2 = field.eval_U0(z, x2, side="plus")
    scale = 2 * field.eps
    np.testing.assert_allclose(field.eps1(z, "minus") * um1, field.eps1(z, "plus") * up1,
                               atol=1e-5 * scale)
    np.testing.assert_allclose(um2, up2, atol=1e-5 * scale)


def _fd_divergence(field, x1, x2, d):
    def flux(a, c):
        u1, u2 = field.eval_U0(a, c)
        e = field.eps1(a)
        return e * u1, e * u2
    return ((flux(x1 + d, x2)[0] - flux(x1 - d, x2)[0])
            + (flux(x1, x2 + d)[1] - flux(x1, x2 - d)[1])) / (2 * d)


def test_b_is_divergence_of_eps1_U0(field):
    # central differences away from x1 = 0 converge at second order to b
    x1 = np.array([-1.3, -0.4, 0.5, 1.7])
    x2 = np.array([0.3, -1.1, 2.2, 3.0])
    b = field.eval_b(x1, x2)
    errs = [np.abs(_fd_divergence(field, x1, x2, d) - b).max() for d in (2e-2, 1e-2)]
    assert errs[1] <= 1e-3 * np.abs(b).max()
    assert np.log2(errs[0] / errs[1]) == pytest.approx(2.0, abs=0.2)


@settings(max_examples=20, deadline=None)
@given(st.floats(-6, 6), st.floats(-6, 6), st.floats(1e-5, 1e-3))
def test_carrier_part_is_independent_of_eps(field, x1, x2, eps):
    # U0 / (2 eps A(eps x2)) depends on (x1, x2) only
    other = AnsatzField(field.mode, Envelope.constant(1.0), eps, field.profile)
    ref = AnsatzField(field.mode, Envelope.constant(1.0), field.eps, field.profile)
    a = np.array(other.eval_U0(x1, x2)) / (2 * eps)
    b = np.array(ref.eval_U0(x1, x2)) / (2 * field.eps)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_halving_eps_ratios(mode, fig1):
    a = norms(AnsatzField(mode, Envelope.gaussian(), 5e-5, fig1))
    b = norms(AnsatzField(mode, Envelope.gaussian(), 2.5e-5, fig1))
    assert b["U0_L2"] / a["U0_L2"] == pytest.approx(2**-0.5, rel=0.02)
    assert b["U0_L4"] / a["U0_L4"] == pytest.approx(2**-0.75, rel=0.02)
    assert b["b_L2"] / a["b_L2"] == pytest.approx(2**-1.5, rel=0.02)


def test_L1log_over_eps_power_is_bounded(mode, fig1):
    eps = [1e-5, 2e-5, 5e-5, 1e-4]
    vals = np.array([norms(AnsatzField(mode, Envelope.gaussian(), e, fig1))["b_L1log"] for e in eps])
    scaled = vals / np.array(eps) ** 0.75
    assert scaled.max() / scaled.min() < 1.5


def test_quadrature_self_check(field):
    with pytest.raises(AccuracyError):
        norms(field, order=2)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 10), st.floats(1.0, 3.0), st.floats(-5, 5))
def test_fit_slope_recovers_power_laws(scale, power, shift):
    x = np.array([1e-3, 7e-4, 5e-4, 3e-4, 2e-4, 1e-4])
    y = scale * x**power
    assert fit_slope(x, y) == pytest.approx(power, abs=1e-9)
    # rescaling x by a constant only shifts the log data
    assert fit_slope(2 * x, scale * (2 * x) ** power * np.exp(shift)) == pytest.approx(power, abs=1e-9)


@pytest.mark.parametrize("eps", [0.0, 1.0, -1e-4])
def test_invalid_eps(mode, fig1, eps):
    with pytest.raises(ValueError):
        AnsatzField(mode, Envelope.gaussian(), eps, fig1)


def test_invalid_gaussian_coefficient():
    with pytest.raises(ValueError):
        Envelope.gaussian(-1.0)
