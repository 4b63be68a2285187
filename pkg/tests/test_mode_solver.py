"""Dispersion solver for TM interface modes."""

import dataclasses

import numpy as np
import pytest

from quasitrans.errors import ConfigurationError
from quasitrans.mode_solver import (
    DielectricProfile, Grid1D, assemble_eigenproblem, builtin_profile, compute_mode,
    operator_residual, reconstruct_mode, solve_dispersion, verify_mode,
)

K0_FIG1 = 3.4352  # value quoted for the fig1 profile at omega0 = 3


def test_fig1_jump_parameter_is_one(fig1):
    assert fig1.eps1_at_interface == (1.0, 2.0)
    assert fig1.nu == 1.0


def test_continuous_profile_gives_plain_operator():
    prof = builtin_profile("continuous")
    assert prof.nu == 0.0
    grid = Grid1D.symmetric(1.0, 0.25)
    A, B = assemble_eigenproblem(prof, 2.0, grid)
    x = grid.x
    eps = prof.eps1(x)
    drift = prof.deps1(x) / eps
    h = 0.25
    # centered drift with the averaged one-sided value at x1 = 0
    drift[4] = 0.5 * (0 / 2 + (-1) / 2)
    eps[4] = 2.0
    want = (np.diag(2 / h**2 - eps[1:-1] * 4.0)
            + np.diag(-1 / h**2 - drift[2:-1] / (2 * h), -1)
            + np.diag(-1 / h**2 + drift[1:-2] / (2 * h), 1))
    np.testing.assert_allclose(A.toarray(), want, rtol=1e-13)
    np.testing.assert_array_equal(B.toarray(), -np.eye(7))


def test_five_point_stencil():
    prof = DielectricProfile.from_expressions("1", "1")
    A, B = assemble_eigenproblem(prof, 0.0, Grid1D(-2.0, 2.0, 5))
    np.testing.assert_array_equal(A.toarray(), [[2, -1, 0], [-1, 2, -1], [0, -1, 2]])
    np.testing.assert_array_equal(B.toarray(), -np.eye(3))


def test_fig1_dispersion(fig1, fine_grid):
    cands = solve_dispersion(fig1, 3.0, fine_grid)
    assert cands, "no localized mode"
    best = cands[0]
    assert abs(best.k0 - K0_FIG1) <= 0.01
    assert best.eig_residual <= 1e-8
    assert best.boundary_ratio <= 1e-6


def test_step_profile_has_no_mode():
    assert solve_dispersion(builtin_profile("step"), 3.0, Grid1D.symmetric(20.0, 2e-3)) == []
    with pytest.raises(LookupError):
        compute_mode(builtin_profile("step"), 3.0, Grid1D.symmetric(20.0, 2e-3))


def test_domain_doubling_leaves_k0(fig1, mode):
    half = compute_mode(fig1, 3.0, Grid1D.symmetric(20.0, 1e-3))
    assert abs(half.k0 - mode.k0) < 1e-6


def test_k0_self_convergence(fig1):
    ks = [compute_mode(fig1, 3.0, Grid1D.symmetric(20.0, h)).k0 for h in (4e-3, 2e-3, 1e-3)]
    d = np.abs(np.diff(ks))
    assert d[1] < d[0]


def test_mode_normalization_and_relations(fig1, mode):
    assert np.max(np.abs(mode.w3)) == pytest.approx(1.0)
    assert mode.w3[mode.interface_index] > 0
    eps = fig1.eps1(mode.x)
    np.testing.assert_allclose(mode.w1, -mode.k0 / (3.0 * eps) * mode.w3, rtol=1e-13)


def test_reconstruction_of_zero_and_sign(fig1, mode, fine_grid):
    z = reconstruct_mode(np.zeros_like(mode.w3), fig1, 3.0, mode.k0, fine_grid)
    assert not np.any(z.w1) and not np.any(z.w2_imag) and not np.any(z.w3)
    rep = verify_mode(z, fig1)
    assert rep["residual_L"] == 0 and rep["jump_w3"] == 0
    flipped = reconstruct_mode(-mode.w3, fig1, 3.0, mode.k0, fine_grid)
    np.testing.assert_allclose(flipped.w1, -mode.w1, atol=1e-15)
    np.testing.assert_allclose(flipped.w2_imag, -mode.w2_imag, atol=1e-15)


def test_zero_frequency_is_rejected(fig1, mode, fine_grid):
    with pytest.raises(ValueError):
        reconstruct_mode(mode.w3, fig1, 0.0, mode.k0, fine_grid)


def test_interface_conditions(fig1, mode):
    rep = verify_mode(mode, fig1)
    for key in ("jump_eps1w1", "jump_w2", "jump_w3"):
        assert rep[key] <= 1e-4, (key, rep[key])


def test_jumps_shrink_at_least_linearly(fig1, mode):
    fine = verify_mode(compute_mode(fig1, 3.0, Grid1D.symmetric(40.0, 5e-4)), fig1)
    coarse = verify_mode(mode, fig1)
    for key in ("jump_eps1w1", "jump_w2", "jump_w3"):
        assert coarse[key] / fine[key] >= 1.8


def test_left_decay_matches_constant_coefficient_solution(fig1, mode):
    # for x1 < 0, eps1 = 1 and w3 ~ exp(sqrt(k0^2 - omega0^2) x1)
    rate = verify_mode(mode, fig1)["left_decay_rate"]
    assert rate == pytest.approx(np.sqrt(mode.k0**2 - 9.0), rel=0.01)


def test_right_side_decays(fig1, mode):
    assert verify_mode(mode, fig1)["right_decay_tail"] < 1e-10


def test_eigenvalue_is_sharp(fig1, mode):
    base = operator_residual(mode, fig1)
    off = operator_residual(dataclasses.replace(mode, k0=1.1 * mode.k0), fig1)
    assert off >= 10 * base


def test_mirrored_profile(fig1, mode, fine_grid):
    mir = compute_mode(fig1.mirrored(), 3.0, fine_grid)
    assert abs(mir.k0 - mode.k0) < 1e-6
    np.testing.assert_allclose(mir.w3[::-1], mode.w3, atol=1e-5)


def test_second_localized_mode(fig1, fine_grid):
    ks = sorted(c.k0 for c in solve_dispersion(fig1, 3.0, fine_grid))
    assert len(ks) == 2 and ks[0] == pytest.approx(3.0588, abs=1e-3)


@pytest.mark.parametrize("make", [
    lambda: DielectricProfile.from_expressions("-1", "1").check(np.linspace(-1, 1, 5)),
    lambda: builtin_profile("nope"),
    lambda: Grid1D.from_spacing(-1.0, 1.0, 0.3),
    lambda: Grid1D(-1.0, 2.0, 5).interface_index,
    lambda: Grid1D(0.0, 2.0, 5).interface_index,
    lambda: assemble_eigenproblem(builtin_profile("fig1"), 3.0, Grid1D(-2.0, 2.0, 5)),
])
def test_configuration_errors(make):
    with pytest.raises(ConfigurationError):
        make()
