import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import _dense
from crossre.design import build_centered_design
from crossre.errors import ConfigError
from crossre.estimate import FixedEffects, fit, gls_fixed_effects
from crossre.kron import VarianceComponents
from crossre.layout import BalancedLayout, ResponseTable
from crossre.predict import blup_interaction, blup_no_interaction, cell_effect, eblup


def _problem(g, h, m, seed):
    rng = np.random.default_rng(seed)
    layout = BalancedLayout(g, h, m)
    design = build_centered_design(
        layout,
        x_row=rng.normal(size=(g, 1)),
        x_cell=rng.normal(size=(g, h, 1)),
    )
    y = ResponseTable(layout, rng.normal(scale=3.0, size=layout.n))
    theta = VarianceComponents(
        sigma_a2=rng.uniform(0.2, 4.0),
        sigma_b2=rng.uniform(0.2, 4.0),
        sigma_g2=rng.uniform(0.2, 4.0) if m > 1 else 0.0,
        sigma_e2=rng.uniform(0.5, 4.0),
    )
    xi = gls_fixed_effects(theta, design, y)
    return design, y, theta, xi


def test_blup_two_by_two_by_hand():
    layout = BalancedLayout(2, 2, 1)
    design = build_centered_design(layout)
    y = ResponseTable(layout, np.array([1.0, 2.0, 3.0, 4.0]))
    theta = VarianceComponents(1.0, 1.0, 0.0, 1.0)
    xi = FixedEffects.from_vector(np.array([2.5]), design)
    out = blup_no_interaction(theta, xi, design, y)
    # lambda2 = lambda3 = 3; residual row means -1, +1; column means -+0.5
    np.testing.assert_allclose(out.alpha, [-2.0 / 3.0, 2.0 / 3.0])
    np.testing.assert_allclose(out.beta, [-1.0 / 3.0, 1.0 / 3.0])
    assert out.gamma is None


@pytest.mark.parametrize("g,h,m,seed", [
    (3, 4, 2, 1), (4, 3, 3, 2), (2, 5, 2, 3),
])
def test_blup_matches_dense_oracle(g, h, m, seed):
    design, y, theta, xi = _problem(g, h, m, seed)
    out = blup_interaction(theta, xi, design, y)
    alpha, beta, gamma = _dense.blup(
        theta.sigma_a2, theta.sigma_b2, theta.sigma_g2, theta.sigma_e2,
        g, h, m, design.matrix, y.values, xi.vector(),
    )
    np.testing.assert_allclose(out.alpha, alpha, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(out.beta, beta, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(out.gamma, gamma, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("g,h,seed", [(3, 4, 4), (5, 3, 5)])
def test_blup_m1_matches_dense_oracle(g, h, seed):
    design, y, theta, xi = _problem(g, h, 1, seed)
    out = blup_no_interaction(theta, xi, design, y)
    alpha, beta, _ = _dense.blup(
        theta.sigma_a2, theta.sigma_b2, 0.0, theta.sigma_e2,
        g, h, 1, design.matrix, y.values, xi.vector(),
    )
    np.testing.assert_allclose(out.alpha, alpha, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(out.beta, beta, rtol=1e-10, atol=1e-12)


def test_model_guards():
    design, y, theta, xi = _problem(3, 3, 1, seed=6)
    with pytest.raises(ConfigError, match="m = 1"):
        blup_interaction(theta, xi, design, y)
    design2, y2, theta2, xi2 = _problem(3, 3, 2, seed=7)
    with pytest.raises(ConfigError, match="sigma_g2 = 0"):
        blup_no_interaction(theta2, xi2, design2, y2)


def test_eblup_dispatches_on_layout():
    design, y, _, _ = _problem(3, 4, 2, seed=8)
    res = fit(design, y, on_failure="return")
    out = eblup(res, design, y)
    assert out.gamma is not None and out.gamma.shape == (3, 4)
    design1, y1, _, _ = _problem(3, 4, 1, seed=9)
    res1 = fit(design1, y1, on_failure="return")
    out1 = eblup(res1, design1, y1)
    assert out1.gamma is None


def test_cell_effect_combines_components():
    design, y, theta, xi = _problem(3, 4, 2, seed=10)
    out = blup_interaction(theta, xi, design, y)
    want = out.alpha[1] + out.beta[2] + out.gamma[1, 2]
    assert cell_effect(out, 1, 2) == pytest.approx(want)
    with pytest.raises(IndexError):
        cell_effect(out, 3, 0)
    with pytest.raises(IndexError):
        cell_effect(out, 0, 4)


@given(scale=st.floats(1.0, 1e6), seed=st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_more_noise_means_more_shrinkage(scale, seed):
    rng = np.random.default_rng(seed)
    layout = BalancedLayout(4, 4, 2)
    design = build_centered_design(layout)
    y = ResponseTable(layout, rng.normal(scale=3.0, size=layout.n))
    xi = FixedEffects.from_vector(np.array([float(y.values.mean())]), design)
    base = VarianceComponents(1.0, 1.0, 1.0, 1.0)
    noisy = VarianceComponents(1.0, 1.0, 1.0, scale)
    small = blup_interaction(noisy, xi, design, y)
    big = blup_interaction(base, xi, design, y)
    assert np.all(np.abs(small.alpha) <= np.abs(big.alpha) + 1e-12)
    assert np.all(np.abs(small.beta) <= np.abs(big.beta) + 1e-12)


def test_blup_ignores_response_shift_through_refit():
    # shifting y by a constant moves the intercept, not the effects
    design, y, _, _ = _problem(4, 4, 2, seed=12)
    res = fit(design, y, on_failure="return")
    out = eblup(res, design, y)
    shifted = ResponseTable(y.layout, y.values + 50.0)
    res2 = fit(design, shifted, on_failure="return")
    out2 = eblup(res2, design, shifted)
    np.testing.assert_allclose(out2.alpha, out.alpha, atol=1e-5)
    np.testing.assert_allclose(out2.beta, out.beta, atol=1e-5)
