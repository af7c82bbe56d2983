import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import _dense
from crossre.design import build_centered_design
from crossre.errors import ConfigError, RankDeficiencyError, ResourceError
from crossre.estimate import fit
from crossre.kron import VarianceComponents
from crossre.layout import BalancedLayout, ResponseTable
from crossre.uncertainty import (
    JointCovariance,
    MseEstimate,
    PredictionInterval,
    eblup_gradient,
    info_matrix_B,
    joint_covariance,
    kh_pr_mse,
    mse_bundle,
    mse_kh,
    mse_lsw,
    mse_lsw_all,
    mse_pr,
    prediction_interval,
    shrinkage_gradient,
    trace_pair_matrix,
)

THETA = VarianceComponents(9.0, 49.0, 36.0, 81.0)
THETA_STAR = VarianceComponents(9.0, 49.0, 0.0, 81.0)


def _covariate_problem(g, h, m, seed=0):
    rng = np.random.default_rng(seed)
    layout = BalancedLayout(g, h, m)
    design = build_centered_design(
        layout,
        x_row=rng.normal(size=(g, 2)),
        x_col=rng.normal(size=(h, 1)),
    )
    y = ResponseTable(layout, rng.normal(scale=3.0, size=layout.n))
    theta = VarianceComponents(
        sigma_a2=rng.uniform(0.3, 3.0),
        sigma_b2=rng.uniform(0.3, 3.0),
        sigma_g2=rng.uniform(0.3, 3.0) if m > 1 else 0.0,
        sigma_e2=rng.uniform(0.5, 3.0),
    )
    return design, y, theta


# ---------------------------------------------------------------------------
# leverage-based MSE


def test_lsw_plain_design_interaction_values():
    # no covariates: H is all ones, so the formulas collapse to
    # 36/10 + 9/10 = 4.5, 36/10 + 49/10 = 8.5, 81/10 + 2 * 36/10 = 15.3
    design = build_centered_design(BalancedLayout(10, 10, 10))
    assert mse_lsw(THETA, design, ("A", 3)) == pytest.approx(4.5, abs=1e-12)
    assert mse_lsw(THETA, design, ("B", 7)) == pytest.approx(8.5, abs=1e-12)
    assert mse_lsw(THETA, design, ("AB", (2, 5))) == pytest.approx(15.3, abs=1e-12)


def test_lsw_plain_design_no_interaction_values():
    # m = 1 swaps sigma_e2 into the first term: 81/10 + 9/10 = 9.0
    design = build_centered_design(BalancedLayout(10, 10, 1))
    assert mse_lsw(THETA_STAR, design, ("A", 0)) == pytest.approx(9.0, abs=1e-12)
    assert mse_lsw(THETA_STAR, design, ("B", 0)) == pytest.approx(13.0, abs=1e-12)


def test_lsw_with_covariates_matches_oracle_leverage():
    design, _, theta = _covariate_problem(6, 5, 2, seed=11)
    g, h, m = design.layout.shape
    h_row = _dense.leverage(design.row_c)
    h_col = _dense.leverage(design.col_c)
    for i in range(g):
        want = theta.sigma_g2 / h + theta.sigma_a2 / g * h_row[i, i]
        assert mse_lsw(theta, design, ("A", i)) == pytest.approx(want, rel=1e-12)
    for j in range(h):
        want = theta.sigma_g2 / g + theta.sigma_b2 / h * h_col[j, j]
        assert mse_lsw(theta, design, ("B", j)) == pytest.approx(want, rel=1e-12)


def test_lsw_all_agrees_with_single_targets():
    design, _, theta = _covariate_problem(4, 3, 2, seed=5)
    table = mse_lsw_all(theta, design)
    assert table["alpha"].shape == (4,)
    assert table["beta"].shape == (3,)
    assert table["gamma"].shape == (4, 3)
    assert table["alpha"][2] == pytest.approx(mse_lsw(theta, design, ("A", 2)))
    assert table["beta"][0] == pytest.approx(mse_lsw(theta, design, ("B", 0)))
    assert table["gamma"][1, 2] == pytest.approx(
        mse_lsw(theta, design, ("AB", (1, 2)))
    )


def test_lsw_all_no_interaction_has_no_gamma():
    design = build_centered_design(BalancedLayout(5, 4, 1))
    table = mse_lsw_all(THETA_STAR, design)
    assert table["gamma"] is None


def test_target_validation():
    design = build_centered_design(BalancedLayout(4, 3, 1))
    with pytest.raises(ConfigError, match="outside"):
        mse_lsw(THETA_STAR, design, ("A", 4))
    with pytest.raises(ConfigError, match="target kind"):
        mse_lsw(THETA_STAR, design, ("C", 0))
    with pytest.raises(ConfigError, match="pair"):
        mse_lsw(THETA_STAR, design, "A")
    with pytest.raises(ConfigError, match="do not exist"):
        mse_lsw(THETA_STAR, design, ("AB", (0, 0)))
    with pytest.raises(TypeError, match="FitResult or VarianceComponents"):
        mse_lsw({"sigma_a2": 1.0}, design, ("A", 0))


def test_lsw_accepts_fit_result():
    design, y, _ = _covariate_problem(5, 4, 2, seed=3)
    result = fit(design, y, on_failure="return")
    assert mse_lsw(result, design, ("A", 1)) == pytest.approx(
        mse_lsw(result.theta, design, ("A", 1))
    )


# ---------------------------------------------------------------------------
# trace-pair matrix and the variance-estimator covariance


def test_trace_pair_identity_theta_frozen():
    # V = I makes every trace a count: n, g(hm)^2, gh m^2 patterns
    t = trace_pair_matrix(
        VarianceComponents(0.0, 0.0, 0.0, 1.0), BalancedLayout(4, 4, 1)
    )
    want = np.array([
        [16.0, 16.0, 16.0],
        [16.0, 64.0, 16.0],
        [16.0, 16.0, 64.0],
    ])
    np.testing.assert_allclose(t, want, atol=1e-12)


@pytest.mark.parametrize("g,h,m", [(3, 3, 2), (4, 3, 1), (2, 5, 3)])
def test_trace_pair_matches_dense(g, h, m):
    rng = np.random.default_rng(g * 100 + h * 10 + m)
    theta = VarianceComponents(
        sigma_a2=rng.uniform(0.2, 4.0),
        sigma_b2=rng.uniform(0.2, 4.0),
        sigma_g2=rng.uniform(0.2, 4.0) if m > 1 else 0.0,
        sigma_e2=rng.uniform(0.5, 4.0),
    )
    got = trace_pair_matrix(theta, BalancedLayout(g, h, m))
    want = _dense.trace_pair(
        theta.sigma_a2, theta.sigma_b2, theta.sigma_g2, theta.sigma_e2, g, h, m
    )
    np.testing.assert_allclose(got, want, rtol=1e-8)


@given(
    sa2=st.floats(0.1, 10.0),
    sb2=st.floats(0.1, 10.0),
    se2=st.floats(0.1, 10.0),
)
@settings(max_examples=25, deadline=None)
def test_trace_pair_symmetric_positive_definite(sa2, sb2, se2):
    theta = VarianceComponents(sa2, sb2, 0.0, se2)
    t = trace_pair_matrix(theta, BalancedLayout(5, 4, 1))
    np.testing.assert_allclose(t, t.T, rtol=1e-12)
    assert np.linalg.eigvalsh(t).min() > 0


def test_info_matrix_is_twice_inverse_trace_pair():
    layout = BalancedLayout(6, 5, 2)
    b = info_matrix_B(THETA, layout=layout)
    t = trace_pair_matrix(THETA, layout)
    np.testing.assert_allclose(b @ t, 2.0 * np.eye(4), atol=1e-10)


def test_info_matrix_accepts_design_and_needs_some_layout():
    design = build_centered_design(BalancedLayout(4, 4, 1))
    np.testing.assert_allclose(
        info_matrix_B(THETA_STAR, design=design),
        info_matrix_B(THETA_STAR, layout=design.layout),
    )
    with pytest.raises(ConfigError, match="design or a layout"):
        info_matrix_B(THETA_STAR)


def test_info_matrix_singularity_guard():
    # an enormous row variance drowns the row stratum, leaving the
    # trace-pair matrix numerically rank deficient
    theta = VarianceComponents(1e30, 1.0, 0.0, 1.0)
    with pytest.raises(RankDeficiencyError, match="singular"):
        info_matrix_B(theta, layout=BalancedLayout(4, 4, 1))


# ---------------------------------------------------------------------------
# dense kh / pr machinery


def _fd_gradient(func, theta, m, step=1e-5):
    names = ["sigma_e2", "sigma_a2", "sigma_b2"]
    if m > 1:
        names.append("sigma_g2")
    grad = np.empty(len(names))
    for s, name in enumerate(names):
        base = getattr(theta, name)
        up = theta.replace(**{name: base + step})
        down = theta.replace(**{name: base - step})
        grad[s] = (func(up) - func(down)) / (2.0 * step)
    return grad


@pytest.mark.parametrize("m", [1, 2])
def test_eblup_gradient_matches_finite_differences(m):
    design, y, theta = _covariate_problem(3, 3, m, seed=m)
    g, h, _ = design.layout.shape
    x = design.matrix

    def alpha_hat(th, index=1):
        xi = _dense.gls(x, y.values, _dense.vmat(
            th.sigma_a2, th.sigma_b2, th.sigma_g2, th.sigma_e2, g, h, m))
        a, _, _ = _dense.blup(
            th.sigma_a2, th.sigma_b2, th.sigma_g2, th.sigma_e2,
            g, h, m, x, y.values, xi)
        return a[index]

    grad = eblup_gradient(theta, design, y, ("A", 1))
    fd = _fd_gradient(alpha_hat, theta, m)
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("m", [1, 2])
def test_shrinkage_gradient_matches_finite_differences(m):
    design, y, theta = _covariate_problem(3, 3, m, seed=10 + m)
    g, h, _ = design.layout.shape
    z1, _, _ = _dense.zmats(g, h, m)

    def functional(th, index=0):
        v = _dense.vmat(
            th.sigma_a2, th.sigma_b2, th.sigma_g2, th.sigma_e2, g, h, m)
        return th.sigma_a2 * float(z1[:, index] @ np.linalg.solve(v, y.values))

    grad = shrinkage_gradient(theta, design, y, ("A", 0))
    fd = _fd_gradient(functional, theta, m)
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)


def test_kh_pr_bundle_consistency():
    design, y, theta = _covariate_problem(4, 3, 2, seed=9)
    targets = [("A", 0), ("A", 2)]
    both = kh_pr_mse(theta, design, targets)
    for target in targets:
        m1, kh, pr = both[target]
        assert kh == pytest.approx(mse_kh(theta, design, y, target), rel=1e-12)
        assert pr == pytest.approx(mse_pr(theta, design, y, target), rel=1e-12)
        assert m1 <= min(kh, pr)  # corrections add nonnegative trace terms

    bundle = mse_bundle(fit(design, y, on_failure="return"), design, y,
                        ("A", 0), methods=("lsw", "kh", "pr"))
    assert bundle.lsw == pytest.approx(mse_lsw(
        fit(design, y, on_failure="return"), design, ("A", 0)))
    assert bundle.kh is not None and bundle.pr is not None


def test_mse_bundle_lsw_only_and_unknown_method():
    design, y, theta = _covariate_problem(4, 3, 1, seed=2)
    bundle = mse_bundle(theta, design, y, ("B", 1))
    assert bundle.kh is None and bundle.pr is None
    assert bundle.target == ("B", 1)
    with pytest.raises(ConfigError, match="unknown MSE methods"):
        mse_bundle(theta, design, y, ("A", 0), methods=("lsw", "bootstrap"))


def test_column_targets_warn_experimental():
    design, y, theta = _covariate_problem(3, 3, 1, seed=4)
    with pytest.warns(UserWarning, match="experimental"):
        mse_kh(theta, design, y, ("B", 0))


def test_interaction_targets_rejected_for_dense_estimators():
    design, y, theta = _covariate_problem(3, 3, 2, seed=6)
    with pytest.raises(ConfigError, match="not available for interaction"):
        mse_kh(theta, design, y, ("AB", (0, 0)))


def test_dense_guard_refuses_large_layouts():
    design, y, theta = _covariate_problem(3, 3, 2, seed=7)
    with pytest.raises(ResourceError, match="exceeds the guard"):
        mse_kh(theta, design, y, ("A", 0), max_n=10)


# ---------------------------------------------------------------------------
# joint covariance


@pytest.mark.parametrize("m", [1, 2])
def test_joint_covariance_diagonal_reproduces_lsw(m):
    design, _, theta = _covariate_problem(5, 4, m, seed=20 + m)
    jc = joint_covariance(theta, design, ((0, 2), (1, 3)))
    diag = np.diag(jc.per_effect)
    want = [
        mse_lsw(theta, design, ("A", 0)),
        mse_lsw(theta, design, ("A", 2)),
        mse_lsw(theta, design, ("B", 1)),
        mse_lsw(theta, design, ("B", 3)),
    ]
    if m > 1:
        want += [
            mse_lsw(theta, design, ("AB", (0, 1))),
            mse_lsw(theta, design, ("AB", (2, 1))),
            mse_lsw(theta, design, ("AB", (0, 3))),
            mse_lsw(theta, design, ("AB", (2, 3))),
        ]
    np.testing.assert_allclose(diag, want, rtol=0, atol=1e-12)
    assert jc.matrix.shape == ((8, 8) if m > 1 else (4, 4))
    assert jc.targets[0] == "alpha[0]"


def test_joint_covariance_cells_shape_and_labels():
    design, _, theta = _covariate_problem(4, 4, 2, seed=30)
    jc = joint_covariance(theta, design, ((0, 1), (2, 3)), cells=True)
    assert jc.matrix.shape == (2, 2)
    assert jc.targets == ("cell[0,2]", "cell[1,3]")
    assert np.linalg.eigvalsh(jc.matrix).min() >= -1e-10


def test_joint_covariance_validation():
    design, _, theta = _covariate_problem(4, 4, 1, seed=31)
    with pytest.raises(ConfigError, match="distinct"):
        joint_covariance(theta, design, ((0, 0), (1, 2)))
    with pytest.raises(ConfigError, match="outside"):
        joint_covariance(theta, design, ((0, 9), (1, 2)))
    with pytest.raises(ConfigError, match="does not match"):
        joint_covariance(theta, design, ((0, 1), (1, 2)), model="interaction")
    with pytest.raises(ConfigError, match="must be"):
        joint_covariance(theta, design, ((0, 1), (1, 2)), model="anova")


# ---------------------------------------------------------------------------
# result containers and intervals


def test_interval_frozen_half_width():
    iv = prediction_interval(1.0, 4.5, 0.05)
    assert iv.half_width == pytest.approx(4.157711473049033, abs=1e-12)
    assert iv.lower == pytest.approx(1.0 - 4.157711473049033)
    assert iv.upper == pytest.approx(1.0 + 4.157711473049033)
    assert iv.level == 0.95
    assert iv.covers(5.0) and not iv.covers(5.2)


def test_interval_validation():
    with pytest.raises(ConfigError, match="q must be"):
        prediction_interval(0.0, 1.0, 1.5)
    with pytest.raises(ConfigError, match="mse must be"):
        prediction_interval(0.0, -1.0, 0.05)


def test_mse_estimate_rejects_bad_lsw():
    with pytest.raises(ValueError, match="finite"):
        MseEstimate(lsw=-1.0, kh=None, pr=None, target=("A", 0))


def test_joint_covariance_container_validation():
    with pytest.raises(ValueError, match="square"):
        JointCovariance(np.zeros((2, 3)), 4.0, ("a", "b"))
    with pytest.raises(ValueError, match="symmetric"):
        JointCovariance(np.array([[1.0, 2.0], [0.0, 1.0]]), 4.0, ("a", "b"))
    with pytest.raises(ValueError, match="semidefinite"):
        JointCovariance(np.array([[1.0, 2.0], [2.0, 1.0]]), 4.0, ("a", "b"))
