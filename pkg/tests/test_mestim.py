from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import logit

from experiments.designs import dgp_separable
from twsketch.base import NonConvergence, SingularHessian, UsageError
from twsketch.data import TwoWayPanel
from twsketch.gmm import gmm_fit
from twsketch.mestim import MOptions, m_fit, m_variance
from twsketch.models import LeastSquaresLoss, LinearIVMoment, LogisticLoss
from twsketch.moments import mean_inference
from twsketch.sketch import SketchConfig, full_mask, generate_mask


def _regression_panel(rng: np.random.Generator, N: int = 20, M: int = 20) -> TwoWayPanel:
    x1 = rng.standard_normal((N, M))
    x2 = rng.standard_normal((N, 1)) + rng.standard_normal((N, M))
    u = 0.5 * rng.standard_normal((N, 1)) + 0.5 * rng.standard_normal((1, M)) + rng.standard_normal((N, M))
    y = 1.0 - 0.5 * x1 + 0.25 * x2 + u
    d = (rng.random((N, M)) < 1.0 / (1.0 + np.exp(-(0.3 + x1)))).astype(float)
    grid = np.stack([y, d, np.ones((N, M)), x1, x2], axis=-1)
    return TwoWayPanel.from_grid(grid, ("y", "d", "one", "x1", "x2"))


@pytest.fixture
def reg_panel(rng) -> TwoWayPanel:
    return _regression_panel(rng)


def test_intercept_least_squares_is_the_mean():
    y = dgp_separable(30, 30, 0.5, 0.1, 0.2, seed=2).field("y").reshape(30, 30)
    panel = TwoWayPanel.from_grid(np.stack([y, np.ones_like(y)], axis=-1), ("y", "one"))
    mask = generate_mask(panel, SketchConfig(p=0.1, seed=5))
    fit = m_fit(panel, mask, LeastSquaresLoss("y", ["one"]))
    report = mean_inference(panel, mask, "y")
    assert_allclose(fit.theta_hat, report.estimate, rtol=1e-10)
    assert_allclose(fit.sandwich, report.variance.gamma, rtol=1e-8)
    assert fit.iterations == 1


def test_least_squares_takes_one_newton_step(reg_panel):
    mask = generate_mask(reg_panel, SketchConfig(p=0.3, seed=1))
    fit = m_fit(reg_panel, mask, LeastSquaresLoss("y", ["one", "x1", "x2"]))
    sub = reg_panel.take(mask.selected)
    X, y = sub.fields(["one", "x1", "x2"]), sub.field("y")
    assert fit.iterations == 1
    assert_allclose(fit.theta_hat, np.linalg.lstsq(X, y, rcond=None)[0], rtol=1e-9)
    assert fit.param_names == ["one", "x1", "x2"]


def test_least_squares_equals_just_identified_iv(reg_panel):
    mask = generate_mask(reg_panel, SketchConfig(p=0.3, seed=9))
    regressors = ["one", "x1", "x2"]
    m = m_fit(reg_panel, mask, LeastSquaresLoss("y", regressors))
    g = gmm_fit(reg_panel, mask, LinearIVMoment("y", regressors, regressors))
    assert_allclose(m.theta_hat, g.theta_hat, rtol=1e-9)
    assert_allclose(m.sandwich, g.sandwich, rtol=1e-7, atol=1e-12)
    assert_allclose(m.std_error, g.std_error, rtol=1e-7)


def test_logistic_intercept_is_logit_of_share(reg_panel):
    mask = generate_mask(reg_panel, SketchConfig(p=0.5, seed=3))
    fit = m_fit(reg_panel, mask, LogisticLoss("d", ["one"]))
    share = reg_panel.take(mask.selected).field("d").mean()
    assert_allclose(fit.theta_hat, [logit(share)], rtol=1e-8)
    assert fit.converged


def test_logistic_slope_has_the_right_sign(reg_panel):
    fit = m_fit(reg_panel, full_mask(reg_panel), LogisticLoss("d", ["one", "x1"]))
    assert fit.theta_hat[1] > 0.5
    assert fit.t_stat[1] > 2
    assert fit.stars[1] == "***"


def test_logistic_separation():
    panel = TwoWayPanel.from_grid(np.stack([np.ones((5, 5)), np.ones((5, 5))], axis=-1), ("d", "one"))
    with pytest.raises(NonConvergence, match="separation"):
        m_fit(panel, full_mask(panel), LogisticLoss("d", ["one"]))


def test_logistic_rejects_continuous_outcome(reg_panel):
    with pytest.raises(UsageError):
        m_fit(reg_panel, full_mask(reg_panel), LogisticLoss("y", ["one"]))


def test_duplicate_regressor_is_singular(reg_panel):
    with pytest.raises(SingularHessian):
        m_fit(reg_panel, full_mask(reg_panel), LeastSquaresLoss("y", ["one", "x1", "x1"]))


def test_sandwich_on_3x3_by_hand(rng, brute_gamma_A):
    panel = _regression_panel(rng, 3, 3)
    mask = full_mask(panel)
    fit = m_fit(panel, mask, LeastSquaresLoss("y", ["one", "x1"]))

    X, y = panel.fields(["one", "x1"]), panel.field("y")
    theta = np.linalg.solve(X.T @ X, X.T @ y)
    scores = -X * (y - X @ theta)[:, None]
    H = X.T @ X / 9
    sigma = brute_gamma_A(panel, mask.selected, scores, 3)
    H_inv = np.linalg.inv(H)
    assert_allclose(fit.sandwich, H_inv @ sigma @ H_inv, rtol=1e-8, atol=1e-12)


def test_full_rate_has_no_sampling_term(reg_panel):
    fit = m_fit(reg_panel, full_mask(reg_panel), LeastSquaresLoss("y", ["one", "x1"]))
    assert fit.sigma_tilde.lambda_hat == 0.0
    assert fit.L_hat == reg_panel.n_obs


def test_full_sample_variance_mode(reg_panel):
    mask = generate_mask(reg_panel, SketchConfig(p=0.2, seed=4))
    model = LeastSquaresLoss("y", ["one", "x1"])
    sub = m_fit(reg_panel, mask, model)
    full = m_fit(reg_panel, mask, model, options=MOptions(variance_mode="full"))
    assert_allclose(sub.theta_hat, full.theta_hat)
    H, sigma, sandwich = m_variance(reg_panel, mask, model, sub.theta_hat, "full")
    assert_allclose(full.sandwich, sandwich)
    X = reg_panel.fields(["one", "x1"])
    assert_allclose(H, -X.T @ X / reg_panel.n_obs)
    assert_allclose(sigma.lambda_hat, full.sigma_tilde.lambda_hat)


def test_newton_iteration_cap(reg_panel):
    with pytest.raises(NonConvergence):
        m_fit(
            reg_panel, full_mask(reg_panel), LogisticLoss("d", ["one", "x1"]), options=MOptions(max_iter=1),
        )


@pytest.mark.slow
def test_m_error_shrinks_with_size():
    medians = []
    for n in (20, 40, 80):
        rng = np.random.default_rng(n)
        errors = []
        for rep in range(200):
            panel = _regression_panel(rng, n, n)
            mask = generate_mask(panel, SketchConfig(p=2 / n, seed=rep))
            fit = m_fit(panel, mask, LeastSquaresLoss("y", ["one", "x1"]))
            errors.append(abs(fit.theta_hat[1] + 0.5))
        medians.append(np.median(errors))
    assert medians[0] > medians[1] > medians[2]
