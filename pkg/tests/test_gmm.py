from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from experiments.designs import dgp_demand, dgp_separable
from twsketch.base import EmptySketch, NonConvergence, SingularDesign
from twsketch.data import TwoWayPanel, dims
from twsketch.gmm import GmmOptions, g_bar, gmm_fit, gmm_variance
from twsketch.models import CallableMoment, LinearIVMoment, MeanMoment
from twsketch.moments import mean_inference
from twsketch.sketch import SketchConfig, full_mask, generate_mask


def _iv_panel(rng: np.random.Generator, N: int = 20, M: int = 20) -> TwoWayPanel:
    a = rng.standard_normal((N, 1))
    b = rng.standard_normal((1, M))
    z1 = rng.standard_normal((N, M))
    z2 = rng.standard_normal((N, M))
    u = 0.3 * a + 0.3 * b + rng.standard_normal((N, M))
    x1 = z1 + 0.5 * z2 + 0.5 * u
    y = 1.0 + 0.5 * x1 + u
    grid = np.stack([y, np.ones((N, M)), x1, z1, z2], axis=-1)
    return TwoWayPanel.from_grid(grid, ("y", "one", "x1", "z1", "z2"))


def _exp_model() -> CallableMoment:
    def evaluate(panel, theta):
        X = panel.fields(["one", "x1"])
        return X * (panel.field("y") - np.exp(X @ theta))[:, None]

    return CallableMoment(2, 2, evaluate)


@pytest.fixture
def iv_panel(rng) -> TwoWayPanel:
    return _iv_panel(rng)


def test_g_bar_mean_model(grid_2x2, mask_of):
    mask = mask_of([True, False, False, True], p=0.5)
    assert_allclose(g_bar(grid_2x2, mask, MeanMoment("y"), np.array([1.0])), [1.5])
    assert_allclose(g_bar(grid_2x2, full_mask(grid_2x2), MeanMoment("y"), np.array([2.5])), [0.0])


def test_g_bar_empty(grid_2x2, mask_of):
    with pytest.raises(EmptySketch):
        g_bar(grid_2x2, mask_of([False] * 4), MeanMoment("y"), np.array([0.0]))


def test_mean_model_matches_mean_inference():
    panel = dgp_separable(30, 25, 0.5, 0.1, 0.2, seed=5)
    mask = generate_mask(panel, SketchConfig(p=0.2, seed=8))
    fit = gmm_fit(panel, mask, MeanMoment("y"))
    report = mean_inference(panel, mask, "y")
    assert fit.iterations == 1
    assert_allclose(fit.theta_hat, report.estimate, rtol=1e-12)
    assert_allclose(fit.sandwich, report.variance.gamma, rtol=1e-10)
    assert_allclose(fit.std_error, report.std_error, rtol=1e-10)


def test_exactly_identified_matches_dense_solve(iv_panel):
    mask = generate_mask(iv_panel, SketchConfig(p=0.5, seed=2))
    fit = gmm_fit(iv_panel, mask, LinearIVMoment("y", ["one", "x1"], ["one", "z1"]))
    sub = iv_panel.take(mask.selected)
    X, Z, y = sub.fields(["one", "x1"]), sub.fields(["one", "z1"]), sub.field("y")
    assert_allclose(fit.theta_hat, np.linalg.solve(Z.T @ X, Z.T @ y), rtol=1e-10)
    assert_allclose(fit.g_bar, 0.0, atol=1e-10)
    assert fit.param_names == ["one", "x1"]


def test_exactly_identified_ignores_weight(iv_panel):
    mask = generate_mask(iv_panel, SketchConfig(p=0.5, seed=2))
    model = LinearIVMoment("y", ["one", "x1"], ["one", "z1"])
    a = gmm_fit(iv_panel, mask, model)
    b = gmm_fit(iv_panel, mask, model, V_hat=np.diag([2.0, 5.0]))
    assert_allclose(a.theta_hat, b.theta_hat, rtol=1e-10)
    assert_allclose(a.sandwich, b.sandwich, rtol=1e-8)


def test_collinear_instruments(iv_panel):
    model = LinearIVMoment("y", ["one", "x1"], ["z1", "z1"])
    with pytest.raises(SingularDesign):
        gmm_fit(iv_panel, full_mask(iv_panel), model)


def test_too_few_cells(iv_panel, mask_of):
    selected = np.zeros(iv_panel.n_obs, dtype=bool)
    selected[3] = True
    with pytest.raises(EmptySketch):
        gmm_fit(iv_panel, mask_of(selected, p=0.01), LinearIVMoment("y", ["one", "x1"], ["one", "z1"]))


def test_full_rate_has_no_sampling_term(iv_panel):
    fit = gmm_fit(iv_panel, full_mask(iv_panel), LinearIVMoment("y", ["one", "x1"], ["one", "z1"]))
    assert fit.omega_tilde.lambda_hat == 0.0
    assert_array_equal(fit.omega_tilde.gamma, fit.omega_tilde.gamma_A)
    assert fit.L_hat == iv_panel.n_obs


def test_noiseless_fit_is_degenerate():
    x = np.random.default_rng(0).standard_normal((6, 5))
    panel = TwoWayPanel.from_grid(np.stack([2.0 * x, x], axis=-1), ("y", "x"))
    fit = gmm_fit(panel, full_mask(panel), LinearIVMoment("y", ["x"], ["x"]))
    assert_allclose(fit.theta_hat, [2.0])
    assert fit.degenerate_flag


def test_sandwich_on_3x3_by_hand(rng, brute_gamma_A):
    panel = _iv_panel(rng, 3, 3)
    mask = full_mask(panel)
    fit = gmm_fit(panel, mask, LinearIVMoment("y", ["one", "x1"], ["one", "z1"]))

    X, Z, y = panel.fields(["one", "x1"]), panel.fields(["one", "z1"]), panel.field("y")
    theta = np.linalg.solve(Z.T @ X, Z.T @ y)
    g = Z * (y - X @ theta)[:, None]
    G = -Z.T @ X / 9
    omega = brute_gamma_A(panel, mask.selected, g, 3)
    bread = np.linalg.inv(G.T @ G)
    expected = bread @ G.T @ omega @ G @ bread
    assert_allclose(fit.sandwich, expected, rtol=1e-8, atol=1e-12)
    assert_allclose(fit.std_error, np.sqrt(np.diag(expected) / 3), rtol=1e-8)


def test_sandwich_is_psd(rng):
    for seed in range(20):
        panel = _iv_panel(rng, 15, 12)
        mask = generate_mask(panel, SketchConfig(p=0.3, seed=seed))
        fit = gmm_fit(panel, mask, LinearIVMoment("y", ["one", "x1"], ["one", "z1", "z2"]))
        assert np.linalg.eigvalsh(fit.sandwich).min() >= -1e-10


def test_two_step_weight(iv_panel):
    mask = generate_mask(iv_panel, SketchConfig(p=0.5, seed=6))
    model = LinearIVMoment("y", ["one", "x1"], ["one", "z1", "z2"])
    first = gmm_fit(iv_panel, mask, model)
    second = gmm_fit(iv_panel, mask, model, options=GmmOptions(two_step=True))

    sub = iv_panel.take(mask.selected)
    g = model.evaluate(sub, first.theta_hat)
    assert_allclose(second.V_hat, np.linalg.inv(g.T @ g / sub.n_obs), rtol=1e-8)
    assert second.two_step
    assert_allclose(second.theta_hat, first.theta_hat, atol=0.2)


def test_two_step_exactly_identified_keeps_estimate(iv_panel):
    mask = generate_mask(iv_panel, SketchConfig(p=0.5, seed=6))
    model = LinearIVMoment("y", ["one", "x1"], ["one", "z1"])
    one = gmm_fit(iv_panel, mask, model)
    two = gmm_fit(iv_panel, mask, model, options=GmmOptions(two_step=True))
    assert_allclose(two.theta_hat, one.theta_hat, rtol=1e-8)


def test_gauss_newton_on_exponential_mean(rng):
    x = rng.standard_normal((25, 20))
    y = np.exp(0.2 + 0.3 * x) + 0.1 * rng.standard_normal((25, 20))
    panel = TwoWayPanel.from_grid(np.stack([y, np.ones_like(x), x], axis=-1), ("y", "one", "x1"))
    mask = generate_mask(panel, SketchConfig(p=0.5, seed=1))
    fit = gmm_fit(panel, mask, _exp_model())
    assert fit.converged
    assert fit.iterations > 1
    assert_allclose(fit.theta_hat, [0.2, 0.3], atol=0.05)
    assert_allclose(fit.g_bar, 0.0, atol=1e-6)


def test_gauss_newton_iteration_cap(rng):
    x = rng.standard_normal((10, 10))
    panel = TwoWayPanel.from_grid(
        np.stack([np.exp(0.5 + x), np.ones_like(x), x], axis=-1), ("y", "one", "x1"),
    )
    with pytest.raises(NonConvergence):
        gmm_fit(panel, full_mask(panel), _exp_model(), options=GmmOptions(max_iter=1))


def test_variance_rejects_non_finite_theta(iv_panel):
    with pytest.raises(ValueError):
        gmm_variance(
            iv_panel, full_mask(iv_panel), LinearIVMoment("y", ["one"], ["one"]), np.array([np.nan]),
        )


def test_centering_moves_omega_but_not_the_sandwich(iv_panel):
    # G'V g_bar = 0 at the estimate, so the centring terms cancel in the sandwich
    mask = generate_mask(iv_panel, SketchConfig(p=0.5, seed=4))
    model = LinearIVMoment("y", ["one", "x1"], ["one", "z1", "z2"])
    plain = gmm_fit(iv_panel, mask, model)
    centred = gmm_fit(iv_panel, mask, model, options=GmmOptions(center_moments=True))
    assert_array_equal(plain.theta_hat, centred.theta_hat)
    assert not np.allclose(plain.omega_tilde.gamma, centred.omega_tilde.gamma, rtol=1e-9, atol=0)
    assert_allclose(plain.sandwich, centred.sandwich, rtol=1e-6, atol=1e-10)


def test_full_sample_variance_by_hand(iv_panel):
    mask = generate_mask(iv_panel, SketchConfig(p=0.2, seed=3))
    model = LinearIVMoment("y", ["one", "x1"], ["one", "z1", "z2"])
    sketch = gmm_fit(iv_panel, mask, model)
    fit = gmm_fit(iv_panel, mask, model, options=GmmOptions(variance_mode="full"))
    assert_array_equal(fit.theta_hat, sketch.theta_hat)

    X, Z, y = iv_panel.fields(["one", "x1"]), iv_panel.fields(["one", "z1", "z2"]), iv_panel.field("y")
    g = Z * (y - X @ fit.theta_hat)[:, None]
    G = -Z.T @ X / 400
    S = g.reshape(20, 20, 3).sum(axis=1)
    T = g.reshape(20, 20, 3).sum(axis=0)
    gamma_A = 20 / 400**2 * (S.T @ S + T.T @ T)
    gamma_B = g.T @ g / 400
    lam = 20 / 400 * 0.8 / 0.2
    omega = gamma_A + lam * gamma_B
    bread = np.linalg.inv(G.T @ G)
    expected = bread @ G.T @ omega @ G @ bread

    assert_allclose(fit.G_tilde, G, rtol=1e-10)
    assert_allclose(fit.omega_tilde.lambda_hat, lam)
    assert_allclose(fit.omega_tilde.gamma, omega, rtol=1e-9)
    assert_allclose(fit.sandwich, expected, rtol=1e-8)
    assert_allclose(fit.std_error, np.sqrt(np.diag(expected) / 20), rtol=1e-8)


@pytest.mark.slow
def test_demand_price_elasticity_is_recovered():
    model = LinearIVMoment("lnshare", ["lnprice", "trend"], ["cost", "trend"])
    errors = []
    for rep in range(100):
        panel = dgp_demand(200, 500, seed=rep)
        mask = generate_mask(panel, SketchConfig(p=1 / dims(panel).C_bar, seed=rep))
        errors.append(abs(gmm_fit(panel, mask, model).theta_hat[0] + 1.0))
    assert np.median(errors) < 0.05


@pytest.mark.slow
def test_gmm_error_shrinks_with_size():
    model = LinearIVMoment("y", ["one", "x1"], ["one", "z1"])
    medians = []
    for n in (20, 40, 80):
        rng = np.random.default_rng(n)
        errors = []
        for rep in range(200):
            panel = _iv_panel(rng, n, n)
            mask = generate_mask(panel, SketchConfig(p=1 / n, seed=rep))
            errors.append(abs(gmm_fit(panel, mask, model).theta_hat[1] - 0.5))
        medians.append(np.median(errors))
    assert medians[0] > medians[1] > medians[2]
