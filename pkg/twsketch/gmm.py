"""GMM on a Bernoulli sketch with the two-component sandwich variance."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from twsketch.base import (
    DimensionMismatch,
    EmptySketch,
    NonConvergence,
    Record,
    SingularDesign,
    as_matrix,
    check_condition,
    logger,
    settings,
    symmetrize,
)
from twsketch.data import TwoWayPanel, dims
from twsketch.models import LinearIVMoment, MomentModel
from twsketch.moments import (
    VarianceComponents,
    VarianceMode,
    coefficient_tests,
    is_degenerate,
    variance_components,
)
from twsketch.sketch import SketchMask, full_mask, lambda_hat


@dataclass
class GmmOptions:
    two_step: bool = False
    center_moments: bool = False
    variance_mode: VarianceMode | str = VarianceMode.SUBSAMPLE
    theta0: np.ndarray | None = None
    max_iter: int | None = None


@dataclass
class GmmFit(Record):
    theta_hat: np.ndarray
    g_bar: np.ndarray
    G_tilde: np.ndarray
    V_hat: np.ndarray
    omega_tilde: VarianceComponents
    sandwich: np.ndarray
    std_error: np.ndarray
    iterations: int
    converged: bool
    param_names: list[str] = field(default_factory=list)
    C_bar: int = 0
    L_hat: int = 0
    p: float = 1.0
    t_stat: np.ndarray | None = None
    p_value: np.ndarray | None = None
    stars: list[str] = field(default_factory=list)
    degenerate_flag: bool = False
    two_step: bool = False
    fit_seconds: float = 0.0
    variance_seconds: float = 0.0


def g_bar(panel: TwoWayPanel, mask: SketchMask, model: MomentModel, theta: np.ndarray) -> np.ndarray:
    if mask.L_hat < 1:
        raise EmptySketch("the sketch selects no cells", p=mask.p, seed=mask.seed)
    sub = panel.take(mask.selected)
    return model.evaluate(sub, np.asarray(theta, dtype=float)).mean(axis=0)


def _weight(V_hat: np.ndarray | float | None, m: int) -> np.ndarray:
    if V_hat is None:
        return np.eye(m)
    V = as_matrix(V_hat)
    if V.shape != (m, m):
        raise DimensionMismatch(f"weight matrix is {V.shape}, moments have dimension {m}")
    return symmetrize(V)


def _closed_form(panel: TwoWayPanel, mask: SketchMask, model: LinearIVMoment, V: np.ndarray) -> np.ndarray:
    G_hat, g_y = model.design(panel, mask.selected)
    A = G_hat.T @ V @ G_hat
    check_condition(A, SingularDesign, "G'VG")
    return linalg.solve(A, G_hat.T @ V @ g_y, assume_a="sym")


def _gauss_newton(
    sub: TwoWayPanel, model: MomentModel, V: np.ndarray, theta0: np.ndarray, max_iter: int,
) -> tuple[np.ndarray, int]:
    cfg = settings()
    theta = np.asarray(theta0, dtype=float).copy()

    def objective(t: np.ndarray) -> tuple[float, np.ndarray]:
        g = model.evaluate(sub, t).mean(axis=0)
        return float(g @ V @ g), g

    g_cells = model.evaluate(sub, theta)
    J0 = model.jacobian(sub, theta)
    scale = max(1.0, float(np.abs(g_cells).max())) * max(1.0, float(np.abs(J0).max()))
    tol = cfg["grad_tol"] * scale

    Q, g = objective(theta)
    for iteration in range(max_iter):
        J = model.jacobian(sub, theta).mean(axis=0)
        grad = J.T @ V @ g
        if np.abs(grad).max() < tol:
            return theta, iteration

        A = J.T @ V @ J
        check_condition(A, SingularDesign, "G'VG")
        step = -linalg.solve(A, grad, assume_a="sym")

        t = 1.0
        for _ in range(cfg["max_halvings"]):
            Q_new, g_new = objective(theta + t * step)
            if Q_new <= Q:
                break
            t *= 0.5
        else:
            # no descent left at machine precision
            if np.abs(grad).max() < np.sqrt(cfg["grad_tol"]) * scale:
                return theta, iteration
            raise NonConvergence(
                f"line search failed at iteration {iteration}", iteration=iteration, theta=theta,
            )
        theta = theta + t * step
        Q, g = Q_new, g_new
        logger.debug("[gmm] iteration %d: Q=%.6g step=%.3g", iteration + 1, Q, t)

    raise NonConvergence(f"Gauss-Newton hit the {max_iter}-iteration cap", theta=theta, max_iter=max_iter)


def _estimate(
    panel: TwoWayPanel, mask: SketchMask, model: MomentModel, V: np.ndarray, options: GmmOptions,
) -> tuple[np.ndarray, int]:
    if isinstance(model, LinearIVMoment):
        return _closed_form(panel, mask, model, V), 1
    theta0 = options.theta0 if options.theta0 is not None else model.start(panel)
    max_iter = options.max_iter or settings()["max_iter"]
    return _gauss_newton(panel.take(mask.selected), model, V, theta0, max_iter)


def gmm_variance(
    panel: TwoWayPanel,
    mask: SketchMask,
    model: MomentModel,
    theta_hat: np.ndarray,
    V_hat: np.ndarray | None = None,
    variance_mode: VarianceMode | str = VarianceMode.SUBSAMPLE,
    center_moments: bool = False,
) -> tuple[np.ndarray, VarianceComponents, np.ndarray]:
    """G~, Omega~ = Gamma~1 + Lambda Gamma~2, and the GMM sandwich."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    if not np.isfinite(theta_hat).all():
        raise ValueError("theta_hat must be finite")
    if mask.L_hat < 1:
        raise EmptySketch("the sketch selects no cells", p=mask.p, seed=mask.seed)
    V = _weight(V_hat, model.m)
    d = dims(panel)

    if VarianceMode(variance_mode) is VarianceMode.SUBSAMPLE:
        sub = panel.take(mask.selected)
    else:
        sub = panel
    g = model.evaluate(sub, theta_hat)
    if center_moments:
        g = g - g.mean(axis=0)
    G = model.jacobian(sub, theta_hat).mean(axis=0)

    omega = variance_components(sub, full_mask(sub), g, d.C_bar, lambda_hat(d, panel.n_obs, mask.p))
    A = G.T @ V @ G
    check_condition(A, SingularDesign, "G'VG")
    A_inv = linalg.inv(A)
    sandwich = symmetrize(A_inv @ G.T @ V @ omega.gamma @ V @ G @ A_inv)
    return G, omega, sandwich


def gmm_fit(
    panel: TwoWayPanel,
    mask: SketchMask,
    model: MomentModel,
    V_hat: np.ndarray | None = None,
    options: GmmOptions | None = None,
) -> GmmFit:
    options = options or GmmOptions()
    if mask.L_hat < model.k:
        raise EmptySketch(
            f"sketch has {mask.L_hat} cells for {model.k} parameters", L_hat=mask.L_hat, k=model.k,
        )
    V = _weight(V_hat, model.m)

    start = time.perf_counter()
    theta, iterations = _estimate(panel, mask, model, V, options)
    if options.two_step:
        sub = panel.take(mask.selected)
        g = model.evaluate(sub, theta)
        gamma_2 = g.T @ g / sub.n_obs
        check_condition(gamma_2, SingularDesign, "first-step Gamma~2")
        V = symmetrize(linalg.inv(gamma_2))
        theta, more = _estimate(panel, mask, model, V, options)
        iterations += more
        logger.info("[gmm] Two-step re-weighting done")
    fit_seconds = time.perf_counter() - start

    start = time.perf_counter()
    G, omega, sandwich = gmm_variance(
        panel, mask, model, theta, V, options.variance_mode, options.center_moments,
    )
    variance_seconds = time.perf_counter() - start

    d = dims(panel)
    std_error = np.sqrt(np.clip(np.diag(sandwich), 0.0, None) / d.C_bar)
    t_stat, p_value, stars = coefficient_tests(theta, std_error)
    g_hat = g_bar(panel, mask, model, theta)
    # residual moments vanish at a perfect fit, so the scale is floored at 1
    scale = np.maximum(1.0, np.abs(model.evaluate(panel.take(mask.selected), theta)).max(axis=0))
    degenerate = is_degenerate(omega.gamma, scale)
    if degenerate:
        logger.warning("[gmm] Degenerate moment variance: diag(Omega~)=%s", np.diag(omega.gamma))
    logger.info(
        "[gmm] theta_hat=%s se=%s (L_hat=%d, p=%g, %.3fs fit, %.3fs variance)",
        np.array2string(theta, precision=4), np.array2string(std_error, precision=4),
        mask.L_hat, mask.p, fit_seconds, variance_seconds,
    )

    return GmmFit(
        theta_hat=theta,
        g_bar=g_hat,
        G_tilde=G,
        V_hat=V,
        omega_tilde=omega,
        sandwich=sandwich,
        std_error=std_error,
        iterations=iterations,
        converged=True,
        param_names=model.param_names,
        C_bar=d.C_bar,
        L_hat=mask.L_hat,
        p=mask.p,
        t_stat=t_stat,
        p_value=p_value,
        stars=stars,
        degenerate_flag=degenerate,
        two_step=options.two_step,
        fit_seconds=fit_seconds,
        variance_seconds=variance_seconds,
    )
