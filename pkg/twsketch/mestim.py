"""M-estimation on a Bernoulli sketch with the H^-1 Sigma H^-1 sandwich."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from twsketch.base import (
    EmptySketch,
    NonConvergence,
    Record,
    SingularHessian,
    check_condition,
    logger,
    settings,
    symmetrize,
)
from twsketch.data import TwoWayPanel, dims
from twsketch.models import LossModel
from twsketch.moments import (
    VarianceComponents,
    VarianceMode,
    coefficient_tests,
    is_degenerate,
    variance_components,
)
from twsketch.sketch import SketchMask, full_mask, lambda_hat

SEPARATION_HINT = "; |theta| is diverging, which suggests perfect separation in the subsample"


@dataclass
class MOptions:
    variance_mode: VarianceMode | str = VarianceMode.SUBSAMPLE
    theta0: np.ndarray | None = None
    max_iter: int | None = None


@dataclass
class MFit(Record):
    theta_hat: np.ndarray
    H_tilde: np.ndarray
    sigma_tilde: VarianceComponents
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
    fit_seconds: float = 0.0
    variance_seconds: float = 0.0


def _newton(sub: TwoWayPanel, model: LossModel, theta0: np.ndarray, max_iter: int) -> tuple[np.ndarray, int]:
    cfg = settings()
    theta = np.asarray(theta0, dtype=float).copy()
    scale = max(1.0, float(np.abs(model.gradient(sub, theta)).max()))
    tol = cfg["grad_tol"] * scale
    Q = float(model.loss(sub, theta).mean())

    for iteration in range(max_iter):
        grad = model.gradient(sub, theta).mean(axis=0)
        if np.abs(grad).max() < tol:
            if model.separated(sub, theta):
                raise NonConvergence(f"no finite minimiser{SEPARATION_HINT}", theta=theta)
            return theta, iteration
        if np.abs(theta).max() > cfg["separation_bound"]:
            break

        hess = symmetrize(model.hessian(sub, theta).mean(axis=0))
        check_condition(hess, SingularHessian, "average Hessian")
        step = -linalg.solve(hess, grad, assume_a="sym")
        if grad @ step >= 0:
            hess = hess + cfg["ridge"] * np.trace(hess) * np.eye(len(theta))
            step = -linalg.solve(hess, grad, assume_a="sym")

        t = 1.0
        for _ in range(cfg["max_halvings"]):
            Q_new = float(model.loss(sub, theta + t * step).mean())
            if Q_new <= Q:
                break
            t *= 0.5
        else:
            if np.abs(grad).max() < np.sqrt(cfg["grad_tol"]) * scale:
                return theta, iteration
            raise NonConvergence(f"line search failed at iteration {iteration}", iteration=iteration, theta=theta)
        theta = theta + t * step
        Q = Q_new
        logger.debug("[mfit] iteration %d: Q=%.8g step=%.3g", iteration + 1, Q, t)

    hint = ""
    if np.abs(theta).max() > cfg["separation_bound"]:
        hint = SEPARATION_HINT
    raise NonConvergence(f"Newton did not converge within {max_iter} iterations{hint}", theta=theta, max_iter=max_iter)


def m_variance(
    panel: TwoWayPanel,
    mask: SketchMask,
    model: LossModel,
    theta_hat: np.ndarray,
    variance_mode: VarianceMode | str = VarianceMode.SUBSAMPLE,
) -> tuple[np.ndarray, VarianceComponents, np.ndarray]:
    """H~ = -average Hessian, Sigma~ = Sigma~1 + Lambda Sigma~2, and H~^-1 Sigma~ H~^-1."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    if not np.isfinite(theta_hat).all():
        raise ValueError("theta_hat must be finite")
    if mask.L_hat < 1:
        raise EmptySketch("the sketch selects no cells", p=mask.p, seed=mask.seed)
    d = dims(panel)

    sub = panel.take(mask.selected) if VarianceMode(variance_mode) is VarianceMode.SUBSAMPLE else panel
    scores = model.gradient(sub, theta_hat)
    H = -symmetrize(model.hessian(sub, theta_hat).mean(axis=0))
    check_condition(H, SingularHessian, "H~")

    sigma = variance_components(sub, full_mask(sub), scores, d.C_bar, lambda_hat(d, panel.n_obs, mask.p))
    H_inv = linalg.inv(H)
    sandwich = symmetrize(H_inv @ sigma.gamma @ H_inv)
    return H, sigma, sandwich


def m_fit(
    panel: TwoWayPanel,
    mask: SketchMask,
    model: LossModel,
    options: MOptions | None = None,
) -> MFit:
    options = options or MOptions()
    if mask.L_hat < model.k:
        raise EmptySketch(
            f"sketch has {mask.L_hat} cells for {model.k} parameters", L_hat=mask.L_hat, k=model.k,
        )
    sub = panel.take(mask.selected)
    model.check(sub)

    start = time.perf_counter()
    theta0 = options.theta0 if options.theta0 is not None else model.start(sub)
    theta, iterations = _newton(sub, model, theta0, options.max_iter or settings()["max_iter"])
    fit_seconds = time.perf_counter() - start

    start = time.perf_counter()
    H, sigma, sandwich = m_variance(panel, mask, model, theta, options.variance_mode)
    variance_seconds = time.perf_counter() - start

    d = dims(panel)
    std_error = np.sqrt(np.clip(np.diag(sandwich), 0.0, None) / d.C_bar)
    t_stat, p_value, stars = coefficient_tests(theta, std_error)
    degenerate = is_degenerate(sigma.gamma, np.maximum(1.0, np.abs(model.gradient(sub, theta)).max(axis=0)))
    if degenerate:
        logger.warning("[mfit] Degenerate score variance: diag(Sigma~)=%s", np.diag(sigma.gamma))
    logger.info(
        "[mfit] theta_hat=%s se=%s after %d Newton step(s) (L_hat=%d, p=%g)",
        np.array2string(theta, precision=4), np.array2string(std_error, precision=4),
        iterations, mask.L_hat, mask.p,
    )

    return MFit(
        theta_hat=theta,
        H_tilde=H,
        sigma_tilde=sigma,
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
        fit_seconds=fit_seconds,
        variance_seconds=variance_seconds,
    )
