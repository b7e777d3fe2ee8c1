"""Moment models for GMM and loss models for M-estimation.

Every model is evaluated over all cells of a panel at once: moments come back
as an (n_obs, m) array, Jacobians as (n_obs, m, k), losses as (n_obs,),
gradients as (n_obs, k) and Hessians as (n_obs, k, k).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from collections.abc import Callable, Sequence

import numpy as np
from scipy.special import expit

from twsketch.base import UsageError, settings
from twsketch.data import TwoWayPanel


def _fd_steps(theta: np.ndarray) -> np.ndarray:
    return settings()["fd_rel_step"] * np.maximum(1.0, np.abs(theta))


def central_difference(
    fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray,
) -> np.ndarray:
    """Per-cell central differences of ``fn`` stacked on a trailing parameter axis."""
    theta = np.asarray(theta, dtype=float)
    steps = _fd_steps(theta)
    columns = []
    for l, h in enumerate(steps):
        e = np.zeros_like(theta)
        e[l] = h
        columns.append((fn(theta + e) - fn(theta - e)) / (2.0 * h))
    return np.stack(columns, axis=-1)


class MomentModel(ABC):
    kind: str = "custom"
    analytic_jacobian: bool = False

    @property
    @abstractmethod
    def m(self) -> int:
        ...

    @property
    @abstractmethod
    def k(self) -> int:
        ...

    @abstractmethod
    def evaluate(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        ...

    def jacobian(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        return central_difference(lambda t: self.evaluate(panel, t), theta)

    def start(self, panel: TwoWayPanel) -> np.ndarray:
        return np.zeros(self.k)

    @property
    def param_names(self) -> list[str]:
        return [f"theta{l}" for l in range(self.k)]


class LinearIVMoment(MomentModel):
    """g(W, theta) = zeta (y - x'theta) with instruments zeta."""

    kind = "linear_iv"
    analytic_jacobian = True

    def __init__(self, y: str, x: Sequence[str], z: Sequence[str]) -> None:
        self.y = y
        self.x = list(x)
        self.z = list(z)
        if len(self.z) < len(self.x):
            raise UsageError(
                f"under-identified: {len(self.z)} instruments for {len(self.x)} parameters",
            )

    @property
    def m(self) -> int:
        return len(self.z)

    @property
    def k(self) -> int:
        return len(self.x)

    @property
    def param_names(self) -> list[str]:
        return list(self.x)

    def evaluate(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        resid = panel.field(self.y) - panel.fields(self.x) @ theta
        return panel.fields(self.z) * resid[:, None]

    def jacobian(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        X = panel.fields(self.x)
        Z = panel.fields(self.z)
        return -Z[:, :, None] * X[:, None, :]

    def design(self, panel: TwoWayPanel, selected: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Subsample averages of zeta x' and zeta y."""
        X = panel.fields(self.x)[selected]
        Z = panel.fields(self.z)[selected]
        y = panel.field(self.y)[selected]
        n = len(y)
        return Z.T @ X / n, Z.T @ y / n


class MeanMoment(MomentModel):
    """g(W, theta) = f(W) - theta: GMM for the mean of selected fields."""

    kind = "mean"
    analytic_jacobian = True

    def __init__(self, fields: str | Sequence[str]) -> None:
        self.fields = [fields] if isinstance(fields, str) else list(fields)

    @property
    def m(self) -> int:
        return len(self.fields)

    @property
    def k(self) -> int:
        return len(self.fields)

    @property
    def param_names(self) -> list[str]:
        return list(self.fields)

    def evaluate(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        return panel.fields(self.fields) - theta

    def jacobian(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        return np.broadcast_to(-np.eye(self.k), (panel.n_obs, self.k, self.k)).copy()


class CallableMoment(MomentModel):
    """User-supplied moment function with an optional analytic Jacobian."""

    def __init__(
        self,
        m: int,
        k: int,
        evaluate: Callable[[TwoWayPanel, np.ndarray], np.ndarray],
        jacobian: Callable[[TwoWayPanel, np.ndarray], np.ndarray] | None = None,
        start: Sequence[float] | None = None,
    ) -> None:
        self._m, self._k = m, k
        self._evaluate = evaluate
        self._jacobian = jacobian
        self._start = None if start is None else np.asarray(start, dtype=float)
        self.analytic_jacobian = jacobian is not None

    @property
    def m(self) -> int:
        return self._m

    @property
    def k(self) -> int:
        return self._k

    def evaluate(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        return np.asarray(self._evaluate(panel, theta), dtype=float).reshape(panel.n_obs, self._m)

    def jacobian(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        if self._jacobian is None:
            return super().jacobian(panel, theta)
        return np.asarray(self._jacobian(panel, theta), dtype=float).reshape(panel.n_obs, self._m, self._k)

    def start(self, panel: TwoWayPanel) -> np.ndarray:
        return np.zeros(self._k) if self._start is None else self._start.copy()


class LossModel(ABC):
    kind: str = "custom"

    @property
    @abstractmethod
    def k(self) -> int:
        ...

    @abstractmethod
    def loss(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def gradient(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        ...

    def hessian(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        return central_difference(lambda t: self.gradient(panel, t), theta)

    def check(self, panel: TwoWayPanel) -> None:
        """Validate the panel for this loss; raises UsageError."""

    def separated(self, panel: TwoWayPanel, theta: np.ndarray) -> bool:
        """True when the loss has no finite minimiser on this panel."""
        return False

    def start(self, panel: TwoWayPanel) -> np.ndarray:
        return np.zeros(self.k)

    @property
    def param_names(self) -> list[str]:
        return [f"theta{l}" for l in range(self.k)]


class _IndexLoss(LossModel):
    def __init__(self, y: str, x: Sequence[str]) -> None:
        self.y = y
        self.x = list(x)

    @property
    def k(self) -> int:
        return len(self.x)

    @property
    def param_names(self) -> list[str]:
        return list(self.x)

    def _data(self, panel: TwoWayPanel) -> tuple[np.ndarray, np.ndarray]:
        return panel.field(self.y), panel.fields(self.x)


class LeastSquaresLoss(_IndexLoss):
    """q = (y - x'theta)^2 / 2."""

    kind = "least_squares"

    def loss(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        y, X = self._data(panel)
        return 0.5 * (y - X @ theta) ** 2

    def gradient(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        y, X = self._data(panel)
        return -X * (y - X @ theta)[:, None]

    def hessian(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        _, X = self._data(panel)
        return X[:, :, None] * X[:, None, :]


class LogisticLoss(_IndexLoss):
    """q = log(1 + exp(x'theta)) - y x'theta with y in {0, 1}."""

    kind = "logistic"

    def check(self, panel: TwoWayPanel) -> None:
        y = panel.field(self.y)
        if not np.isin(y, (0.0, 1.0)).all():
            raise UsageError(f"logistic loss needs a 0/1 outcome, '{self.y}' has other values")

    def separated(self, panel: TwoWayPanel, theta: np.ndarray) -> bool:
        y, X = self._data(panel)
        return bool(np.all(np.abs(y - expit(X @ theta)) < 1e-6))

    def loss(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        y, X = self._data(panel)
        eta = X @ theta
        return np.logaddexp(0.0, eta) - y * eta

    def gradient(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        y, X = self._data(panel)
        return X * (expit(X @ theta) - y)[:, None]

    def hessian(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        _, X = self._data(panel)
        mu = expit(X @ theta)
        w = mu * (1.0 - mu)
        return w[:, None, None] * X[:, :, None] * X[:, None, :]


class CallableLoss(LossModel):
    """User-supplied loss with analytic gradient and optional Hessian."""

    def __init__(
        self,
        k: int,
        loss: Callable[[TwoWayPanel, np.ndarray], np.ndarray],
        gradient: Callable[[TwoWayPanel, np.ndarray], np.ndarray],
        hessian: Callable[[TwoWayPanel, np.ndarray], np.ndarray] | None = None,
    ) -> None:
        self._k = k
        self._loss = loss
        self._gradient = gradient
        self._hessian = hessian

    @property
    def k(self) -> int:
        return self._k

    def loss(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        return np.asarray(self._loss(panel, theta), dtype=float)

    def gradient(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        return np.asarray(self._gradient(panel, theta), dtype=float).reshape(panel.n_obs, self._k)

    def hessian(self, panel: TwoWayPanel, theta: np.ndarray) -> np.ndarray:
        if self._hessian is None:
            return super().hessian(panel, theta)
        return np.asarray(self._hessian(panel, theta), dtype=float).reshape(panel.n_obs, self._k, self._k)
