"""Data-generating processes for the coverage experiments and the demand example."""

from __future__ import annotations

import dataclasses
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from twsketch.base import UsageError, load_config
from twsketch.data import TwoWayPanel

# standardised log-normal: log(zeta) ~ N(0, 1)
LOGNORMAL_MEAN = float(np.exp(0.5))
LOGNORMAL_SD = float(np.sqrt((np.e - 1.0) * np.e))

STREAM_PANEL = 0
STREAM_MASK = 1


def derive_seed(base_seed: int, *keys: int) -> int:
    """Unsigned 64-bit seed keyed by (base_seed, *keys); distinct keys give independent streams."""
    state = np.random.SeedSequence([int(base_seed), *(int(k) for k in keys)]).generate_state(1, np.uint64)
    return int(state[0])


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(child) for child in np.random.SeedSequence(int(seed)).spawn(n)]


def _check_sizes(N: int, M: int) -> None:
    if N < 1 or M < 1:
        raise UsageError(f"panel sizes must be positive, got N={N}, M={M}")


def dgp_separable(
    N: int, M: int, sigma_a2: float, sigma_b2: float, sigma_e2: float, seed: int = 0,
) -> TwoWayPanel:
    """Y_ij = sigma_a alpha_i + sigma_b beta_j + sigma_e eps_ij with standardised log-normal alpha."""
    _check_sizes(N, M)
    if min(sigma_a2, sigma_b2, sigma_e2) < 0:
        raise UsageError("variances must be non-negative")
    rng_a, rng_b, rng_e = _streams(seed, 3)
    alpha = (np.exp(rng_a.standard_normal(N)) - LOGNORMAL_MEAN) / LOGNORMAL_SD
    beta = rng_b.standard_normal(M)
    eps = rng_e.standard_normal((N, M))
    y = (
        np.sqrt(sigma_a2) * alpha[:, None]
        + np.sqrt(sigma_b2) * beta[None, :]
        + np.sqrt(sigma_e2) * eps
    )
    return TwoWayPanel.from_grid(y, ("y",))


def dgp_nonseparable(
    N: int,
    M: int,
    mu_a: float,
    mu_b: float,
    seed: int = 0,
    shocks: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> TwoWayPanel:
    """Y_ij = (alpha_i - mu_a)(beta_j - mu_b) - mu_a mu_b + eps_ij.

    ``shocks`` replaces the (alpha, beta, eps) draws, which tests use to pin
    the deterministic part of the design.
    """
    _check_sizes(N, M)
    if shocks is None:
        rng_a, rng_b, rng_e = _streams(seed, 3)
        alpha = rng_a.standard_normal(N)
        beta = rng_b.standard_normal(M)
        eps = rng_e.standard_normal((N, M))
    else:
        alpha, beta, eps = (np.asarray(s, dtype=float) for s in shocks)
        eps = np.broadcast_to(eps, (N, M))
    y = np.outer(alpha - mu_a, beta - mu_b) - mu_a * mu_b + eps
    return TwoWayPanel.from_grid(y, ("y",))


DEMAND_FIELDS = ("lnshare", "lnprice", "trend", "cost")


def dgp_demand(
    N: int,
    M: int,
    theta: Sequence[float] = (-1.0, 0.5),
    seed: int = 0,
    sigma_a: float = 0.5,
    sigma_b: float = 0.5,
    sigma_e: float = 0.5,
    endogeneity: float = 0.5,
) -> TwoWayPanel:
    """Products (rows) by markets (columns) with an endogenous log price.

    The demand shock xi = a_i + b_j + e_ij enters both log shares and log
    prices, so OLS of lnshare on lnprice is biased; the wholesale cost shifts
    price and is excluded from demand.
    """
    _check_sizes(N, M)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (2,):
        raise UsageError(f"demand needs theta=(price, trend), got {theta.tolist()}")
    rng_a, rng_b, rng_e, rng_c, rng_v = _streams(seed, 5)
    xi = (
        sigma_a * rng_a.standard_normal(N)[:, None]
        + sigma_b * rng_b.standard_normal(M)[None, :]
        + sigma_e * rng_e.standard_normal((N, M))
    )
    cost = 0.5 * rng_c.standard_normal(N)[:, None] + rng_c.standard_normal((N, M))
    lnprice = cost + endogeneity * xi + 0.5 * rng_v.standard_normal((N, M))
    trend = np.broadcast_to(np.arange(1, M + 1) / M, (N, M))
    lnshare = theta[0] * lnprice + theta[1] * trend + xi
    return TwoWayPanel.from_grid(np.stack([lnshare, lnprice, trend, cost], axis=-1), DEMAND_FIELDS)


DESIGN_TYPES: dict[str, Callable[..., TwoWayPanel]] = {
    "separable": dgp_separable,
    "nonseparable": dgp_nonseparable,
    "demand": dgp_demand,
}


@dataclass(frozen=True)
class DesignSpec:
    id: str
    name: str
    family: str
    params: dict[str, Any] = field(default_factory=dict)
    N: int = 20
    M: int = 20
    truth: float = 0.0
    description: str = ""

    def __post_init__(self) -> None:
        if self.family not in DESIGN_TYPES:
            raise UsageError(f"unknown design type '{self.family}'", known=sorted(DESIGN_TYPES))

    @classmethod
    def from_config(cls, config: dict[str, Any]) -> DesignSpec:
        return cls(
            id=str(config["id"]),
            name=config.get("name", str(config["id"])),
            family=config["type"],
            params=dict(config.get("params", {})),
            description=config.get("description", ""),
        )

    @property
    def label(self) -> str:
        return f"design_{self.id}"

    def at_size(self, N: int, M: int | None = None) -> DesignSpec:
        return dataclasses.replace(self, N=N, M=N if M is None else M)

    def generate(self, seed: int) -> TwoWayPanel:
        return DESIGN_TYPES[self.family](self.N, self.M, seed=seed, **self.params)


def load_designs(config: dict | None = None) -> dict[str, DesignSpec]:
    config = config or load_config()
    return {str(d["id"]): DesignSpec.from_config(d) for d in config.get("designs", [])}
