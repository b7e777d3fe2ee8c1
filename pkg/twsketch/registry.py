from __future__ import annotations

from typing import TYPE_CHECKING

from twsketch.models import LeastSquaresLoss, LinearIVMoment, LogisticLoss, MeanMoment

if TYPE_CHECKING:
    from twsketch.models import LossModel, MomentModel

MOMENT_MODELS: dict[str, type[MomentModel]] = {
    "linear_iv": LinearIVMoment,
    "mean": MeanMoment,
}

LOSS_MODELS: dict[str, type[LossModel]] = {
    "ls": LeastSquaresLoss,
    "logit": LogisticLoss,
}
