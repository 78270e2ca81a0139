"""Time discretization and the discrete-time survival likelihood.

Follow-up time is split into four intervals by the quartiles of the
uncensored event times. A model emits one conditional hazard per interval;
the survival function is the running product of (1 − hazard) and the
negative log likelihood combines the survival and hazard terms according to
censorship status.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataError, ParameterError

N_BINS = 4


@dataclass
class SurvivalLabel:
    """Continuous follow-up plus censorship; ``censored=1`` means alive past follow-up."""

    t_cont: float
    censored: int
    y_bin: int | None = field(default=None)

    def __post_init__(self):
        if self.t_cont < 0:
            raise DataError(f"negative follow-up time {self.t_cont}")
        if self.censored not in (0, 1):
            raise DataError(f"censored flag must be 0 or 1, got {self.censored}")
        if self.y_bin is not None and not 0 <= self.y_bin < N_BINS:
            raise DataError(f"y_bin must lie in 0..{N_BINS - 1}, got {self.y_bin}")


@dataclass(frozen=True)
class TimeBins:
    """Interior cut points [t1, t2, t3]; implicitly t0 = 0 and t4 = ∞."""

    cuts: tuple[float, float, float]

    def __post_init__(self):
        t1, t2, t3 = self.cuts
        if not 0.0 < t1 < t2 < t3:
            raise DataError(f"cut points must be strictly increasing and positive, got {self.cuts}")


def make_bins(labels: Iterable[SurvivalLabel]) -> TimeBins:
    """Quartile cuts (linear-interpolation quantiles) of uncensored event times only."""
    events = np.asarray([lab.t_cont for lab in labels if lab.censored == 0], dtype=np.float64)
    if np.unique(events).size < 4:
        raise DataError(
            f"need at least 4 distinct uncensored event times to place quartile cuts, "
            f"got {np.unique(events).size}"
        )
    cuts = np.quantile(events, [0.25, 0.5, 0.75], method="linear")
    if not (0.0 < cuts[0] < cuts[1] < cuts[2]):
        raise DataError(f"degenerate quartile cuts {cuts.tolist()} from the uncensored event times")
    return TimeBins(cuts=(float(cuts[0]), float(cuts[1]), float(cuts[2])))


def discretize(t: float, bins: TimeBins) -> int:
    """Bin index r such that t ∈ [t_r, t_{r+1}); boundaries belong to the upper bin."""
    if t < 0:
        raise DataError(f"negative follow-up time {t}")
    return int(np.searchsorted(np.asarray(bins.cuts), t, side="right"))


def assign_bins(labels: Sequence[SurvivalLabel], bins: TimeBins) -> list[SurvivalLabel]:
    """Fresh labels with ``y_bin`` filled in; inputs are left untouched."""
    return [
        SurvivalLabel(lab.t_cont, lab.censored, discretize(lab.t_cont, bins)) for lab in labels
    ]


def _check_hazards(h: Tensor) -> None:
    if h.data.ndim != 1 or h.size != N_BINS:
        raise ContractError(f"expected a hazard vector of shape ({N_BINS},), got {h.shape}")
    if not (np.all(h.data > 0.0) and np.all(h.data < 1.0)):
        raise ContractError(f"hazards must lie strictly inside (0,1), got {h.data}")


def hazard_to_survival(h: Tensor) -> Tensor:
    """Survival curve S(r) = Π_{u=0..r} (1 − h(u)), differentiable through h.

    By convention S(−1) = 1, which the likelihood relies on at the first bin.
    """
    _check_hazards(h)
    one_minus = ad.sub(Tensor(np.ones(N_BINS)), h)
    parts = []
    running = None
    for r in range(N_BINS):
        term = ad.pick(one_minus, r)
        running = term if running is None else ad.mul(running, term)
        parts.append(ad.reshape(running, (1,)))
    return ad.concat(parts)


def survival_curve(hazards: np.ndarray) -> np.ndarray:
    """Plain-array version of the survival product, for prediction paths."""
    return np.cumprod(1.0 - np.asarray(hazards, dtype=np.float64))


def _survival_through(h: Tensor, r: int) -> Tensor:
    """Scalar S(r) = Π_{u=0..r} (1 − h(u)) without materializing the whole curve."""
    one_minus = ad.sub(Tensor(np.ones(N_BINS)), h)
    running = ad.pick(one_minus, 0)
    for u in range(1, r + 1):
        running = ad.mul(running, ad.pick(one_minus, u))
    return running


def nll_loss(h: Tensor, label: SurvivalLabel) -> Tensor:
    """Negative log likelihood of a discrete survival model.

    L = −c·log S(Y) − (1−c)·log S(Y−1) − (1−c)·log h(Y), with S(−1) = 1 and
    every log argument clamped at 1e-7, so L ≥ 0 always.
    """
    if label.y_bin is None:
        raise ContractError("label has no discretized bin; run discretize/assign_bins first")
    _check_hazards(h)
    y = label.y_bin
    if label.censored == 1:
        return ad.neg(ad.log(_survival_through(h, y)))
    log_h = ad.log(ad.pick(h, y))
    if y == 0:
        return ad.neg(log_h)  # S(−1) = 1 contributes nothing
    return ad.neg(ad.add(ad.log(_survival_through(h, y - 1)), log_h))


def uncensored_loss(h: Tensor, label: SurvivalLabel) -> Tensor:
    """The (1−c)-weighted terms of the likelihood alone; zero for censored patients."""
    if label.y_bin is None:
        raise ContractError("label has no discretized bin; run discretize/assign_bins first")
    _check_hazards(h)
    if label.censored == 1:
        return Tensor(np.asarray(0.0))
    return nll_loss(h, label)


def combined_loss(h: Tensor, label: SurvivalLabel, beta: float = 0.0) -> Tensor:
    """Weighted blend (1−β)·L + β·L_uncensored emphasizing observed events."""
    if not 0.0 <= beta <= 1.0:
        raise ParameterError(f"beta must lie in [0, 1], got {beta}")
    if beta == 0.0:
        return nll_loss(h, label)
    if label.censored == 1:
        # L_uncensored vanishes; only the scaled full likelihood remains.
        return ad.scale(nll_loss(h, label), 1.0 - beta)
    return ad.add(
        ad.scale(nll_loss(h, label), 1.0 - beta),
        ad.scale(uncensored_loss(h, label), beta),
    )
