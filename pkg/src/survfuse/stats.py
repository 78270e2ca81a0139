"""Censored-survival evaluation statistics.

Concordance index (Harrell, 0.5 tie credit), Kaplan-Meier product-limit
curves, the two-group logrank test, percentile bootstrap intervals, Welch
two-sample t-tests, and median/quartile risk grouping. Tail probabilities
come from the regularized incomplete gamma/beta routines in scipy.special.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .errors import DataError, ParameterError, PreconditionError


@dataclass
class RiskTable:
    """Pooled out-of-sample risk predictions, one row per patient."""

    patient_ids: list[str]
    risk: np.ndarray
    time: np.ndarray
    censored: np.ndarray

    def __post_init__(self):
        self.risk = np.asarray(self.risk, dtype=np.float64)
        self.time = np.asarray(self.time, dtype=np.float64)
        self.censored = np.asarray(self.censored, dtype=int)
        n = len(self.patient_ids)
        if not (self.risk.size == self.time.size == self.censored.size == n):
            raise DataError("RiskTable columns have mismatched lengths")
        if len(set(self.patient_ids)) != n:
            raise DataError("RiskTable patient ids must be unique")
        if not np.all(np.isfinite(self.risk)):
            raise DataError("RiskTable risks must be finite")
        if not np.isin(self.censored, (0, 1)).all():
            raise DataError("RiskTable censored flags must be 0 or 1")

    def __len__(self) -> int:
        return len(self.patient_ids)

    def subset(self, indices) -> "RiskTable":
        indices = np.asarray(indices, dtype=int)
        # Resampled tables repeat rows, so re-key ids to keep them unique.
        return RiskTable(
            patient_ids=[f"{self.patient_ids[i]}#{k}" for k, i in enumerate(indices)],
            risk=self.risk[indices],
            time=self.time[indices],
            censored=self.censored[indices],
        )

    def to_csv(self, path) -> None:
        with Path(path).open("w") as fh:
            fh.write("patient_id,risk,t_cont,censored\n")
            for pid, r, t, c in zip(self.patient_ids, self.risk, self.time, self.censored):
                fh.write(f"{pid},{float(r)!r},{float(t)!r},{int(c)}\n")

    @classmethod
    def from_csv(cls, path) -> "RiskTable":
        import pandas as pd

        df = pd.read_csv(path, float_precision="round_trip")
        for col in ("patient_id", "risk"):
            if col not in df.columns:
                raise DataError(f"{path}: missing column {col!r}")
        time_col = "t_cont" if "t_cont" in df.columns else "time_months"
        if time_col not in df.columns or "censored" not in df.columns:
            raise DataError(f"{path}: need t_cont/time_months and censored columns")
        return cls(
            patient_ids=df["patient_id"].astype(str).tolist(),
            risk=df["risk"].to_numpy(dtype=np.float64),
            time=df[time_col].to_numpy(dtype=np.float64),
            censored=df["censored"].to_numpy(dtype=int),
        )


# ---------------------------------------------------------------------------
# Distribution tails (scipy.special incomplete gamma / beta)
# ---------------------------------------------------------------------------


def chi2_sf(x: float, df: float) -> float:
    """P(X > x) for a chi-square variable with ``df`` degrees of freedom."""
    if x < 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, x / 2.0))


def chi2_cdf(x: float, df: float) -> float:
    if x < 0:
        return 0.0
    return float(special.gammainc(df / 2.0, x / 2.0))


def t_sf(t: float, df: float) -> float:
    """P(T > t) for a Student t variable with ``df`` degrees of freedom."""
    return float(special.stdtr(df, -t))


# ---------------------------------------------------------------------------
# Concordance
# ---------------------------------------------------------------------------


def c_index(table: RiskTable) -> float:
    """Harrell's concordance over censoring-comparable pairs.

    A pair (i, j) is comparable when i is uncensored and t_i < t_j. A
    concordant ordering (risk_i > risk_j) scores 1, tied risks score 0.5.
    """
    risk, time, censored = table.risk, table.time, table.censored
    events = censored == 0
    # comparable[i, j]: i uncensored and strictly earlier than j
    comparable = events[:, None] & (time[:, None] < time[None, :])
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise DataError("c-index undefined: no comparable pairs in the table")
    greater = risk[:, None] > risk[None, :]
    tied = risk[:, None] == risk[None, :]
    weight = float(greater[comparable].sum()) + 0.5 * float(tied[comparable].sum())
    return weight / n_pairs


# ---------------------------------------------------------------------------
# Kaplan-Meier and logrank
# ---------------------------------------------------------------------------


@dataclass
class KmCurve:
    """Product-limit estimate evaluated at the distinct event times."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def survival_at(self, t: float) -> float:
        idx = int(np.searchsorted(self.times, t, side="right"))
        return 1.0 if idx == 0 else float(self.survival[idx - 1])

    def to_csv(self, path) -> None:
        with Path(path).open("w") as fh:
            fh.write("time,survival,at_risk,events\n")
            for t, s, n, d in zip(self.times, self.survival, self.at_risk, self.events):
                fh.write(f"{float(t)!r},{float(s)!r},{int(n)},{int(d)}\n")


def km_estimator(times, censored) -> KmCurve:
    """S(t) = Π_{event times t_i ≤ t} (1 − d_i/n_i)."""
    times = np.asarray(times, dtype=np.float64)
    censored = np.asarray(censored, dtype=int)
    if times.size == 0:
        raise PreconditionError("km_estimator requires at least one observation")
    if times.size != censored.size:
        raise DataError("times and censored flags differ in length")
    event_times = np.unique(times[censored == 0])
    surv = np.empty(event_times.size)
    at_risk = np.empty(event_times.size, dtype=int)
    deaths = np.empty(event_times.size, dtype=int)
    s = 1.0
    for k, t in enumerate(event_times):
        n_t = int((times >= t).sum())
        d_t = int(((times == t) & (censored == 0)).sum())
        s *= 1.0 - d_t / n_t
        surv[k] = s
        at_risk[k] = n_t
        deaths[k] = d_t
    return KmCurve(times=event_times, survival=surv, at_risk=at_risk, events=deaths)


def logrank_test(group_a: RiskTable, group_b: RiskTable) -> tuple[float, float]:
    """Two-group logrank statistic with hypergeometric variance; p from chi²₁."""
    if (group_a.censored == 0).sum() == 0 or (group_b.censored == 0).sum() == 0:
        raise DataError("logrank test requires at least one event in each group")
    times = np.concatenate([group_a.time, group_b.time])
    censored = np.concatenate([group_a.censored, group_b.censored])
    in_a = np.concatenate([np.ones(len(group_a), dtype=bool), np.zeros(len(group_b), dtype=bool)])

    observed_minus_expected = 0.0
    variance = 0.0
    for t in np.unique(times[censored == 0]):
        at_risk = times >= t
        n_t = int(at_risk.sum())
        n1_t = int((at_risk & in_a).sum())
        dead = (times == t) & (censored == 0)
        d_t = int(dead.sum())
        d1_t = int((dead & in_a).sum())
        expected = d_t * n1_t / n_t
        observed_minus_expected += d1_t - expected
        if n_t > 1:
            variance += d_t * (n1_t / n_t) * (1.0 - n1_t / n_t) * (n_t - d_t) / (n_t - 1)
    if variance == 0.0:
        return 0.0, 1.0
    chi2 = observed_minus_expected**2 / variance
    return float(chi2), chi2_sf(chi2, 1.0)


# ---------------------------------------------------------------------------
# Bootstrap and t-test
# ---------------------------------------------------------------------------


def bootstrap_ci(
    table: RiskTable,
    statistic: Callable[[RiskTable], float],
    replicates: int = 1000,
    seed: int = 0,
    level: float = 0.95,
) -> tuple[float, float]:
    """Seeded percentile bootstrap interval of ``statistic`` over row resamples.

    Replicates on which the statistic is undefined (raises DataError) are
    redrawn; the total number of draws is capped at 10x ``replicates``.
    """
    if replicates < 2:
        raise ParameterError(f"bootstrap needs at least 2 replicates, got {replicates}")
    if not 0.0 < level < 1.0:
        raise ParameterError(f"confidence level must lie in (0, 1), got {level}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = len(table)
    values = np.empty(replicates)
    collected = 0
    draws = 0
    while collected < replicates:
        if draws >= 10 * replicates:
            raise DataError(
                f"bootstrap exceeded {10 * replicates} draws with only {collected} valid replicates"
            )
        idx = rng.integers(0, n, size=n)
        draws += 1
        try:
            values[collected] = statistic(table.subset(idx))
        except DataError:
            continue
        collected += 1
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha], method="linear")
    return float(lo), float(hi)


def two_sample_t(xs, ys) -> tuple[float, float]:
    """Welch two-sample t statistic and two-sided p value."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size < 2 or ys.size < 2:
        raise DataError(f"t-test needs >= 2 samples per group, got {xs.size} and {ys.size}")
    vx = xs.var(ddof=1) / xs.size
    vy = ys.var(ddof=1) / ys.size
    if vx + vy == 0.0:
        raise DataError("t-test undefined: both samples have zero variance")
    t = (xs.mean() - ys.mean()) / np.sqrt(vx + vy)
    df = (vx + vy) ** 2 / (vx**2 / (xs.size - 1) + vy**2 / (ys.size - 1))
    p = 2.0 * t_sf(abs(t), df)
    return float(t), float(min(p, 1.0))


# ---------------------------------------------------------------------------
# Risk grouping
# ---------------------------------------------------------------------------

RISK_SCHEMES = ("median", "quartile")


def risk_groups(table: RiskTable, scheme: str = "median") -> np.ndarray:
    """Labels per row: median split (low = risk ≤ median) or strict quartile
    split (low = risk < Q1, high = risk > Q3, everything else 'mid')."""
    if scheme not in RISK_SCHEMES:
        raise ParameterError(f"unknown risk grouping scheme {scheme!r}; expected {RISK_SCHEMES}")
    if len(table) == 0:
        raise PreconditionError("risk_groups on an empty table")
    risk = table.risk
    if scheme == "median":
        cut = np.quantile(risk, 0.5, method="linear")
        return np.where(risk <= cut, "low", "high")
    q1, q3 = np.quantile(risk, [0.25, 0.75], method="linear")
    labels = np.full(len(table), "mid", dtype=object)
    labels[risk < q1] = "low"
    labels[risk > q3] = "high"
    return labels.astype(str)


def group_tables(table: RiskTable, labels: np.ndarray) -> dict[str, RiskTable]:
    out = {}
    for name in np.unique(labels):
        idx = np.flatnonzero(labels == name)
        out[str(name)] = RiskTable(
            patient_ids=[table.patient_ids[i] for i in idx],
            risk=table.risk[idx],
            time=table.time[idx],
            censored=table.censored[idx],
        )
    return out


# ---------------------------------------------------------------------------
# SVG step plot (dependency-free, golden-testable)
# ---------------------------------------------------------------------------

_SVG_COLORS = ("#2166ac", "#b2182b", "#4dac26", "#f4a582")


def km_svg(curves: dict[str, KmCurve], path, width: int = 640, height: int = 420) -> None:
    """Minimal Kaplan-Meier step plot as a standalone SVG file."""
    pad = 50
    t_max = max((float(c.times[-1]) for c in curves.values() if c.times.size), default=1.0)
    t_max = t_max if t_max > 0 else 1.0

    def sx(t: float) -> float:
        return pad + (t / t_max) * (width - 2 * pad)

    def sy(s: float) -> float:
        return pad + (1.0 - s) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{pad - 10}" font-size="12">survival</text>',
        f'<text x="{width - pad}" y="{height - pad + 30}" font-size="12" text-anchor="end">time</text>',
    ]
    for k, (name, curve) in enumerate(sorted(curves.items())):
        color = _SVG_COLORS[k % len(_SVG_COLORS)]
        points = [(0.0, 1.0)]
        for t, s in zip(curve.times, curve.survival):
            points.append((float(t), points[-1][1]))
            points.append((float(t), float(s)))
        points.append((t_max, points[-1][1]))
        coords = " ".join(f"{sx(t):.2f},{sy(s):.2f}" for t, s in points)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="{width - pad - 4}" y="{pad + 16 * (k + 1)}" font-size="12" '
            f'text-anchor="end" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
