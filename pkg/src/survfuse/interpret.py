"""Feature attribution and attention interpretability.

Integrated gradients along the straight path from a baseline (Gauss-Legendre
quadrature over the path parameter), attention percentile maps, top-fraction
patch selection, the tumor-infiltrating-lymphocyte co-localization heuristic,
and per-modality contribution shares.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .errors import (
    DataError,
    DegenerateModelError,
    DimensionError,
    NumericError,
    ParameterError,
    PreconditionError,
)


@dataclass
class AttributionReport:
    """Signed per-feature attributions plus the quadrature completeness gap."""

    feature_names: list[str]
    ig_values: np.ndarray
    feature_values: np.ndarray
    completeness_gap: float
    output_delta: float  # F(x) − F(baseline)

    def __post_init__(self):
        if not (len(self.feature_names) == self.ig_values.size == self.feature_values.size):
            raise DataError("attribution report fields have mismatched lengths")

    @property
    def relative_gap(self) -> float:
        return self.completeness_gap / max(1e-8, abs(self.output_delta))

    def directions(self) -> list[str]:
        return ["high_risk" if v > 0 else ("low_risk" if v < 0 else "neutral") for v in self.ig_values]

    def to_json_dict(self) -> dict:
        return {
            "completeness_gap": self.completeness_gap,
            "relative_gap": self.relative_gap,
            "output_delta": self.output_delta,
            "attributions": [
                {"feature": name, "value": float(val), "ig": float(ig), "direction": direction}
                for name, val, ig, direction in zip(
                    self.feature_names, self.feature_values, self.ig_values, self.directions()
                )
            ],
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True, indent=2))


def _gauss_legendre_01(steps: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(steps)
    return (nodes + 1.0) / 2.0, weights / 2.0


def integrated_gradients(
    scalar_fn: Callable[[Tensor], Tensor],
    x: Tensor,
    baseline: Tensor | None = None,
    steps: int = 50,
    feature_names: Sequence[str] | None = None,
) -> AttributionReport:
    """IG_i = (x_i − x′_i) · ∫₀¹ ∂F(x′ + α(x − x′))/∂x_i dα via Gauss-Legendre.

    The completeness gap |ΣIG − (F(x) − F(x′))| is measured and reported, not
    hidden; on a linear F the quadrature is exact for any node count.
    """
    if steps < 2:
        raise ParameterError(f"integrated_gradients needs steps >= 2, got {steps}")
    if baseline is None:
        baseline = Tensor(np.zeros_like(x.data))
    if baseline.data.shape != x.data.shape:
        raise DimensionError(f"baseline shape {baseline.shape} != input shape {x.shape}")

    delta = x.data - baseline.data
    alphas, weights = _gauss_legendre_01(steps)
    total_grad = np.zeros_like(x.data)
    for alpha, weight in zip(alphas, weights):
        point = Tensor(baseline.data + alpha * delta)
        tape = Tape()
        with tape:
            out = scalar_fn(point)
        value = out.item()
        if not math.isfinite(value):
            raise NumericError(f"objective is non-finite at path position alpha={alpha:.4f}")
        tape.backward(out)
        total_grad += weight * point.grad
        tape.reset()

    ig = delta * total_grad
    f_x = scalar_fn(Tensor(x.data.copy())).item()
    f_base = scalar_fn(Tensor(baseline.data.copy())).item()
    if not (math.isfinite(f_x) and math.isfinite(f_base)):
        raise NumericError("objective is non-finite at the path endpoints")
    output_delta = f_x - f_base
    gap = abs(float(ig.sum()) - output_delta)
    names = list(feature_names) if feature_names is not None else [f"x{i}" for i in range(x.size)]
    if len(names) != x.size:
        raise DataError(f"{len(names)} feature names for {x.size} features")
    return AttributionReport(
        feature_names=names,
        ig_values=ig.reshape(-1).copy(),
        feature_values=x.data.reshape(-1).copy(),
        completeness_gap=gap,
        output_delta=output_delta,
    )


# ---------------------------------------------------------------------------
# Attention maps
# ---------------------------------------------------------------------------


def attention_percentiles(scores, reference) -> np.ndarray:
    """Mid-rank percentile of each score within the reference distribution,
    then min-max normalized over the emitted set (when it has >= 2 distinct
    values) so the lowest maps to 0.0 and the highest to 1.0."""
    scores = np.asarray(scores, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if reference.size == 0:
        raise PreconditionError("attention_percentiles requires a nonempty reference")
    ref_sorted = np.sort(reference)
    below = np.searchsorted(ref_sorted, scores, side="left")
    below_or_equal = np.searchsorted(ref_sorted, scores, side="right")
    pct = (below + 0.5 * (below_or_equal - below)) / reference.size
    lo, hi = pct.min(), pct.max()
    if hi > lo:
        pct = (pct - lo) / (hi - lo)
    return pct


@dataclass
class AttentionMap:
    """Per-patch raw attention plus rank-preserving percentile scores."""

    patch_ids: list[str]
    raw: np.ndarray
    percentile: np.ndarray
    coords: np.ndarray | None = None  # [M x 2]

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        self.percentile = np.asarray(self.percentile, dtype=np.float64)
        if not (len(self.patch_ids) == self.raw.size == self.percentile.size):
            raise DataError("attention map fields have mismatched lengths")

    def __len__(self) -> int:
        return len(self.patch_ids)

    @classmethod
    def build(cls, patch_ids, raw_scores, coords=None, reference=None) -> "AttentionMap":
        raw = np.asarray(raw_scores, dtype=np.float64)
        ref = raw if reference is None else np.asarray(reference, dtype=np.float64)
        return cls(
            patch_ids=list(patch_ids),
            raw=raw,
            percentile=attention_percentiles(raw, ref),
            coords=None if coords is None else np.asarray(coords, dtype=np.float64),
        )

    def to_csv(self, path) -> None:
        with Path(path).open("w") as fh:
            fh.write("patch_id,x,y,raw,percentile\n")
            for i, pid in enumerate(self.patch_ids):
                x, y = (self.coords[i] if self.coords is not None else (i, 0))
                fh.write(
                    f"{pid},{float(x)!r},{float(y)!r},"
                    f"{float(self.raw[i])!r},{float(self.percentile[i])!r}\n"
                )

    def to_svg(self, path, width: int = 480, height: int = 480, radius: int = 6) -> None:
        """Scatter of patch positions shaded blue (low) to red (high attention)."""
        if self.coords is None:
            coords = np.column_stack([np.arange(len(self)), np.zeros(len(self))])
        else:
            coords = self.coords
        pad = 20.0
        span = lambda v: (v.min(), max(v.max() - v.min(), 1e-9))  # noqa: E731
        x0, xs = span(coords[:, 0])
        y0, ys = span(coords[:, 1])
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
        ]
        for i in range(len(self)):
            cx = pad + (coords[i, 0] - x0) / xs * (width - 2 * pad)
            cy = pad + (coords[i, 1] - y0) / ys * (height - 2 * pad)
            p = self.percentile[i]
            r, g, b = int(255 * p), 60, int(255 * (1 - p))
            parts.append(
                f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="{radius}" fill="rgb({r},{g},{b})"/>'
            )
        parts.append("</svg>")
        Path(path).write_text("\n".join(parts))


def top_attention_patches(amap: AttentionMap, frac: float = 0.01) -> list[str]:
    """Ids of the ceil(frac·M) highest-raw-score patches; ties broken by id."""
    if not 0.0 < frac <= 1.0:
        raise ParameterError(f"frac must lie in (0, 1], got {frac}")
    if len(amap) == 0:
        raise PreconditionError("top_attention_patches on an empty map")
    k = math.ceil(frac * len(amap))
    order = sorted(range(len(amap)), key=lambda i: (-amap.raw[i], amap.patch_ids[i]))
    return [amap.patch_ids[i] for i in order[:k]]


# ---------------------------------------------------------------------------
# Tumor-infiltrating lymphocyte heuristic
# ---------------------------------------------------------------------------

TIL_MIN_CELLS = 20
TIL_MIN_LYMPHOCYTES = 10
TIL_MIN_TUMOR_CELLS = 5


@dataclass(frozen=True)
class PatchCellCounts:
    patch_id: str
    total_cells: int
    lymphocytes: int
    tumor_cells: int

    def __post_init__(self):
        if min(self.total_cells, self.lymphocytes, self.tumor_cells) < 0:
            raise DataError(f"cell counts must be nonnegative: {self}")
        if self.lymphocytes + self.tumor_cells > self.total_cells:
            raise DataError(f"lymphocytes + tumor cells exceed total cells: {self}")


def til_positive(counts: PatchCellCounts) -> bool:
    """Strict co-localization thresholds: > 20 cells, > 10 lymphocytes, > 5 tumor cells."""
    return (
        counts.total_cells > TIL_MIN_CELLS
        and counts.lymphocytes > TIL_MIN_LYMPHOCYTES
        and counts.tumor_cells > TIL_MIN_TUMOR_CELLS
    )


def til_fraction(patch_counts: Sequence[PatchCellCounts]) -> float:
    """Fraction of TIL-positive patches among those supplied."""
    patch_counts = list(patch_counts)
    if not patch_counts:
        raise PreconditionError("til_fraction of an empty patch list")
    return sum(til_positive(c) for c in patch_counts) / len(patch_counts)


# ---------------------------------------------------------------------------
# Modality contribution
# ---------------------------------------------------------------------------


def ig_shares(
    joint_fn: Callable[[Tensor], Tensor],
    left: np.ndarray,
    right: np.ndarray,
    steps: int = 50,
) -> tuple[float, float, AttributionReport]:
    """Split IG attribution mass of a joint-vector function into two halves."""
    joint = Tensor(np.concatenate([left, right]))
    report = integrated_gradients(joint_fn, joint, steps=steps)
    mass = np.abs(report.ig_values)
    total = float(mass.sum())
    if total < 1e-12:
        raise DegenerateModelError("total attribution mass below 1e-12; model output is flat")
    n = left.size
    return float(mass[:n].sum() / total), float(mass[n:].sum() / total), report


def modality_contribution(mmf, bag: Tensor, x: Tensor, steps: int = 50) -> tuple[float, float]:
    """Shares of risk attribution carried by each penultimate modality rep.

    IG is taken at the (h_wsi, h_mol) pair produced by the trained branches,
    against zero baselines, through the fusion head's scalar risk.
    """
    from .autodiff import slice1d

    h_wsi, h_mol, _ = mmf._reps(bag, x, training=False, rng=None)
    n = h_wsi.size

    def joint_fn(joint: Tensor) -> Tensor:
        return mmf.fusion_risk_from_reps(
            slice1d(joint, 0, n), slice1d(joint, n, joint.size)
        )

    wsi_share, mol_share, _ = ig_shares(joint_fn, h_wsi.data.copy(), h_mol.data.copy(), steps)
    return wsi_share, mol_share
