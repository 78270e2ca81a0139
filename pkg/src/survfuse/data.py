"""Cohort ingestion, modality alignment, and molecular feature filtering.

Canonical interchange is CSV:

* embeddings.csv — ``patient_id,slide_id,patch_x,patch_y,f0,...,f{d-1}``
* molecular.csv — ``patient_id,<feature names...>``
* labels.csv — ``patient_id,time_months,censored`` (censored: 1 = alive)
* meta.csv — ``feature,kind`` with kind in {mutation, cnv, rnaseq}

Patients are assembled from the id intersection of the three tables; all
patch rows sharing a patient id (across slides) are concatenated into one
bag, sorted by (slide_id, patch_x, patch_y) so bags are deterministic.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .autodiff import Tensor
from .errors import DataError
from .survival import SurvivalLabel

log = logging.getLogger(__name__)

FEATURE_KINDS = ("mutation", "cnv", "rnaseq")


@dataclass
class FeatureMeta:
    names: list[str]
    kinds: list[str]

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise DataError("feature names and kinds differ in length")
        if len(set(self.names)) != len(self.names):
            raise DataError("molecular feature names must be unique")
        bad = sorted({k for k in self.kinds if k not in FEATURE_KINDS})
        if bad:
            raise DataError(f"unknown feature kinds {bad}; expected one of {FEATURE_KINDS}")

    def kind_mask(self, kind: str) -> np.ndarray:
        return np.asarray([k == kind for k in self.kinds], dtype=bool)

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class PatientRecord:
    patient_id: str
    bag: Tensor  # [M x d]
    molecular: Tensor  # [p]
    label: SurvivalLabel
    patch_coords: np.ndarray | None = None  # [M x 2] float
    slide_ids: list[str] | None = None  # one per patch

    @property
    def bag_size(self) -> int:
        return self.bag.shape[0]

    def patch_ids(self) -> list[str]:
        """Stable per-patch identifiers built from slide and coordinates."""
        if self.slide_ids is None or self.patch_coords is None:
            return [f"patch{i}" for i in range(self.bag_size)]
        return [
            f"{slide}:{int(x)}:{int(y)}"
            for slide, (x, y) in zip(self.slide_ids, self.patch_coords)
        ]


@dataclass
class Cohort:
    patients: list[PatientRecord]
    meta: FeatureMeta

    def __post_init__(self):
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate patient ids in cohort")

    def __len__(self) -> int:
        return len(self.patients)

    @property
    def embed_dim(self) -> int:
        return self.patients[0].bag.shape[1]

    @property
    def mol_dim(self) -> int:
        return self.patients[0].molecular.size

    def labels(self) -> list[SurvivalLabel]:
        return [p.label for p in self.patients]

    def by_id(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise DataError(f"unknown patient id {patient_id!r}")


# ---------------------------------------------------------------------------
# CSV loading / saving
# ---------------------------------------------------------------------------


def _require_columns(df: pd.DataFrame, required: list[str], path) -> None:
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing required columns {missing}; found {list(df.columns)}")


def load_cohort(embeddings_path, molecular_path, labels_path, meta_path) -> Cohort:
    """Assemble a cohort from the four canonical CSV files."""
    embeddings_path, molecular_path = Path(embeddings_path), Path(molecular_path)
    labels_path, meta_path = Path(labels_path), Path(meta_path)
    for p in (embeddings_path, molecular_path, labels_path, meta_path):
        if not p.exists():
            raise DataError(f"input file does not exist: {p}")

    emb = pd.read_csv(embeddings_path, float_precision="round_trip")
    _require_columns(emb, ["patient_id", "slide_id", "patch_x", "patch_y"], embeddings_path)
    feat_cols = [c for c in emb.columns if c.startswith("f")]
    expected = [f"f{i}" for i in range(len(feat_cols))]
    if feat_cols != expected:
        raise DataError(f"{embeddings_path}: embedding columns must be f0..f{{d-1}}, got {feat_cols[:5]}...")
    if len(feat_cols) == 0:
        raise DataError(f"{embeddings_path}: no embedding feature columns found")
    keys = emb[["patient_id", "slide_id", "patch_x", "patch_y"]]
    if keys.duplicated().any():
        dupes = keys[keys.duplicated()].head(3).to_dict("records")
        raise DataError(f"{embeddings_path}: duplicate (patient,slide,patch) keys, e.g. {dupes}")

    mol = pd.read_csv(molecular_path, float_precision="round_trip")
    _require_columns(mol, ["patient_id"], molecular_path)
    if mol["patient_id"].duplicated().any():
        raise DataError(f"{molecular_path}: duplicate patient ids")

    lab = pd.read_csv(labels_path, float_precision="round_trip")
    _require_columns(lab, ["patient_id", "time_months", "censored"], labels_path)
    if lab["patient_id"].duplicated().any():
        raise DataError(f"{labels_path}: duplicate patient ids")
    if not lab["censored"].isin([0, 1]).all():
        raise DataError(f"{labels_path}: censored column must contain only 0 or 1")

    meta_df = pd.read_csv(meta_path)
    _require_columns(meta_df, ["feature", "kind"], meta_path)
    meta = FeatureMeta(names=meta_df["feature"].astype(str).tolist(), kinds=meta_df["kind"].tolist())
    mol_features = [c for c in mol.columns if c != "patient_id"]
    if mol_features != meta.names:
        raise DataError(
            f"{molecular_path}: molecular columns do not match {meta_path} feature list "
            f"({len(mol_features)} vs {len(meta.names)} features)"
        )

    emb_ids = set(emb["patient_id"].astype(str))
    mol_ids = set(mol["patient_id"].astype(str))
    lab_ids = set(lab["patient_id"].astype(str))
    common = emb_ids & mol_ids & lab_ids
    if not common:
        raise DataError("no patient ids shared by embeddings, molecular, and labels tables")
    for name, ids in (("embeddings", emb_ids), ("molecular", mol_ids), ("labels", lab_ids)):
        dropped = ids - common
        if dropped:
            log.warning("%d patient(s) present only in %s were excluded: %s",
                        len(dropped), name, sorted(dropped)[:5])

    emb["patient_id"] = emb["patient_id"].astype(str)
    emb = emb.sort_values(
        ["patient_id", "slide_id", "patch_x", "patch_y"], kind="mergesort"
    ).reset_index(drop=True)
    mol = mol.set_index(mol["patient_id"].astype(str))
    lab = lab.set_index(lab["patient_id"].astype(str))

    patients = []
    for pid, group in emb.groupby("patient_id", sort=True):
        if pid not in common:
            continue
        bag = Tensor(group[feat_cols].to_numpy(dtype=np.float64))
        coords = group[["patch_x", "patch_y"]].to_numpy(dtype=np.float64)
        slides = group["slide_id"].astype(str).tolist()
        mol_row = mol.loc[pid, meta.names].to_numpy(dtype=np.float64)
        label = SurvivalLabel(
            t_cont=float(lab.loc[pid, "time_months"]),
            censored=int(lab.loc[pid, "censored"]),
        )
        patients.append(
            PatientRecord(
                patient_id=pid,
                bag=bag,
                molecular=Tensor(mol_row),
                label=label,
                patch_coords=coords,
                slide_ids=slides,
            )
        )
    log.info("loaded cohort: %d patients, d=%d, p=%d",
             len(patients), len(feat_cols), len(meta.names))
    return Cohort(patients=patients, meta=meta)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_cohort(cohort: Cohort, out_dir) -> dict[str, Path]:
    """Write the four canonical CSVs; floats use repr so reload is bit-exact."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = cohort.embed_dim
    paths = {
        "embeddings": out / "embeddings.csv",
        "molecular": out / "molecular.csv",
        "labels": out / "labels.csv",
        "meta": out / "meta.csv",
    }

    with paths["embeddings"].open("w") as fh:
        fh.write("patient_id,slide_id,patch_x,patch_y," + ",".join(f"f{i}" for i in range(d)) + "\n")
        for p in cohort.patients:
            coords = p.patch_coords
            slides = p.slide_ids or ["slide0"] * p.bag_size
            for m in range(p.bag_size):
                x = int(coords[m, 0]) if coords is not None else m
                y = int(coords[m, 1]) if coords is not None else 0
                row = ",".join(_fmt(v) for v in p.bag.data[m])
                fh.write(f"{p.patient_id},{slides[m]},{x},{y},{row}\n")

    with paths["molecular"].open("w") as fh:
        fh.write("patient_id," + ",".join(cohort.meta.names) + "\n")
        for p in cohort.patients:
            fh.write(p.patient_id + "," + ",".join(_fmt(v) for v in p.molecular.data) + "\n")

    with paths["labels"].open("w") as fh:
        fh.write("patient_id,time_months,censored\n")
        for p in cohort.patients:
            fh.write(f"{p.patient_id},{_fmt(p.label.t_cont)},{p.label.censored}\n")

    with paths["meta"].open("w") as fh:
        fh.write("feature,kind\n")
        for name, kind in zip(cohort.meta.names, cohort.meta.kinds):
            fh.write(f"{name},{kind}\n")

    return paths


def load_cohort_dir(data_dir) -> Cohort:
    """Load a cohort saved by :func:`save_cohort` from its directory."""
    d = Path(data_dir)
    return load_cohort(d / "embeddings.csv", d / "molecular.csv", d / "labels.csv", d / "meta.csv")


# ---------------------------------------------------------------------------
# Molecular feature preparation
# ---------------------------------------------------------------------------


def _mad(column: np.ndarray) -> float:
    med = np.median(column)
    return float(np.median(np.abs(column - med)))


def filter_genes(
    matrix: np.ndarray,
    meta: FeatureMeta,
    freq_threshold: float = 0.05,
    rna_top_k: int = 2000,
) -> tuple[np.ndarray, FeatureMeta]:
    """Apply the sparsity filters: keep mutation/cnv columns whose nonzero
    fraction strictly exceeds ``freq_threshold``; keep the ``rna_top_k``
    rnaseq columns with the largest median absolute deviation (ties broken
    by name ascending). Original column order is preserved.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != len(meta):
        raise DataError(f"matrix shape {matrix.shape} does not match {len(meta)} features")
    n = matrix.shape[0]
    keep = np.zeros(len(meta), dtype=bool)

    rna_candidates = []
    for j, kind in enumerate(meta.kinds):
        if kind in ("mutation", "cnv"):
            keep[j] = (np.count_nonzero(matrix[:, j]) / n) > freq_threshold
        else:
            rna_candidates.append(j)

    if rna_candidates:
        ranked = sorted(rna_candidates, key=lambda j: (-_mad(matrix[:, j]), meta.names[j]))
        for j in ranked[: min(rna_top_k, len(ranked))]:
            keep[j] = True

    if not keep.any():
        log.warning("filter_genes removed every molecular feature")
    kept_idx = np.flatnonzero(keep)
    new_meta = FeatureMeta(
        names=[meta.names[j] for j in kept_idx],
        kinds=[meta.kinds[j] for j in kept_idx],
    )
    return matrix[:, kept_idx], new_meta


def standardize_molecular(
    matrix: np.ndarray,
    meta: FeatureMeta,
    train_indices,
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Z-score cnv/rnaseq columns with training-split statistics only.

    Mutation columns stay 0/1. The scale is floored at 1e-8 so constant
    columns standardize to zero instead of blowing up. Returns the
    standardized matrix plus the (mean, scale) pair for reuse on held-out
    rows.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    train_indices = np.asarray(train_indices, dtype=int)
    if train_indices.size == 0:
        raise DataError("standardize_molecular needs a nonempty training split")
    continuous = ~meta.kind_mask("mutation")
    mean = np.zeros(matrix.shape[1])
    scale = np.ones(matrix.shape[1])
    train = matrix[train_indices]
    mean[continuous] = train[:, continuous].mean(axis=0)
    scale[continuous] = np.maximum(train[:, continuous].std(axis=0), 1e-8)
    return (matrix - mean) / scale, (mean, scale)


def standardize_cohort(cohort: Cohort, train_indices) -> Cohort:
    """Cohort copy whose molecular vectors are standardized with train stats."""
    matrix = np.stack([p.molecular.data for p in cohort.patients])
    standardized, _ = standardize_molecular(matrix, cohort.meta, train_indices)
    patients = [
        PatientRecord(
            patient_id=p.patient_id,
            bag=p.bag,
            molecular=Tensor(standardized[i]),
            label=p.label,
            patch_coords=p.patch_coords,
            slide_ids=p.slide_ids,
        )
        for i, p in enumerate(cohort.patients)
    ]
    return Cohort(patients=patients, meta=cohort.meta)


# ---------------------------------------------------------------------------
# Compact binary container for large bags
# ---------------------------------------------------------------------------

_BIN_MAGIC = b"SFTN"
_BIN_VERSION = 1


def write_tensor_binary(path, array: np.ndarray) -> None:
    """Write an n-d float64 array: magic, version, ndim, dims, little-endian data."""
    array = np.ascontiguousarray(array, dtype=np.float64)
    with Path(path).open("wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<II", _BIN_VERSION, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        fh.write(array.astype("<f8", copy=False).tobytes())


def read_tensor_binary(path) -> np.ndarray:
    with Path(path).open("rb") as fh:
        magic = fh.read(4)
        if magic != _BIN_MAGIC:
            raise DataError(f"{path}: bad magic bytes {magic!r}")
        version, ndim = struct.unpack("<II", fh.read(8))
        if version != _BIN_VERSION:
            raise DataError(f"{path}: unsupported container version {version}")
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
        return data.reshape(shape).astype(np.float64)
