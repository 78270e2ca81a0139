"""The three survival networks and their shared hazard head.

* AmilModel — attention-pooled multiple-instance network over a patch bag.
* SnnModel — self-normalizing feedforward net over a molecular vector.
* MmfModel — both branches fused through gating + Kronecker product.

Every network ends in a 4-bin sigmoid hazard head; the scalar risk used for
ranking patients is the cumulative incidence sum Σ_r (1 − S(r)), which is
strictly increasing in every hazard coordinate and bounded by the bin count.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import survival
from .autodiff import Tensor
from .errors import ContractError, DataError, DimensionError, ParameterError, PreconditionError
from .layers import (
    GateParams,
    GatedAttentionParams,
    LinearLayer,
    alpha_dropout,
    attention_pool,
    gated_attention_scores,
    kron_fusion,
    modality_gate,
    selu,
)

N_BINS = survival.N_BINS


@dataclass(frozen=True)
class AmilConfig:
    in_dim: int = 1024
    proj_dim: int = 512
    attn_dim: int = 256
    rep_dim: int = 32


@dataclass(frozen=True)
class SnnConfig:
    in_dim: int = 32
    hidden_dim: int = 256
    rep_dim: int = 32
    dropout_keep: float = 0.75


@dataclass(frozen=True)
class MmfConfig:
    amil: AmilConfig = AmilConfig()
    snn: SnnConfig = SnnConfig()
    fusion_hidden: int = 256


class AmilOutput(NamedTuple):
    hazards: Tensor  # (4,)
    h_wsi: Tensor  # (rep_dim,)
    attention: Tensor  # (M,)


class SnnOutput(NamedTuple):
    hazards: Tensor
    h_mol: Tensor


class MmfOutput(NamedTuple):
    hazards: Tensor
    h_wsi: Tensor
    h_mol: Tensor
    attention: Tensor


def _check_bag(bag: Tensor, in_dim: int) -> None:
    if bag.data.ndim != 2:
        raise DimensionError(f"bag must be 2-D [M x d], got shape {bag.shape}")
    if bag.shape[0] < 1:
        raise PreconditionError("empty bag: a patient needs at least one patch")
    if bag.shape[1] != in_dim:
        raise DimensionError(f"bag feature dim {bag.shape[1]} != configured {in_dim}")


class AmilModel:
    """Attention-MIL: project patches, score them, pool, predict hazards.

    Hazards are read from the pooled projection-space representation; the
    compact ``rep_head`` output exists for fusion and attribution.
    """

    kind = "amil"

    def __init__(self, config: AmilConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng()
        self.config = config
        self.projection = LinearLayer(config.in_dim, config.proj_dim, "kaiming_normal", rng)
        self.attention = GatedAttentionParams(config.proj_dim, config.attn_dim, rng)
        self.rep_head = LinearLayer(config.proj_dim, config.rep_dim, "lecun_normal", rng)
        self.hazard_head = LinearLayer(config.proj_dim, N_BINS, "lecun_normal", rng)

    def embed(self, bag: Tensor) -> tuple[Tensor, Tensor]:
        """Pooled bag representation [1 x proj_dim] plus attention weights [M]."""
        _check_bag(bag, self.config.in_dim)
        projected = ad.relu(self.projection(bag))
        scores = gated_attention_scores(projected, self.attention)
        pooled = attention_pool(scores, projected)
        return ad.reshape(pooled, (1, self.config.proj_dim)), scores

    def forward(self, bag: Tensor, training: bool = False, rng=None) -> AmilOutput:
        pooled, scores = self.embed(bag)
        hazards = ad.sigmoid(ad.reshape(self.hazard_head(pooled), (N_BINS,)))
        h_wsi = ad.reshape(self.rep_head(pooled), (self.config.rep_dim,))
        return AmilOutput(hazards, h_wsi, scores)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return (
            self.projection.parameters("projection.")
            + self.attention.parameters("attention.")
            + self.rep_head.parameters("rep_head.")
            + self.hazard_head.parameters("hazard_head.")
        )


class SnnModel:
    """Self-normalizing net: two SeLU + alpha-dropout hidden layers of equal width."""

    kind = "snn"

    def __init__(self, config: SnnConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng()
        if not 0.0 < config.dropout_keep <= 1.0:
            raise ParameterError(f"dropout_keep must lie in (0, 1], got {config.dropout_keep}")
        self.config = config
        self.hidden1 = LinearLayer(config.in_dim, config.hidden_dim, "lecun_normal", rng)
        self.hidden2 = LinearLayer(config.hidden_dim, config.hidden_dim, "lecun_normal", rng)
        self.rep_head = LinearLayer(config.hidden_dim, config.rep_dim, "lecun_normal", rng)
        self.hazard_head = LinearLayer(config.hidden_dim, N_BINS, "lecun_normal", rng)

    def embed(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        """Second hidden activation as a row vector [1 x hidden_dim]."""
        if x.data.ndim != 1 or x.size != self.config.in_dim:
            raise DimensionError(f"molecular vector {x.shape} != configured ({self.config.in_dim},)")
        q = self.config.dropout_keep
        row = ad.reshape(x, (1, self.config.in_dim))
        h = alpha_dropout(selu(self.hidden1(row)), q, training, rng)
        h = alpha_dropout(selu(self.hidden2(h)), q, training, rng)
        return h

    def forward(self, x: Tensor, training: bool = False, rng=None) -> SnnOutput:
        h = self.embed(x, training, rng)
        hazards = ad.sigmoid(ad.reshape(self.hazard_head(h), (N_BINS,)))
        h_mol = ad.reshape(self.rep_head(h), (self.config.rep_dim,))
        return SnnOutput(hazards, h_mol)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return (
            self.hidden1.parameters("hidden1.")
            + self.hidden2.parameters("hidden2.")
            + self.rep_head.parameters("rep_head.")
            + self.hazard_head.parameters("hazard_head.")
        )


class MmfModel:
    """Fusion network: branch reps → modality gate → Kronecker product → MLP head.

    The branch hazard heads stay parked; gradients reach the branches only
    through their compact representations.
    """

    kind = "mmf"

    def __init__(self, config: MmfConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng()
        self.config = config
        self.amil_branch = AmilModel(config.amil, rng)
        self.snn_branch = SnnModel(config.snn, rng)
        self.gate = GateParams(config.amil.rep_dim, config.snn.rep_dim, rng)
        fusion_in = (config.amil.rep_dim + 1) * (config.snn.rep_dim + 1)
        self.fusion1 = LinearLayer(fusion_in, config.fusion_hidden, "kaiming_normal", rng)
        self.fusion2 = LinearLayer(config.fusion_hidden, config.fusion_hidden, "kaiming_normal", rng)
        self.hazard_head = LinearLayer(config.fusion_hidden, N_BINS, "lecun_normal", rng)

    def _reps(self, bag: Tensor, x: Tensor, training: bool, rng) -> tuple[Tensor, Tensor, Tensor]:
        pooled, scores = self.amil_branch.embed(bag)
        h_wsi = ad.reshape(self.amil_branch.rep_head(pooled), (self.config.amil.rep_dim,))
        hidden = self.snn_branch.embed(x, training, rng)
        h_mol = ad.reshape(self.snn_branch.rep_head(hidden), (self.config.snn.rep_dim,))
        return h_wsi, h_mol, scores

    def _fusion_hazards(self, h_wsi: Tensor, h_mol: Tensor) -> Tensor:
        gated_w, gated_m = modality_gate(h_wsi, h_mol, self.gate)
        fused = kron_fusion(gated_w, gated_m)
        row = ad.reshape(fused, (1, fused.size))
        h = ad.relu(self.fusion1(row))
        h = ad.relu(self.fusion2(h))
        return ad.sigmoid(ad.reshape(self.hazard_head(h), (N_BINS,)))

    def forward(self, bag: Tensor, x: Tensor, training: bool = False, rng=None) -> MmfOutput:
        h_wsi, h_mol, scores = self._reps(bag, x, training, rng)
        hazards = self._fusion_hazards(h_wsi, h_mol)
        return MmfOutput(hazards, h_wsi, h_mol, scores)

    def fusion_risk_from_reps(self, h_wsi: Tensor, h_mol: Tensor) -> Tensor:
        """Differentiable scalar risk as a function of the penultimate reps."""
        return risk_tensor(self._fusion_hazards(h_wsi, h_mol))

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = [
            (f"amil_branch.{n}", t)
            for n, t in self.amil_branch.projection.parameters("projection.")
            + self.amil_branch.attention.parameters("attention.")
            + self.amil_branch.rep_head.parameters("rep_head.")
        ]
        params += [
            (f"snn_branch.{n}", t)
            for n, t in self.snn_branch.hidden1.parameters("hidden1.")
            + self.snn_branch.hidden2.parameters("hidden2.")
            + self.snn_branch.rep_head.parameters("rep_head.")
        ]
        params += self.gate.parameters("gate.")
        params += self.fusion1.parameters("fusion1.")
        params += self.fusion2.parameters("fusion2.")
        params += self.hazard_head.parameters("hazard_head.")
        return params


def risk_tensor(hazards: Tensor) -> Tensor:
    """Differentiable cumulative incidence sum Σ_r (1 − S(r))."""
    surv = survival.hazard_to_survival(hazards)
    return ad.sub(Tensor(np.asarray(float(N_BINS))), ad.sum(surv))


def risk_score(hazards: Tensor) -> float:
    """Scalar risk in (0, bins): strictly increasing in every hazard coordinate."""
    h = hazards.data if isinstance(hazards, Tensor) else np.asarray(hazards, dtype=np.float64)
    if h.ndim != 1 or h.size != N_BINS:
        raise ContractError(f"expected a hazard vector of shape ({N_BINS},), got {h.shape}")
    if not (np.all(h > 0.0) and np.all(h < 1.0)):
        raise ContractError(f"hazards must lie strictly inside (0,1), got {h}")
    return float(N_BINS - survival.survival_curve(h).sum())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "survfuse-checkpoint"
CHECKPOINT_VERSION = 1


def _config_dict(model) -> dict:
    return asdict(model.config)


def build_model(kind: str, config_dict: dict, rng: np.random.Generator | None = None):
    """Construct an untrained model of the given kind from a plain config dict."""
    kind = kind.lower()
    if kind == "amil":
        return AmilModel(AmilConfig(**config_dict), rng)
    if kind == "snn":
        return SnnModel(SnnConfig(**config_dict), rng)
    if kind == "mmf":
        return MmfModel(
            MmfConfig(
                amil=AmilConfig(**config_dict["amil"]),
                snn=SnnConfig(**config_dict["snn"]),
                fusion_hidden=config_dict["fusion_hidden"],
            ),
            rng,
        )
    raise ParameterError(f"unknown model kind {kind!r}; expected amil, snn, or mmf")


def save_checkpoint(model, path) -> None:
    """Write a JSON checkpoint whose float64 values round-trip bitwise."""
    tensors = {}
    for name, tensor in model.parameters():
        if not np.all(np.isfinite(tensor.data)):
            raise DataError(f"refusing to checkpoint non-finite weights in {name}")
        tensors[name] = {"shape": list(tensor.shape), "values": tensor.data.reshape(-1).tolist()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "config": _config_dict(model),
        "tensors": tensors,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path):
    """Rebuild a model from :func:`save_checkpoint` output."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    model = build_model(payload["kind"], payload["config"], np.random.default_rng(0))
    stored = payload["tensors"]
    for name, tensor in model.parameters():
        if name not in stored:
            raise DataError(f"{path}: checkpoint is missing tensor {name!r}")
        entry = stored[name]
        values = np.asarray(entry["values"], dtype=np.float64)
        if list(tensor.shape) != entry["shape"] or values.size != tensor.size:
            raise DataError(
                f"{path}: tensor {name!r} has shape {entry['shape']}, expected {list(tensor.shape)}"
            )
        tensor.data[...] = values.reshape(tensor.shape)
    extra = set(stored) - {name for name, _ in model.parameters()}
    if extra:
        raise DataError(f"{path}: checkpoint contains unknown tensors {sorted(extra)}")
    return model
