"""Layer primitives: linear layers, SeLU, alpha dropout, gated attention,
attention pooling, modality gating, and ones-appended Kronecker fusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ParameterError, PreconditionError

# Exact self-normalizing constants; the fixed point of the layer statistics
# requires full precision, not the two-digit approximations.
SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805
SELU_NEG_LIMIT = -SELU_SCALE * SELU_ALPHA  # lim x→-inf selu(x)

INIT_SCHEMES = ("lecun_normal", "kaiming_normal")


@dataclass(frozen=True)
class SeluConstants:
    alpha: float = SELU_ALPHA
    scale: float = SELU_SCALE

    def __post_init__(self):
        if self.alpha <= 0 or self.scale <= 0:
            raise ParameterError("SeLU constants must be positive")


_DEFAULT_SELU = SeluConstants()


def selu(x: Tensor, constants: SeluConstants = _DEFAULT_SELU) -> Tensor:
    """scale·x for x>0, scale·alpha·(eˣ−1) for x≤0."""
    a, s = constants.alpha, constants.scale
    v = x.data
    neg = np.minimum(v, 0.0)  # keeps exp/expm1 off the positive branch
    value = np.where(v > 0, s * v, s * a * np.expm1(neg))
    grad_mult = np.where(v > 0, s, s * a * np.exp(neg))
    return ad.apply_unary(x, value, grad_mult)


def alpha_dropout(
    x: Tensor,
    keep_prob: float,
    training: bool,
    rng: np.random.Generator | None = None,
    constants: SeluConstants = _DEFAULT_SELU,
) -> Tensor:
    """Dropout that preserves zero mean / unit variance under SeLU stacks.

    Dropped units are set to the SeLU negative limit −scale·alpha instead of
    zero, then the affine correction a·(·)+b restores the first two moments
    of a standard-normal input: with keep probability q and drop value α′,
    the raw moments are q·μ+(1−q)·α′ and q·((1−q)·(α′−μ)²+ν), so
    a = (q·(1+α′²·(1−q)))^(−1/2) and b = −a·(1−q)·α′.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ParameterError(f"alpha_dropout keep_prob must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    if rng is None:
        raise ParameterError("alpha_dropout requires an rng stream when training")
    q = float(keep_prob)
    alpha_prime = -constants.scale * constants.alpha
    a = (q * (1.0 + alpha_prime * alpha_prime * (1.0 - q))) ** -0.5
    b = -a * (1.0 - q) * alpha_prime
    keep = rng.random(x.data.shape) < q
    value = a * np.where(keep, x.data, alpha_prime) + b
    grad_mult = a * keep.astype(np.float64)
    return ad.apply_unary(x, value, grad_mult)


def _init_std(scheme: str, fan_in: int) -> float:
    if scheme == "lecun_normal":
        return (1.0 / fan_in) ** 0.5
    if scheme == "kaiming_normal":
        return (2.0 / fan_in) ** 0.5
    raise ParameterError(f"unknown init scheme {scheme!r}; known: {INIT_SCHEMES}")


class LinearLayer:
    """Fully-connected layer ``y = x Wᵀ + b`` with zero-initialized bias.

    ``lecun_normal`` is the right choice ahead of SeLU (self-normalization
    depends on it); ``kaiming_normal`` ahead of ReLU/tanh/sigmoid layers.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        init_scheme: str = "lecun_normal",
        rng: np.random.Generator | None = None,
    ):
        if in_dim < 1 or out_dim < 1:
            raise ParameterError(f"LinearLayer dims must be positive, got {in_dim}x{out_dim}")
        std = _init_std(init_scheme, in_dim)
        if rng is None:
            rng = np.random.default_rng()
        self.init_scheme = init_scheme
        self.weight = Tensor(rng.normal(0.0, std, size=(out_dim, in_dim)))
        self.bias = Tensor(np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]


class GatedAttentionParams:
    """Parameters of the gated attention scorer.

    Two parallel projections of each instance embedding — one through tanh,
    one through a sigmoid gate — are multiplied elementwise and reduced to a
    single logit per instance.
    """

    def __init__(self, in_dim: int = 512, attn_dim: int = 256, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng()
        self.score = LinearLayer(in_dim, attn_dim, "kaiming_normal", rng)  # tanh path
        self.gate = LinearLayer(in_dim, attn_dim, "kaiming_normal", rng)  # sigmoid path
        self.logit = LinearLayer(attn_dim, 1, "kaiming_normal", rng)

    @property
    def in_dim(self) -> int:
        return self.score.in_dim

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return (
            self.score.parameters(prefix + "score.")
            + self.gate.parameters(prefix + "gate.")
            + self.logit.parameters(prefix + "logit.")
        )


def gated_attention_scores(H: Tensor, params: GatedAttentionParams) -> Tensor:
    """Softmax-normalized attention over the M rows of a bag matrix [M×h]."""
    if H.data.ndim != 2:
        raise DimensionError(f"gated_attention_scores expects a 2-D bag, got {H.shape}")
    m = H.shape[0]
    if m < 1:
        raise PreconditionError("attention over an empty bag")
    if H.shape[1] != params.in_dim:
        raise DimensionError(f"bag feature dim {H.shape[1]} != attention input dim {params.in_dim}")
    scored = ad.mul(ad.tanh(params.score(H)), ad.sigmoid(params.gate(H)))
    logits = ad.reshape(params.logit(scored), (m,))
    return ad.softmax(logits)


def attention_pool(a: Tensor, H: Tensor) -> Tensor:
    """Weighted sum of bag rows: Σ_m a_m·h_m, returned as a 1-D vector."""
    if a.data.ndim != 1 or H.data.ndim != 2 or a.size != H.shape[0]:
        raise DimensionError(f"attention_pool: weights {a.shape} incompatible with bag {H.shape}")
    pooled = ad.matmul(ad.reshape(a, (1, a.size)), H)
    return ad.reshape(pooled, (H.shape[1],))


class GateParams:
    """Per-modality transforms plus joint gating scores.

    Each modality is first passed through its own ReLU-transformed linear
    layer; a sigmoid gate computed from the concatenation of both transformed
    representations then scales each modality elementwise.
    """

    def __init__(self, wsi_dim: int = 32, mol_dim: int = 32, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng()
        joint = wsi_dim + mol_dim
        self.wsi_transform = LinearLayer(wsi_dim, wsi_dim, "kaiming_normal", rng)
        self.mol_transform = LinearLayer(mol_dim, mol_dim, "kaiming_normal", rng)
        self.wsi_gate = LinearLayer(joint, wsi_dim, "kaiming_normal", rng)
        self.mol_gate = LinearLayer(joint, mol_dim, "kaiming_normal", rng)

    @property
    def wsi_dim(self) -> int:
        return self.wsi_transform.in_dim

    @property
    def mol_dim(self) -> int:
        return self.mol_transform.in_dim

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return (
            self.wsi_transform.parameters(prefix + "wsi_transform.")
            + self.mol_transform.parameters(prefix + "mol_transform.")
            + self.wsi_gate.parameters(prefix + "wsi_gate.")
            + self.mol_gate.parameters(prefix + "mol_gate.")
        )


def modality_gate(h_wsi: Tensor, h_mol: Tensor, params: GateParams) -> tuple[Tensor, Tensor]:
    """Gate both modality vectors: hᵢ ← σ(gateᵢ([h_w, h_m])) ∗ ReLU(Wᵢ·hᵢ)."""
    if h_wsi.data.ndim != 1 or h_wsi.size != params.wsi_dim:
        raise DimensionError(f"gate: WSI rep {h_wsi.shape} != expected ({params.wsi_dim},)")
    if h_mol.data.ndim != 1 or h_mol.size != params.mol_dim:
        raise DimensionError(f"gate: molecular rep {h_mol.shape} != expected ({params.mol_dim},)")
    n, m = params.wsi_dim, params.mol_dim
    hw = ad.relu(params.wsi_transform(ad.reshape(h_wsi, (1, n))))
    hm = ad.relu(params.mol_transform(ad.reshape(h_mol, (1, m))))
    joint = ad.reshape(ad.concat([ad.reshape(hw, (n,)), ad.reshape(hm, (m,))]), (1, n + m))
    z_w = ad.sigmoid(params.wsi_gate(joint))
    z_m = ad.sigmoid(params.mol_gate(joint))
    gated_w = ad.reshape(ad.mul(z_w, hw), (n,))
    gated_m = ad.reshape(ad.mul(z_m, hm), (m,))
    return gated_w, gated_m


def kron_fusion(u: Tensor, v: Tensor) -> Tensor:
    """Flattened Kronecker product of the ones-appended vectors [u;1] ⊗ [v;1].

    The output of length (n+1)·(m+1) contains every pairwise product uᵢ·vⱼ,
    both raw vectors (products with the appended ones), and a constant 1, so
    unimodal information survives fusion.
    """
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise DimensionError(f"kron_fusion requires 1-D inputs, got {u.shape} and {v.shape}")
    if u.size < 1 or v.size < 1:
        raise PreconditionError("kron_fusion requires non-empty vectors")
    n, m = u.size, v.size
    one_u = Tensor(np.ones(1))
    one_v = Tensor(np.ones(1))
    u1 = ad.reshape(ad.concat([u, one_u]), (n + 1, 1))
    v1 = ad.reshape(ad.concat([v, one_v]), (1, m + 1))
    return ad.reshape(ad.matmul(u1, v1), ((n + 1) * (m + 1),))


def kron_unimodal_slices(n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices where the raw u and v vectors live inside the fused output."""
    u_idx = np.arange(n) * (m + 1) + m
    v_idx = n * (m + 1) + np.arange(m)
    return u_idx, v_idx
