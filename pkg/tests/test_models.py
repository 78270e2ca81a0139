"""Model forwards against independent numpy oracles, invariances, and checkpoints."""

import numpy as np
import pytest

from survfuse import autodiff as ad
from survfuse.autodiff import Tensor, grad_check
from survfuse.errors import ContractError, DataError, PreconditionError
from survfuse.models import (
    AmilConfig,
    AmilModel,
    MmfConfig,
    MmfModel,
    SnnConfig,
    SnnModel,
    build_model,
    load_checkpoint,
    risk_score,
    risk_tensor,
    save_checkpoint,
)

SMALL_AMIL = AmilConfig(in_dim=6, proj_dim=8, attn_dim=4, rep_dim=3)
SMALL_SNN = SnnConfig(in_dim=7, hidden_dim=8, rep_dim=3)
SMALL_MMF = MmfConfig(amil=SMALL_AMIL, snn=SMALL_SNN, fusion_hidden=8)


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def _selu(v):
    alpha, scale = 1.6732632423543772, 1.0507009873554805
    return np.where(v > 0, scale * v, scale * alpha * np.expm1(np.minimum(v, 0)))


def _layer(layer, x):
    return x @ layer.weight.data.T + layer.bias.data


def _amil_oracle(model, bag):
    """Straight-line numpy recomputation of the attention-MIL forward."""
    proj = np.maximum(_layer(model.projection, bag), 0.0)
    attn = model.attention
    scored = np.tanh(_layer(attn.score, proj)) * _sigmoid(_layer(attn.gate, proj))
    logits = _layer(attn.logit, scored).reshape(-1)
    e = np.exp(logits - logits.max())
    scores = e / e.sum()
    pooled = scores @ proj
    hazards = _sigmoid(_layer(model.hazard_head, pooled[None, :])).reshape(-1)
    h_wsi = _layer(model.rep_head, pooled[None, :]).reshape(-1)
    return hazards, h_wsi, scores


def _snn_oracle(model, x):
    h = _selu(_layer(model.hidden1, x[None, :]))
    h = _selu(_layer(model.hidden2, h))
    hazards = _sigmoid(_layer(model.hazard_head, h)).reshape(-1)
    h_mol = _layer(model.rep_head, h).reshape(-1)
    return hazards, h_mol


def _mmf_oracle(model, bag, x):
    proj = np.maximum(_layer(model.amil_branch.projection, bag), 0.0)
    attn = model.amil_branch.attention
    scored = np.tanh(_layer(attn.score, proj)) * _sigmoid(_layer(attn.gate, proj))
    logits = _layer(attn.logit, scored).reshape(-1)
    e = np.exp(logits - logits.max())
    scores = e / e.sum()
    pooled = scores @ proj
    h_wsi = _layer(model.amil_branch.rep_head, pooled[None, :]).reshape(-1)
    _, h_mol = _snn_oracle(model.snn_branch, x)

    gate = model.gate
    tw = np.maximum(_layer(gate.wsi_transform, h_wsi[None, :]), 0.0).reshape(-1)
    tm = np.maximum(_layer(gate.mol_transform, h_mol[None, :]), 0.0).reshape(-1)
    joint = np.concatenate([tw, tm])[None, :]
    gw = (_sigmoid(_layer(gate.wsi_gate, joint)).reshape(-1)) * tw
    gm = (_sigmoid(_layer(gate.mol_gate, joint)).reshape(-1)) * tm
    fused = np.kron(np.append(gw, 1.0), np.append(gm, 1.0))[None, :]
    h = np.maximum(_layer(model.fusion1, fused), 0.0)
    h = np.maximum(_layer(model.fusion2, h), 0.0)
    hazards = _sigmoid(_layer(model.hazard_head, h)).reshape(-1)
    return hazards


class TestAmil:
    def test_single_patch_pools_to_projection(self):
        model = AmilModel(SMALL_AMIL, np.random.default_rng(0))
        bag = np.random.default_rng(1).normal(size=(1, 6))
        out = model.forward(Tensor(bag))
        assert out.attention.data == pytest.approx([1.0])
        projected = np.maximum(_layer(model.projection, bag), 0.0).reshape(-1)
        pooled, _ = model.embed(Tensor(bag))
        assert pooled.data.reshape(-1) == pytest.approx(projected, abs=1e-15)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        model = AmilModel(SMALL_AMIL, rng)
        bag = rng.normal(size=(9, 6))
        perm = rng.permutation(9)
        base = model.forward(Tensor(bag))
        permuted = model.forward(Tensor(bag[perm]))
        assert permuted.hazards.data == pytest.approx(base.hazards.data, rel=1e-9)

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        model = AmilModel(SMALL_AMIL, rng)
        bag = rng.normal(size=(7, 6))
        out = model.forward(Tensor(bag))
        hazards, h_wsi, scores = _amil_oracle(model, bag)
        assert out.hazards.data == pytest.approx(hazards, abs=1e-12)
        assert out.h_wsi.data == pytest.approx(h_wsi, abs=1e-12)
        assert out.attention.data == pytest.approx(scores, abs=1e-12)

    def test_empty_bag_rejected(self):
        model = AmilModel(SMALL_AMIL, np.random.default_rng(0))
        with pytest.raises(PreconditionError):
            model.forward(Tensor(np.zeros((0, 6))))

    def test_hazards_in_open_interval(self):
        rng = np.random.default_rng(4)
        model = AmilModel(SMALL_AMIL, rng)
        out = model.forward(Tensor(rng.normal(size=(5, 6))))
        assert np.all(out.hazards.data > 0) and np.all(out.hazards.data < 1)


class TestSnn:
    def test_inference_is_deterministic(self):
        rng = np.random.default_rng(5)
        model = SnnModel(SMALL_SNN, rng)
        x = Tensor(rng.normal(size=7))
        a = model.forward(x, training=False)
        b = model.forward(x, training=False)
        assert np.array_equal(a.hazards.data, b.hazards.data)

    def test_zero_input_zero_bias_gives_half_hazards(self):
        model = SnnModel(SMALL_SNN, np.random.default_rng(6))
        out = model.forward(Tensor(np.zeros(7)))
        assert np.array_equal(out.hazards.data, np.full(4, 0.5))

    def test_matches_oracle(self):
        rng = np.random.default_rng(7)
        model = SnnModel(SMALL_SNN, rng)
        x = rng.normal(size=7)
        out = model.forward(Tensor(x))
        hazards, h_mol = _snn_oracle(model, x)
        assert out.hazards.data == pytest.approx(hazards, abs=1e-12)
        assert out.h_mol.data == pytest.approx(h_mol, abs=1e-12)

    def test_training_dropout_changes_outputs(self):
        rng = np.random.default_rng(8)
        model = SnnModel(SMALL_SNN, rng)
        x = Tensor(rng.normal(size=7))
        clean = model.forward(x, training=False).hazards.data
        noisy = model.forward(x, training=True, rng=np.random.default_rng(1)).hazards.data
        assert not np.array_equal(clean, noisy)


class TestMmf:
    def test_zero_reps_reduce_to_constant_fusion(self):
        rng = np.random.default_rng(9)
        model = MmfModel(SMALL_MMF, rng)
        # Zero the rep heads so both branch representations are exactly zero.
        model.amil_branch.rep_head.weight.data[...] = 0.0
        model.amil_branch.rep_head.bias.data[...] = 0.0
        model.snn_branch.rep_head.weight.data[...] = 0.0
        model.snn_branch.rep_head.bias.data[...] = 0.0
        bag, x = rng.normal(size=(4, 6)), rng.normal(size=7)
        out = model.forward(Tensor(bag), Tensor(x))
        # Fused vector is all zeros except the appended-ones product.
        fused = np.zeros((SMALL_AMIL.rep_dim + 1) * (SMALL_SNN.rep_dim + 1))
        fused[-1] = 1.0
        h = np.maximum(_layer(model.fusion1, fused[None, :]), 0.0)
        h = np.maximum(_layer(model.fusion2, h), 0.0)
        expected = _sigmoid(_layer(model.hazard_head, h)).reshape(-1)
        assert out.hazards.data == pytest.approx(expected, abs=1e-14)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(10)
        model = MmfModel(SMALL_MMF, rng)
        bag, x = rng.normal(size=(8, 6)), rng.normal(size=7)
        perm = rng.permutation(8)
        base = model.forward(Tensor(bag), Tensor(x))
        permuted = model.forward(Tensor(bag[perm]), Tensor(x))
        assert permuted.hazards.data == pytest.approx(base.hazards.data, rel=1e-9)

    def test_matches_oracle(self):
        rng = np.random.default_rng(11)
        model = MmfModel(SMALL_MMF, rng)
        bag, x = rng.normal(size=(6, 6)), rng.normal(size=7)
        out = model.forward(Tensor(bag), Tensor(x))
        assert out.hazards.data == pytest.approx(_mmf_oracle(model, bag, x), abs=1e-12)


class TestRiskScore:
    def test_tiny_hazards_give_tiny_risk(self):
        assert risk_score(Tensor(np.full(4, 1e-9))) == pytest.approx(0.0, abs=1e-6)

    def test_halves_hand_value(self):
        assert risk_score(Tensor([0.5, 0.5, 0.5, 0.5])) == 3.0625

    def test_monotone_in_every_coordinate(self):
        rng = np.random.default_rng(12)
        h = rng.uniform(0.2, 0.8, size=4)
        base = risk_score(Tensor(h))
        for i in range(4):
            bumped = h.copy()
            bumped[i] += 0.05
            assert risk_score(Tensor(bumped)) > base

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            risk_score(Tensor([0.5, 0.5, 0.5, 1.5]))

    def test_risk_tensor_matches_risk_score(self):
        rng = np.random.default_rng(13)
        h = rng.uniform(0.05, 0.95, size=4)
        assert risk_tensor(Tensor(h)).item() == pytest.approx(risk_score(Tensor(h)), rel=1e-15)


class TestFullModelGradients:
    def test_amil_grad_check(self):
        rng = np.random.default_rng(14)
        model = AmilModel(SMALL_AMIL, rng)
        bag = Tensor(rng.normal(size=(4, 6)))

        def f(t):
            return risk_tensor(model.forward(t).hazards)

        assert grad_check(f, bag, 1e-5) < 1e-5

    def test_snn_grad_check(self):
        rng = np.random.default_rng(15)
        model = SnnModel(SMALL_SNN, rng)

        def f(t):
            return risk_tensor(model.forward(t).hazards)

        assert grad_check(f, Tensor(rng.normal(size=7)), 1e-5) < 1e-5

    def test_mmf_grad_check_wrt_both_inputs(self):
        rng = np.random.default_rng(16)
        model = MmfModel(SMALL_MMF, rng)
        bag = Tensor(rng.normal(size=(3, 6)))
        x = Tensor(rng.normal(size=7))

        def f_bag(t):
            return risk_tensor(model.forward(t, x).hazards)

        def f_mol(t):
            return risk_tensor(model.forward(bag, t).hazards)

        assert grad_check(f_bag, bag, 1e-5) < 1e-5
        assert grad_check(f_mol, x, 1e-5) < 1e-5

    def test_mmf_grad_check_wrt_parameters(self):
        rng = np.random.default_rng(17)
        model = MmfModel(SMALL_MMF, rng)
        bag = Tensor(rng.normal(size=(3, 6)))
        x = Tensor(rng.normal(size=7))

        def f(_t):
            return risk_tensor(model.forward(bag, x).hazards)

        for name, tensor in model.parameters():
            if "fusion1.weight" in name or "gate.wsi_gate.weight" in name:
                assert grad_check(f, tensor, 1e-5) < 1e-5, name


class TestMultiSlideEquivalence:
    def test_concatenated_bags_equal_single_bag(self):
        """Two slides of 3 and 4 patches behave exactly like one 7-patch bag."""
        rng = np.random.default_rng(18)
        model = AmilModel(SMALL_AMIL, rng)
        slide_a = rng.normal(size=(3, 6))
        slide_b = rng.normal(size=(4, 6))
        combined = np.vstack([slide_a, slide_b])
        out_combined = model.forward(Tensor(combined))
        out_again = model.forward(Tensor(np.vstack([slide_a, slide_b])))
        assert np.array_equal(out_combined.hazards.data, out_again.hazards.data)
        assert out_combined.attention.size == 7


class TestCheckpoints:
    @pytest.mark.parametrize("kind,config", [
        ("amil", SMALL_AMIL),
        ("snn", SMALL_SNN),
        ("mmf", SMALL_MMF),
    ])
    def test_roundtrip_bitwise(self, tmp_path, kind, config):
        rng = np.random.default_rng(19)
        model = {"amil": AmilModel, "snn": SnnModel, "mmf": MmfModel}[kind](config, rng)
        path = tmp_path / "ckpt.json"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        for (name_a, t_a), (name_b, t_b) in zip(model.parameters(), loaded.parameters()):
            assert name_a == name_b
            assert np.array_equal(t_a.data, t_b.data), name_a

    def test_roundtrip_preserves_predictions(self, tmp_path):
        rng = np.random.default_rng(20)
        model = MmfModel(SMALL_MMF, rng)
        bag, x = Tensor(rng.normal(size=(5, 6))), Tensor(rng.normal(size=7))
        before = model.forward(bag, x).hazards.data
        save_checkpoint(model, tmp_path / "m.json")
        after = load_checkpoint(tmp_path / "m.json").forward(bag, x).hazards.data
        assert np.array_equal(before, after)

    def test_bad_file_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "something-else"}')
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_build_model_unknown_kind(self):
        from survfuse.errors import ParameterError

        with pytest.raises(ParameterError):
            build_model("cnn", {})
