"""Optimizer identities, training determinism, fold partitions, and the
synthetic generator's calibration properties."""

import numpy as np
import pytest

from survfuse.autodiff import Tensor
from survfuse.errors import DataError, DimensionError, ParameterError
from survfuse.models import SnnConfig, SnnModel, build_model
from survfuse.survival import SurvivalLabel, make_bins
from survfuse.training import (
    AdamState,
    EffectWeights,
    ParamPack,
    TrainConfig,
    adam_step,
    cross_validate,
    default_model_config,
    gen_synthetic,
    make_folds,
    train,
)


class TestAdamStep:
    def test_zero_gradient_zero_weight_is_identity(self):
        cfg = TrainConfig(l1=0.0, l2=0.0)
        p = Tensor(np.zeros(5))
        state = AdamState([p])
        adam_step([p], [np.zeros(5)], state, cfg)
        assert np.array_equal(p.data, np.zeros(5))
        assert state.t == 1

    def test_first_step_moves_by_lr_times_sign(self):
        # With zero decays, bias-corrected m/sqrt(v) equals g/|g| on step one
        # (up to the eps in the denominator, negligible for |g| >> eps).
        cfg = TrainConfig(lr=0.01, l1=0.0, l2=0.0)
        p = Tensor(np.zeros(4))
        g = np.array([3.0, -0.5, 0.9, -7.0])
        adam_step([p], [g], AdamState([p]), cfg)
        assert p.data == pytest.approx(-cfg.lr * np.sign(g), rel=1e-6)

    def test_l1_only_shrinks_positive_weight_by_lr(self):
        cfg = TrainConfig(lr=0.01, l1=1e-4, l2=0.0)
        p = Tensor(np.full(3, 2.0))
        adam_step([p], [np.zeros(3)], AdamState([p]), cfg)
        assert p.data == pytest.approx(2.0 - cfg.lr, rel=1e-6)

    def test_sign_zero_contributes_nothing(self):
        cfg = TrainConfig(lr=0.01, l1=1.0, l2=0.0)
        p = Tensor(np.zeros(2))
        adam_step([p], [np.zeros(2)], AdamState([p]), cfg)
        assert np.array_equal(p.data, np.zeros(2))

    def test_shape_mismatch(self):
        cfg = TrainConfig()
        p = Tensor(np.zeros(3))
        with pytest.raises(DimensionError):
            adam_step([p], [np.zeros(4)], AdamState([p]), cfg)

    def test_param_pack_matches_per_tensor_adam(self):
        cfg = TrainConfig(lr=0.05)
        rng = np.random.default_rng(0)
        values = [rng.normal(size=(3, 2)), rng.normal(size=4)]
        grads = [rng.normal(size=(3, 2)), rng.normal(size=4)]

        loose = [Tensor(v) for v in values]
        state = AdamState(loose)
        for _ in range(3):
            adam_step(loose, grads, state, cfg)

        packed_tensors = [Tensor(v) for v in values]
        pack = ParamPack(packed_tensors)
        for _ in range(3):
            for t, g in zip(packed_tensors, grads):
                t.grad[...] = g
            pack.adam_step(cfg)
            pack.zero_grads()
        for a, b in zip(loose, packed_tensors):
            assert a.data == pytest.approx(b.data, rel=1e-14)


def small_cohort(n=40, seed=0, censor=0.3):
    return gen_synthetic(
        max(n, 20), bag_size=4, d=5, p=6,
        effect_weights=EffectWeights(0.5, 0.5, 0.5),
        censor_frac=censor, seed=seed,
    )


def snn_widths():
    return dict(proj_dim=8, attn_dim=4, rep_dim=3, hidden_dim=8, fusion_hidden=8)


class TestTrain:
    def test_same_seed_is_bitwise_identical(self):
        cohort = small_cohort(seed=1)
        bins = make_bins(cohort.labels())
        cfg = TrainConfig(epochs=2, seed=7)
        weights = []
        for _ in range(2):
            model = build_model("snn", default_model_config("snn", 5, 6, snn_widths()),
                                np.random.default_rng(3))
            model, _trace = train(model, cohort, bins, cfg)
            weights.append(np.concatenate([t.data.reshape(-1) for _n, t in model.parameters()]))
        assert np.array_equal(weights[0], weights[1])

    def test_single_patient_overfit_loss_decreases(self):
        # Dropout off: the single-patient trajectory should be essentially monotone.
        cohort = small_cohort(seed=2)
        one = [cohort.patients[0]]
        bins = make_bins(cohort.labels())
        widths = dict(snn_widths(), dropout_keep=1.0)
        model = build_model("snn", default_model_config("snn", 5, 6, widths),
                            np.random.default_rng(4))
        cfg = TrainConfig(epochs=20, seed=9, lr=1e-3)
        _model, trace = train(model, one, bins, cfg)
        assert trace[-1] < trace[0]
        # Monotone after epoch 3 with at most two slips.
        slips = sum(1 for a, b in zip(trace[3:], trace[4:]) if b > a)
        assert slips <= 2

    def test_lr_zero_keeps_weights(self):
        cohort = small_cohort(seed=3)
        bins = make_bins(cohort.labels())
        model = build_model("snn", default_model_config("snn", 5, 6, snn_widths()),
                            np.random.default_rng(5))
        before = np.concatenate([t.data.reshape(-1).copy() for _n, t in model.parameters()])
        _m, _trace = train(model, cohort, bins, TrainConfig(epochs=1, seed=0, lr=0.0))
        after = np.concatenate([t.data.reshape(-1) for _n, t in model.parameters()])
        assert np.array_equal(before, after)

    def test_empty_cohort_rejected(self):
        bins = make_bins([SurvivalLabel(t, 0) for t in (1.0, 2.0, 3.0, 4.0, 5.0)])
        model = SnnModel(SnnConfig(in_dim=6, hidden_dim=8, rep_dim=3), np.random.default_rng(0))
        with pytest.raises(DataError):
            train(model, [], bins, TrainConfig(epochs=1))

    def test_grad_accum_runs(self):
        cohort = small_cohort(seed=4)
        bins = make_bins(cohort.labels())
        model = build_model("snn", default_model_config("snn", 5, 6, snn_widths()),
                            np.random.default_rng(6))
        _m, trace = train(model, cohort, bins, TrainConfig(epochs=1, seed=0, grad_accum=4))
        assert len(trace) == 1

    def test_loss_trace_is_nonempty_per_epoch(self):
        cohort = small_cohort(seed=5)
        bins = make_bins(cohort.labels())
        model = build_model("snn", default_model_config("snn", 5, 6, snn_widths()),
                            np.random.default_rng(7))
        _m, trace = train(model, cohort, bins, TrainConfig(epochs=3, seed=0))
        assert len(trace) == 3 and all(v >= 0 for v in trace)


class TestFolds:
    def test_every_patient_validates_once(self):
        labels = [SurvivalLabel(float(i + 1), i % 3 == 0) for i in range(53)]
        labels = [SurvivalLabel(l.t_cont, int(l.censored)) for l in labels]
        split = make_folds(labels, n_folds=5, seed=0)
        seen = np.concatenate([split.val_indices(f) for f in range(5)])
        assert sorted(seen.tolist()) == list(range(53))

    def test_stratified_fold_sizes(self):
        labels = [SurvivalLabel(float(i + 1), int(i < 20)) for i in range(50)]
        split = make_folds(labels, n_folds=5, seed=1)
        censored = np.asarray([lab.censored for lab in labels])
        for stratum in (0, 1):
            sizes = [
                int(np.sum(censored[split.val_indices(f)] == stratum)) for f in range(5)
            ]
            assert max(sizes) - min(sizes) <= 1

    def test_too_few_uncensored(self):
        labels = [SurvivalLabel(float(i + 1), int(i > 2)) for i in range(40)]
        with pytest.raises(DataError):
            make_folds(labels, n_folds=5, seed=0)

    def test_train_val_disjoint(self):
        labels = [SurvivalLabel(float(i + 1), i % 4 == 0) for i in range(30)]
        labels = [SurvivalLabel(l.t_cont, int(l.censored)) for l in labels]
        split = make_folds(labels, n_folds=5, seed=2)
        for f in range(5):
            assert not set(split.train_indices(f)) & set(split.val_indices(f))


class TestCrossValidate:
    def test_pooled_predictions_partition_cohort(self):
        cohort = small_cohort(n=40, seed=6)
        result = cross_validate(cohort, TrainConfig(epochs=1, seed=3), "snn",
                                widths=snn_widths())
        assert sorted(result.pooled.patient_ids) == sorted(p.patient_id for p in cohort.patients)
        assert len(result.fold_c_indices) == 5
        assert len(result.loss_traces) == 5

    def test_deterministic_under_seed(self):
        cohort = small_cohort(n=40, seed=7)
        a = cross_validate(cohort, TrainConfig(epochs=1, seed=5), "snn", widths=snn_widths())
        b = cross_validate(cohort, TrainConfig(epochs=1, seed=5), "snn", widths=snn_widths())
        assert np.array_equal(a.pooled.risk, b.pooled.risk)
        assert a.fold_c_indices == b.fold_c_indices

    def test_unknown_model_kind(self):
        cohort = small_cohort(n=40, seed=8)
        with pytest.raises(ParameterError):
            cross_validate(cohort, TrainConfig(epochs=1), "transformer")


class TestGenSynthetic:
    def test_same_seed_identical(self):
        a = gen_synthetic(25, bag_size=3, d=4, p=5, seed=42)
        b = gen_synthetic(25, bag_size=3, d=4, p=5, seed=42)
        for pa, pb in zip(a.patients, b.patients):
            assert pa.patient_id == pb.patient_id
            assert np.array_equal(pa.bag.data, pb.bag.data)
            assert np.array_equal(pa.molecular.data, pb.molecular.data)
            assert pa.label == pb.label

    def test_censoring_calibration(self):
        cohort = gen_synthetic(1000, bag_size=2, d=3, p=3,
                               effect_weights=EffectWeights(0.3, 0.3, 1.0),
                               censor_frac=0.4, seed=13)
        frac = np.mean([p.label.censored for p in cohort.patients])
        assert 0.35 <= frac <= 0.45

    def test_zero_censoring(self):
        cohort = gen_synthetic(30, bag_size=2, d=3, p=3, censor_frac=0.0, seed=1)
        assert all(p.label.censored == 0 for p in cohort.patients)

    def test_pure_interaction_has_no_marginal_rank_signal(self):
        """With only the interaction weight active, the true log-hazard is
        rank-uncorrelated with each latent alone (|Kendall tau| < 0.1)."""
        n = 1000
        rng = np.random.default_rng(99)
        s_w = rng.standard_normal(n)
        s_m = rng.standard_normal(n)
        lh = 2.0 * s_w * s_m

        def kendall_tau(x, y):
            # Brute-force pair concordance, vectorized over the pair matrix.
            sx = np.sign(x[:, None] - x[None, :])
            sy = np.sign(y[:, None] - y[None, :])
            iu = np.triu_indices(n, k=1)
            return float(np.mean(sx[iu] * sy[iu]))

        assert abs(kendall_tau(lh, s_w)) < 0.1
        assert abs(kendall_tau(lh, s_m)) < 0.1

    def test_latents_really_embedded(self):
        cohort = gen_synthetic(50, bag_size=6, d=8, p=10,
                               effect_weights=EffectWeights(1.0, 0.0, 0.0),
                               censor_frac=0.0, seed=3, signal_dims_wsi=3)
        # Signal coordinates share the per-patient latent: their bag-mean has
        # much higher variance across patients than the noise coordinates.
        signal = np.array([p.bag.data[:, :3].mean() for p in cohort.patients])
        noise = np.array([p.bag.data[:, 3:].mean() for p in cohort.patients])
        assert signal.var() > 5 * noise.var()

    def test_invalid_params(self):
        with pytest.raises(ParameterError):
            gen_synthetic(10)  # too few patients
        with pytest.raises(ParameterError):
            gen_synthetic(30, censor_frac=1.0)
        with pytest.raises(ParameterError):
            gen_synthetic(30, effect_weights=EffectWeights(float("inf"), 0, 0))


class TestTrainConfigValidation:
    def test_negative_rates_rejected(self):
        with pytest.raises(ParameterError):
            TrainConfig(lr=-1e-4)
        with pytest.raises(ParameterError):
            TrainConfig(epochs=0)
        with pytest.raises(ParameterError):
            TrainConfig(beta_loss=1.5)
