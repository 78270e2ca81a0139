"""Time discretization and the discrete survival likelihood against hand-worked values."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from survfuse.autodiff import Tape, Tensor
from survfuse.errors import ContractError, DataError, ParameterError
from survfuse.survival import (
    SurvivalLabel,
    TimeBins,
    assign_bins,
    combined_loss,
    discretize,
    hazard_to_survival,
    make_bins,
    nll_loss,
    survival_curve,
    uncensored_loss,
)


def _labels(times, censored):
    return [SurvivalLabel(t, c) for t, c in zip(times, censored)]


class TestMakeBins:
    def test_quartiles_with_linear_interpolation(self):
        # Oracle: numpy linear-interpolation quantiles of {10,20,30,40}.
        bins = make_bins(_labels([10, 20, 30, 40], [0, 0, 0, 0]))
        assert bins.cuts == pytest.approx((17.5, 25.0, 32.5))

    def test_censored_times_are_ignored(self):
        base = make_bins(_labels([10, 20, 30, 40], [0, 0, 0, 0]))
        padded = make_bins(_labels([10, 20, 30, 40, 1000, 2000], [0, 0, 0, 0, 1, 1]))
        assert padded.cuts == base.cuts

    def test_identical_event_times_rejected(self):
        with pytest.raises(DataError):
            make_bins(_labels([5, 5, 5, 5, 5], [0] * 5))

    def test_too_few_distinct_events(self):
        with pytest.raises(DataError):
            make_bins(_labels([1, 2, 3, 1000], [0, 0, 0, 1]))

    def test_cut_invariant_enforced(self):
        with pytest.raises(DataError):
            TimeBins(cuts=(3.0, 2.0, 5.0))


class TestDiscretize:
    BINS = TimeBins(cuts=(10.0, 20.0, 30.0))

    def test_zero_maps_to_first_bin(self):
        assert discretize(0.0, self.BINS) == 0

    def test_boundary_belongs_to_upper_bin(self):
        assert discretize(10.0, self.BINS) == 1
        assert discretize(20.0, self.BINS) == 2
        assert discretize(30.0, self.BINS) == 3

    def test_far_future_maps_to_last_bin(self):
        assert discretize(1e9, self.BINS) == 3

    def test_negative_time_rejected(self):
        with pytest.raises(DataError):
            discretize(-1.0, self.BINS)

    @given(st.floats(0, 100), st.floats(0, 100))
    @settings(max_examples=100, deadline=None)
    def test_monotone(self, t1, t2):
        lo, hi = sorted([t1, t2])
        assert discretize(lo, self.BINS) <= discretize(hi, self.BINS)

    def test_assign_bins_leaves_inputs_untouched(self):
        labels = _labels([5.0, 25.0], [0, 1])
        assigned = assign_bins(labels, self.BINS)
        assert [lab.y_bin for lab in labels] == [None, None]
        assert [lab.y_bin for lab in assigned] == [0, 2]


class TestHazardToSurvival:
    def test_zero_hazards_would_give_ones(self):
        # Hazards of exactly 0 violate the open-interval contract.
        with pytest.raises(ContractError):
            hazard_to_survival(Tensor(np.zeros(4)))
        surv = hazard_to_survival(Tensor(np.full(4, 1e-12)))
        assert surv.data == pytest.approx(np.ones(4), abs=1e-10)

    def test_halves(self):
        surv = hazard_to_survival(Tensor([0.5, 0.5, 0.5, 0.5]))
        assert np.array_equal(surv.data, [0.5, 0.25, 0.125, 0.0625])

    def test_nonincreasing_property(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            h = rng.uniform(1e-6, 1 - 1e-6, size=4)
            surv = hazard_to_survival(Tensor(h)).data
            assert np.all(np.diff(surv) <= 0)
            assert np.all(surv >= 0) and np.all(surv <= 1)

    def test_matches_plain_curve(self):
        rng = np.random.default_rng(1)
        h = rng.uniform(0.05, 0.95, size=4)
        assert hazard_to_survival(Tensor(h)).data == pytest.approx(survival_curve(h), rel=1e-15)

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            hazard_to_survival(Tensor([0.5, 1.5, 0.5, 0.5]))


HALVES = Tensor([0.5, 0.5, 0.5, 0.5])


class TestNllLoss:
    def test_uncensored_first_bin_hand_value(self):
        # -log S(-1) - log h(0) = -log 1 - log 0.5
        loss = nll_loss(HALVES, SurvivalLabel(1.0, 0, 0))
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-15)

    def test_censored_last_bin_hand_value(self):
        # -log S(3) = -log 0.0625
        loss = nll_loss(HALVES, SurvivalLabel(1.0, 1, 3))
        assert loss.item() == pytest.approx(-math.log(0.0625), abs=1e-15)

    def test_censored_tiny_hazards_give_tiny_loss(self):
        loss = nll_loss(Tensor(np.full(4, 1e-9)), SurvivalLabel(1.0, 1, 3))
        assert 0.0 <= loss.item() < 1e-6

    def test_unassigned_bin_rejected(self):
        with pytest.raises(ContractError):
            nll_loss(HALVES, SurvivalLabel(1.0, 0))

    def test_loss_nonnegative_property(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            h = Tensor(rng.uniform(1e-6, 1 - 1e-6, size=4))
            label = SurvivalLabel(1.0, int(rng.integers(2)), int(rng.integers(4)))
            assert nll_loss(h, label).item() >= 0.0

    def test_gradient_sign_at_event_bin(self):
        """For uncensored patients, raising the correct-bin hazard lowers the loss."""
        rng = np.random.default_rng(3)
        for y in range(4):
            h = Tensor(rng.uniform(0.1, 0.9, size=4))
            tape = Tape()
            with tape:
                loss = nll_loss(h, SurvivalLabel(1.0, 0, y))
            tape.backward(loss)
            assert h.grad[y] < 0.0

    def test_matches_formula_oracle_enumeration(self):
        """Full enumeration of (Y, c) x hazard fixtures against a direct
        evaluation of the likelihood formula."""
        hazard_sets = [
            np.array([0.5, 0.5, 0.5, 0.5]),
            np.array([0.1, 0.2, 0.3, 0.4]),
            np.array([0.9, 0.05, 0.5, 0.7]),
        ]
        for h in hazard_sets:
            surv = np.cumprod(1 - h)
            s = lambda r: 1.0 if r < 0 else surv[r]  # noqa: E731
            for y in range(4):
                for c in (0, 1):
                    expected = -c * math.log(max(s(y), 1e-7)) - (1 - c) * (
                        math.log(max(s(y - 1), 1e-7)) + math.log(max(h[y], 1e-7))
                    )
                    got = nll_loss(Tensor(h), SurvivalLabel(1.0, c, y)).item()
                    assert got == pytest.approx(expected, abs=1e-12)


class TestUncensoredLoss:
    def test_censored_patient_is_exactly_zero(self):
        assert uncensored_loss(HALVES, SurvivalLabel(1.0, 1, 2)).item() == 0.0

    def test_uncensored_equals_nll(self):
        rng = np.random.default_rng(4)
        for y in range(4):
            h = Tensor(rng.uniform(0.05, 0.95, size=4))
            label = SurvivalLabel(1.0, 0, y)
            assert uncensored_loss(h, label).item() == nll_loss(h, label).item()

    def test_hand_value(self):
        loss = uncensored_loss(HALVES, SurvivalLabel(1.0, 0, 0))
        assert loss.item() == pytest.approx(0.6931471805599453, abs=1e-15)


class TestCombinedLoss:
    def test_beta_zero_is_nll(self):
        label = SurvivalLabel(1.0, 0, 2)
        assert combined_loss(HALVES, label, 0.0).item() == nll_loss(HALVES, label).item()

    def test_beta_one_censored_is_zero(self):
        assert combined_loss(HALVES, SurvivalLabel(1.0, 1, 2), 1.0).item() == 0.0

    def test_beta_half_uncensored_equals_nll(self):
        label = SurvivalLabel(1.0, 0, 1)
        assert combined_loss(HALVES, label, 0.5).item() == pytest.approx(
            nll_loss(HALVES, label).item(), abs=1e-15
        )

    def test_beta_out_of_range(self):
        for beta in (-0.1, 1.1):
            with pytest.raises(ParameterError):
                combined_loss(HALVES, SurvivalLabel(1.0, 0, 0), beta)

    def test_differentiable_through_hazards(self):
        h = Tensor([0.3, 0.4, 0.5, 0.6])
        tape = Tape()
        with tape:
            loss = combined_loss(h, SurvivalLabel(1.0, 1, 2), 0.25)
        tape.backward(loss)
        assert np.any(h.grad != 0.0)


def test_label_validation():
    with pytest.raises(DataError):
        SurvivalLabel(-1.0, 0)
    with pytest.raises(DataError):
        SurvivalLabel(1.0, 2)
    with pytest.raises(DataError):
        SurvivalLabel(1.0, 0, 7)
