import itertools

import numpy as np
import pytest

from tandem_rl.metrics import CostModel, TrialClass
from tandem_rl.rewards import (GroundTruth, RewardKind, RewardModel, batch_rewards, reward,
                               reward_table)

TRUTHS = [GroundTruth(1, 1), GroundTruth(0, 1), GroundTruth(1, 0), GroundTruth(0, 0)]
TDCF = RewardModel(RewardKind.TDCF, CostModel())


class TestGroundTruth:
    @pytest.mark.parametrize("truth,cls,tandem", [
        (GroundTruth(1, 1), TrialClass.TARGET, 1),
        (GroundTruth(0, 1), TrialClass.NONTARGET, 0),
        (GroundTruth(1, 0), TrialClass.SPOOF, 0),
        (GroundTruth(0, 0), TrialClass.SPOOF, 0),
    ])
    def test_class_and_tandem_label(self, truth, cls, tandem):
        assert truth.trial_class == cls
        assert truth.tandem_label == tandem

    def test_from_class(self):
        assert GroundTruth.from_class(TrialClass.SPOOF).cm_label == 0
        assert GroundTruth.from_class(TrialClass.TARGET) == GroundTruth(1, 1)

    def test_invalid(self):
        with pytest.raises(ValueError):
            GroundTruth(2, 1)


class TestTDcfTable:
    cost = CostModel()

    def expected(self, a_asv, a_cm, cls):
        """Cell of the cost table indexed by both individual decisions."""
        c = self.cost
        if a_asv and a_cm:
            return {TrialClass.TARGET: 0.0, TrialClass.NONTARGET: -c.c_fa * c.rho_non,
                    TrialClass.SPOOF: -c.c_fa_spoof * c.rho_spoof}[cls]
        return -c.c_miss * c.rho_tar if cls == TrialClass.TARGET else 0.0

    def test_all_twelve_cells(self):
        cells = 0
        for a_asv, a_cm, cls in itertools.product((1, 0), (1, 0), TrialClass):
            if not a_asv and a_cm:
                # the table lists three decision rows per class
                continue
            truth = GroundTruth.from_class(cls)
            assert reward(TDCF, a_asv & a_cm, truth) == pytest.approx(
                self.expected(a_asv, a_cm, cls), abs=1e-15)
            cells += 1
        # reject/accept row is covered by the reject/reject and accept/reject rows
        for cls in TrialClass:
            assert reward(TDCF, 0 & 1, GroundTruth.from_class(cls)) == self.expected(0, 1, cls)
            cells += 1
        assert cells == 12

    def test_spot_values(self):
        assert reward(TDCF, 1, GroundTruth(1, 0)) == pytest.approx(-0.5, abs=1e-15)
        assert reward(TDCF, 0, GroundTruth(1, 1)) == pytest.approx(-0.9405, abs=1e-15)
        assert reward(TDCF, 1, GroundTruth(1, 1)) == 0.0
        assert reward(TDCF, 1, GroundTruth(0, 1)) == pytest.approx(-0.095, abs=1e-15)

    def test_never_positive(self):
        assert np.all(reward_table(TDCF) <= 0)

    def test_default_cost(self):
        assert RewardModel(RewardKind.TDCF).cost == CostModel()

    def test_custom_cost(self):
        model = RewardModel("tdcf", CostModel(c_miss=2.0))
        assert reward(model, 0, GroundTruth(1, 1)) == pytest.approx(-2 * 0.9405)


class TestBinaryRewards:
    def test_simple_examples(self):
        assert reward(RewardModel("simple"), 0, GroundTruth(0, 1)) == 1.0
        assert reward(RewardModel("simple"), 1, GroundTruth(0, 1)) == -1.0

    def test_penalize_spoof_accepted(self):
        assert reward(RewardModel("penalize"), 1, GroundTruth(1, 0)) == -1.0

    def test_reward_values(self):
        assert reward(RewardModel("reward"), 1, GroundTruth(1, 1)) == 1.0
        assert reward(RewardModel("reward"), 0, GroundTruth(1, 1)) == 0.0

    def test_simple_is_sum(self):
        for a, truth in itertools.product((0, 1), TRUTHS):
            assert reward(RewardModel("simple"), a, truth) == (
                reward(RewardModel("reward"), a, truth) + reward(RewardModel("penalize"), a, truth))


class TestShared:
    @pytest.mark.parametrize("kind", list(RewardKind))
    def test_correct_action_dominates(self, kind):
        model = RewardModel(kind)
        for truth in TRUTHS:
            right = reward(model, truth.tandem_label, truth)
            wrong = reward(model, 1 - truth.tandem_label, truth)
            assert right >= wrong
            if right != 0 or wrong != 0:
                assert right > wrong

    @pytest.mark.parametrize("kind", list(RewardKind))
    def test_batch_matches_scalar(self, kind):
        model = RewardModel(kind)
        rng = np.random.default_rng(0)
        actions = rng.integers(0, 2, 50)
        classes = rng.integers(0, 3, 50)
        got = batch_rewards(model, actions, classes)
        want = [reward(model, int(a), GroundTruth.from_class(TrialClass(c)))
                for a, c in zip(actions, classes)]
        np.testing.assert_array_equal(got, want)

    def test_bad_action(self):
        with pytest.raises(ValueError):
            reward(RewardModel(), 2, GroundTruth(1, 1))

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            RewardModel("bonus")
