"""Reward functions for tandem accept/reject decisions.

A decision is correct when the tandem action equals ``asv_label AND
cm_label``. The t-DCF reward charges each error the cost-weighted prior of
the error it represents and never pays a positive reward.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .metrics import CostModel, TrialClass


class RewardKind(str, enum.Enum):
    SIMPLE = "simple"
    REWARD = "reward"
    PENALIZE = "penalize"
    TDCF = "tdcf"


@dataclass(frozen=True)
class GroundTruth:
    """Labels of one trial: ``asv_label`` 1 = claimed speaker, ``cm_label`` 1 = bona fide."""

    asv_label: int
    cm_label: int

    def __post_init__(self):
        if self.asv_label not in (0, 1) or self.cm_label not in (0, 1):
            raise ValueError("labels must be 0 or 1")

    @property
    def tandem_label(self) -> int:
        return self.asv_label & self.cm_label

    @property
    def trial_class(self) -> TrialClass:
        if self.cm_label == 0:
            return TrialClass.SPOOF
        return TrialClass.TARGET if self.asv_label == 1 else TrialClass.NONTARGET

    @classmethod
    def from_class(cls, trial_class: TrialClass, claimed_speaker_spoof: int = 1) -> "GroundTruth":
        if trial_class == TrialClass.TARGET:
            return cls(1, 1)
        if trial_class == TrialClass.NONTARGET:
            return cls(0, 1)
        return cls(claimed_speaker_spoof, 0)


@dataclass(frozen=True)
class RewardModel:
    kind: RewardKind = RewardKind.SIMPLE
    cost: CostModel | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", RewardKind(self.kind))
        if self.kind is RewardKind.TDCF and self.cost is None:
            object.__setattr__(self, "cost", CostModel())


def reward_table(model: RewardModel) -> np.ndarray:
    """Rewards indexed by ``[a_tandem, trial class]``."""
    kind = model.kind
    if kind is RewardKind.TDCF:
        c = model.cost
        return np.array([
            # target, nontarget, spoof
            [-c.c_miss * c.rho_tar, 0.0, 0.0],                     # reject
            [0.0, -c.c_fa * c.rho_non, -c.c_fa_spoof * c.rho_spoof],  # accept
        ])
    correct, wrong = {
        RewardKind.SIMPLE: (1.0, -1.0),
        RewardKind.REWARD: (1.0, 0.0),
        RewardKind.PENALIZE: (0.0, -1.0),
    }[kind]
    return np.array([
        [wrong, correct, correct],
        [correct, wrong, wrong],
    ])


def reward(model: RewardModel, a_tandem: int, truth: GroundTruth) -> float:
    """Reward of one tandem action given the trial's ground truth."""
    if a_tandem not in (0, 1):
        raise ValueError("a_tandem must be 0 or 1")
    return float(reward_table(model)[a_tandem, truth.trial_class])


def batch_rewards(model: RewardModel, a_tandem, classes) -> np.ndarray:
    """Vectorized :func:`reward` over arrays of actions and trial classes."""
    return reward_table(model)[np.asarray(a_tandem, dtype=np.intp), np.asarray(classes, dtype=np.intp)]
