"""Detection cost metrics for ASV / countermeasure tandem systems.

Everything here works on hard decisions. A trial is accepted when its score
is greater than or equal to the threshold.

Sweeps run over *decision boundaries*: the midpoints between consecutive
sorted unique scores, plus ``-inf`` (accept everything) and ``+inf``
(reject everything).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class DegenerateTrialsError(ValueError):
    """Raised when a rate would have an empty denominator."""


class TrialClass(enum.IntEnum):
    TARGET = 0
    NONTARGET = 1
    SPOOF = 2

    @classmethod
    def parse(cls, name: str) -> "TrialClass":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown trial class {name!r}") from None

    def __str__(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class CostModel:
    """Costs and priors of the tandem detection cost function."""

    c_miss: float = 1.0
    c_fa: float = 10.0
    c_fa_spoof: float = 10.0
    rho_tar: float = 0.95 * 0.99
    rho_non: float = 0.95 * 0.01
    rho_spoof: float = 0.05

    def __post_init__(self):
        for name in ("c_miss", "c_fa", "c_fa_spoof"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        priors = (self.rho_tar, self.rho_non, self.rho_spoof)
        if any(not 0.0 <= p <= 1.0 for p in priors):
            raise ValueError("priors must lie in [0, 1]")
        if abs(sum(priors) - 1.0) > 1e-12:
            raise ValueError(f"priors must sum to 1, got {sum(priors)!r}")

    @classmethod
    def two_class(cls, c_miss: float, c_fa: float, rho_tar: float) -> "CostModel":
        """Cost model without a spoof class, for the plain DCF."""
        return cls(c_miss=c_miss, c_fa=c_fa, c_fa_spoof=1.0,
                   rho_tar=rho_tar, rho_non=1.0 - rho_tar, rho_spoof=0.0)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("c_miss", "c_fa", "c_fa_spoof", "rho_tar", "rho_non", "rho_spoof")}


class BinaryRates(NamedTuple):
    p_miss: float
    p_fa: float


@dataclass(frozen=True)
class TandemRates:
    """Composed tandem error rates and the per-system rates behind them.

    ``p_a``: target accepted by the CM, rejected by the ASV.
    ``p_b``: nontarget accepted by both.
    ``p_c``: spoof accepted by both.
    ``p_d``: target rejected by the CM.
    """

    p_a: float
    p_b: float
    p_c: float
    p_d: float
    asv_miss_tar: float = float("nan")
    asv_fa_non: float = float("nan")
    asv_fa_spoof: float = float("nan")
    cm_miss_tar: float = float("nan")
    cm_miss_non: float = float("nan")
    cm_fa_spoof: float = float("nan")


class DetCurve(NamedTuple):
    thresholds: np.ndarray
    p_miss: np.ndarray
    p_fa: np.ndarray


def _split_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise DegenerateTrialsError("degenerate trial set: need both positive and negative trials")
    return pos, neg


def decision_boundaries(scores) -> np.ndarray:
    """Thresholds separating every pair of consecutive unique scores, plus +-inf."""
    uniq = np.unique(np.asarray(scores, dtype=np.float64))
    mids = uniq[:-1] + (uniq[1:] - uniq[:-1]) / 2.0
    return np.concatenate(([-np.inf], mids, [np.inf]))


def _accept_counts(scores: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Number of ``scores >= t`` for every ``t`` in ``thresholds``."""
    s = np.sort(scores)
    return s.size - np.searchsorted(s, thresholds, side="left")


def error_rates_at(scores, labels, threshold: float) -> BinaryRates:
    """Miss and false-alarm rates from hard decisions at one threshold."""
    pos, neg = _split_scores(scores, labels)
    p_miss = np.count_nonzero(pos < threshold) / pos.size
    p_fa = np.count_nonzero(neg >= threshold) / neg.size
    return BinaryRates(float(p_miss), float(p_fa))


def dcf(rates: BinaryRates, cost: CostModel) -> float:
    """Two-class detection cost; only the target/nontarget terms are used."""
    return cost.rho_tar * cost.c_miss * rates.p_miss + cost.rho_non * cost.c_fa * rates.p_fa


def det_points(scores, labels) -> DetCurve:
    """Miss / false-alarm rates at every decision boundary, in increasing threshold order."""
    pos, neg = _split_scores(scores, labels)
    thr = decision_boundaries(np.concatenate((pos, neg)))
    p_miss = (pos.size - _accept_counts(pos, thr)) / pos.size
    p_fa = _accept_counts(neg, thr) / neg.size
    return DetCurve(thr, p_miss, p_fa)


def eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and its threshold from an empirical boundary sweep.

    The boundary minimizing ``|p_miss - p_fa|`` wins; ties go to the smaller
    ``p_miss + p_fa`` and then to the lower threshold. The reported rate is
    ``(p_miss + p_fa) / 2`` at that boundary.
    """
    curve = det_points(scores, labels)
    gap = np.abs(curve.p_miss - curve.p_fa)
    total = curve.p_miss + curve.p_fa
    # lexsort keys are applied last-first; a stable sort keeps threshold order
    idx = np.lexsort((np.arange(len(gap)), total, gap))[0]
    return float(total[idx] / 2.0), float(curve.thresholds[idx])


def _class_masks(classes, n: int):
    classes = np.asarray(classes).ravel()
    if classes.size != n:
        raise ValueError("classes must match the number of scores")
    masks = [classes == c for c in TrialClass]
    for c, m in zip(TrialClass, masks):
        if not m.any():
            raise DegenerateTrialsError(f"class absent from trial set: {c}")
    return masks


def tandem_rates(asv_scores, cm_scores, classes, asv_threshold: float,
                 cm_threshold: float, joint: bool = False) -> TandemRates:
    """Tandem error rates at fixed ASV and CM thresholds.

    By default each composed rate is the product of the two per-system
    marginals, treating the systems as independent. ``joint=True`` counts
    the composed events directly instead; that mode is for diagnostics.
    """
    asv = np.asarray(asv_scores, dtype=np.float64).ravel()
    cm = np.asarray(cm_scores, dtype=np.float64).ravel()
    if asv.shape != cm.shape:
        raise ValueError("asv_scores and cm_scores must have the same length")
    tar, non, spf = _class_masks(classes, asv.size)

    asv_acc = asv >= asv_threshold
    cm_acc = cm >= cm_threshold
    n_tar, n_non, n_spf = tar.sum(), non.sum(), spf.sum()

    asv_miss_tar = np.count_nonzero(~asv_acc[tar]) / n_tar
    asv_fa_non = np.count_nonzero(asv_acc[non]) / n_non
    asv_fa_spoof = np.count_nonzero(asv_acc[spf]) / n_spf
    cm_miss_tar = np.count_nonzero(~cm_acc[tar]) / n_tar
    cm_miss_non = np.count_nonzero(~cm_acc[non]) / n_non
    cm_fa_spoof = np.count_nonzero(cm_acc[spf]) / n_spf

    if joint:
        p_a = np.count_nonzero(cm_acc[tar] & ~asv_acc[tar]) / n_tar
        p_b = np.count_nonzero(cm_acc[non] & asv_acc[non]) / n_non
        p_c = np.count_nonzero(cm_acc[spf] & asv_acc[spf]) / n_spf
    else:
        p_a = (1.0 - cm_miss_tar) * asv_miss_tar
        p_b = (1.0 - cm_miss_non) * asv_fa_non
        p_c = cm_fa_spoof * asv_fa_spoof
    p_d = cm_miss_tar

    return TandemRates(
        p_a=float(p_a), p_b=float(p_b), p_c=float(p_c), p_d=float(p_d),
        asv_miss_tar=float(asv_miss_tar), asv_fa_non=float(asv_fa_non),
        asv_fa_spoof=float(asv_fa_spoof), cm_miss_tar=float(cm_miss_tar),
        cm_miss_non=float(cm_miss_non), cm_fa_spoof=float(cm_fa_spoof),
    )


def tdcf(rates: TandemRates, cost: CostModel) -> float:
    """Tandem detection cost of composed error rates."""
    return (cost.c_miss * cost.rho_tar * (rates.p_a + rates.p_d)
            + cost.c_fa * cost.rho_non * rates.p_b
            + cost.c_fa_spoof * cost.rho_spoof * rates.p_c)


class MinTDCF(NamedTuple):
    value: float
    cm_threshold: float
    asv_threshold: float


def min_norm_tdcf(asv_scores, cm_scores, classes, cost: CostModel) -> MinTDCF:
    """Minimum normalized t-DCF over CM thresholds, ASV fixed at its EER.

    The ASV EER threshold is computed on target versus nontarget trials. The
    normalizer is the t-DCF of a CM that accepts every trial, so 0 is a
    perfect tandem and 1 is no better than having no countermeasure.
    """
    asv = np.asarray(asv_scores, dtype=np.float64).ravel()
    cm = np.asarray(cm_scores, dtype=np.float64).ravel()
    if asv.shape != cm.shape:
        raise ValueError("asv_scores and cm_scores must have the same length")
    tar, non, spf = _class_masks(classes, asv.size)
    n_tar, n_non, n_spf = tar.sum(), non.sum(), spf.sum()

    bona = tar | non
    _, asv_thr = eer(asv[bona], tar[bona].astype(int))
    asv_miss_tar = np.count_nonzero(asv[tar] < asv_thr) / n_tar
    asv_fa_non = np.count_nonzero(asv[non] >= asv_thr) / n_non
    asv_fa_spoof = np.count_nonzero(asv[spf] >= asv_thr) / n_spf

    thr = decision_boundaries(cm)
    cm_miss_tar = (n_tar - _accept_counts(cm[tar], thr)) / n_tar
    cm_miss_non = (n_non - _accept_counts(cm[non], thr)) / n_non
    cm_fa_spoof = _accept_counts(cm[spf], thr) / n_spf

    # same arithmetic as tandem_rates + tdcf so sweeps agree bit-for-bit
    p_a = (1.0 - cm_miss_tar) * asv_miss_tar
    p_b = (1.0 - cm_miss_non) * asv_fa_non
    p_c = cm_fa_spoof * asv_fa_spoof
    p_d = cm_miss_tar
    costs = (cost.c_miss * cost.rho_tar * (p_a + p_d)
             + cost.c_fa * cost.rho_non * p_b
             + cost.c_fa_spoof * cost.rho_spoof * p_c)

    # thr[0] is -inf: the accept-all CM
    normalizer = costs[0]
    if normalizer <= 0.0:
        raise DegenerateTrialsError("degenerate normalizer: accept-all CM has zero t-DCF")
    idx = int(np.argmin(costs))
    value = float(costs[idx] / normalizer)
    if 1.0 < value < 1.0 + 1e-9:
        value = 1.0
    return MinTDCF(value, float(thr[idx]), float(asv_thr))
