"""Pretraining, tandem optimization and evaluation of ASV + CM systems.

The tandem accepts a trial only when both systems accept it. During
REINFORCE training each system *samples* its decision from its accept
probability; evaluation always uses fixed thresholds and never samples.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit, log_expit

from . import metrics
from .data import PairDataset, TrialList
from .metrics import CostModel, TrialClass
from .policy import (Adam, PolicyNet, backward, bce, forward, grad_bce, sample_bernoulli,
                     sgd_step)
from .rewards import RewardModel, batch_rewards

log = logging.getLogger(__name__)

METHODS = ("reinforce", "im_separate", "im_same")
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    reward_model: RewardModel = field(default_factory=RewardModel)
    method: str = "reinforce"
    # share of spoof trials per tandem mini-batch; None keeps the list proportion
    spoof_fraction: float | None = None
    optimizer: str = "sgd"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.spoof_fraction is not None and not 0.0 <= self.spoof_fraction < 1.0:
            raise ValueError("spoof_fraction must lie in [0, 1)")


@dataclass
class TandemSystem:
    asv: PolicyNet
    cm: PolicyNet
    asv_threshold: float = math.nan
    cm_threshold: float = math.nan

    def copy(self) -> "TandemSystem":
        return TandemSystem(self.asv.copy(), self.cm.copy(), self.asv_threshold, self.cm_threshold)


@dataclass(frozen=True)
class Evaluation:
    min_tdcf: float
    tdcf_asv_threshold: float
    tdcf_cm_threshold: float
    asv_eer: float
    asv_eer_threshold: float
    cm_eer: float
    cm_eer_threshold: float
    # each system scored against the other system's labels
    asv_eer_on_cm_task: float
    cm_eer_on_asv_task: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    dev_tdcf: float
    eval_tdcf: float
    asv_eer: float
    cm_eer: float
    mean_reward: float
    dev_tdcf_rel: float
    eval_tdcf_rel: float
    asv_eer_rel: float
    cm_eer_rel: float

    def as_dict(self) -> dict:
        return asdict(self)


def relative_change(value: float, initial: float) -> float:
    if initial == 0.0:
        return 0.0 if value == 0.0 else math.inf
    return (value - initial) / initial


# --- pretraining ---------------------------------------------------------------

def _balanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Mini-batches with equal numbers of 0 and 1 labels; one pass over the larger class."""
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("pretraining data must contain both labels")
    half = batch_size // 2
    n_batches = max(1, math.ceil(max(pos.size, neg.size) / half))
    pos = _cycle(rng.permutation(pos), n_batches * half)
    neg = _cycle(rng.permutation(neg), n_batches * half)
    for i in range(n_batches):
        batch = np.concatenate((pos[i * half:(i + 1) * half], neg[i * half:(i + 1) * half]))
        yield rng.permutation(batch)


def _cycle(idx: np.ndarray, n: int) -> np.ndarray:
    return np.resize(idx, n)


def _make_optimizer(net: PolicyNet, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(net, config.learning_rate, weight_decay=config.weight_decay)
    return None


def _descend(net, grads, opt, config: TrainConfig) -> PolicyNet:
    if opt is not None:
        return opt.step(net, grads)
    if config.weight_decay:
        grads = [g + config.weight_decay * p for g, p in zip(grads, net.params)]
    return sgd_step(net, grads, config.learning_rate, "descent")


def pretrain(net: PolicyNet, pairs: PairDataset, config: TrainConfig) -> PolicyNet:
    """Minimize binary cross-entropy on labelled pairs with class-balanced batches."""
    if not (np.any(pairs.labels == 1) and np.any(pairs.labels == 0)):
        raise ValueError("pretraining data must contain both labels")
    rng = np.random.default_rng(config.seed)
    opt = _make_optimizer(net, config)
    for epoch in range(config.epochs):
        for idx in _balanced_batches(pairs.labels, config.batch_size, rng):
            _, cache = forward(net, pairs.first[idx], pairs.second[idx])
            grads = grad_bce(net, cache, pairs.labels[idx])
            net = _descend(net, [g / len(idx) for g in grads], opt, config)
    return net


def pretrain_asv(net: PolicyNet, pairs: PairDataset, config: TrainConfig) -> PolicyNet:
    """Train the ASV network: label 1 when both embeddings come from one speaker."""
    return pretrain(net, pairs, config)


def pretrain_cm(net: PolicyNet, pairs: PairDataset, config: TrainConfig) -> PolicyNet:
    """Train the CM network: label 1 when both inputs are bona fide."""
    return pretrain(net, pairs, config)


def mean_bce(net: PolicyNet, pairs: PairDataset) -> float:
    _, cache = forward(net, pairs.first, pairs.second)
    return float(bce(cache, pairs.labels).mean())


# --- tandem training -----------------------------------------------------------

def tandem_batches(classes: np.ndarray, batch_size: int, rng: np.random.Generator,
                   spoof_fraction: float | None = None):
    """Index batches for one epoch of tandem training.

    Every batch holds about as many targets as nontargets; spoofs fill
    ``spoof_fraction`` of it (by default their share of the list). The epoch
    has ``ceil(len(classes) / batch_size)`` batches.
    """
    classes = np.asarray(classes)
    pools = [np.flatnonzero(classes == c) for c in TrialClass]
    if any(p.size == 0 for p in pools):
        raise metrics.DegenerateTrialsError("class absent from trial set")
    if spoof_fraction is None:
        spoof_fraction = pools[TrialClass.SPOOF].size / classes.size
    n_spf = int(round(batch_size * spoof_fraction))
    n_tar = (batch_size - n_spf) // 2
    n_non = batch_size - n_spf - n_tar
    n_batches = math.ceil(classes.size / batch_size)
    streams = [_cycle(rng.permutation(p), n * n_batches)
               for p, n in zip(pools, (n_tar, n_non, n_spf))]
    for i in range(n_batches):
        parts = [s[i * n:(i + 1) * n] for s, n in zip(streams, (n_tar, n_non, n_spf))]
        yield np.concatenate(parts)


def tandem_action_prob(p_asv, p_cm, a_tandem):
    """Probability of the tandem action: ``p_asv * p_cm`` if accepted, else its complement."""
    p1 = np.asarray(p_asv) * np.asarray(p_cm)
    return np.where(np.asarray(a_tandem) == 1, p1, 1.0 - p1)


def log_tandem_prob(logit_asv, logit_cm, a_tandem) -> np.ndarray:
    """``log p_tandem`` from logits, clamped to ``[1e-12, 1 - 1e-12]``."""
    la, lc = np.asarray(logit_asv), np.asarray(logit_cm)
    accept = log_expit(la) + log_expit(lc)
    reject_p = expit(-la) + expit(la) * expit(-lc)
    reject = np.log(np.clip(reject_p, PROB_CLAMP, 1.0 - PROB_CLAMP))
    accept = np.clip(accept, math.log(PROB_CLAMP), math.log1p(-PROB_CLAMP))
    return np.where(np.asarray(a_tandem) == 1, accept, reject)


def reinforce_logit_grads(logit_asv, logit_cm, a_tandem, rewards, batch_size: int):
    """Gradient of ``(1/B) sum_i r_i log p_tandem_i`` w.r.t. both systems' logits."""
    la, lc = np.asarray(logit_asv, float), np.asarray(logit_cm, float)
    pa, pc = expit(la), expit(lc)
    w = np.asarray(rewards, dtype=np.float64) / batch_size
    # complement computed without cancellation: 1 - pa*pc = (1 - pa) + pa (1 - pc)
    q = np.maximum(expit(-la) + pa * expit(-lc), PROB_CLAMP)
    accepted = np.asarray(a_tandem) == 1
    d_asv = np.where(accepted, 1.0 - pa, -pc * pa * (1.0 - pa) / q)
    d_cm = np.where(accepted, 1.0 - pc, -pa * pc * (1.0 - pc) / q)
    return w * d_asv, w * d_cm


def reinforce_epoch(system: TandemSystem, trials: TrialList, reward_model: RewardModel,
                    config: TrainConfig, rng: np.random.Generator):
    """One epoch of REINFORCE tandem optimization.

    For every mini-batch both systems sample accept/reject actions, the
    tandem action is their AND, and all parameters of both networks take one
    gradient-ascent step on the reward-weighted log-probability of the
    sampled tandem actions. Returns ``(system, mean_reward)``.
    """
    asv, cm = system.asv, system.cm
    total_reward, n_seen = 0.0, 0
    for idx in tandem_batches(trials.classes, config.batch_size, rng, config.spoof_fraction):
        p_asv, c_asv = forward(asv, trials.enrollment[idx], trials.test[idx])
        p_cm, c_cm = forward(cm, trials.cm_test[idx], trials.anchors[idx])
        a_asv = sample_bernoulli(p_asv, rng)
        a_cm = sample_bernoulli(p_cm, rng)
        a_tandem = a_asv & a_cm
        r = batch_rewards(reward_model, a_tandem, trials.classes[idx])
        loss = float(np.sum(log_tandem_prob(c_asv.logit, c_cm.logit, a_tandem) * r) / len(idx))
        if not math.isfinite(loss):
            raise FloatingPointError("non-finite REINFORCE loss")
        d_asv, d_cm = reinforce_logit_grads(c_asv.logit, c_cm.logit, a_tandem, r, len(idx))
        asv = sgd_step(asv, backward(asv, c_asv, d_asv), config.learning_rate, "ascent")
        cm = sgd_step(cm, backward(cm, c_cm, d_cm), config.learning_rate, "ascent")
        total_reward += float(r.sum())
        n_seen += len(idx)
    return replace(system, asv=asv, cm=cm), total_reward / max(n_seen, 1)


def _finetune_epoch(system: TandemSystem, trials: TrialList, asv_labels, cm_labels,
                    config: TrainConfig, rng: np.random.Generator) -> TandemSystem:
    asv, cm = system.asv, system.cm
    for idx in tandem_batches(trials.classes, config.batch_size, rng, config.spoof_fraction):
        _, c_asv = forward(asv, trials.enrollment[idx], trials.test[idx])
        _, c_cm = forward(cm, trials.cm_test[idx], trials.anchors[idx])
        g_asv = grad_bce(asv, c_asv, asv_labels[idx])
        g_cm = grad_bce(cm, c_cm, cm_labels[idx])
        asv = sgd_step(asv, [g / len(idx) for g in g_asv], config.learning_rate, "descent")
        cm = sgd_step(cm, [g / len(idx) for g in g_cm], config.learning_rate, "descent")
    return replace(system, asv=asv, cm=cm)


def im_labels(trials: TrialList, method: str):
    """Cross-entropy targets ``(asv_labels, cm_labels)`` of a baseline method."""
    if method == "im_separate":
        return trials.asv_labels, trials.cm_labels
    if method == "im_same":
        return trials.tandem_labels, trials.tandem_labels
    raise ValueError(f"not a cross-entropy baseline: {method!r}")


def finetune_im_separate(system: TandemSystem, trials: TrialList, config: TrainConfig,
                         rng: np.random.Generator | None = None) -> TandemSystem:
    """Fine-tune each system on its own labels with cross-entropy."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    asv_l, cm_l = im_labels(trials, "im_separate")
    for _ in range(config.epochs):
        system = _finetune_epoch(system, trials, asv_l, cm_l, config, rng)
    return system


def finetune_im_same(system: TandemSystem, trials: TrialList, config: TrainConfig,
                     rng: np.random.Generator | None = None) -> TandemSystem:
    """Fine-tune both systems on the tandem label with cross-entropy."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    asv_l, cm_l = im_labels(trials, "im_same")
    for _ in range(config.epochs):
        system = _finetune_epoch(system, trials, asv_l, cm_l, config, rng)
    return system


# --- evaluation ----------------------------------------------------------------

def score_trials(system: TandemSystem, trials: TrialList):
    """Deterministic ``(asv_scores, cm_scores)`` logits for every trial."""
    _, c_asv = forward(system.asv, trials.enrollment, trials.test)
    _, c_cm = forward(system.cm, trials.cm_test, trials.anchors)
    return c_asv.logit, c_cm.logit


def evaluate_scores(asv_scores, cm_scores, classes, cost: CostModel) -> Evaluation:
    asv = np.asarray(asv_scores, dtype=np.float64)
    cm = np.asarray(cm_scores, dtype=np.float64)
    classes = np.asarray(classes)
    tar = classes == TrialClass.TARGET
    bona = classes != TrialClass.SPOOF
    res = metrics.min_norm_tdcf(asv, cm, classes, cost)
    asv_eer, asv_thr = metrics.eer(asv[bona], tar[bona].astype(int))
    cm_eer, cm_thr = metrics.eer(cm, bona.astype(int))
    asv_cross, _ = metrics.eer(asv, bona.astype(int))
    cm_cross, _ = metrics.eer(cm[bona], tar[bona].astype(int))
    return Evaluation(res.value, res.asv_threshold, res.cm_threshold, asv_eer, asv_thr,
                      cm_eer, cm_thr, asv_cross, cm_cross)


def evaluate(system: TandemSystem, trials: TrialList, cost: CostModel) -> Evaluation:
    """Score all trials with fixed thresholds and compute EERs and min t-DCF.

    ASV EER uses target vs nontarget trials, CM EER bona fide vs spoof. The
    cross-task EERs score the ASV on bona fide vs spoof and the CM on target
    vs nontarget.
    """
    asv, cm = score_trials(system, trials)
    return evaluate_scores(asv, cm, trials.classes, cost)


def with_thresholds(system: TandemSystem, ev: Evaluation) -> TandemSystem:
    return replace(system, asv_threshold=ev.tdcf_asv_threshold, cm_threshold=ev.tdcf_cm_threshold)


@dataclass
class TandemRun:
    system: TandemSystem
    initial_dev: Evaluation
    initial_eval: Evaluation
    final_dev: Evaluation
    final_eval: Evaluation
    reports: list


def _report(epoch, dev: Evaluation, ev: Evaluation, mean_reward, init_dev, init_eval):
    return EpochReport(
        epoch=epoch, dev_tdcf=dev.min_tdcf, eval_tdcf=ev.min_tdcf,
        asv_eer=ev.asv_eer, cm_eer=ev.cm_eer, mean_reward=mean_reward,
        dev_tdcf_rel=relative_change(dev.min_tdcf, init_dev.min_tdcf),
        eval_tdcf_rel=relative_change(ev.min_tdcf, init_eval.min_tdcf),
        asv_eer_rel=relative_change(ev.asv_eer, init_eval.asv_eer),
        cm_eer_rel=relative_change(ev.cm_eer, init_eval.cm_eer),
    )


def train_tandem(system: TandemSystem, dev: TrialList, eval_trials: TrialList,
                 config: TrainConfig, cost: CostModel, callback=None) -> TandemRun:
    """Run ``config.method`` on the dev list for ``config.epochs`` epochs.

    Both partitions are evaluated before training (epoch 0) and after every
    epoch; relative changes are measured against epoch 0.
    """
    rng = np.random.default_rng(config.seed)
    init_dev = evaluate(system, dev, cost)
    init_eval = evaluate(system, eval_trials, cost)
    reports = [_report(0, init_dev, init_eval, math.nan, init_dev, init_eval)]
    if callback:
        callback(reports[-1])
    if config.method != "reinforce":
        asv_l, cm_l = im_labels(dev, config.method)
    dev_ev, eval_ev = init_dev, init_eval
    for epoch in range(1, config.epochs + 1):
        if config.method == "reinforce":
            system, mean_r = reinforce_epoch(system, dev, config.reward_model, config, rng)
        else:
            system = _finetune_epoch(system, dev, asv_l, cm_l, config, rng)
            mean_r = math.nan
        dev_ev = evaluate(system, dev, cost)
        eval_ev = evaluate(system, eval_trials, cost)
        reports.append(_report(epoch, dev_ev, eval_ev, mean_r, init_dev, init_eval))
        if callback:
            callback(reports[-1])
        log.debug("epoch %d: dev %.4f eval %.4f", epoch, dev_ev.min_tdcf, eval_ev.min_tdcf)
    return TandemRun(with_thresholds(system, dev_ev), init_dev, init_eval, dev_ev, eval_ev, reports)
