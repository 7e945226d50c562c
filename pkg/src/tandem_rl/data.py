"""Synthetic speaker/spoof embedding world, trial lists and file formats.

The world is a Gaussian stand-in for real front-end embeddings:

* speaker means are isotropic Gaussian with scale ``speaker_spread``;
* bona fide utterances scatter around their speaker mean with
  ``utterance_noise``;
* spoofed utterances of a speaker are shifted by ``spoof_offset`` along one
  of ``num_attacks`` fixed random unit directions. The ASV sees only
  ``asv_spoof_visibility`` of that shift, the CM all of it, mimicking a
  speaker front-end that is mostly blind to synthesis artifacts.

Speakers are split into disjoint train / dev / eval groups. Dev and eval
embeddings are translated by ``domain_shift`` relative to train, standing in
for the corpus mismatch between pretraining data and tandem trial lists.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .metrics import TrialClass
from .rewards import GroundTruth

PARTITIONS = ("train", "dev", "eval")


class ParseError(ValueError):
    def __init__(self, path, lineno: int, field_name: str, message: str):
        self.path, self.lineno, self.field = str(path), lineno, field_name
        super().__init__(f"{path}:{lineno}: field '{field_name}': {message}")


@dataclass(frozen=True)
class WorldConfig:
    embedding_dim: int = 24
    speaker_spread: float = 1.0
    utterance_noise: float = 0.45
    spoof_offset: float = 4.0
    num_attacks: int = 3
    utterances_per_speaker: int = 40
    spoofs_per_speaker: int = 60
    enrollment_utterances: int = 5
    # share of the spoof displacement present in the ASV's view of an utterance
    asv_spoof_visibility: float = 0.3
    # extra noise on the countermeasure's view of each test utterance
    cm_view_noise: float = 0.0
    # translation of every dev/eval embedding away from the training domain
    domain_shift: float = 3.0
    train_speakers: int = 300
    dev_speakers: int = 200
    eval_speakers: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("embedding_dim", "num_attacks", "utterances_per_speaker",
                     "spoofs_per_speaker", "enrollment_utterances"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.speaker_spread <= 0 or self.utterance_noise <= 0:
            raise ValueError("speaker_spread and utterance_noise must be positive")
        if self.spoof_offset < 0 or self.cm_view_noise < 0 or self.domain_shift < 0:
            raise ValueError("spoof_offset, cm_view_noise and domain_shift must be non-negative")
        if not 0.0 <= self.asv_spoof_visibility <= 1.0:
            raise ValueError("asv_spoof_visibility must lie in [0, 1]")
        if min(self.train_speakers, self.dev_speakers, self.eval_speakers) < 0:
            raise ValueError("speaker counts must be non-negative")
        if self.num_speakers < 1:
            raise ValueError("need at least one speaker")

    @property
    def num_speakers(self) -> int:
        return self.train_speakers + self.dev_speakers + self.eval_speakers


@dataclass
class World:
    config: WorldConfig
    speaker_means: np.ndarray      # (S, d)
    bona_fide: np.ndarray          # (S, U, d)
    spoof: np.ndarray              # (S, V, d) as seen by the CM
    asv_spoof: np.ndarray          # (S, V, d) as seen by the ASV
    spoof_attack: np.ndarray       # (S, V) attack index of each spoof
    attack_directions: np.ndarray  # (K, d) unit vectors
    enrollment: np.ndarray         # (S, d) mean of held-out enrollment utterances
    partition_speakers: dict = field(default_factory=dict)

    @property
    def bona_fide_anchor(self) -> np.ndarray:
        """Average bona fide embedding of the training speakers."""
        spk = self.partition_speakers["train"]
        if len(spk) == 0:
            spk = np.arange(len(self.speaker_means))
        return self.bona_fide[spk].reshape(-1, self.config.embedding_dim).mean(axis=0)


def generate_world(config: WorldConfig) -> World:
    rng = np.random.default_rng(config.seed)
    d, S = config.embedding_dim, config.num_speakers
    means = rng.normal(0.0, config.speaker_spread, size=(S, d))
    dirs = rng.normal(size=(config.num_attacks, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    noise = config.utterance_noise
    bona = means[:, None, :] + rng.normal(0.0, noise, size=(S, config.utterances_per_speaker, d))
    attack = rng.integers(0, config.num_attacks, size=(S, config.spoofs_per_speaker))
    artifact = config.spoof_offset * dirs[attack]
    spoof_base = means[:, None, :] + rng.normal(0.0, noise, size=(S, config.spoofs_per_speaker, d))
    enroll = means[:, None, :] + rng.normal(0.0, noise, size=(S, config.enrollment_utterances, d))
    shift_dir = rng.normal(size=d)
    shift = np.zeros((S, 1, d))
    shift[config.train_speakers:] = config.domain_shift * shift_dir / np.linalg.norm(shift_dir)
    bona, spoof_base, enroll = bona + shift, spoof_base + shift, enroll + shift
    spoof = spoof_base + artifact
    asv_spoof = spoof_base + config.asv_spoof_visibility * artifact
    bounds = np.cumsum([0, config.train_speakers, config.dev_speakers, config.eval_speakers])
    parts = {p: np.arange(bounds[i], bounds[i + 1]) for i, p in enumerate(PARTITIONS)}
    return World(config, means, bona, spoof, asv_spoof, attack, dirs, enroll.mean(axis=1), parts)


@dataclass(frozen=True)
class Trial:
    trial_id: str
    speaker_id: str
    enrollment: np.ndarray
    test: np.ndarray
    cm_test: np.ndarray
    bona_fide_anchor: np.ndarray
    truth: GroundTruth

    @property
    def trial_class(self) -> TrialClass:
        return self.truth.trial_class


@dataclass
class TrialList:
    """Trials of one partition stored column-wise.

    ``enrollment`` and ``test`` form the ASV input pair; ``cm_test`` and the
    shared ``anchor`` form the CM input pair. ``test`` and ``cm_test`` are
    two views of the same utterance and differ only for spoofs (and by the
    optional CM view noise).
    """

    partition: str
    trial_ids: list
    speaker_ids: list
    classes: np.ndarray
    enrollment: np.ndarray
    test: np.ndarray
    cm_test: np.ndarray
    anchor: np.ndarray
    asv_labels: np.ndarray
    cm_labels: np.ndarray

    def __post_init__(self):
        if len(set(self.trial_ids)) != len(self.trial_ids):
            raise ValueError("trial ids must be unique within a list")

    def __len__(self) -> int:
        return len(self.trial_ids)

    def __getitem__(self, i: int) -> Trial:
        return Trial(self.trial_ids[i], self.speaker_ids[i], self.enrollment[i], self.test[i],
                     self.cm_test[i], self.anchor,
                     GroundTruth(int(self.asv_labels[i]), int(self.cm_labels[i])))

    @property
    def tandem_labels(self) -> np.ndarray:
        return self.asv_labels & self.cm_labels

    @property
    def anchors(self) -> np.ndarray:
        return np.broadcast_to(self.anchor, self.cm_test.shape)

    def class_counts(self) -> dict:
        return {str(c): int(np.count_nonzero(self.classes == c)) for c in TrialClass}

    def subset(self, idx) -> "TrialList":
        idx = np.asarray(idx)
        return TrialList(self.partition, [self.trial_ids[i] for i in idx],
                         [self.speaker_ids[i] for i in idx], self.classes[idx],
                         self.enrollment[idx], self.test[idx], self.cm_test[idx], self.anchor,
                         self.asv_labels[idx], self.cm_labels[idx])


def speaker_name(index: int) -> str:
    return f"spk{index:04d}"


def build_trials(world: World, counts, partition: str, seed: int) -> TrialList:
    """Sample a trial list of ``counts = (targets, nontargets, spoofs)``.

    Spoof trials claim the identity of the speaker they imitate, so their ASV
    label is 1 and their CM label 0.
    """
    n_tar, n_non, n_spf = (int(c) for c in counts)
    if min(n_tar, n_non, n_spf) < 1:
        raise ValueError("every class needs at least one trial")
    if partition not in world.partition_speakers:
        raise ValueError(f"unknown partition {partition!r}")
    speakers = world.partition_speakers[partition]
    if len(speakers) < 2:
        raise ValueError(f"partition {partition!r} needs at least 2 speakers for nontarget trials, "
                         f"has {len(speakers)}")
    cfg = world.config
    rng = np.random.default_rng(seed)

    claimed = rng.choice(speakers, size=n_tar + n_non + n_spf)
    tar_utt = rng.integers(0, cfg.utterances_per_speaker, size=n_tar)
    # a different speaker for every nontarget trial
    shift = rng.integers(1, len(speakers), size=n_non)
    pos = np.searchsorted(speakers, claimed[n_tar:n_tar + n_non])
    other = speakers[(pos + shift) % len(speakers)]
    non_utt = rng.integers(0, cfg.utterances_per_speaker, size=n_non)
    spf_utt = rng.integers(0, cfg.spoofs_per_speaker, size=n_spf)

    bona_test = np.concatenate([
        world.bona_fide[claimed[:n_tar], tar_utt],
        world.bona_fide[other, non_utt],
    ])
    spf_speakers = claimed[n_tar + n_non:]
    test = np.concatenate([bona_test, world.asv_spoof[spf_speakers, spf_utt]])
    cm_test = np.concatenate([bona_test, world.spoof[spf_speakers, spf_utt]])
    classes = np.repeat([TrialClass.TARGET, TrialClass.NONTARGET, TrialClass.SPOOF],
                        [n_tar, n_non, n_spf])
    if cfg.cm_view_noise > 0:
        cm_test = cm_test + rng.normal(0.0, cfg.cm_view_noise, size=test.shape)

    order = rng.permutation(len(classes))
    classes = classes[order]
    claimed = claimed[order]
    asv_labels = (classes != TrialClass.NONTARGET).astype(np.int64)
    cm_labels = (classes != TrialClass.SPOOF).astype(np.int64)
    return TrialList(
        partition=partition,
        trial_ids=[f"{partition}_{i:06d}" for i in range(len(classes))],
        speaker_ids=[speaker_name(s) for s in claimed],
        classes=classes.astype(np.int64),
        enrollment=world.enrollment[claimed],
        test=test[order],
        cm_test=cm_test[order],
        anchor=world.bona_fide_anchor,
        asv_labels=asv_labels,
        cm_labels=cm_labels,
    )


class PairDataset(NamedTuple):
    first: np.ndarray
    second: np.ndarray
    labels: np.ndarray


def asv_pairs(world: World, n_pairs: int, seed: int, partition: str = "train") -> PairDataset:
    """Same-speaker (1) / different-speaker (0) pairs of bona fide embeddings.

    The first element averages a few utterances of a speaker, like an
    enrollment; the second is one utterance. Classes are balanced.
    """
    cfg = world.config
    speakers = world.partition_speakers[partition]
    if len(speakers) < 2:
        raise ValueError("need at least 2 speakers for different-speaker pairs")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_pairs) % 2
    rng.shuffle(labels)
    spk = rng.choice(speakers, size=n_pairs)
    pos = np.searchsorted(speakers, spk)
    other = speakers[(pos + rng.integers(1, len(speakers), size=n_pairs)) % len(speakers)]
    test_spk = np.where(labels == 1, spk, other)
    k = cfg.enrollment_utterances
    idx = rng.integers(0, cfg.utterances_per_speaker, size=(n_pairs, k))
    first = world.bona_fide[spk[:, None], idx].mean(axis=1)
    second = world.bona_fide[test_spk, rng.integers(0, cfg.utterances_per_speaker, size=n_pairs)]
    return PairDataset(first, second, labels.astype(np.int64))


def cm_pairs(world: World, n_pairs: int, seed: int, partition: str = "train",
             anchor_fraction: float = 0.5) -> PairDataset:
    """Pairs labelled 1 iff both elements are bona fide. Classes are balanced.

    With probability ``anchor_fraction`` the second element is the bona fide
    anchor instead of an utterance, matching how trials are scored.
    """
    cfg = world.config
    speakers = world.partition_speakers[partition]
    rng = np.random.default_rng(seed)
    labels = np.arange(n_pairs) % 2
    rng.shuffle(labels)
    use_anchor = rng.random(n_pairs) < anchor_fraction
    # for negatives: which element(s) are spoofed, 1 = first, 2 = second, 3 = both
    which = np.where(use_anchor, 1, rng.integers(1, 4, size=n_pairs))
    first_spoof = (labels == 0) & ((which & 1) == 1)
    second_spoof = (labels == 0) & ((which & 2) == 2) & ~use_anchor

    def draw(is_spoof):
        s = rng.choice(speakers, size=n_pairs)
        bona = world.bona_fide[s, rng.integers(0, cfg.utterances_per_speaker, size=n_pairs)]
        spf = world.spoof[s, rng.integers(0, cfg.spoofs_per_speaker, size=n_pairs)]
        return np.where(is_spoof[:, None], spf, bona)

    first = draw(first_spoof)
    second = draw(second_spoof)
    second[use_anchor] = world.bona_fide_anchor
    if cfg.cm_view_noise > 0:
        first = first + rng.normal(0.0, cfg.cm_view_noise, size=first.shape)
    return PairDataset(first, second, labels.astype(np.int64))


# --- score and protocol files -------------------------------------------------

_DECIMAL = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_CLASS_NAMES = {str(c): c for c in TrialClass}


class ScoreRecord(NamedTuple):
    trial_id: str
    trial_class: TrialClass
    asv_score: float
    cm_score: float


class ProtocolEntry(NamedTuple):
    trial_id: str
    speaker_id: str
    trial_class: TrialClass


def _parse_class(token: str, path, lineno: int) -> TrialClass:
    if token not in _CLASS_NAMES:
        raise ParseError(path, lineno, "class",
                         f"unknown class {token!r} (expected target, nontarget or spoof)")
    return _CLASS_NAMES[token]


def _parse_score(token: str, name: str, path, lineno: int) -> float:
    if not _DECIMAL.fullmatch(token):
        raise ParseError(path, lineno, name, f"not a decimal number: {token!r}")
    value = float(token)
    if not np.isfinite(value):
        raise ParseError(path, lineno, name, f"score out of range: {token!r}")
    return value


def _lines(path):
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.split("\n"), start=1):
        if line.strip():
            yield lineno, line


def read_scores(path) -> list[ScoreRecord]:
    """Parse ``<trial_id> <class> <asv_score> <cm_score>`` lines."""
    records = []
    for lineno, line in _lines(path):
        fields = line.split()
        if len(fields) != 4:
            raise ParseError(path, lineno, "line", f"expected 4 fields, got {len(fields)}")
        tid, cls, asv, cm = fields
        records.append(ScoreRecord(tid, _parse_class(cls, path, lineno),
                                   _parse_score(asv, "asv_score", path, lineno),
                                   _parse_score(cm, "cm_score", path, lineno)))
    return records


def write_scores(path, records: Iterable[ScoreRecord]) -> None:
    lines = []
    for r in records:
        if not (np.isfinite(r.asv_score) and np.isfinite(r.cm_score)):
            raise ValueError(f"non-finite score for trial {r.trial_id}")
        lines.append(f"{r.trial_id} {TrialClass(r.trial_class)} "
                     f"{float(r.asv_score)!r} {float(r.cm_score)!r}\n")
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def score_arrays(records: list[ScoreRecord]):
    """``(asv_scores, cm_scores, classes)`` arrays from parsed records."""
    asv = np.array([r.asv_score for r in records], dtype=np.float64)
    cm = np.array([r.cm_score for r in records], dtype=np.float64)
    classes = np.array([int(r.trial_class) for r in records], dtype=np.int64)
    return asv, cm, classes


def parse_protocol(path) -> list[ProtocolEntry]:
    """Parse ``<trial_id> <speaker_id> <class>`` lines; trial ids must be unique."""
    entries, seen = [], set()
    for lineno, line in _lines(path):
        fields = line.split()
        if len(fields) != 3:
            raise ParseError(path, lineno, "line", f"expected 3 fields, got {len(fields)}")
        tid, spk, cls = fields
        if tid in seen:
            raise ParseError(path, lineno, "trial_id", f"duplicate trial id {tid!r}")
        seen.add(tid)
        entries.append(ProtocolEntry(tid, spk, _parse_class(cls, path, lineno)))
    return entries


def write_protocol(path, trials: TrialList) -> None:
    lines = [f"{tid} {spk} {TrialClass(c)}\n"
             for tid, spk, c in zip(trials.trial_ids, trials.speaker_ids, trials.classes)]
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")
