"""Experiment configuration and the repeated pretrain / tandem-train protocol.

A configuration is a TOML file with the sections ``[world]``,
``[asv_spec]``, ``[cm_spec]``, ``[pretrain]``, ``[tandem]``, ``[cost]`` and
``[experiment]``. Every key is optional; missing keys take the defaults of
:class:`ExperimentConfig`, which reproduce the shipped ``default.toml``.

Methods are named ``reinforce-<reward>`` (reward one of simple, reward,
penalize, tdcf), ``im-separate`` or ``im-same``.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .data import (PARTITIONS, WorldConfig, asv_pairs, build_trials, cm_pairs, generate_world,
                   write_protocol)
from .metrics import CostModel
from .policy import LayerSpec, init_network, save_checkpoint, write_npz
from .rewards import RewardKind, RewardModel
from .tandem import (EpochReport, TandemSystem, TrainConfig, evaluate, pretrain_asv,
                     pretrain_cm, score_trials, train_tandem)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

OUTPUT_ENV = "TANDEM_RL_OUTPUT"
REWARD_METHODS = tuple(f"reinforce-{k.value}" for k in RewardKind)
BASELINE_METHODS = ("im-separate", "im-same")
ALL_METHODS = REWARD_METHODS + BASELINE_METHODS
EPOCH_COLUMNS = [f.name for f in fields(EpochReport)]
# bin edges of the |logit| histograms written with every final evaluation
SCORE_BINS = (0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, math.inf)


class ConfigError(ValueError):
    pass


def _default_pretrain() -> TrainConfig:
    return TrainConfig(learning_rate=1e-3, batch_size=64, epochs=20, optimizer="adam")


def _default_tandem() -> TrainConfig:
    return TrainConfig(learning_rate=3e-3, batch_size=64, epochs=50)


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    asv_spec: LayerSpec = field(default_factory=LayerSpec)
    cm_spec: LayerSpec = field(default_factory=LayerSpec)
    pretrain: TrainConfig = field(default_factory=_default_pretrain)
    tandem: TrainConfig = field(default_factory=_default_tandem)
    cost: CostModel = field(default_factory=CostModel)
    repetitions: int = 3
    seed: int = 0                      # repetition i uses seed + i
    output_dir: str = "results"
    pretrain_pairs: int = 20000
    train_counts: tuple = (1500, 1500, 4500)
    dev_counts: tuple = (1500, 1500, 4500)
    eval_counts: tuple = (1500, 1500, 4500)
    trial_seed: int = 5                # train/dev/eval lists use trial_seed - 1, +0, +1
    methods: tuple = ALL_METHODS

    def __post_init__(self):
        for name in ("train_counts", "dev_counts", "eval_counts", "methods"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")
        if self.pretrain_pairs < 2:
            raise ConfigError("pretrain_pairs must be at least 2")
        for name in ("train_counts", "dev_counts", "eval_counts"):
            counts = getattr(self, name)
            if len(counts) != 3 or min(counts) < 1:
                raise ConfigError(f"{name} needs three positive counts (target, nontarget, spoof)")
        if not self.methods:
            raise ConfigError("at least one method is required")
        for m in self.methods:
            if m not in ALL_METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {', '.join(ALL_METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must be unique")

    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.repetitions)]

    def trial_counts(self, partition: str) -> tuple:
        return getattr(self, f"{partition}_counts")

    def trial_list_seed(self, partition: str) -> int:
        return self.trial_seed + PARTITIONS.index(partition) - 1


def method_train_config(method: str, tandem: TrainConfig, cost: CostModel, seed: int) -> TrainConfig:
    """Tandem training settings for one named method and repetition seed."""
    if method in BASELINE_METHODS:
        return replace(tandem, method=method.replace("-", "_"), seed=seed)
    if method in REWARD_METHODS:
        kind = RewardKind(method.split("-", 1)[1])
        model = RewardModel(kind, cost if kind is RewardKind.TDCF else None)
        return replace(tandem, method="reinforce", reward_model=model, seed=seed)
    raise ConfigError(f"unknown method {method!r}")


# --- TOML <-> config ---------------------------------------------------------

_SECTIONS = {"world": WorldConfig, "asv_spec": LayerSpec, "cm_spec": LayerSpec,
             "pretrain": TrainConfig, "tandem": TrainConfig, "cost": CostModel}
# TrainConfig fields that are chosen per method rather than read from a file
_DERIVED_TRAIN_FIELDS = {"seed", "method", "reward_model"}
_EXPERIMENT_KEYS = {f.name for f in fields(ExperimentConfig)} - set(_SECTIONS)


def _section_keys(section: str) -> set:
    names = {f.name for f in fields(_SECTIONS[section])}
    if _SECTIONS[section] is TrainConfig:
        names -= _DERIVED_TRAIN_FIELDS
    return names


def _build_section(section: str, base, values: dict):
    unknown = set(values) - _section_keys(section)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    values = dict(values)
    if values.get("spoof_fraction") == "natural":
        values["spoof_fraction"] = None
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def config_from_dict(data: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Merge a nested ``{section: {key: value}}`` mapping onto ``base``."""
    base = base or ExperimentConfig()
    unknown = set(data) - set(_SECTIONS) - {"experiment"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    updates = {}
    for section in _SECTIONS:
        if section in data:
            updates[section] = _build_section(section, getattr(base, section), data[section])
    exp = data.get("experiment", {})
    bad = set(exp) - _EXPERIMENT_KEYS
    if bad:
        raise ConfigError(f"unknown key(s) in [experiment]: {', '.join(sorted(bad))}")
    updates.update(exp)
    try:
        return replace(base, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None) -> ExperimentConfig:
    """Read a TOML configuration; ``None`` loads the shipped default."""
    if path is None:
        text = resources.files("tandem_rl").joinpath("configs/default.toml").read_text("utf-8")
        source = "default.toml"
    else:
        text = Path(path).read_text(encoding="utf-8")
        source = str(path)
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return config_from_dict(data)


def parse_value(text: str):
    """Interpret an override value with TOML syntax, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply ``{"section.key": value}`` overrides; bare keys address ``[experiment]``."""
    nested: dict = {}
    for key, value in overrides.items():
        section, _, name = key.rpartition(".")
        nested.setdefault(section or "experiment", {})[name] = value
    return config_from_dict(nested, config)


def config_to_dict(config: ExperimentConfig) -> dict:
    """Nested plain-data view of a configuration, in TOML section layout."""
    out = {}
    for section in _SECTIONS:
        obj = getattr(config, section)
        values = {k: v for k, v in dataclasses.asdict(obj).items() if k in _section_keys(section)}
        out[section] = _plain(values)
    out["experiment"] = _plain({k: getattr(config, k) for k in sorted(_EXPERIMENT_KEYS)})
    return out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return json_float(float(obj))
    return obj


def json_float(x: float):
    """JSON has no infinities: they become the strings ``"inf"`` / ``"-inf"``, NaN becomes null."""
    if math.isnan(x):
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_plain(obj), indent=2, allow_nan=False) + "\n",
                          encoding="utf-8")


# --- output directories -------------------------------------------------------

def resolve_output_dir(config: ExperimentConfig, cli_value=None) -> Path:
    """Command-line value, then the ``TANDEM_RL_OUTPUT`` variable, then the config."""
    if cli_value:
        return Path(cli_value)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    return Path(config.output_dir)


def prepare_output_dir(path) -> Path:
    """Create ``path`` and prove it is writable before any computation starts."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {path} is not writable: {exc}") from exc
    return path


# --- synth --------------------------------------------------------------------

def synthesize(config: ExperimentConfig, out: Path) -> dict:
    """Write the world arrays and one protocol file per partition; return line counts."""
    world = generate_world(config.world)
    write_npz(out / "world.npz", {
        "speaker_means": world.speaker_means, "bona_fide": world.bona_fide,
        "spoof": world.spoof, "asv_spoof": world.asv_spoof, "spoof_attack": world.spoof_attack,
        "attack_directions": world.attack_directions, "enrollment": world.enrollment,
        "bona_fide_anchor": world.bona_fide_anchor,
    })
    counts = {}
    for part in PARTITIONS:
        trials = build_trials(world, config.trial_counts(part), part, config.trial_list_seed(part))
        write_protocol(out / f"{part}.protocol.txt", trials)
        counts[part] = len(trials)
    return counts


# --- run ----------------------------------------------------------------------

def check_dimensions(config: ExperimentConfig) -> None:
    d = config.world.embedding_dim
    for name in ("asv_spec", "cm_spec"):
        if getattr(config, name).input_dim != d:
            raise ConfigError(f"{name}.input_dim must equal world.embedding_dim ({d})")


def pretrain_systems(config: ExperimentConfig, world, seed: int) -> TandemSystem:
    """Pretrain both networks for one repetition; every draw derives from ``seed``."""
    pc = replace(config.pretrain, seed=seed)
    n = config.pretrain_pairs
    cm = pretrain_cm(init_network(config.cm_spec, 100 + seed), cm_pairs(world, n, 200 + seed), pc)
    asv = pretrain_asv(init_network(config.asv_spec, 300 + seed),
                       asv_pairs(world, n, 400 + seed), pc)
    return TandemSystem(asv, cm)


def score_histogram(scores) -> dict:
    counts, _ = np.histogram(np.abs(np.asarray(scores)), bins=np.array(SCORE_BINS))
    return {"abs_logit_bin_edges": list(SCORE_BINS), "counts": counts.tolist()}


def _run_method(system, dev, ev, config, method, seed, out: Path) -> dict:
    cfg = method_train_config(method, config.tandem, config.cost, seed)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "epochs.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EPOCH_COLUMNS)

        def on_epoch(report: EpochReport):
            writer.writerow([repr(v) for v in dataclasses.astuple(report)])
            fh.flush()

        run = train_tandem(system, dev, ev, cfg, config.cost, callback=on_epoch)
    save_checkpoint(run.system.asv, out / "asv.npz")
    save_checkpoint(run.system.cm, out / "cm.npz")
    asv_scores, cm_scores = score_trials(run.system, ev)
    record = {
        "method": method, "seed": seed, "status": "ok",
        "initial": {"dev": run.initial_dev.as_dict(), "eval": run.initial_eval.as_dict()},
        "final": {"dev": run.final_dev.as_dict(), "eval": run.final_eval.as_dict()},
        "thresholds": {"asv": run.system.asv_threshold, "cm": run.system.cm_threshold},
        "eval_score_histograms": {"asv": score_histogram(asv_scores),
                                  "cm": score_histogram(cm_scores)},
    }
    write_json(out / "final.json", record)
    return record


def _failure(method, seed, stage, exc) -> dict:
    log.error("seed %d, %s: %s failed: %s", seed, method, stage, exc)
    return {"method": method, "seed": seed, "status": "failed", "stage": stage,
            "error": f"{type(exc).__name__}: {exc}"}


def _stats(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    # population std so that a single repetition reports 0
    return {"mean": float(arr.mean()), "std": float(arr.std()), "values": arr.tolist()}


def _rel_pct(final, initial) -> float:
    return 100.0 * (final - initial) / initial if initial else (0.0 if final == initial else math.inf)


def summarize(config: ExperimentConfig, runs: list, pretrained: dict) -> dict:
    """Aggregate per-run records into mean / std / relative-change columns per method."""
    methods = {}
    for m in config.methods:
        mine = [r for r in runs if r["method"] == m]
        ok = [r for r in mine if r["status"] == "ok"]
        entry = {"completed": len(ok), "failed_seeds": [r["seed"] for r in mine if r not in ok]}
        if ok:
            for part in ("dev", "eval"):
                init = [r["initial"][part]["min_tdcf"] for r in ok]
                final = [r["final"][part]["min_tdcf"] for r in ok]
                entry[f"{part}_initial_tdcf"] = _stats(init)
                entry[f"{part}_tdcf"] = _stats(final)
                entry[f"{part}_rel_pct"] = _stats([_rel_pct(f, i) for f, i in zip(final, init)])
            entry["eval_asv_eer"] = _stats([r["final"]["eval"]["asv_eer"] for r in ok])
            entry["eval_cm_eer"] = _stats([r["final"]["eval"]["cm_eer"] for r in ok])
            entry["seeds"] = [r["seed"] for r in ok]
        methods[m] = entry
    failures = [{k: r[k] for k in ("method", "seed", "stage", "error")}
                for r in runs if r["status"] != "ok"]
    return {
        "metadata": {"created_utc": datetime.datetime.now(datetime.timezone.utc)
                     .strftime("%Y-%m-%dT%H:%M:%SZ"), "version": __version__},
        "config": config_to_dict(config),
        "pretrained": pretrained,
        "methods": methods,
        "partial": bool(failures),
        "failures": failures,
    }


def run_experiment(config: ExperimentConfig, out: Path, progress=None) -> dict:
    """Pretrain once per repetition, then train every method from that snapshot.

    Writes ``seed_<n>/`` subdirectories and ``summary.json`` under ``out`` and
    returns the summary. A failing stage is recorded and the remaining
    repetitions continue.
    """
    check_dimensions(config)
    world = generate_world(config.world)
    dev = build_trials(world, config.dev_counts, "dev", config.trial_list_seed("dev"))
    ev = build_trials(world, config.eval_counts, "eval", config.trial_list_seed("eval"))
    runs, pretrained = [], {}
    for seed in config.seeds():
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        try:
            system = pretrain_systems(config, world, seed)
            save_checkpoint(system.asv, seed_dir / "pretrained_asv.npz")
            save_checkpoint(system.cm, seed_dir / "pretrained_cm.npz")
            pretrained[str(seed)] = {"dev": evaluate(system, dev, config.cost).as_dict(),
                                     "eval": evaluate(system, ev, config.cost).as_dict()}
        except Exception as exc:  # recorded, the next repetition still runs
            runs.extend(_failure(m, seed, "pretrain", exc) for m in config.methods)
            continue
        for method in config.methods:
            if progress:
                progress(f"seed {seed}: {method}")
            try:
                runs.append(_run_method(system, dev, ev, config, method, seed, seed_dir / method))
            except Exception as exc:
                runs.append(_failure(method, seed, "tandem", exc))
    summary = summarize(config, runs, pretrained)
    write_json(out / "summary.json", summary)
    return summary
