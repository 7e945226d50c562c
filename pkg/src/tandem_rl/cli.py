"""Command-line interface: ``tandem-rl {synth,run,tdcf,det}``.

Every command exits with status 0 on success and 1 when any error was
reported (including a run in which some repetitions failed); usage errors
exit with 2. Output goes to ``--output-dir``, else ``$TANDEM_RL_OUTPUT``,
else the configured ``output_dir``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import __version__
from .data import read_scores, score_arrays
from .experiment import (BASELINE_METHODS, REWARD_METHODS, apply_overrides, json_float,
                         load_config, parse_value, prepare_output_dir, resolve_output_dir,
                         run_experiment, synthesize, write_json)
from .metrics import CostModel, TrialClass, det_points
from .rewards import RewardKind
from .tandem import evaluate_scores

log = logging.getLogger("tandem_rl")

COST_FIELDS = ("c_miss", "c_fa", "c_fa_spoof", "rho_tar", "rho_non", "rho_spoof")


def _key_value(text: str):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), parse_value(value.strip())


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML experiment config (default: shipped default)")
    p.add_argument("--output-dir", help="output directory (overrides $TANDEM_RL_OUTPUT)")
    p.add_argument("--set", dest="overrides", action="append", default=[], type=_key_value,
                   metavar="SECTION.KEY=VALUE", help="override any config field; repeatable")


def _add_cost_args(p: argparse.ArgumentParser) -> None:
    for name in COST_FIELDS:
        p.add_argument(f"--cost.{name}", dest=f"cost_{name}", type=float, metavar="X")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tandem-rl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic world and protocol files")
    _add_config_args(p)
    p.add_argument("--seed", type=int, help="world seed")

    p = sub.add_parser("run", help="pretrain, tandem-train and summarize over repetitions")
    _add_config_args(p)
    _add_cost_args(p)
    p.add_argument("--seed", type=int, help="seed of the first repetition")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--method", choices=["reinforce", *BASELINE_METHODS],
                   help="train only this method (reinforce: all reward models unless --reward)")
    p.add_argument("--reward", choices=[k.value for k in RewardKind],
                   help="reward model for REINFORCE")

    p = sub.add_parser("tdcf", help="EERs and min normalized t-DCF of a score file")
    _add_config_args(p)
    _add_cost_args(p)
    p.add_argument("score_file", type=Path)

    p = sub.add_parser("det", help="DET curve points of a score file as CSV")
    _add_config_args(p)
    p.add_argument("score_file", type=Path)
    p.add_argument("--system", choices=["asv", "cm", "both"], default="both")
    return parser


def _config(args):
    overrides = dict(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides["world.seed" if args.command == "synth" else "seed"] = args.seed
    for name in COST_FIELDS:
        value = getattr(args, f"cost_{name}", None)
        if value is not None:
            overrides[f"cost.{name}"] = value
    if getattr(args, "repetitions", None) is not None:
        overrides["repetitions"] = args.repetitions
    methods = _methods(args)
    if methods:
        overrides["methods"] = methods
    return apply_overrides(load_config(args.config), overrides)


def _methods(args):
    method, reward = getattr(args, "method", None), getattr(args, "reward", None)
    if method in BASELINE_METHODS:
        if reward:
            raise ValueError(f"--reward does not apply to {method}")
        return [method]
    if reward:
        return [f"reinforce-{reward}"]
    if method == "reinforce":
        return list(REWARD_METHODS)
    return None


def cmd_synth(args) -> int:
    config = _config(args)
    out = prepare_output_dir(resolve_output_dir(config, args.output_dir))
    counts = synthesize(config, out)
    for part, n in counts.items():
        print(f"{part}: {n} trials -> {out / f'{part}.protocol.txt'}")
    return 0


def cmd_run(args) -> int:
    config = _config(args)
    out = prepare_output_dir(resolve_output_dir(config, args.output_dir))
    summary = run_experiment(config, out, progress=log.info)
    print(f"{'method':<20} {'dev t-DCF':>18} {'dev rel %':>16} {'eval t-DCF':>18} {'eval rel %':>16}")
    for name, entry in summary["methods"].items():
        if not entry["completed"]:
            print(f"{name:<20} failed")
            continue
        cells = []
        for part in ("dev", "eval"):
            t, r = entry[f"{part}_tdcf"], entry[f"{part}_rel_pct"]
            cells.append(f"{t['mean']:.4f} ({t['std']:.4f})".rjust(18))
            cells.append(f"{r['mean']:+.1f} ({r['std']:.1f})".rjust(16))
        print(f"{name:<20} " + " ".join(cells))
    print(f"summary -> {out / 'summary.json'}")
    for f in summary["failures"]:
        print(f"error: seed {f['seed']}, {f['method']} ({f['stage']}): {f['error']}",
              file=sys.stderr)
    return 1 if summary["partial"] else 0


def _load_score_file(path):
    records = read_scores(path)
    if not records:
        raise ValueError(f"{path}: no score records")
    return score_arrays(records)


def cmd_tdcf(args) -> int:
    config = _config(args)
    out = prepare_output_dir(resolve_output_dir(config, args.output_dir))
    asv, cm, classes = _load_score_file(args.score_file)
    ev = evaluate_scores(asv, cm, classes, config.cost)
    print(f"ASV EER        : {100 * ev.asv_eer:.4f} %  (threshold {ev.asv_eer_threshold:.6g})")
    print(f"CM EER         : {100 * ev.cm_eer:.4f} %  (threshold {ev.cm_eer_threshold:.6g})")
    print(f"min norm t-DCF : {ev.min_tdcf:.4f}")
    print(f"t-DCF thresholds: ASV {ev.tdcf_asv_threshold:.6g}, CM {ev.tdcf_cm_threshold:.6g}")
    report = {
        "score_file": str(args.score_file),
        "trials": {str(c): int((classes == c).sum()) for c in TrialClass},
        "cost": config.cost.as_dict(),
        **{k: json_float(v) for k, v in ev.as_dict().items()},
    }
    path = out / f"{args.score_file.stem}.tdcf.json"
    write_json(path, report)
    print(f"report -> {path}")
    return 0


def det_curves(asv, cm, classes, system: str) -> dict:
    """DET points per system: ASV on target vs nontarget, CM on bona fide vs spoof."""
    bona = classes != TrialClass.SPOOF
    curves = {}
    if system in ("asv", "both"):
        curves["asv"] = det_points(asv[bona], (classes[bona] == TrialClass.TARGET).astype(int))
    if system in ("cm", "both"):
        curves["cm"] = det_points(cm, bona.astype(int))
    return curves


def cmd_det(args) -> int:
    config = _config(args)
    out = prepare_output_dir(resolve_output_dir(config, args.output_dir))
    asv, cm, classes = _load_score_file(args.score_file)
    for name, curve in det_curves(asv, cm, classes, args.system).items():
        path = out / f"{args.score_file.stem}.{name}_det.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["threshold", "p_miss", "p_fa"])
            for row in zip(curve.thresholds, curve.p_miss, curve.p_fa):
                writer.writerow([repr(float(v)) for v in row])
        print(f"{name}: {len(curve.thresholds)} points -> {path}")
    return 0


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "tdcf": cmd_tdcf, "det": cmd_det}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
