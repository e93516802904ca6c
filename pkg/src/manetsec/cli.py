"""Command-line harness: scenario runs, the security-goal suite, and the
detector's train/classify/evaluate file pipeline.

Exit codes: 0 success, 1 configuration or input error, 2 property-suite
failure. Reproducibility is mandatory: `simulate` and `train` refuse to run
without a seed (flag or config file).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import esom
from .adversary import run_security_suite
from .crypto import CipherSuite
from .sim import ScenarioError, parse_scenario, run_scenario

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_SUITE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="manetsec",
        description="group key agreement, eSOM detection and response for simulated ad hoc networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scenario and write metrics + event trace")
    p.add_argument("--config", required=True, help="scenario config file")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("attack-suite", help="run the security-goal property suite")
    p.add_argument("--config", required=True, help="scenario config file (cipher/key width/seed)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default=None, help="optional directory for the verdict table")
    p.add_argument("--cycles", type=int, default=1000,
                   help="leave/join cycles, two epochs each (default 1000)")
    p.add_argument("--replay-trials", type=int, default=100)
    p.add_argument("--weaken-nonce-check", action="store_true",
                   help="TEST ONLY: disable replay defenses to prove the suite catches it")

    p = sub.add_parser("train", help="train a detector model from a labeled CSV")
    p.add_argument("--data", required=True, help="CSV with 7 feature columns + label")
    p.add_argument("--model", required=True, help="output model file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--rows", type=int, default=50)
    p.add_argument("--cols", type=int, default=80)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--hill-quantile", type=float, default=0.85)

    p = sub.add_parser("classify", help="classify a CSV against a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="CSV with 7 feature columns + label")
    p.add_argument("--out", required=True, help="verdict CSV")

    p = sub.add_parser("evaluate", help="score a verdict CSV against ground truth")
    p.add_argument("--verdicts", required=True)
    p.add_argument("--truth", required=True, help="labeled CSV the verdicts were made on")
    p.add_argument("--out", default=None, help="optional metrics CSV")
    p.add_argument("--unclassified", choices=("exclude", "as_normal", "as_attack"),
                   default="exclude")
    return parser


def cmd_simulate(args) -> int:
    try:
        config = parse_scenario(args.config)
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    seed = args.seed if args.seed is not None else config.seed
    if seed is None:
        print("error: simulate needs --seed or a seed in the config", file=sys.stderr)
        return EXIT_INPUT
    try:
        report = run_scenario(config, seed)
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "events.log").write_text(report.trace_text())
    print(f"wrote {out / 'metrics.csv'} ({len(report.rows)} rows) and {out / 'events.log'}")
    return EXIT_OK


def cmd_attack_suite(args) -> int:
    try:
        config = parse_scenario(args.config)
        suite = CipherSuite(config.cipher, config.hash_name, config.key_bits)
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ScenarioError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    seed = args.seed if args.seed is not None else config.seed
    if seed is None:
        print("error: attack-suite needs --seed or a seed in the config", file=sys.stderr)
        return EXIT_INPUT
    report = run_security_suite(seed, suite=suite, cycles=args.cycles,
                                replay_trials=args.replay_trials,
                                weaken_nonce_check=args.weaken_nonce_check)
    lines = [
        f"epochs                {report.epochs}",
        f"transcript bytes      {report.transcript_bytes}",
        "",
        f"key secrecy           {'PASS' if report.verdicts()['key_secrecy'] else 'FAIL'}"
        f"  (cleartext secret hits: {report.transcript_hits})",
        f"replay resistance     {'PASS' if report.verdicts()['replay_resistance'] else 'FAIL'}"
        f"  (state changes: {report.replay_failures}/{report.replay_trials})",
        f"forward secrecy       {'PASS' if report.verdicts()['forward_secrecy'] else 'FAIL'}"
        f"  (leaver breaks: {report.leaver_breaks}/{report.leaver_trials})",
        f"backward secrecy      {'PASS' if report.verdicts()['backward_secrecy'] else 'FAIL'}"
        f"  (joiner breaks: {report.joiner_breaks}/{report.joiner_trials})",
    ]
    table = "\n".join(lines) + "\n"
    print(table, end="")
    print(f"elapsed seconds       {report.elapsed:.1f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        # the written table carries no timing, so reruns are byte-identical
        (out / "attack_suite.txt").write_text(table)
    return EXIT_OK if report.all_passed() else EXIT_SUITE


def cmd_train(args) -> int:
    if args.seed is None:
        print("error: train needs --seed (reproducibility is mandatory)", file=sys.stderr)
        return EXIT_INPUT
    try:
        data, labels = esom.read_dataset_csv(args.data)
    except OSError as e:
        print(f"error: cannot read data: {e}", file=sys.stderr)
        return EXIT_INPUT
    except esom.DatasetError as e:
        print(f"error: {args.data}: {e}", file=sys.stderr)
        return EXIT_INPUT
    config = esom.SomConfig(rows=args.rows, cols=args.cols, epochs=args.epochs,
                            hill_quantile=args.hill_quantile)
    try:
        config.validate()
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0x50D]))
    model = esom.fit_detector(data, labels, config, rng)
    esom.save_model(args.model, model)
    print(f"wrote {args.model} ({config.rows}x{config.cols}, {len(data)} samples)")
    return EXIT_OK


def cmd_classify(args) -> int:
    try:
        model = esom.load_model(args.model)
        data, _ = esom.read_dataset_csv(args.data)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except esom.DatasetError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    normalized = esom.apply_normalization(model.stats, data)
    results = esom.classify_batch(model.grid, model.labeling, normalized)
    esom.write_verdicts_csv(args.out, results)
    print(f"wrote {args.out} ({len(results)} verdicts)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        verdicts = esom.read_verdicts_csv(args.verdicts)
        _, labels = esom.read_dataset_csv(args.truth)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except esom.DatasetError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    if len(verdicts) != len(labels):
        print(f"error: {len(verdicts)} verdicts vs {len(labels)} truth rows", file=sys.stderr)
        return EXIT_INPUT
    truth = [esom.VERDICT_ATTACK if l == esom.LABEL_ATTACK else esom.VERDICT_NORMAL
             for l in labels]
    report = esom.evaluate(verdicts, truth, unclassified=args.unclassified)
    det = "" if report.detection_rate is None else f"{report.detection_rate:.6g}"
    fa = "" if report.false_alarm_rate is None else f"{report.false_alarm_rate:.6g}"
    text = ("detection_rate,false_alarm_rate,unclassified_fraction\n"
            f"{det},{fa},{report.unclassified_fraction:.6g}\n")
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "simulate": cmd_simulate,
        "attack-suite": cmd_attack_suite,
        "train": cmd_train,
        "classify": cmd_classify,
        "evaluate": cmd_evaluate,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
