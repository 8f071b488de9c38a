"""Command-line entry point.

Subcommands: ``train`` (training only, saving checkpoints and round logs),
``attack`` (training plus the attack suite), ``boundary`` (training plus
boundary analysis), ``sweep`` (one run per axis value), and ``report``
(re-emit CSVs from a saved metrics JSON). Experiments come either from a
JSON config file (--config) or a built-in scenario preset (--scenario).
Output directory precedence: --out, then $PFEDDEF_OUT, then the config's
out_dir. Exit code 0 on success, 1 with a diagnostic on failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .harness import (
    SCENARIOS,
    SWEEP_AXES,
    ConfigError,
    ExperimentConfig,
    build_scenario,
    emit_report,
    load_records,
    run_experiment,
    run_sweep,
)

ENV_OUT = "PFEDDEF_OUT"


def _add_common(parser):
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", help="experiment config JSON file")
    source.add_argument(
        "--scenario", choices=sorted(SCENARIOS), help="built-in scenario preset"
    )
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--workers", type=int, default=1, help="parallel sweep workers")


def _load_config(args) -> ExperimentConfig:
    if args.config:
        with open(args.config) as handle:
            try:
                raw = json.load(handle)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
        cfg = ExperimentConfig.from_dict(raw)
    else:
        cfg = build_scenario(args.scenario)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out_dir = args.out or os.environ.get(ENV_OUT) or cfg.out_dir
    if out_dir is None:
        raise ConfigError("out_dir: pass --out, set $PFEDDEF_OUT, or set out_dir in the config")
    return replace(cfg, out_dir=out_dir)


def _strip_attacks(cfg: ExperimentConfig) -> ExperimentConfig:
    return replace(
        cfg,
        attacks=replace(cfg.attacks, internal=False, blackbox=False, ensemble_sizes=()),
    )


def _strip_boundary(cfg: ExperimentConfig) -> ExperimentConfig:
    return replace(cfg, boundary=replace(cfg.boundary, enabled=False))


def _cmd_train(args) -> int:
    cfg = _strip_boundary(_strip_attacks(_load_config(args)))
    records = run_experiment(cfg, checkpoint_dir=cfg.out_dir)
    emit_report(records, cfg.out_dir)
    print(f"trained {len(cfg.arms)} arm(s); outputs in {cfg.out_dir}")
    return 0


def _cmd_attack(args) -> int:
    cfg = _strip_boundary(_load_config(args))
    records = run_experiment(cfg)
    emit_report(records, cfg.out_dir)
    for record in records:
        print(
            f"{record.arm}: test_acc={record.test_acc_mean:.3f}"
            + (
                f" internal_adv_acc={record.internal_adv_acc:.3f}"
                if record.internal_adv_acc is not None
                else ""
            )
        )
    return 0


def _cmd_boundary(args) -> int:
    cfg = _strip_attacks(_load_config(args))
    cfg = replace(cfg, boundary=replace(cfg.boundary, enabled=True))
    records = run_experiment(cfg)
    emit_report(records, cfg.out_dir)
    for record in records:
        print(
            f"{record.arm}: boundary_gap_leg={record.boundary_gap_leg}"
            f" boundary_gap_adv={record.boundary_gap_adv}"
        )
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"values: expected comma-separated numbers ({exc})") from exc
    if not values:
        raise ConfigError("values: at least one value required")
    records = run_sweep(cfg, args.axis, values, workers=args.workers)
    emit_report(records, cfg.out_dir)
    print(f"swept {args.axis} over {values}; outputs in {cfg.out_dir}")
    return 0


def _cmd_report(args) -> int:
    records = load_records(args.records)
    out_dir = args.out or os.environ.get(ENV_OUT)
    if out_dir is None:
        raise ConfigError("out_dir: pass --out or set $PFEDDEF_OUT")
    paths = emit_report(records, out_dir)
    print("\n".join(f"{kind}: {path}" for kind, path in sorted(paths.items())))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfeddef",
        description="Personalized federated learning under internal evasion attacks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run training arms; save checkpoints and metrics")
    _add_common(train)
    train.set_defaults(func=_cmd_train)

    attack = sub.add_parser("attack", help="run training plus the configured attack suite")
    _add_common(attack)
    attack.set_defaults(func=_cmd_attack)

    boundary = sub.add_parser("boundary", help="run training plus boundary analysis")
    _add_common(boundary)
    boundary.set_defaults(func=_cmd_boundary)

    sweep = sub.add_parser("sweep", help="run the experiment across a parameter axis")
    _add_common(sweep)
    axes = sorted(SWEEP_AXES) + ["G", "K", "Q"]
    sweep.add_argument("--axis", required=True, choices=axes)
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.set_defaults(func=_cmd_sweep)

    report = sub.add_parser("report", help="re-emit CSV reports from a metrics JSON")
    report.add_argument("--records", required=True, help="metrics JSON file")
    report.add_argument("--out", help="output directory")
    report.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
