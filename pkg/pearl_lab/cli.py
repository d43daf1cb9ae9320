"""Command line entry point: `python -m pearl_lab {train,attack,compare}`."""

from __future__ import annotations

import argparse
import copy
import dataclasses
import logging
from pathlib import Path
from typing import Any

from pearl_lab import autodiff
from pearl_lab.artifacts import write_csv, write_json
from pearl_lab.attack import REPORT_FORMAT, AttackReport, asr_table, compare_reports, run_attack
from pearl_lab.checkpoint import load_checkpoint, load_into_module
from pearl_lab.config import (
    PNetConfig,
    RunConfig,
    apply_override,
    config_from_dict,
    config_hash,
    load_config,
)
from pearl_lab.errors import EXIT_IO, EXIT_OK, PearlError, ShapeError
from pearl_lab.models import LearnerModel, PNetModel
from pearl_lab.plots import plot_asr_vs_delta, plot_worst_vs_shots
from pearl_lab.training import Trainer

logger = logging.getLogger(__name__)


def _deep_update(base: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def resolve_config(args: argparse.Namespace, base: dict[str, Any] | None = None) -> RunConfig:
    """defaults < `base` < --config file < --set overrides < dedicated flags."""
    data = copy.deepcopy(base) if base else {}
    _deep_update(data, load_config(args.config))
    for assignment in args.set or []:
        apply_override(data, assignment)
    if getattr(args, "regime", None):
        data.setdefault("train", {})["regime"] = args.regime
    if getattr(args, "steps", None) is not None:
        data.setdefault("train", {})["total_steps"] = args.steps
    if getattr(args, "shots", None):
        data.setdefault("attack", {})["shots"] = args.shots
    if getattr(args, "samples", None) is not None:
        data.setdefault("attack", {})["samples"] = args.samples
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["output_dir"] = args.out
    if args.deterministic is not None:
        data["deterministic"] = args.deterministic
    return config_from_dict(data)


def run_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    if config.deterministic:
        autodiff.configure_determinism()
    runs = [config]
    if args.seeds:
        runs = [
            dataclasses.replace(config, seed=seed, output_dir=f"{config.output_dir}/seed-{seed}")
            for seed in args.seeds
        ]
    for run in runs:
        trainer = Trainer(run, progress=not args.no_progress)
        summary = trainer.run(resume=args.resume, stop_after=args.stop_after)
        summary["config_hash"] = config_hash(run)
        summary["config"] = run.to_dict()
        summary_path = trainer.out_dir / "run.json"
        write_json(summary_path, summary)
        print(f"Wrote {trainer.loss_log.path}")
        print(f"Wrote {trainer.out_dir / 'learner.json'}")
        if trainer.pnet is not None:
            print(f"Wrote {trainer.out_dir / 'pnet.json'}")
        print(f"Wrote {summary_path}")
    return EXIT_OK


def _load_pnet(stem: str, config: RunConfig) -> PNetModel:
    tensors, meta = load_checkpoint(stem)
    if meta.get("d", config.task.d) != config.task.d:
        raise ShapeError(f"P-Net {stem} was trained for d={meta['d']}, task has d={config.task.d}")
    pnet_cfg = PNetConfig(**meta["model"]) if "model" in meta else config.pnet
    pnet = PNetModel(config.task.d, meta.get("k_max", config.task.k_max), pnet_cfg)
    load_into_module(pnet, tensors)
    return pnet


def run_attack_cmd(args: argparse.Namespace) -> int:
    tensors, meta = load_checkpoint(args.learner)
    config = resolve_config(args, base=meta.get("config"))
    if config.deterministic:
        autodiff.configure_determinism()
    learner = LearnerModel(config.task.d, config.task.k_max, config.learner)
    load_into_module(learner, tensors)
    pnet = _load_pnet(args.pnet, config) if args.pnet and config.attack.neural else None

    regime = args.label or meta.get("regime", config.train.regime)
    report = run_attack(
        learner,
        pnet,
        config,
        regime,
        use_sampled_mu=args.sampled_mu,
        progress=not args.no_progress,
    )
    out_dir = config.output_path() if args.out else config.output_path() / "attack"
    comment = {"format": REPORT_FORMAT, "config": config.to_dict()}
    report_path = report.emit(out_dir / "report.json")
    print(f"Wrote {report_path}")
    write_csv(out_dir / "asr_exhaustive.csv", asr_table(report), comment)
    print(f"Wrote {out_dir / 'asr_exhaustive.csv'}")
    if report.has_neural():
        write_csv(out_dir / "asr_neural.csv", asr_table(report, "neural"), comment)
        print(f"Wrote {out_dir / 'asr_neural.csv'}")
    return EXIT_OK


def run_compare(args: argparse.Namespace) -> int:
    reports = [AttackReport.load(Path(p)) for p in args.reports]
    comparison, asr_vs_delta, asr_vs_shots = compare_reports(reports)
    out_dir = Path(args.out)
    comment = {"format": REPORT_FORMAT, "sources": [str(p) for p in args.reports]}
    tables = {
        "comparison.csv": comparison,
        "asr_vs_delta.csv": asr_vs_delta,
        "asr_vs_shots.csv": asr_vs_shots,
    }
    for name, frame in tables.items():
        rows = frame.astype(object).where(frame.notna(), None).to_dict("records")
        write_csv(out_dir / name, rows, comment)
        print(f"Wrote {out_dir / name}")
    if args.plot:
        for path in (
            plot_asr_vs_delta(asr_vs_delta, out_dir / "asr_vs_delta.png"),
            plot_worst_vs_shots(comparison, out_dir / "worst_vs_shots.png"),
        ):
            print(f"Saved plot: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file.")
    common.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="Override one config value (repeatable), e.g. --set train.beta=0.5",
    )
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="Output directory.")
    common.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="Single-threaded, deterministic kernels, serial attacks.",
    )
    common.add_argument("--no-progress", action="store_true")
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(
        prog="pearl_lab",
        description="Permutation-robust in-context learning on linear tasks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", parents=[common], help="Train one regime")
    p_train.add_argument("--regime", choices=["erm", "erm_cl", "erm_ds", "erm_im", "pearl"])
    p_train.add_argument("--steps", type=int, default=None, help="train.total_steps")
    p_train.add_argument(
        "--seeds", type=int, nargs="+", default=None, help="One run per seed in <out>/seed-<n>."
    )
    p_train.add_argument("--resume", action="store_true")
    p_train.add_argument(
        "--stop-after", type=int, default=None, help="Checkpoint and stop after this many steps."
    )
    p_train.set_defaults(func=run_train)

    p_attack = sub.add_parser("attack", parents=[common], help="Attack a trained learner")
    p_attack.add_argument("--learner", required=True, help="Learner checkpoint stem.")
    p_attack.add_argument("--pnet", default=None, help="P-Net checkpoint stem (neural attack).")
    p_attack.add_argument(
        "--sampled-mu",
        action="store_true",
        help="Estimate the average by sampling orders when n exceeds the enumeration cap.",
    )
    p_attack.add_argument("--shots", type=int, nargs="+", default=None)
    p_attack.add_argument("--samples", type=int, default=None)
    p_attack.add_argument("--label", default=None, help="Regime label in the report.")
    p_attack.set_defaults(func=run_attack_cmd)

    p_cmp = sub.add_parser("compare", help="Compare attack reports")
    p_cmp.add_argument("reports", nargs="+", help="report.json files")
    p_cmp.add_argument("--out", default="comparison")
    p_cmp.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True)
    p_cmp.add_argument("--log-level", default="INFO")
    p_cmp.set_defaults(func=run_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except PearlError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
