#!/usr/bin/env python3
"""Train ERM+CL and PEARL learners on several seeds, attack each one at
3/4/5 shots and check that the adversarially trained learner holds up better.

Every step shells out to `python -m pearl_lab`, so the artefacts are the same
ones a manual run would produce. Expect a couple of CPU hours per regime at
the default 20k steps; pass --steps for a quick smoke run.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from pathlib import Path

import pandas as pd

REPO = Path(__file__).resolve().parents[1]
REGIMES = ("erm_cl", "pearl")
OUTPUT_ROOT_ENV = "PEARL_OUTPUT_ROOT"


def pearl_lab(*args: str) -> None:
    cmd = [sys.executable, "-m", "pearl_lab", *args]
    print("Running:", " ".join(cmd[2:]))
    subprocess.check_call(cmd, cwd=REPO)


def train(regime: str, seeds: list[int], steps: int, outdir: Path) -> None:
    pearl_lab(
        "train",
        "--regime",
        regime,
        "--steps",
        str(steps),
        "--seeds",
        *map(str, seeds),
        "--out",
        str(outdir / regime),
        "--no-progress",
    )


def attack(regime: str, seed: int, samples: int, outdir: Path) -> Path:
    run = outdir / regime / f"seed-{seed}"
    args = [
        "attack",
        "--learner",
        str(run / "learner"),
        "--samples",
        str(samples),
        "--shots",
        "3",
        "4",
        "5",
        "--out",
        str(run / "attack"),
        "--no-progress",
    ]
    if (run / "pnet.json").exists():
        args += ["--pnet", str(run / "pnet")]
    elif regime == "pearl":
        raise FileNotFoundError(f"no P-Net checkpoint at {run / 'pnet'}")
    pearl_lab(*args)
    return run / "attack" / "report.json"


def check(reports: dict[tuple[str, int], Path], seeds: list[int]) -> dict:
    rows = []
    for (regime, seed), path in reports.items():
        report = json.loads(path.read_text())
        asr = {p["shots"]: p["asr"] for p in report["asr"]["exhaustive"] if p["delta"] == 0.5}
        for row in report["summary"]:
            rows.append(
                {
                    "regime": regime,
                    "seed": seed,
                    "shots": row["shots"],
                    "avg": row["avg"],
                    "worst": row["worst"],
                    "gap": row["worst"] - row["avg"],
                    "asr_0.5": asr[row["shots"]],
                }
            )
    df = pd.DataFrame(rows)
    wide = df.pivot_table(
        index=["shots", "seed"], columns="regime", values=["worst", "gap", "asr_0.5"]
    )
    verdict = {}
    for shots, block in wide.groupby(level="shots"):
        wins = int((block[("worst", "pearl")] < block[("worst", "erm_cl")]).sum())
        gap = block["gap"].mean()
        asr = block["asr_0.5"].mean()
        verdict[int(shots)] = {
            "worst_wins": f"{wins}/{len(seeds)}",
            "worst_ok": wins >= 2 * len(seeds) / 3,
            "gap_pearl": float(gap["pearl"]),
            "gap_erm_cl": float(gap["erm_cl"]),
            "gap_ok": bool(gap["pearl"] < gap["erm_cl"]),
            "asr_pearl": float(asr["pearl"]),
            "asr_erm_cl": float(asr["erm_cl"]),
            "asr_ok": bool(asr["pearl"] < asr["erm_cl"]),
        }
    return verdict


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--outdir", default="runs/desk")
    p.add_argument("--skip-train", action="store_true")
    return p.parse_args(argv)


def main(argv: list[str] | None = None) -> Path:
    args = parse_args(argv)
    outdir = Path(args.outdir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not outdir.is_absolute():
        outdir = Path(root) / outdir
    # subprocesses run from the repo root, so every path handed to them is absolute
    outdir = outdir.resolve()
    if not args.skip_train:
        for regime in REGIMES:
            train(regime, args.seeds, args.steps, outdir)

    reports = {
        (regime, seed): attack(regime, seed, args.samples, outdir)
        for regime in REGIMES
        for seed in args.seeds
    }
    for seed in args.seeds:
        pearl_lab(
            "compare",
            str(reports[("erm_cl", seed)]),
            str(reports[("pearl", seed)]),
            "--out",
            str(outdir / "compare" / f"seed-{seed}"),
        )

    verdict = check(reports, args.seeds)
    out = outdir / "acceptance.json"
    out.write_text(json.dumps(verdict, indent=2, sort_keys=True) + "\n")
    for shots, v in sorted(verdict.items()):
        print(
            f"{shots}-shot: PEARL lower worst on {v['worst_wins']} seeds, "
            f"gap {v['gap_pearl']:.3f} vs {v['gap_erm_cl']:.3f}, "
            f"ASR@0.5 {v['asr_pearl']:.2f} vs {v['asr_erm_cl']:.2f}"
        )
    print(f"Wrote {out}")
    return out


if __name__ == "__main__":
    main()
