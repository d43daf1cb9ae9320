"""Permutation attacks on a trained learner and the metrics built on them.

Errors are normalized squared errors at the query, so higher is worse. A
sample counts as attacked at threshold δ when its relative degradation
(ω - μ) / μ reaches δ, with μ the error averaged over demonstration orders
and ω the error under the attacker's order.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import pandas as pd
import torch
from tqdm import tqdm

from pearl_lab.artifacts import read_json, write_json
from pearl_lab.config import RunConfig, SinkhornConfig
from pearl_lab.errors import ArtifactError, ConfigError, EnumerationCapError, ShapeError
from pearl_lab.models import LearnerModel, PNetModel, learner_forward, propose_permutation
from pearl_lab.permutation import (
    DOUBLY_STOCHASTIC_TOL,
    HardPermutation,
    apply_hard,
    doubly_stochastic_gap,
    random_orders,
    round_to_hard,
)
from pearl_lab.task import (
    PromptInstance,
    TaskSpec,
    held_out_instances,
    normalized_error,
    seeded_generator,
)

logger = logging.getLogger(__name__)

REPORT_FORMAT = "pearl-report-v1"
DELTAS = tuple(round(0.1 * i, 1) for i in range(1, 10))
MU_FLOOR = 1e-12
METRIC_NOTE = (
    "normalized squared error at the query, lower is better; "
    "degradation = (omega - mu) / mu where omega is the attacked error"
)


class PermutationEnumeration:
    """All n! demonstration orders in lexicographic order."""

    def __init__(self, n: int, cap: int = 6):
        if n < 1:
            raise ShapeError(f"cannot enumerate orders of {n} demonstrations")
        if n > cap:
            raise EnumerationCapError(
                f"{n} demonstrations have {math.factorial(n)} orders; exhaustive search "
                f"is capped at n <= {cap}"
            )
        self.n = n

    def __iter__(self) -> Iterator[HardPermutation]:
        for perm in itertools.permutations(range(self.n)):
            yield HardPermutation(perm)

    def __len__(self) -> int:
        return math.factorial(self.n)


@torch.no_grad()
def order_error(learner: LearnerModel, instance: PromptInstance, perm: HardPermutation) -> float:
    """Query error with the demonstrations laid out in `perm` order."""
    order = apply_hard(perm, list(range(instance.n_demos)))
    pred = learner_forward(learner, instance.permuted(order))[-1]
    return float(normalized_error(pred, instance.w, instance.query_x, instance.d))


@dataclass
class ExhaustiveResult:
    mu: float
    worst: float
    best: float
    argmax: HardPermutation
    evaluations: int

    @property
    def omega(self) -> float:
        return self.worst


def exhaustive_attack(
    learner: LearnerModel, instance: PromptInstance, cap: int = 6
) -> ExhaustiveResult:
    perms = list(PermutationEnumeration(instance.n_demos, cap))
    errors = [order_error(learner, instance, p) for p in perms]
    worst = max(errors)
    return ExhaustiveResult(
        mu=math.fsum(errors) / len(errors),
        worst=worst,
        best=min(errors),
        argmax=perms[errors.index(worst)],
        evaluations=len(errors),
    )


@dataclass
class NeuralResult:
    omega: float
    perm: HardPermutation


@torch.no_grad()
def neural_attack(
    learner: LearnerModel,
    pnet: PNetModel,
    instance: PromptInstance,
    cfg: SinkhornConfig,
    rng: torch.Generator | None = None,
) -> NeuralResult:
    """Single attempt: round the P-Net's proposal to a hard order and evaluate it."""
    if pnet.d != instance.d or learner.d != instance.d:
        raise ShapeError(
            f"instance has d={instance.d}, learner d={learner.d}, P-Net d={pnet.d}"
        )
    if instance.n_demos == 1:
        perm = HardPermutation.identity(1)
    else:
        soft = propose_permutation(pnet, instance, cfg, rng)
        gap = doubly_stochastic_gap(soft)
        if gap > DOUBLY_STOCHASTIC_TOL:
            logger.debug("proposal misses the doubly-stochastic tolerance by %.2e", gap)
        perm = round_to_hard(soft)
    return NeuralResult(omega=order_error(learner, instance, perm), perm=perm)


@torch.no_grad()
def sampled_errors(
    learner: LearnerModel, instance: PromptInstance, count: int, rng: torch.Generator | None
) -> list[float]:
    orders = random_orders(count, instance.n_demos, rng)
    return [
        order_error(learner, instance, HardPermutation(tuple(o.tolist()))) for o in orders
    ]


def random_order_error(
    learner: LearnerModel, instance: PromptInstance, rng: torch.Generator | None
) -> float:
    """Error under one uniformly random order (the "random" baseline curve)."""
    return sampled_errors(learner, instance, 1, rng)[0]


def asr(pairs: Sequence[tuple[float, float]], delta: float) -> float:
    """Fraction of (μ, ω) pairs with (ω - μ) / μ >= δ; pairs with μ <= 1e-12 are skipped."""
    kept = [(mu, omega) for mu, omega in pairs if mu > MU_FLOOR]
    if not kept:
        return 0.0
    return sum((omega - mu) / mu >= delta for mu, omega in kept) / len(kept)


def excluded_count(pairs: Sequence[tuple[float, float]]) -> int:
    return sum(mu <= MU_FLOOR for mu, _ in pairs)


@dataclass
class SampleRecord:
    sample_id: int
    shots: int
    mu: float
    worst: float
    best: float
    random: float
    mu_method: str
    evaluations: int
    argmax: list[int]
    omega_neural: float | None = None
    neural_perm: list[int] | None = None


@dataclass
class AttackReport:
    regime: str
    config: dict[str, Any]
    samples: list[SampleRecord] = field(default_factory=list)
    format: str = REPORT_FORMAT
    metric: str = METRIC_NOTE

    @property
    def shots(self) -> list[int]:
        return sorted({s.shots for s in self.samples})

    def for_shots(self, shots: int) -> list[SampleRecord]:
        return [s for s in self.samples if s.shots == shots]

    def pairs(self, shots: int, source: str = "exhaustive") -> list[tuple[float, float]]:
        if source == "exhaustive":
            return [(s.mu, s.worst) for s in self.for_shots(shots)]
        return [(s.mu, s.omega_neural) for s in self.for_shots(shots) if s.omega_neural is not None]

    def has_neural(self) -> bool:
        return any(s.omega_neural is not None for s in self.samples)

    def asr_curves(self) -> dict[str, list[dict[str, Any]]]:
        sources = ["exhaustive"] + (["neural"] if self.has_neural() else [])
        curves = {}
        for source in sources:
            curves[source] = [
                {"shots": shots, "delta": delta, "asr": asr(self.pairs(shots, source), delta)}
                for shots in self.shots
                for delta in DELTAS
            ]
        return curves

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": self.format,
            "regime": self.regime,
            "metric": self.metric,
            "config": self.config,
            "samples": [asdict(s) for s in self.samples],
            "summary": summarize([self]),
            "asr": self.asr_curves(),
            "excluded": {
                str(shots): excluded_count(self.pairs(shots)) for shots in self.shots
            },
            "exhaustive_evaluations": sum(s.evaluations for s in self.samples),
        }

    def emit(self, path: Path) -> Path:
        write_json(path, self.to_dict())
        return path

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AttackReport:
        if data.get("format") != REPORT_FORMAT:
            raise ArtifactError(
                f"report format {data.get('format')!r}, expected {REPORT_FORMAT!r}"
            )
        try:
            samples = [SampleRecord(**s) for s in data["samples"]]
            return cls(regime=data["regime"], config=data["config"], samples=samples)
        except (KeyError, TypeError) as exc:
            raise ArtifactError(f"malformed report: {exc}") from exc

    @classmethod
    def load(cls, path: Path) -> AttackReport:
        return cls.from_dict(read_json(path))


def summarize(reports: Sequence[AttackReport]) -> list[dict[str, Any]]:
    """Avg / worst / best (and random, neural) means per (regime, shots)."""
    rows = []
    for report in reports:
        for shots in report.shots:
            samples = report.for_shots(shots)
            neural = [s.omega_neural for s in samples if s.omega_neural is not None]
            rows.append(
                {
                    "regime": report.regime,
                    "shots": shots,
                    "samples": len(samples),
                    "avg": math.fsum(s.mu for s in samples) / len(samples),
                    "worst": math.fsum(s.worst for s in samples) / len(samples),
                    "best": math.fsum(s.best for s in samples) / len(samples),
                    "random": math.fsum(s.random for s in samples) / len(samples),
                    "neural": math.fsum(neural) / len(neural) if neural else None,
                    "mu_method": samples[0].mu_method,
                }
            )
    return rows


def asr_table(report: AttackReport, source: str = "exhaustive") -> list[dict[str, Any]]:
    """Flat plot rows: regime, shots, delta, asr, avg, worst, best."""
    summary = {row["shots"]: row for row in summarize([report])}
    return [
        {
            "regime": report.regime,
            "shots": point["shots"],
            "delta": point["delta"],
            "asr": point["asr"],
            "avg": summary[point["shots"]]["avg"],
            "worst": summary[point["shots"]]["worst"],
            "best": summary[point["shots"]]["best"],
        }
        for point in report.asr_curves().get(source, [])
    ]


def attack_sample(
    learner: LearnerModel,
    pnet: PNetModel | None,
    instance: PromptInstance,
    sample_id: int,
    config: RunConfig,
    use_sampled_mu: bool = False,
) -> SampleRecord:
    n = instance.n_demos
    seed = config.seed
    cap = config.attack.enumeration_cap
    if n <= cap:
        result = exhaustive_attack(learner, instance, cap)
        mu, worst, best = result.mu, result.worst, result.best
        argmax, evaluations, method = list(result.argmax.perm), result.evaluations, "exact"
    elif use_sampled_mu:
        rng = seeded_generator(seed, "eval-random", n, sample_id, 1)
        errors = sampled_errors(learner, instance, config.attack.sampled_orders, rng)
        mu = math.fsum(errors) / len(errors)
        worst, best = max(errors), min(errors)
        argmax, evaluations, method = [], len(errors), "sampled"
    else:
        raise EnumerationCapError(
            f"{n} demonstrations exceed the enumeration cap {cap}; pass --sampled-mu"
        )
    record = SampleRecord(
        sample_id=sample_id,
        shots=n,
        mu=mu,
        worst=worst,
        best=best,
        random=random_order_error(
            learner, instance, seeded_generator(seed, "eval-random", n, sample_id)
        ),
        mu_method=method,
        evaluations=evaluations,
        argmax=argmax,
    )
    if pnet is not None:
        neural = neural_attack(
            learner,
            pnet,
            instance,
            config.sinkhorn,
            seeded_generator(seed, "eval-noise", n, sample_id),
        )
        record.omega_neural = neural.omega
        record.neural_perm = list(neural.perm.perm)
    return record


def run_attack(
    learner: LearnerModel,
    pnet: PNetModel | None,
    config: RunConfig,
    regime: str,
    use_sampled_mu: bool = False,
    progress: bool = True,
) -> AttackReport:
    """Attack a held-out set at every configured shot count.

    Samples are independent; with several workers they are evaluated in
    threads and collected back in sample-id order.
    """
    spec = TaskSpec.from_config(config.task, config.seed)
    learner.eval()
    if pnet is not None:
        pnet.eval()
    report = AttackReport(regime=regime, config=config.to_dict())
    workers = 1 if config.deterministic else config.attack.workers
    for shots in config.attack.shots:
        if shots > config.task.k_max:
            raise ConfigError(f"attack.shots {shots} exceeds task.k_max {config.task.k_max}")
        instances = held_out_instances(spec, config.attack.samples, shots)

        def one(item: tuple[int, PromptInstance]) -> SampleRecord:
            return attack_sample(learner, pnet, item[1], item[0], config, use_sampled_mu)

        items = list(enumerate(instances))
        desc = f"attack {regime} {shots}-shot"
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                records = list(
                    tqdm(pool.map(one, items), total=len(items), desc=desc, disable=not progress)
                )
        else:
            records = [one(item) for item in tqdm(items, desc=desc, disable=not progress)]
        report.samples.extend(records)
    return report


def _labels(reports: Sequence[AttackReport]) -> list[str]:
    seen: dict[str, int] = {}
    labels = []
    for report in reports:
        seen[report.regime] = seen.get(report.regime, 0) + 1
        count = seen[report.regime]
        labels.append(report.regime if count == 1 else f"{report.regime}#{count}")
    return labels


def compare_reports(
    reports: Sequence[AttackReport],
) -> tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    """Merge reports into (comparison, asr_vs_delta, asr_vs_shots) tables.

    Differences are taken against the first report at the same shot count.
    """
    if len(reports) < 2:
        raise ConfigError("compare needs at least two reports")
    dims = {r.config.get("task", {}).get("d") for r in reports}
    if len(dims) != 1:
        raise ConfigError(f"reports disagree on the task dimension: {sorted(map(str, dims))}")

    frames = []
    delta_rows = []
    for label, report in zip(_labels(reports), reports):
        summary = pd.DataFrame(summarize([report]))
        summary.insert(0, "label", label)
        frames.append(summary)
        curves = report.asr_curves()
        neural = {(p["shots"], p["delta"]): p["asr"] for p in curves.get("neural", [])}
        for point in curves["exhaustive"]:
            delta_rows.append(
                {
                    "label": label,
                    "shots": point["shots"],
                    "delta": point["delta"],
                    "asr": point["asr"],
                    "asr_neural": neural.get((point["shots"], point["delta"])),
                }
            )

    comparison = pd.concat(frames, ignore_index=True)
    comparison["gap"] = comparison["worst"] - comparison["avg"]
    baseline = comparison[comparison["label"] == comparison["label"].iloc[0]].set_index("shots")
    for column in ("avg", "worst", "best", "gap"):
        comparison[f"diff_{column}"] = comparison[column] - comparison["shots"].map(
            baseline[column]
        )

    asr_vs_delta = pd.DataFrame(delta_rows)
    asr_vs_shots = asr_vs_delta[asr_vs_delta["delta"] == 0.5].reset_index(drop=True)
    return comparison, asr_vs_delta, asr_vs_shots
