"""Training regimes: ERM, curriculum ERM, shuffled ERM, instance mixup and the
adversarial min-max loop against the permutation proposer.

Every parameter update goes through an `autodiff.Graph`: the closure builds
the loss, `backward` returns gradients for exactly one player, and
`adamw_step` applies them. The other player's parameters are never leaves of
that graph, so they cannot move during the phase.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import torch
from torch import Tensor, nn
from tqdm import tqdm

from pearl_lab import autodiff
from pearl_lab.artifacts import JsonlLog
from pearl_lab.checkpoint import (
    checkpoint_exists,
    load_checkpoint,
    load_into_module,
    save_checkpoint,
    save_module,
)
from pearl_lab.config import RunConfig, SinkhornConfig, TrainConfig, config_hash
from pearl_lab.errors import ArtifactError, ConfigError, EnumerationCapError, NumericError
from pearl_lab.models import (
    LearnerModel,
    PNetModel,
    build_learner,
    build_pnet,
    model_meta,
    propose_permutation,
)
from pearl_lab.permutation import all_permutations, apply_soft, entropy, random_orders
from pearl_lab.task import (
    PromptBatch,
    TaskSpec,
    TaskStream,
    icl_loss,
    normalized_error,
    sample_batch,
    seeded_generator,
)

logger = logging.getLogger(__name__)

LOSS_LOG_FORMAT = "pearl-losslog-v1"


@dataclass
class LossRecord:
    step: int
    regime: str
    phase: str
    shots: int
    l_lm: float
    l_ent: float
    objective: float
    grad_norm: float

    def __post_init__(self) -> None:
        if self.l_ent < 0:
            raise NumericError(f"entropy term must be >= 0, got {self.l_ent}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _mix_targets(ys: Tensor, perms: Tensor) -> Tensor:
    n = ys.shape[1] - 1
    if perms.ndim == 2:
        perms = perms.expand(ys.shape[0], n, n)
    return torch.cat([apply_soft(perms, ys[:, :n]), ys[:, n:]], dim=1)


def batch_loss(learner: LearnerModel, batch: PromptBatch, perms: Tensor | None = None) -> Tensor:
    """Mean icl_loss over the batch. Soft permutations move each demonstration's
    label together with its input; the query target stays put."""
    preds = learner(batch.xs, batch.ys, perms)
    targets = batch.ys if perms is None else _mix_targets(batch.ys, perms)
    return icl_loss(preds, targets).mean()


def learner_step(
    learner: LearnerModel,
    batch: PromptBatch,
    optimizer: torch.optim.Optimizer,
    perms: Tensor | None = None,
) -> tuple[float, float]:
    """One AdamW step on θ; returns (pre-update loss, gradient norm)."""
    graph = autodiff.Graph.over(lambda: batch_loss(learner, batch, perms), learner)
    loss = autodiff.forward(graph)
    grads = autodiff.backward(graph)
    autodiff.adamw_step(optimizer, graph.params, grads)
    return float(loss), autodiff.grad_norm(grads)


def erm_step(
    learner: LearnerModel,
    batch: PromptBatch,
    optimizer: torch.optim.Optimizer,
    step: int = 0,
    regime: str = "erm",
) -> LossRecord:
    if batch.size < 1:
        raise ConfigError("erm_step needs a non-empty batch")
    loss, norm = learner_step(learner, batch, optimizer)
    return LossRecord(step, regime, "learner", batch.n_demos, loss, 0.0, loss, norm)


class CurriculumSchedule:
    """Shot count for a step: starts at `start`, one more shot every
    total_steps / (k_max - start + 1) steps, capped at k_max."""

    def __init__(self, k_max: int, total_steps: int, start: int = 1):
        if not 1 <= start <= k_max:
            raise ConfigError(f"curriculum start {start} outside [1, {k_max}]")
        self.k_max = k_max
        self.total_steps = total_steps
        self.start = start

    def __call__(self, step: int) -> int:
        span = self.k_max - self.start + 1
        return min(self.k_max, self.start + step * span // self.total_steps)

    def __repr__(self) -> str:
        return (
            f"CurriculumSchedule(start={self.start}, k_max={self.k_max}, "
            f"total_steps={self.total_steps})"
        )


def erm_ds_step(
    learner: LearnerModel,
    batch: PromptBatch,
    optimizer: torch.optim.Optimizer,
    rng: torch.Generator | None,
    step: int = 0,
    regime: str = "erm_ds",
) -> LossRecord:
    orders = random_orders(batch.size, batch.n_demos, rng)
    return erm_step(learner, batch.reorder(orders), optimizer, step, regime)


def erm_im_step(
    learner: LearnerModel,
    batch: PromptBatch,
    optimizer: torch.optim.Optimizer,
    rng: torch.Generator | None,
    copies: int,
    exhaustive: bool = False,
    step: int = 0,
    regime: str = "erm_im",
) -> LossRecord:
    """Average the loss over several demonstration orders, then update once.

    With `exhaustive` every one of the n! orders is a copy and `copies` is
    ignored.
    """
    if exhaustive:
        orders = [
            torch.tensor(p.perm).expand(batch.size, -1) for p in all_permutations(batch.n_demos)
        ]
    else:
        if copies < 1:
            raise ConfigError(f"copies must be >= 1, got {copies}")
        orders = [random_orders(batch.size, batch.n_demos, rng) for _ in range(copies)]
    views = [batch.reorder(o) for o in orders]

    def mixed_loss() -> Tensor:
        return torch.stack([batch_loss(learner, v) for v in views]).mean()

    graph = autodiff.Graph.over(mixed_loss, learner)
    loss = float(autodiff.forward(graph))
    grads = autodiff.backward(graph)
    autodiff.adamw_step(optimizer, graph.params, grads)
    return LossRecord(
        step, regime, "learner", batch.n_demos, loss, 0.0, loss, autodiff.grad_norm(grads)
    )


def adversary_step(
    learner: LearnerModel,
    pnet: PNetModel,
    batch: PromptBatch,
    sinkhorn: SinkhornConfig,
    beta: float,
    optimizer: torch.optim.Optimizer,
    rng: torch.Generator | None = None,
    noise: Tensor | None = None,
    step: int = 0,
) -> LossRecord:
    """Ascend φ on L_lm - β·L_ent; θ is read but not differentiated."""
    parts: dict[str, Tensor] = {}

    def negated_objective() -> Tensor:
        perms = propose_permutation(pnet, batch, sinkhorn, rng, noise)
        parts["l_lm"] = batch_loss(learner, batch, perms)
        parts["l_ent"] = entropy(perms, sinkhorn.epsilon).mean()
        return -(parts["l_lm"] - beta * parts["l_ent"])

    graph = autodiff.Graph.over(negated_objective, pnet)
    objective = -float(autodiff.forward(graph))
    grads = autodiff.backward(graph)
    autodiff.adamw_step(optimizer, graph.params, grads)
    return LossRecord(
        step,
        "pearl",
        "adversary",
        batch.n_demos,
        float(parts["l_lm"]),
        max(float(parts["l_ent"]), 0.0),
        objective,
        autodiff.grad_norm(grads),
    )


def pearl_round(
    learner: LearnerModel,
    pnet: PNetModel,
    stream: TaskStream,
    step: int,
    shots: int,
    cfg: TrainConfig,
    sinkhorn: SinkhornConfig,
    learner_opt: torch.optim.Optimizer,
    pnet_opt: torch.optim.Optimizer,
    identity_permutations: bool = False,
) -> list[LossRecord]:
    """m adversary steps on fresh batches, then one learner step on another
    fresh batch under freshly proposed (detached) permutations.

    Batches come from slots 0..m of `step`; Gumbel noise is redrawn for
    every proposal from the `noise` stream.
    """
    if shots < 2:
        raise ConfigError(f"pearl_round needs at least 2 shots, got {shots}")
    seed = stream.spec.seed
    records = []
    for inner in range(cfg.inner_steps):
        batch = stream.batch(step, shots, slot=inner)
        rng = seeded_generator(seed, "noise", step, inner)
        records.append(
            adversary_step(learner, pnet, batch, sinkhorn, cfg.beta, pnet_opt, rng, step=step)
        )

    batch = stream.batch(step, shots, slot=cfg.inner_steps)
    if identity_permutations:
        perms = torch.eye(shots).expand(batch.size, shots, shots)
    else:
        with torch.no_grad():
            rng = seeded_generator(seed, "noise", step, cfg.inner_steps)
            perms = propose_permutation(pnet, batch, sinkhorn, rng)
    l_ent = float(entropy(perms, sinkhorn.epsilon).mean())
    loss, norm = learner_step(learner, batch, learner_opt, perms)
    records.append(
        LossRecord(
            step, "pearl", "learner", shots, loss, max(l_ent, 0.0), loss - cfg.beta * l_ent, norm
        )
    )
    return records


@torch.no_grad()
def dro_worstcase_estimate(
    learner: LearnerModel, batch: PromptBatch, cap: int = 6
) -> float:
    """Worst mean loss over one shared reordering of every prompt in the batch.

    The supremum over the convex hull of permuted distributions is attained
    at a vertex, so enumerating pure permutations is exact.
    """
    n = batch.n_demos
    if n > cap:
        raise EnumerationCapError(
            f"{n} demonstrations means {math.factorial(n)} orders (cap n <= {cap})"
        )
    worst = -math.inf
    for perm in all_permutations(n):
        orders = torch.tensor(perm.perm).expand(batch.size, -1)
        worst = max(worst, float(batch_loss(learner, batch.reorder(orders))))
    return worst


class CollapseDetector:
    """Warns when the adversary's permutations have gone hard (mean L_ent
    below `threshold` over `window` steps) while L_lm is flat."""

    def __init__(self, window: int = 100, threshold: float = 0.01, flat_tol: float = 0.05):
        self.window = window
        self.threshold = threshold
        self.flat_tol = flat_tol
        self.ent: deque[float] = deque(maxlen=window)
        self.lm: deque[float] = deque(maxlen=window)

    def update(self, l_ent: float, l_lm: float) -> bool:
        self.ent.append(l_ent)
        self.lm.append(l_lm)
        if len(self.ent) < self.window:
            return False
        mean_lm = sum(self.lm) / self.window
        flat = (max(self.lm) - min(self.lm)) <= self.flat_tol * max(abs(mean_lm), 1e-12)
        if sum(self.ent) / self.window < self.threshold and flat:
            logger.warning(
                "adversary collapsed: mean L_ent %.2e over %d steps with flat L_lm %.4f",
                sum(self.ent) / self.window,
                self.window,
                mean_lm,
            )
            self.ent.clear()
            self.lm.clear()
            return True
        return False


class Trainer:
    """Runs one regime end to end with checkpoints, resume and validation."""

    def __init__(self, config: RunConfig, out_dir: Path | None = None, progress: bool = True):
        config.validate()
        self.config = config
        self.train_cfg = config.train
        self.out_dir = Path(out_dir) if out_dir is not None else config.output_path()
        self.progress = progress
        self.regime = config.train.regime
        self.spec = TaskSpec.from_config(config.task, config.seed)
        self.stream = TaskStream(self.spec, config.train.batch_size)
        self.schedule = (
            CurriculumSchedule(
                config.task.k_max, config.train.total_steps, config.train.curriculum_start
            )
            if config.train.curriculum_enabled()
            else None
        )

        self.learner = build_learner(config.task, config.learner, config.seed)
        self.learner_opt = autodiff.build_adamw(
            self.learner.parameters(), config.train.eta_theta, config.train.weight_decay_theta
        )
        self.pnet: PNetModel | None = None
        self.pnet_opt: torch.optim.Optimizer | None = None
        if self.regime == "pearl":
            self.pnet = build_pnet(config.task, config.pnet, config.seed)
            self.pnet_opt = autodiff.build_adamw(
                self.pnet.parameters(), config.train.eta_phi, config.train.weight_decay_phi
            )

        self.loss_log = JsonlLog(self.out_dir / "loss_log.jsonl")
        self.valid_log = JsonlLog(self.out_dir / "valid_log.jsonl")
        self.collapse = CollapseDetector()
        self.hash = config_hash(config)
        self.step = 0
        self.best_error = math.inf

    def shots(self, step: int) -> int:
        return self.schedule(step) if self.schedule is not None else self.config.task.k_max

    def train_step(self, step: int) -> list[LossRecord]:
        shots = self.shots(step)
        regime = self.regime
        if regime == "pearl" and shots >= 2:
            return pearl_round(
                self.learner,
                self.pnet,
                self.stream,
                step,
                shots,
                self.train_cfg,
                self.config.sinkhorn,
                self.learner_opt,
                self.pnet_opt,
            )
        batch = self.stream.batch(step, shots)
        if regime in ("erm", "erm_cl"):
            return [erm_step(self.learner, batch, self.learner_opt, step, regime)]
        if regime == "erm_ds":
            rng = seeded_generator(self.config.seed, "shuffle", step)
            return [erm_ds_step(self.learner, batch, self.learner_opt, rng, step)]
        if regime == "erm_im":
            rng = seeded_generator(self.config.seed, "shuffle", step)
            return [
                erm_im_step(
                    self.learner,
                    batch,
                    self.learner_opt,
                    rng,
                    self.train_cfg.im_copies,
                    step=step,
                )
            ]
        # pearl below two shots: nothing to permute
        return [erm_step(self.learner, batch, self.learner_opt, step, "pearl")]

    def run(self, resume: bool = False, stop_after: int | None = None) -> dict[str, Any]:
        if resume:
            self.restore()
        else:
            self.loss_log.start({"format": LOSS_LOG_FORMAT, "config": self.config.to_dict()})
            if self.train_cfg.eval_every:
                self.valid_log.start({"format": LOSS_LOG_FORMAT, "config": self.config.to_dict()})

        total = self.train_cfg.total_steps
        last: LossRecord | None = None
        steps = range(self.step, total)
        for step in tqdm(steps, desc=self.regime, disable=not self.progress):
            records = self.train_step(step)
            for record in records:
                self.loss_log.append(record.to_dict())
                if record.phase == "adversary":
                    self.collapse.update(record.l_ent, record.l_lm)
            last = records[-1]
            self.step = step + 1

            if self.train_cfg.eval_every and self.step % self.train_cfg.eval_every == 0:
                self.validate()
            interrupted = stop_after is not None and self.step >= stop_after
            at_checkpoint = self.step % self.train_cfg.checkpoint_every == 0
            if at_checkpoint or self.step == total or interrupted:
                self.save()
            if interrupted:
                logger.info("stopping after step %d of %d", self.step, total)
                break

        return {
            "regime": self.regime,
            "steps": self.step,
            "final_l_lm": last.l_lm if last is not None else None,
            "best_valid_error": None if math.isinf(self.best_error) else self.best_error,
            "out_dir": str(self.out_dir),
        }

    @torch.no_grad()
    def validation_error(self) -> float:
        """Mean normalized query error on held-out functions at k_max shots."""
        spec = self.spec
        errors = []
        for j in range(self.train_cfg.eval_batches):
            rng = seeded_generator(self.config.seed, "valid", j)
            batch = sample_batch(spec, self.train_cfg.batch_size, spec.k_max, rng)
            preds = self.learner(batch.xs, batch.ys)[:, -1]
            errors.append(normalized_error(preds, batch.w, batch.query_x, spec.d))
        return float(torch.cat(errors).mean())

    def validate(self) -> float:
        error = self.validation_error()
        self.valid_log.append(
            {"step": self.step, "shots": self.spec.k_max, "normalized_error": error}
        )
        if error < self.best_error:
            self.best_error = error
            save_module(self.out_dir / "learner_best", self.learner, self._meta("learner"))
            logger.info("step %d: new best validation error %.4f", self.step, error)
        return error

    def _meta(self, kind: str) -> dict[str, Any]:
        cfg = self.config.learner if kind == "learner" else self.config.pnet
        meta = model_meta(kind, self.config.task, cfg)
        meta.update(
            step=self.step,
            regime=self.regime,
            config_hash=self.hash,
            config=self.config.to_dict(),
            best_valid_error=None if math.isinf(self.best_error) else self.best_error,
        )
        return meta

    def save(self) -> None:
        out = self.out_dir
        save_module(out / "learner", self.learner, self._meta("learner"))
        save_checkpoint(
            out / "learner_optim",
            autodiff.optimizer_tensors(self.learner_opt, dict(self.learner.named_parameters())),
            {"step": self.step, "config_hash": self.hash},
        )
        if self.pnet is not None:
            save_module(out / "pnet", self.pnet, self._meta("pnet"))
            save_checkpoint(
                out / "pnet_optim",
                autodiff.optimizer_tensors(self.pnet_opt, dict(self.pnet.named_parameters())),
                {"step": self.step, "config_hash": self.hash},
            )
        logger.debug("checkpoint at step %d in %s", self.step, out)

    def _restore_player(
        self, name: str, module: nn.Module, optimizer: torch.optim.Optimizer
    ) -> int:
        tensors, meta = load_checkpoint(self.out_dir / name)
        if meta.get("config_hash") != self.hash:
            raise ConfigError(
                f"cannot resume {self.out_dir}: config hash {meta.get('config_hash')} "
                f"differs from {self.hash}"
            )
        load_into_module(module, tensors)
        optim_tensors, _ = load_checkpoint(self.out_dir / f"{name}_optim")
        autodiff.load_optimizer_tensors(optimizer, dict(module.named_parameters()), optim_tensors)
        if meta.get("best_valid_error") is not None:
            self.best_error = meta["best_valid_error"]
        return int(meta["step"])

    def restore(self) -> None:
        if not checkpoint_exists(self.out_dir / "learner"):
            raise ArtifactError(f"nothing to resume in {self.out_dir}")
        step = self._restore_player("learner", self.learner, self.learner_opt)
        if self.pnet is not None:
            pnet_step = self._restore_player("pnet", self.pnet, self.pnet_opt)
            if pnet_step != step:
                raise ArtifactError(f"learner at step {step} but P-Net at step {pnet_step}")
        self.step = step
        dropped = self.loss_log.truncate_from(step)
        if self.valid_log.path.exists():
            self.valid_log.truncate_from(step + 1)
        if dropped:
            logger.warning("resume: dropped %d loss records past step %d", dropped, step)
        logger.info("resumed %s at step %d", self.out_dir, step)
