"""Synthetic in-context linear regression.

A prompt holds n demonstrations (x_i, wᵀx_i) followed by a query x. Batches
keep the query as the last row of `xs`/`ys` so the learner sees the
demonstrations and the query as one sequence of n + 1 pairs.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from pearl_lab.config import TaskConfig, derive_seed
from pearl_lab.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class TaskSpec:
    d: int
    k_max: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ConfigError(f"task dimension d must be >= 1, got {self.d}")
        if self.k_max < 1:
            raise ConfigError(f"k_max must be >= 1, got {self.k_max}")

    @classmethod
    def from_config(cls, cfg: TaskConfig, seed: int = 0) -> TaskSpec:
        return cls(d=cfg.d, k_max=cfg.k_max, seed=seed)


@dataclass
class PromptInstance:
    w: Tensor  # (d,)
    xs: Tensor  # (n, d) demonstrations
    ys: Tensor  # (n,)
    query_x: Tensor  # (d,)
    query_y: float

    @classmethod
    def from_weights(cls, w: Tensor, xs: Tensor, query_x: Tensor) -> PromptInstance:
        return cls(
            w=w, xs=xs, ys=xs @ w, query_x=query_x, query_y=float(query_x @ w)
        )

    @property
    def n_demos(self) -> int:
        return self.xs.shape[0]

    @property
    def d(self) -> int:
        return self.w.shape[0]

    @property
    def demos(self) -> list[tuple[Tensor, float]]:
        return [(self.xs[i], float(self.ys[i])) for i in range(self.n_demos)]

    def permuted(self, order: Sequence[int]) -> PromptInstance:
        """Slot i takes demonstration order[i]; the query stays last."""
        if sorted(order) != list(range(self.n_demos)):
            raise ShapeError(f"order {list(order)} is not a permutation of {self.n_demos} demos")
        index = torch.as_tensor(list(order), dtype=torch.long)
        return PromptInstance(
            w=self.w,
            xs=self.xs[index],
            ys=self.ys[index],
            query_x=self.query_x,
            query_y=self.query_y,
        )

    def to_batch(self) -> PromptBatch:
        return PromptBatch.from_instances([self])

    def to_record(self) -> dict:
        return {
            "w": self.w.tolist(),
            "xs": self.xs.tolist(),
            "ys": self.ys.tolist(),
            "query_x": self.query_x.tolist(),
            "query_y": self.query_y,
        }

    @classmethod
    def from_record(cls, record: dict) -> PromptInstance:
        dtype = torch.get_default_dtype()
        return cls(
            w=torch.tensor(record["w"], dtype=dtype),
            xs=torch.tensor(record["xs"], dtype=dtype).reshape(len(record["ys"]), -1),
            ys=torch.tensor(record["ys"], dtype=dtype),
            query_x=torch.tensor(record["query_x"], dtype=dtype),
            query_y=float(record["query_y"]),
        )


@dataclass
class PromptBatch:
    """B prompts with the same demo count; row n of `xs`/`ys` is the query."""

    w: Tensor  # (B, d)
    xs: Tensor  # (B, n + 1, d)
    ys: Tensor  # (B, n + 1)

    def __post_init__(self) -> None:
        if self.xs.ndim != 3 or self.ys.shape != self.xs.shape[:2]:
            raise ShapeError(
                f"batch shapes disagree: xs {tuple(self.xs.shape)}, ys {tuple(self.ys.shape)}"
            )
        if self.w.shape != (self.xs.shape[0], self.xs.shape[2]):
            raise ShapeError(f"w has shape {tuple(self.w.shape)} for xs {tuple(self.xs.shape)}")

    @property
    def size(self) -> int:
        return self.xs.shape[0]

    @property
    def n_demos(self) -> int:
        return self.xs.shape[1] - 1

    @property
    def d(self) -> int:
        return self.xs.shape[2]

    @property
    def query_x(self) -> Tensor:
        return self.xs[:, -1]

    @property
    def query_y(self) -> Tensor:
        return self.ys[:, -1]

    @classmethod
    def from_instances(cls, instances: Sequence[PromptInstance]) -> PromptBatch:
        if not instances:
            raise ShapeError("cannot build a batch from zero instances")
        counts = {inst.n_demos for inst in instances}
        if len(counts) != 1:
            raise ShapeError(f"instances have different demo counts {sorted(counts)}")
        xs = torch.stack([torch.cat([i.xs, i.query_x[None]]) for i in instances])
        ys = torch.stack(
            [torch.cat([i.ys, i.ys.new_tensor([i.query_y])]) for i in instances]
        )
        return cls(w=torch.stack([i.w for i in instances]), xs=xs, ys=ys)

    def instance(self, index: int) -> PromptInstance:
        return PromptInstance(
            w=self.w[index],
            xs=self.xs[index, :-1],
            ys=self.ys[index, :-1],
            query_x=self.xs[index, -1],
            query_y=float(self.ys[index, -1]),
        )

    def instances(self) -> list[PromptInstance]:
        return [self.instance(i) for i in range(self.size)]

    def reorder(self, orders: Tensor) -> PromptBatch:
        """Per-sample hard reordering of the demonstrations; `orders` is (B, n)."""
        if orders.shape != (self.size, self.n_demos):
            raise ShapeError(
                f"orders shape {tuple(orders.shape)} != ({self.size}, {self.n_demos})"
            )
        n = self.n_demos
        query = torch.full((self.size, 1), n, dtype=torch.long)
        index = torch.cat([orders.long(), query], dim=1)
        xs = torch.gather(self.xs, 1, index[..., None].expand(-1, -1, self.d))
        ys = torch.gather(self.ys, 1, index)
        return PromptBatch(w=self.w, xs=xs, ys=ys)


def _check_demo_count(spec: TaskSpec, n_demos: int) -> None:
    if not 1 <= n_demos <= spec.k_max:
        raise ConfigError(f"n_demos must lie in [1, {spec.k_max}], got {n_demos}")


def sample_instance(
    spec: TaskSpec, n_demos: int, rng: torch.Generator | None = None
) -> PromptInstance:
    """w, x ~ N(0, I_d); every label is wᵀx."""
    _check_demo_count(spec, n_demos)
    w = torch.randn(spec.d, generator=rng)
    xs = torch.randn(n_demos + 1, spec.d, generator=rng)
    return PromptInstance.from_weights(w, xs[:-1], xs[-1])


def sample_batch(
    spec: TaskSpec, batch_size: int, n_demos: int, rng: torch.Generator | None = None
) -> PromptBatch:
    _check_demo_count(spec, n_demos)
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    w = torch.randn(batch_size, spec.d, generator=rng)
    xs = torch.randn(batch_size, n_demos + 1, spec.d, generator=rng)
    ys = torch.einsum("bnd,bd->bn", xs, w)
    return PromptBatch(w=w, xs=xs, ys=ys)


def icl_loss(preds: Tensor, targets: Tensor) -> Tensor:
    """Mean squared error over the k + 1 positions of each prompt."""
    if preds.shape != targets.shape:
        raise ShapeError(
            f"icl_loss: predictions {tuple(preds.shape)} vs targets {tuple(targets.shape)}"
        )
    return ((preds - targets) ** 2).mean(dim=-1)


def normalized_error(pred: Tensor, w: Tensor, query_x: Tensor, d: int) -> Tensor:
    """(pred - wᵀx_query)² / d; broadcasts over a leading batch dimension."""
    if d < 1:
        raise ConfigError(f"d must be >= 1, got {d}")
    target = (w * query_x).sum(dim=-1)
    return (pred - target) ** 2 / d


def seeded_generator(master: int, stream: str, *counters: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(master, stream, *counters))


class TaskStream:
    """On-the-fly training data keyed by (stream, step, slot)."""

    def __init__(self, spec: TaskSpec, batch_size: int, stream: str = "data"):
        self.spec = spec
        self.batch_size = batch_size
        self.stream = stream

    def generator(self, step: int, slot: int = 0) -> torch.Generator:
        return seeded_generator(self.spec.seed, self.stream, step, slot)

    def batch(self, step: int, shots: int, slot: int = 0) -> PromptBatch:
        return sample_batch(self.spec, self.batch_size, shots, self.generator(step, slot))

    def __repr__(self) -> str:
        return (
            f"TaskStream(stream={self.stream!r}, d={self.spec.d}, "
            f"batch_size={self.batch_size}, seed={self.spec.seed})"
        )


def held_out_instances(
    spec: TaskSpec, count: int, n_demos: int, stream: str = "eval-data"
) -> list[PromptInstance]:
    """Evaluation set: instance i comes from its own (stream, n_demos, i) seed."""
    return [
        sample_instance(spec, n_demos, seeded_generator(spec.seed, stream, n_demos, i))
        for i in range(count)
    ]


def dump_instances(path: Path, instances: Iterable[PromptInstance]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps(inst.to_record(), sort_keys=True) + "\n")
    return path


def load_instances(path: Path) -> list[PromptInstance]:
    lines = path.read_text(encoding="utf-8").splitlines()
    return [PromptInstance.from_record(json.loads(line)) for line in lines if line.strip()]
