"""Differentiable permutations: Sinkhorn normalisation, Gumbel sampling,
element-wise entropy, exact rounding and application to demonstration blocks.

Soft permutations are plain tensors of shape (..., n, n); row i of a matrix
says how much of demonstration j ends up in slot i. A `HardPermutation` maps
slot i to the demonstration `perm[i]`, so its 0/1 matrix has ones at
(i, perm[i]) and `apply_soft(matrix, x) == apply_hard(perm, x)`.
"""

from __future__ import annotations

import itertools
from collections.abc import Sequence
from dataclasses import dataclass
from typing import TypeVar

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from pearl_lab.config import SinkhornConfig
from pearl_lab.errors import ConfigError, NumericError, ShapeError

T = TypeVar("T")

DOUBLY_STOCHASTIC_TOL = 1e-5


@dataclass(frozen=True)
class HardPermutation:
    perm: tuple[int, ...]

    def __post_init__(self) -> None:
        if sorted(self.perm) != list(range(len(self.perm))):
            raise ShapeError(f"{self.perm} is not a bijection on 0..{len(self.perm) - 1}")

    @classmethod
    def identity(cls, n: int) -> HardPermutation:
        return cls(tuple(range(n)))

    @property
    def n(self) -> int:
        return len(self.perm)

    def matrix(self, dtype: torch.dtype | None = None) -> Tensor:
        m = torch.zeros(self.n, self.n, dtype=dtype)
        m[torch.arange(self.n), torch.tensor(self.perm, dtype=torch.long)] = 1.0
        return m

    def inverse(self) -> HardPermutation:
        inv = [0] * self.n
        for i, j in enumerate(self.perm):
            inv[j] = i
        return HardPermutation(tuple(inv))

    def then(self, other: HardPermutation) -> HardPermutation:
        """Apply `self` first, then `other`."""
        return HardPermutation(tuple(self.perm[j] for j in other.perm))


def _validate_relation(R: Tensor) -> None:
    if R.ndim < 2 or R.shape[-1] != R.shape[-2]:
        raise ShapeError(f"relation matrix must be square, got shape {tuple(R.shape)}")
    if R.shape[-1] == 0:
        raise ShapeError("relation matrix must have n >= 1")
    if not torch.isfinite(R).all():
        raise NumericError("relation matrix has non-finite entries")


def sinkhorn(R: Tensor, cfg: SinkhornConfig) -> Tensor:
    """`cfg.iterations` row-then-column normalisations of exp(R / τ), in log space."""
    cfg.validate()
    _validate_relation(R)
    log_alpha = R / cfg.temperature
    for _ in range(cfg.iterations):
        log_alpha = log_alpha - torch.logsumexp(log_alpha, dim=-1, keepdim=True)
        log_alpha = log_alpha - torch.logsumexp(log_alpha, dim=-2, keepdim=True)
    return log_alpha.exp()


def gumbel_from_uniform(u: Tensor) -> Tensor:
    return -torch.log(-torch.log(u))


def gumbel_sample(
    size: int | Sequence[int], scale: float, rng: torch.Generator | None = None
) -> Tensor:
    """Scaled i.i.d. Gumbel(0, 1) noise; `size` n means an n×n matrix."""
    if scale < 0:
        raise ConfigError(f"gumbel scale must be >= 0, got {scale}")
    shape = (size, size) if isinstance(size, int) else tuple(size)
    if scale == 0:
        return torch.zeros(shape)
    finfo = torch.finfo(torch.get_default_dtype())
    u = torch.rand(shape, generator=rng).clamp(finfo.tiny, 1.0 - finfo.eps)
    return scale * gumbel_from_uniform(u)


def gumbel_sinkhorn(
    R: Tensor,
    cfg: SinkhornConfig,
    rng: torch.Generator | None = None,
    noise: Tensor | None = None,
) -> Tensor:
    """sinkhorn((R + scale·G) / τ). The noise is a constant; gradients reach R only.

    Passing `noise` (already scaled) pins G, e.g. for gradient checks.
    """
    _validate_relation(R)
    if noise is None:
        noise = gumbel_sample(tuple(R.shape), cfg.noise_scale, rng).to(R.dtype)
    elif noise.shape != R.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != relation shape {tuple(R.shape)}")
    return sinkhorn(R + noise.detach(), cfg)


def entropy(P: Tensor, epsilon: float = 1e-9) -> Tensor:
    """Element-wise entropy summed over each matrix: -Σ P log((P + ε) / (1 + ε))."""
    if (P < 0).any():
        raise NumericError("entropy of a matrix with negative entries")
    return -(P * torch.log((P + epsilon) / (1.0 + epsilon))).sum(dim=(-2, -1))


def doubly_stochastic_gap(P: Tensor) -> float:
    rows = (P.sum(dim=-1) - 1).abs().max()
    cols = (P.sum(dim=-2) - 1).abs().max()
    return float(torch.maximum(rows, cols))


def is_doubly_stochastic(P: Tensor, tol: float = DOUBLY_STOCHASTIC_TOL) -> bool:
    in_range = bool(((P >= -tol) & (P <= 1 + tol)).all())
    return in_range and doubly_stochastic_gap(P) <= tol


def _best_assignment_value(scores: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(scores, maximize=True)
    return float(scores[rows, cols].sum())


def round_to_hard(P: Tensor, atol: float = 1e-12) -> HardPermutation:
    """Exact maximum-weight assignment; ties go to the lexicographically
    smallest permutation (lowest source slot takes the lowest target)."""
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ShapeError(f"round_to_hard expects one square matrix, got {tuple(P.shape)}")
    scores = P.detach().to(torch.float64).cpu().numpy()
    n = scores.shape[0]
    remaining_rows = list(range(n))
    free_cols = list(range(n))
    perm = [0] * n
    best = _best_assignment_value(scores)
    taken = 0.0
    for i in range(n):
        remaining_rows.remove(i)
        for j in sorted(free_cols):
            rest_cols = [c for c in free_cols if c != j]
            rest = (
                _best_assignment_value(scores[np.ix_(remaining_rows, rest_cols)])
                if remaining_rows
                else 0.0
            )
            if taken + scores[i, j] + rest >= best - atol:
                perm[i] = j
                taken += scores[i, j]
                free_cols.remove(j)
                break
    return HardPermutation(tuple(perm))


def apply_soft(P: Tensor, blocks: Tensor) -> Tensor:
    """Mix demonstration blocks: out[..., i, :] = Σ_j P[..., i, j] · blocks[..., j, :].

    `blocks` has shape (..., n, *feature_shape) with the same leading dims as P.
    """
    n = P.shape[-1]
    lead = P.ndim - 2
    if blocks.ndim <= lead or blocks.shape[lead] != n:
        raise ShapeError(
            f"apply_soft: permutation is {n}x{n} but blocks have shape {tuple(blocks.shape)}"
        )
    feature_shape = blocks.shape[lead + 1 :]
    flat = blocks.reshape(*blocks.shape[: lead + 1], -1)
    mixed = P @ flat
    return mixed.reshape(*mixed.shape[:-1], *feature_shape)


def apply_hard(perm: HardPermutation, items: Sequence[T]) -> list[T]:
    """Output slot i holds item perm[i]."""
    if len(items) != perm.n:
        raise ShapeError(f"apply_hard: {len(items)} items for a permutation of {perm.n}")
    return [items[j] for j in perm.perm]


def all_permutations(n: int) -> list[HardPermutation]:
    """Every permutation of n items in lexicographic order."""
    return [HardPermutation(p) for p in itertools.permutations(range(n))]


def random_orders(batch: int, n: int, rng: torch.Generator | None = None) -> Tensor:
    """(batch, n) tensor of independent uniform permutations."""
    return torch.argsort(torch.rand(batch, n, generator=rng), dim=-1)
