"""The in-context learner (a small GPT-2 style decoder over vector tokens) and
the permutation-proposal network that plays against it.

Token layout for a prompt with n demonstrations, d-dimensional inputs:

    x_1, y_1, x_2, y_2, ..., x_n, y_n, x_query

an x token is [x, 0] and a y token is [0, ..., 0, y], both of width d + 1.
"""

from __future__ import annotations

import logging
import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from pearl_lab.config import LearnerConfig, PNetConfig, SinkhornConfig, TaskConfig, derive_seed
from pearl_lab.errors import ShapeError
from pearl_lab.permutation import apply_soft, gumbel_sinkhorn
from pearl_lab.task import PromptBatch, PromptInstance

logger = logging.getLogger(__name__)


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, causal: bool):
        super().__init__()
        self.heads = heads
        self.causal = causal
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)

    def forward(self, x: Tensor) -> Tensor:
        B, T, H = x.shape
        head_dim = H // self.heads
        q, k, v = self.qkv(x).split(H, dim=-1)
        q, k, v = (t.view(B, T, self.heads, head_dim).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
        if self.causal:
            future = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, T, H))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, hidden: int, heads: int, causal: bool):
        super().__init__()
        self.ln_1 = nn.LayerNorm(hidden)
        self.attn = SelfAttention(hidden, heads, causal)
        self.ln_2 = nn.LayerNorm(hidden)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, 4 * hidden), nn.GELU(), nn.Linear(4 * hidden, hidden)
        )

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln_1(x))
        return x + self.mlp(self.ln_2(x))


def _x_tokens(xs: Tensor) -> Tensor:
    return F.pad(xs, (0, 1))


def _y_tokens(ys: Tensor, d: int) -> Tensor:
    return F.pad(ys[..., None], (d, 0))


class LearnerModel(nn.Module):
    def __init__(self, d: int, k_max: int, cfg: LearnerConfig):
        super().__init__()
        self.d = d
        self.k_max = k_max
        self.max_len = 2 * k_max + 1
        self.read_in = nn.Linear(d + 1, cfg.hidden)
        self.pos = nn.Parameter(torch.randn(self.max_len, cfg.hidden) * 0.02)
        self.blocks = nn.ModuleList(
            Block(cfg.hidden, cfg.heads, causal=True) for _ in range(cfg.layers)
        )
        self.ln_f = nn.LayerNorm(cfg.hidden)
        self.read_out = nn.Linear(cfg.hidden, 1)

    def forward(self, xs: Tensor, ys: Tensor, soft_perm: Tensor | None = None) -> Tensor:
        """Predictions at every x position, shape (B, n + 1).

        `xs` is (B, n + 1, d) and `ys` (B, n + 1); the query label ys[:, -1]
        is never read. `soft_perm` ((n, n) or (B, n, n)) mixes the embedded
        (x_i, y_i) blocks before the decoder.
        """
        B, T, d = xs.shape
        n = T - 1
        if d != self.d:
            raise ShapeError(f"learner expects d={self.d}, got inputs with d={d}")
        if 2 * n + 1 > self.max_len:
            raise ShapeError(
                f"sequence of {n} demonstrations needs {2 * n + 1} positions, "
                f"learner holds {self.max_len}"
            )
        ex = self.read_in(_x_tokens(xs))
        ey = self.read_in(_y_tokens(ys[:, :n], d))
        blocks = torch.stack([ex[:, :n], ey], dim=2)  # (B, n, 2, H)
        if soft_perm is not None:
            if soft_perm.shape[-2:] != (n, n):
                raise ShapeError(
                    f"permutation of size {tuple(soft_perm.shape[-2:])} for {n} demonstrations"
                )
            if soft_perm.ndim == 2:
                soft_perm = soft_perm.expand(B, n, n)
            blocks = apply_soft(soft_perm, blocks)
        h = torch.cat([blocks.reshape(B, 2 * n, -1), ex[:, n:]], dim=1)
        h = h + self.pos[: 2 * n + 1]
        for block in self.blocks:
            h = block(h)
        out = self.read_out(self.ln_f(h))[..., 0]
        return out[:, ::2]


class PNetModel(nn.Module):
    """Pools each (x, y) pair, contextualises the pairs with a bidirectional
    encoder and scores demonstration pairs with R = tanh(H W Hᵀ)."""

    def __init__(self, d: int, k_max: int, cfg: PNetConfig):
        super().__init__()
        self.d = d
        self.k_max = k_max
        self.pool = nn.Sequential(
            nn.Linear(d + 1, cfg.hidden), nn.GELU(), nn.Linear(cfg.hidden, cfg.hidden)
        )
        self.slot = nn.Embedding(k_max + 1, cfg.hidden)
        self.blocks = nn.ModuleList(
            Block(cfg.hidden, cfg.heads, causal=False) for _ in range(cfg.layers)
        )
        self.ln = nn.LayerNorm(cfg.hidden)
        if cfg.zero_relation:
            relation = torch.zeros(cfg.hidden, cfg.hidden)
        else:
            relation = torch.randn(cfg.hidden, cfg.hidden) / cfg.hidden
        self.relation = nn.Parameter(relation)

    def forward(self, xs: Tensor, ys: Tensor) -> Tensor:
        """Relation matrices (B, n, n) over the demonstrations of each prompt.

        The query pair (last row, label included) is encoded alongside the
        demonstrations but gets no row or column in R.
        """
        B, T, d = xs.shape
        n = T - 1
        if d != self.d:
            raise ShapeError(f"P-Net expects d={self.d}, got inputs with d={d}")
        if n < 2:
            raise ShapeError(f"P-Net needs at least 2 demonstrations, got {n}")
        if n > self.k_max:
            raise ShapeError(f"P-Net holds at most {self.k_max} demonstrations, got {n}")
        slots = torch.cat([torch.arange(n), torch.tensor([self.k_max])])
        h = self.pool(torch.cat([xs, ys[..., None]], dim=-1)) + self.slot(slots)
        for block in self.blocks:
            h = block(h)
        h = self.ln(h)[:, :n]
        return torch.tanh(h @ self.relation @ h.transpose(-2, -1))


def learner_forward(
    model: LearnerModel, instance: PromptInstance, soft_perm: Tensor | None = None
) -> Tensor:
    """The k + 1 predictions of one prompt."""
    batch = instance.to_batch()
    return model(batch.xs, batch.ys, soft_perm)[0]


def pnet_forward(model: PNetModel, instance: PromptInstance) -> Tensor:
    batch = instance.to_batch()
    return model(batch.xs, batch.ys)[0]


def propose_permutation(
    model: PNetModel,
    prompt: PromptInstance | PromptBatch,
    cfg: SinkhornConfig,
    rng: torch.Generator | None = None,
    noise: Tensor | None = None,
) -> Tensor:
    """Gumbel-Sinkhorn sample over the P-Net's relation matrix; differentiable in φ."""
    if isinstance(prompt, PromptInstance):
        return gumbel_sinkhorn(pnet_forward(model, prompt), cfg, rng, noise)
    return gumbel_sinkhorn(model(prompt.xs, prompt.ys), cfg, rng, noise)


def build_learner(task: TaskConfig, cfg: LearnerConfig, seed: int) -> LearnerModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "init-learner"))
        model = LearnerModel(task.d, task.k_max, cfg)
    logger.debug("learner with %d parameters", count_parameters(model))
    return model


def build_pnet(task: TaskConfig, cfg: PNetConfig, seed: int) -> PNetModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "init-pnet"))
        model = PNetModel(task.d, task.k_max, cfg)
    logger.debug("P-Net with %d parameters", count_parameters(model))
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def model_meta(kind: str, task: TaskConfig, cfg: LearnerConfig | PNetConfig) -> dict:
    return {"kind": kind, "d": task.d, "k_max": task.k_max, "model": vars(cfg).copy()}
