"""Differentiation substrate: graph records over torch autograd, finiteness
guards, precision switching, AdamW stepping and finite-difference checks.

torch builds the tape; this module pins down the contract the rest of the
package relies on: a `Graph` is run once with `forward`, differentiated once
with `backward`, and every value that leaves either call is finite.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn
from torch.func import functional_call

from pearl_lab.errors import ConfigError, GraphStateError, NumericError, ShapeError

PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class Graph:
    """One differentiable computation: a closure plus the leaves it reads."""

    fn: Callable[..., Tensor]
    params: dict[str, Tensor]
    input_shapes: tuple[tuple[int, ...], ...] | None = None
    output: Tensor | None = field(default=None, repr=False)

    @classmethod
    def over(cls, fn: Callable[..., Tensor], *modules: nn.Module) -> Graph:
        params: dict[str, Tensor] = {}
        for index, module in enumerate(modules):
            for name, param in module.named_parameters():
                params[f"{index}.{name}" if len(modules) > 1 else name] = param
        return cls(fn=fn, params=params)


def check_finite(value: Tensor, stage: str, name: str = "value") -> Tensor:
    if not torch.isfinite(value).all():
        bad = (~torch.isfinite(value)).sum().item()
        raise NumericError(f"{stage}: {name} has {bad} non-finite element(s)")
    return value


def forward(graph: Graph, *inputs: Tensor) -> Tensor:
    """Run the closure and cache its output for `backward`.

    Only the output is checked for finiteness, not each intermediate op: a
    NaN or inf produced inside the closure is reported once it reaches the
    output, and one that cancels out before then goes unnoticed.
    """
    if graph.input_shapes is not None:
        shapes = tuple(tuple(x.shape) for x in inputs)
        if shapes != graph.input_shapes:
            raise ShapeError(
                f"forward: input shapes {shapes} do not match {graph.input_shapes}"
            )
    out = graph.fn(*inputs)
    check_finite(out, "forward", "output")
    graph.output = out
    return out


def backward(graph: Graph, seed: Tensor | None = None) -> dict[str, Tensor]:
    """Gradients of the cached output for every leaf parameter (zeros when unused)."""
    if graph.output is None:
        raise GraphStateError("backward called before forward")
    names = list(graph.params)
    leaves = [graph.params[n] for n in names]
    if seed is None:
        if graph.output.numel() != 1:
            raise ShapeError("backward: a non-scalar output needs an explicit seed")
        seed = torch.ones_like(graph.output)
    grads = torch.autograd.grad(
        graph.output, leaves, grad_outputs=seed, allow_unused=True
    )
    out: dict[str, Tensor] = {}
    for name, leaf, grad in zip(names, leaves, grads):
        grad = torch.zeros_like(leaf) if grad is None else grad
        out[name] = check_finite(grad, "backward", name)
    graph.output = None
    return out


def grad_norm(grads: Mapping[str, Tensor]) -> float:
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack([g.norm() for g in grads.values()])))


@contextlib.contextmanager
def use_precision(name: str) -> Iterator[torch.dtype]:
    """Temporarily switch torch's default floating dtype."""
    if name not in PRECISIONS:
        raise ConfigError(f"unknown precision {name!r}; use float32 or float64")
    previous = torch.get_default_dtype()
    torch.set_default_dtype(PRECISIONS[name])
    try:
        yield PRECISIONS[name]
    finally:
        torch.set_default_dtype(previous)


def configure_determinism(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def build_adamw(
    params: Sequence[Tensor], lr: float, weight_decay: float
) -> torch.optim.AdamW:
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    if weight_decay < 0:
        raise ConfigError(f"weight decay must be >= 0, got {weight_decay}")
    return torch.optim.AdamW(list(params), lr=lr, weight_decay=weight_decay)


def adamw_step(
    optimizer: torch.optim.AdamW,
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
) -> None:
    """Install `grads` on `params` and advance the optimizer by one step."""
    for name, param in params.items():
        if name not in grads:
            raise ShapeError(f"adamw_step: no gradient for parameter {name!r}")
        grad = grads[name]
        if grad.shape != param.shape:
            raise ShapeError(
                f"adamw_step: gradient for {name!r} has shape {tuple(grad.shape)}, "
                f"parameter has {tuple(param.shape)}"
            )
        param.grad = grad.detach().clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def optimizer_tensors(
    optimizer: torch.optim.Optimizer, params: Mapping[str, Tensor]
) -> dict[str, Tensor]:
    """Flatten AdamW moments and step counts into named tensors."""
    out: dict[str, Tensor] = {}
    for name, param in params.items():
        state = optimizer.state.get(param)
        if not state:
            continue
        for key in ("step", "exp_avg", "exp_avg_sq"):
            out[f"{name}.{key}"] = torch.as_tensor(state[key]).detach().clone()
    return out


def load_optimizer_tensors(
    optimizer: torch.optim.Optimizer,
    params: Mapping[str, Tensor],
    tensors: Mapping[str, Tensor],
) -> None:
    for name, param in params.items():
        if f"{name}.step" not in tensors:
            continue
        optimizer.state[param] = {
            "step": tensors[f"{name}.step"].to(_scalar_dtype()).reshape(()),
            "exp_avg": tensors[f"{name}.exp_avg"].to(param.dtype).clone(),
            "exp_avg_sq": tensors[f"{name}.exp_avg_sq"].to(param.dtype).clone(),
        }


def parameter_gradcheck(
    module: nn.Module,
    closure: Callable[[Callable[..., Tensor]], Tensor],
    *,
    names: Sequence[str] | None = None,
    eps: float = 1e-4,
    atol: float = 1e-5,
    rtol: float = 1e-4,
    fast_mode: bool = False,
) -> bool:
    """Central finite differences against autograd for a module's parameters.

    `closure` receives a callable that behaves like `module(...)` but reads the
    checked parameter tensors, and returns the tensor to differentiate.
    """
    named = dict(module.named_parameters())
    checked = list(names) if names is not None else list(named)
    inputs = tuple(named[n].detach().clone().requires_grad_(True) for n in checked)

    def fn(*tensors: Tensor) -> Tensor:
        def call(*args, **kwargs):
            return functional_call(module, dict(zip(checked, tensors)), args, kwargs)

        return closure(call)

    return torch.autograd.gradcheck(
        fn, inputs, eps=eps, atol=atol, rtol=rtol, fast_mode=fast_mode
    )


def _scalar_dtype() -> torch.dtype:
    # AdamW keeps its step counter in float64 only under a float64 default.
    return torch.float64 if torch.get_default_dtype() == torch.float64 else torch.float32
