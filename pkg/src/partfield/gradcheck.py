"""Central finite-difference checks of parameter gradients."""
from __future__ import annotations

from typing import Callable, Iterable

import torch
from torch import nn


def numeric_grad(loss_fn: Callable[[], torch.Tensor], p: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    g = torch.zeros_like(p)
    flat, gflat = p.data.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def check_parameter_gradients(module: nn.Module, loss_fn: Callable[[], torch.Tensor],
                              names: Iterable[str] | None = None,
                              eps: float = 1e-6) -> dict[str, float]:
    """Relative error between autograd and central differences per parameter.

    ``loss_fn`` must be deterministic (fix any RNG inside it). Run the module
    in float64.
    """
    params = dict(module.named_parameters())
    if names is not None:
        params = {n: params[n] for n in names}
    module.zero_grad()
    loss_fn().backward()
    out = {}
    for name, p in params.items():
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        out[name] = relative_error(analytic, numeric_grad(loss_fn, p, eps))
    return out
