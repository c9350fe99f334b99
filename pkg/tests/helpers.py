"""Shared oracles for the test suite: finite differences and statistics."""

from __future__ import annotations

from typing import Callable

import torch

Tensor = torch.Tensor


def rel_err(a: Tensor, b: Tensor, floor: float | None = None) -> float:
    """Max elementwise relative error.

    Entries are compared against an absolute floor scaled to the overall
    magnitude of the inputs, so that finite-difference roundoff on
    near-zero entries does not register as relative error.
    """
    a = a.detach().double()
    b = b.detach().double()
    if floor is None:
        scale = max(a.abs().max().item(), b.abs().max().item(), 1.0)
        floor = 1e-6 * scale
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return ((a - b).abs() / denom).max().item()


def fd_gradients(
    loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5
) -> dict[str, Tensor]:
    """Central-difference gradient of a scalar loss for every parameter entry.

    Mutates each parameter in place (restoring it) so loss_fn can simply close
    over the module. Use float64 parameters.
    """
    grads = {}
    with torch.no_grad():
        for name, p in params.items():
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads[name] = g
    return grads


def fd_jvp(
    f: Callable[[Tensor], Tensor], x: Tensor, v: Tensor, h: float = 1e-5
) -> Tensor:
    """Central-difference directional derivative (f(x+hv) - f(x-hv)) / 2h."""
    with torch.no_grad():
        return (f(x + h * v) - f(x - h * v)) / (2 * h)
