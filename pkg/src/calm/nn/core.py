"""Reverse-mode gradient maps and forward-mode directional derivatives.

Training runs in float32; verification and finite-difference oracles
use float64, where central differences are trustworthy.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, NamedTuple

import torch

Tensor = torch.Tensor


class NumericsError(RuntimeError):
    """Raised when a computation produced NaN/Inf or an invalid operand."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class Dual(NamedTuple):
    """Primal value together with its forward-mode tangent."""

    primal: Tensor
    tangent: Tensor


def seed_all(seed: int) -> torch.Generator:
    """Seed torch's global RNG and return a dedicated generator."""
    torch.manual_seed(seed)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


@contextlib.contextmanager
def single_thread() -> Iterator[None]:
    """Force single-threaded execution for bit-reproducible runs."""
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(n)


def backward(loss: Tensor, params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Return the gradient of a scalar loss for every named parameter.

    Parameters that do not influence the loss get zero gradients.
    Raises NumericsError on a non-scalar or non-finite loss, or when a
    gradient comes back non-finite (the message names the parameter).
    """
    if loss.numel() != 1:
        raise NumericsError("backward", f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NumericsError("backward", f"non-finite loss value {loss.item()!r}")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True, retain_graph=False)
    out: dict[str, Tensor] = {}
    for name, p, g in zip(names, tensors, grads):
        if g is None:
            g = torch.zeros_like(p)
        elif not torch.isfinite(g).all():
            raise NumericsError("backward", f"non-finite gradient for parameter '{name}'")
        out[name] = g
    return out


def jvp(f: Callable[..., Tensor], x: Tensor | tuple[Tensor, ...], v: Tensor | tuple[Tensor, ...]) -> Dual:
    """Evaluate f at x together with the directional derivative along v.

    x and v may be single tensors or matching tuples; each tangent must
    have the shape of its primal. The result carries no autograd history.
    """
    primals = x if isinstance(x, tuple) else (x,)
    tangents = v if isinstance(v, tuple) else (v,)
    if len(primals) != len(tangents):
        raise NumericsError("jvp", f"{len(primals)} primals but {len(tangents)} tangents")
    for i, (p, t) in enumerate(zip(primals, tangents)):
        if p.shape != t.shape:
            raise NumericsError(
                "jvp", f"tangent {i} shape {tuple(t.shape)} does not match primal shape {tuple(p.shape)}"
            )
    with torch.no_grad():
        out, tangent_out = torch.func.jvp(f, primals, tangents)
    return Dual(out, tangent_out)
