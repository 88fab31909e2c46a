"""Central finite differences for float64 torch functions."""

import numpy as np
import torch


def numerical_grad(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    x = x.detach().clone()
    flat = x.view(-1)
    g = torch.zeros_like(flat)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + h
        up = float(fn(x))
        flat[i] = old - h
        down = float(fn(x))
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return g.view_as(x)


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-10) -> float:
    a, b = a.double().flatten(), b.double().flatten()
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), floor))


def check(fn, x, h=1e-6):
    return relative_error(analytic_grad(fn, x), numerical_grad(fn, x, h))


def instances(count, seed=0):
    return [np.random.default_rng([seed, i]) for i in range(count)]
