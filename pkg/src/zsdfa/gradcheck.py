"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import GradientError, Tensor, backward


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x.copy())).item()
        flat[i] = orig - eps
        fm = f(Tensor(x.copy())).item()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = f(t)
    if out.requires_grad:
        backward(out)
    return np.zeros_like(t.data) if t.grad is None else t.grad


def relative_error(ga: np.ndarray, gn: np.ndarray) -> np.ndarray:
    return np.abs(ga - gn) / np.maximum(1e-8, np.abs(ga) + np.abs(gn))


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Maximum per-coordinate relative error between backprop and central
    differences of the scalar function ``f`` at ``x`` (float64)."""
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    ga = analytic_grad(f, x)
    gn = numeric_grad(f, x, eps)
    for name, g in (("analytic", ga), ("numeric", gn)):
        bad = np.flatnonzero(~np.isfinite(g))
        if bad.size:
            idx = np.unravel_index(bad[0], x.shape)
            raise GradientError(f"{name} gradient is not finite at coordinate {idx}")
    if ga.size == 0:
        return 0.0
    return float(relative_error(ga, gn).max())


def check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5,
                 max_coords: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` with respect to named parameter
    tensors (mutated in place and restored).  With ``max_coords`` only a random
    subset of coordinates per tensor is probed."""
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    backward(loss)
    errors: dict[str, float] = {}
    for name, p in params.items():
        ga = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False))
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn().item()
            flat[i] = orig - eps
            fm = loss_fn().item()
            flat[i] = orig
            gn = (fp - fm) / (2 * eps)
            if not np.isfinite(gn):
                raise GradientError(f"numeric gradient not finite for {name}[{i}]")
            worst = max(worst, float(relative_error(ga.reshape(-1)[i], gn)))
        errors[name] = worst
        p.grad = None
    return errors
