"""Finite-difference gradient checking for torch modules."""

from __future__ import annotations

import numpy as np
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from oracles import central_difference_gradient


def param_vector(module: torch.nn.Module) -> np.ndarray:
    return parameters_to_vector(module.parameters()).detach().numpy().copy()


def analytic_gradient(module: torch.nn.Module, loss_fn) -> np.ndarray:
    """Gradient of loss_fn() w.r.t. every parameter of the module."""
    for p in module.parameters():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [
        p.grad if p.grad is not None else torch.zeros_like(p) for p in module.parameters()
    ]
    return parameters_to_vector(grads).detach().numpy().copy()


def numeric_gradient(module: torch.nn.Module, loss_fn, step: float = 1e-5) -> np.ndarray:
    """Central finite differences w.r.t. the module's flattened parameters."""
    params = list(module.parameters())
    center = param_vector(module)
    dtype = params[0].dtype

    def value(vec: np.ndarray) -> float:
        with torch.no_grad():
            vector_to_parameters(torch.tensor(vec, dtype=dtype), params)
        with torch.no_grad():
            out = loss_fn()
        return float(out)

    try:
        return central_difference_gradient(value, center, step=step)
    finally:
        with torch.no_grad():
            vector_to_parameters(torch.tensor(center, dtype=dtype), params)


def max_relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
