"""Finite-difference verification of the full network's backward pass."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import ModelConfig, forward, init_params
from .tensor import GradCheckResult, grad_check, make_rng
from .training import cross_entropy

# precision -> (step, pass threshold); differences always run at 64-bit
TOLERANCES = {64: (1e-4, 1e-4), 32: (1e-4, 1e-2)}


def tiny_config(m: int = 12, d: int = 16, blocks: int = 5, heads: int = 4, n: int = 3,
                caf: bool = True, mode: str = "patch", patch_side: int = 3,
                classes: int = 3) -> ModelConfig:
    return ModelConfig(m=m, classes=classes, n=n, d=d, blocks=blocks, heads=heads,
                       caf=caf, input_mode=mode, patch_side=patch_side, dropout_p=0.0)


def perturbed_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float64):
    """Initial weights moved off their symmetric starting values so every path carries gradient."""
    params = init_params(config, rng, dtype)
    for name, value in params.items():
        if name.startswith("caf."):
            params[name] = rng.uniform(0.3, 1.0, 2).astype(dtype)
        elif name.endswith((".beta", ".b1", ".b2", "head.bias")):
            params[name] = rng.normal(0.0, 0.1, value.shape).astype(dtype)
        elif name.endswith(".gamma"):
            params[name] = (1.0 + rng.normal(0.0, 0.1, value.shape)).astype(dtype)
    return params


def check_model(config: ModelConfig, seed: int = 0, bits: int = 64, batch: int = 2,
                max_coords: int | None = None, eps: float | None = None) -> GradCheckResult:
    """Cross-entropy gradient check of ``config`` on a random batch, dropout off.

    At 32 bits the tape runs in single precision while the finite
    differences are taken in double precision on the same (rounded) inputs.
    """
    dtype = T.dtype_for_bits(bits)
    rng = make_rng(seed)
    params = perturbed_params(config, rng, dtype)
    shape = (batch, config.m) if config.input_mode == "pixel" else \
        (batch, config.m, config.patch_side, config.patch_side)
    x = rng.normal(size=shape).astype(dtype)
    y = rng.integers(1, config.classes + 1, size=batch)

    def loss(tape, leaves):
        return cross_entropy(forward(leaves, config, x, training=False), y)

    return grad_check(loss, params, eps if eps is not None else TOLERANCES[bits][0],
                      max_coords=max_coords, rng=rng, fd_dtype=np.float64)
