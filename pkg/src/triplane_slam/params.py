"""Flat trainable parameter blocks, Adam, and a finite-difference gradient check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import kernels

ADAM_BETAS = (0.9, 0.99)
ADAM_EPS = 1e-15


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(eq=False)
class ParamBlock:
    """One named flat parameter buffer with its gradient and Adam moments."""

    name: str
    values: np.ndarray
    learning_rate: float = 1e-3
    grads: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0
    frozen: bool = False

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        self.grads = np.zeros_like(self.values)
        self.adam_m = np.zeros_like(self.values)
        self.adam_v = np.zeros_like(self.values)

    def __len__(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grads.fill(0.0)

    def reset_state(self) -> None:
        self.adam_m.fill(0.0)
        self.adam_v.fill(0.0)
        self.step_count = 0

    def copy(self) -> "ParamBlock":
        blk = ParamBlock(self.name, self.values.copy(), self.learning_rate, frozen=self.frozen)
        blk.grads[:] = self.grads
        blk.adam_m[:] = self.adam_m
        blk.adam_v[:] = self.adam_v
        blk.step_count = self.step_count
        return blk


def adam_step(block: ParamBlock, lr: float | None = None, betas=ADAM_BETAS, eps: float = ADAM_EPS) -> ParamBlock:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards."""
    if not np.all(np.isfinite(block.grads)):
        raise NonFiniteGradient(f"non-finite gradient in block {block.name!r}")
    if block.frozen:
        block.grads.fill(0.0)
        return block
    lr = block.learning_rate if lr is None else lr
    b1, b2 = betas
    block.step_count += 1
    bc1 = 1.0 - b1 ** block.step_count
    bc2 = 1.0 - b2 ** block.step_count
    kernels.adam_update(block.values, block.grads, block.adam_m, block.adam_v, lr, b1, b2, eps, bc1, bc2)
    block.grads.fill(0.0)
    return block


class BetaParam:
    """Positive density sharpness, optimized through its logarithm."""

    def __init__(self, value: float = 10.0, learning_rate: float = 1e-3):
        if value <= 0:
            raise ValueError("beta must be positive")
        self.block = ParamBlock("log_beta", np.array([math.log(value)]), learning_rate)

    @property
    def value(self) -> float:
        return math.exp(self.block.values[0])

    def accumulate(self, dbeta: float) -> None:
        # chain rule through beta = exp(log_beta)
        self.block.grads[0] += dbeta * self.value


def finite_diff_check(
    loss: Callable[[], float],
    block: ParamBlock,
    eps: float = 1e-4,
    n_probe: int = 10,
    rng: np.random.Generator | None = None,
    candidates: np.ndarray | None = None,
) -> float:
    """Compare ``block.grads`` with central differences of ``loss``.

    ``loss`` re-evaluates the objective from the current ``block.values``.
    Probed coordinates are drawn from ``candidates`` (all coordinates by
    default). Returns the largest relative error
    ``|a - fd| / max(1e-8, |a| + |fd|)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    pool = np.arange(block.values.size) if candidates is None else np.asarray(candidates)
    if pool.size == 0:
        return 0.0
    probes = rng.choice(pool, size=min(n_probe, pool.size), replace=False)
    analytic = block.grads.copy()
    worst = 0.0
    for i in probes:
        orig = block.values[i]
        block.values[i] = orig + eps
        lp = loss()
        block.values[i] = orig - eps
        lm = loss()
        block.values[i] = orig
        fd = (lp - lm) / (2 * eps)
        a = analytic[i]
        worst = max(worst, abs(a - fd) / max(1e-8, abs(a) + abs(fd)))
    return worst


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, blocks: Iterable[ParamBlock], extra_lines: Iterable[str] = ()) -> None:
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.manifest``."""
    path = Path(path)
    blocks = list(blocks)
    manifest = ["# name length learning_rate"]
    with open(path.with_suffix(".bin"), "wb") as fh:
        for blk in blocks:
            fh.write(blk.values.astype("<f8").tobytes())
            manifest.append(f"{blk.name} {blk.values.size} {blk.learning_rate!r}")
    manifest.extend(extra_lines)
    path.with_suffix(".manifest").write_text("\n".join(manifest) + "\n")


def load_checkpoint(path) -> tuple[dict[str, ParamBlock], list[str]]:
    """Inverse of :func:`save_checkpoint`; returns blocks by name and non-block lines."""
    path = Path(path)
    raw = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    blocks: dict[str, ParamBlock] = {}
    extra: list[str] = []
    offset = 0
    for line in path.with_suffix(".manifest").read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] in ("submap", "meta"):
            extra.append(line)
            continue
        name, n, lr = parts[0], int(parts[1]), float(parts[2])
        if offset + n > raw.size:
            raise ValueError(f"checkpoint {path} truncated at block {name!r}")
        blocks[name] = ParamBlock(name, raw[offset:offset + n].copy(), lr)
        offset += n
    if offset != raw.size:
        raise ValueError(f"checkpoint {path}: {raw.size - offset} trailing values")
    return blocks, extra
