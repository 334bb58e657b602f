"""Gradient estimates produced by Byzantine workers.

Every attack returns a real vector that the caller then clips and compresses
exactly like an honest message, so the server only ever sees valid ternary
vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy import special

from .core import ConfigError, TooFewWorkers, as_vector


@dataclass(frozen=True)
class NoAttack:
    pass


@dataclass(frozen=True)
class Blind:
    pass


@dataclass(frozen=True)
class FlipSign:
    pass


@dataclass(frozen=True)
class FallOfEmpire:
    scale: float = 1.0

    def __post_init__(self):
        if self.scale < 0:
            raise ConfigError("fall-of-empire scale must be >= 0")


@dataclass(frozen=True)
class LittleIsEnough:
    # None means "take n and f from the topology"
    n: Optional[int] = None
    f: Optional[int] = None


AttackChoice = Union[NoAttack, Blind, FlipSign, FallOfEmpire, LittleIsEnough]


def attack_blind(true_grad) -> np.ndarray:
    return -as_vector(true_grad)


def attack_flip_sign(own_grad) -> np.ndarray:
    return -as_vector(own_grad)


def attack_foe(normal_mean, scale: float = 1.0) -> np.ndarray:
    return -scale * as_vector(normal_mean)


def lie_z(n: int, f: int) -> float:
    """Shift (in honest standard deviations) used by the little-is-enough attack."""
    if not n > f >= 1:
        raise ConfigError(f"little-is-enough needs n > f >= 1, got n={n}, f={f}")
    s = n // 2 + 1 - f
    q = (n - f - s) / (n - f)
    if not 0 < q < 1:
        raise ConfigError(f"little-is-enough quantile {q} is degenerate for n={n}, f={f}")
    return float(special.ndtri(q))


def attack_lie(normal_grads: Sequence, n: int, f: int) -> np.ndarray:
    """``mean - z * std`` per coordinate over the honest gradients (population std)."""
    if len(normal_grads) < 2:
        raise TooFewWorkers("little-is-enough needs at least two honest gradients")
    G = np.stack([as_vector(g) for g in normal_grads])
    return G.mean(axis=0) - lie_z(n, f) * G.std(axis=0)
