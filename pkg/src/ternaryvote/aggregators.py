"""Server-side aggregation rules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .core import ConfigError, DimensionMismatch, TooFewWorkers


@dataclass(frozen=True)
class TernaryMean:
    pass


@dataclass(frozen=True)
class TernaryVote:
    pass


@dataclass(frozen=True)
class PlainMean:
    pass


@dataclass(frozen=True)
class MultiKrum:
    f: int
    m: Optional[int] = None  # defaults to n - f at call time

    def __post_init__(self):
        if self.f < 0:
            raise ConfigError("MultiKrum f must be >= 0")
        if self.m is not None and self.m < 1:
            raise ConfigError("MultiKrum m must be >= 1")


@dataclass(frozen=True)
class CenteredClipping:
    tau: float
    iters: int = 1

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("centered clipping tau must be > 0")
        if self.iters < 1:
            raise ConfigError("centered clipping iters must be >= 1")


AggregatorChoice = Union[TernaryMean, TernaryVote, PlainMean, MultiKrum, CenteredClipping]


def _stack(msgs: Sequence) -> np.ndarray:
    if len(msgs) == 0:
        raise TooFewWorkers("need at least one message")
    if isinstance(msgs, np.ndarray) and msgs.ndim == 2:
        return msgs.astype(np.float64, copy=False)
    try:
        # fast path for a list of equal-length vectors
        X = np.array(msgs, dtype=np.float64)
        if X.ndim == 2:
            return X
    except ValueError:
        pass
    arrs = [np.atleast_1d(np.asarray(m, dtype=np.float64)) for m in msgs]
    d = arrs[0].shape
    for i, a in enumerate(arrs):
        if a.ndim != 1 or a.shape != d:
            raise DimensionMismatch(f"message {i} has shape {a.shape}, expected {d}")
    return np.stack(arrs)


def aggregate_mean(msgs: Sequence) -> np.ndarray:
    """Coordinate-wise mean of the received messages."""
    return _stack(msgs).mean(axis=0)


def aggregate_vote(msgs: Sequence) -> np.ndarray:
    """Coordinate-wise majority vote, ``sign(sum)`` with ``sign(0) = 0``."""
    return np.sign(_stack(msgs).sum(axis=0)).astype(np.int8)


def multikrum_scores(X: np.ndarray, f: int) -> np.ndarray:
    n = X.shape[0]
    k = n - f - 2
    sq = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(sq[i], i)
        scores[i] = np.sort(others)[:k].sum()
    return scores


def _select_lowest(scores: np.ndarray, m: int, rtol: float = 1e-9) -> list[int]:
    # Scores within rtol of the running minimum count as tied; ties go to the lower index.
    remaining = list(range(len(scores)))
    chosen = []
    for _ in range(m):
        best = min(scores[i] for i in remaining)
        tol = rtol * max(1.0, abs(best))
        pick = next(i for i in remaining if scores[i] <= best + tol)
        chosen.append(pick)
        remaining.remove(pick)
    return chosen


def aggregate_multikrum(msgs: Sequence, f: int, m: Optional[int] = None) -> np.ndarray:
    """Mean of the ``m`` messages with the smallest Krum scores.

    A message's score is the sum of squared distances to its ``n - f - 2``
    nearest other messages.
    """
    X = _stack(msgs)
    n = X.shape[0]
    if n < f + 3:
        raise TooFewWorkers(f"Multi-Krum needs n >= f + 3, got n={n}, f={f}")
    if m is None:
        m = n - f
    if not 1 <= m <= n:
        raise ConfigError(f"Multi-Krum m={m} outside [1, {n}]")
    chosen = _select_lowest(multikrum_scores(X, f), m)
    return X[chosen].mean(axis=0)


def aggregate_centered_clipping(msgs: Sequence, prev, tau: float, iters: int = 1) -> np.ndarray:
    """Iterate ``v <- v + mean_i clip_tau(Z_i - v)`` starting from ``prev``."""
    if not tau > 0:
        raise ConfigError("tau must be > 0")
    X = _stack(msgs)
    v = np.asarray(prev, dtype=np.float64).copy()
    if v.shape != X.shape[1:]:
        raise DimensionMismatch(f"prev has shape {v.shape}, messages {X.shape[1:]}")
    for _ in range(iters):
        diff = X - v
        norms = np.linalg.norm(diff, axis=1)
        with np.errstate(divide="ignore"):
            scale = np.where(norms > tau, tau / norms, 1.0)
        v = v + (diff * scale[:, None]).mean(axis=0)
    return v
