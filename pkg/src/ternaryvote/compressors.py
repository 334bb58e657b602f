"""Gradient clipping and the message compressors used by workers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    CompressorParams,
    ConfigError,
    OutOfRange,
    RngLike,
    as_generator,
    as_vector,
)

NOISE_THEN_SPARSIFY = "noise_then_sparsify"
SPARSIFY_THEN_NOISE = "sparsify_then_noise"


@dataclass(frozen=True)
class GaussianSparseParams:
    """Gaussian mechanism followed by random sparsification (the baseline).

    ``order`` picks whether noise is added before the keep mask is applied
    (noise lands on dropped coordinates too, then vanishes) or only on kept
    coordinates; the two give the same output distribution when
    ``rescale`` is off.
    """

    C: float
    sigma: float
    keep_prob: float = 1.0
    rescale: bool = False
    order: str = NOISE_THEN_SPARSIFY

    def __post_init__(self):
        if not self.C > 0:
            raise ConfigError(f"C must be > 0, got {self.C}")
        if not self.sigma >= 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if not 0 < self.keep_prob <= 1:
            raise ConfigError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.order not in (NOISE_THEN_SPARSIFY, SPARSIFY_THEN_NOISE):
            raise ConfigError(f"unknown order {self.order!r}")


def clip_linf(g, c: float) -> np.ndarray:
    if not c > 0:
        raise ValueError(f"clip threshold must be > 0, got {c}")
    return np.clip(as_vector(g), -c, c)


def clip_l2(g, C: float) -> np.ndarray:
    """``g * min(1, C / ||g||_2)``."""
    if not C > 0:
        raise ValueError(f"clip threshold must be > 0, got {C}")
    g = as_vector(g)
    norm = float(np.linalg.norm(g))
    if norm <= C:
        return g.copy()
    return g * (C / norm)


def _check_range(g: np.ndarray, A: float) -> None:
    if g.max() <= A and -g.min() <= A:
        return
    bad = np.flatnonzero(np.abs(g) > A)
    if bad.size:
        i = int(bad[0])
        raise OutOfRange(i, float(g[i]), A)


def ternary_compress(g, p: CompressorParams, rng: RngLike) -> np.ndarray:
    """Map each coordinate to +1, 0 or -1 independently.

    P(+1) = (A + g_i) / 2B, P(0) = 1 - A/B, P(-1) = (A - g_i) / 2B, so that
    ``B * E[output] = g``. One uniform draw is consumed per coordinate, in
    coordinate order.
    """
    g = as_vector(g)
    _check_range(g, p.A)
    u = as_generator(rng).random(g.size)
    p_plus = (p.A + g) / (2 * p.B)
    plus = u < p_plus
    return plus.view(np.int8) - ((u < p.A / p.B) & ~plus).view(np.int8)


def stochastic_sign(g, B: float, rng: RngLike) -> np.ndarray:
    """Ternary compressor with ``A = B``: never emits 0."""
    return ternary_compress(g, CompressorParams(A=B, B=B, c=B), rng)


def ternary_compress_sampled(g, p: CompressorParams, p_s: float, rng: RngLike) -> np.ndarray:
    """Ternary compression fused with an independent keep decision per coordinate.

    Each coordinate survives with probability ``p_s`` and is otherwise sent
    as 0, giving P(+-1) = p_s (A +- g_i) / 2B. This is the same law as
    ``ternary_compress`` with ``B / p_s`` in place of ``B``.
    """
    if not 0 < p_s <= 1:
        raise ValueError(f"p_s must be in (0, 1], got {p_s}")
    g = as_vector(g)
    _check_range(g, p.A)
    gen = as_generator(rng)
    keep = gen.random(g.size) < p_s
    z = ternary_compress(g, p, gen)
    z[~keep] = 0
    return z


def gaussian_sparse_compress(g, q: GaussianSparseParams, rng: RngLike) -> np.ndarray:
    """Add N(0, sigma^2) noise and keep each coordinate with ``keep_prob``.

    The input is expected to already be the mini-batch mean of L2-clipped
    per-example gradients.
    """
    g = as_vector(g)
    gen = as_generator(rng)
    if q.order == NOISE_THEN_SPARSIFY:
        noisy = g + q.sigma * gen.standard_normal(g.size) if q.sigma > 0 else g.copy()
        keep = gen.random(g.size) < q.keep_prob
    else:
        keep = gen.random(g.size) < q.keep_prob
        noisy = g.copy()
        if q.sigma > 0:
            noisy[keep] += q.sigma * gen.standard_normal(int(keep.sum()))
    out = np.where(keep, noisy, 0.0)
    if q.rescale:
        out = out / q.keep_prob
    return out


def rle_encode(z) -> list[tuple[int, int, int]]:
    """Run-length encode a ternary vector as ``(value, start, length)`` triples."""
    z = np.asarray(z)
    if z.size == 0:
        return []
    edges = np.flatnonzero(np.diff(z)) + 1
    starts = np.concatenate(([0], edges))
    lengths = np.diff(np.concatenate((starts, [z.size])))
    return [(int(z[s]), int(s), int(n)) for s, n in zip(starts, lengths)]


def rle_decode(runs, d: int) -> np.ndarray:
    out = np.zeros(d, dtype=np.int8)
    for value, start, length in runs:
        out[start:start + length] = value
    return out
