"""Shared value types, error classes and the deterministic RNG contract."""

from __future__ import annotations

import enum
import functools
import hashlib
from dataclasses import dataclass, field
from typing import Union

import numpy as np


class TernaryVoteError(Exception):
    """Base class for every error raised by this package."""


class ParamViolation(TernaryVoteError, ValueError):
    """A compressor parameter inequality does not hold.

    ``inequality`` carries the violated relation, e.g. ``"B > A + c"``.
    """

    def __init__(self, inequality: str, detail: str = ""):
        self.inequality = inequality
        msg = f"parameter violation: {inequality}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class OutOfRange(TernaryVoteError, ValueError):
    def __init__(self, index: int, value: float, bound: float):
        self.index = index
        super().__init__(f"coordinate {index} = {value!r} exceeds |g_i| <= {bound!r}")


class NonFinite(TernaryVoteError, ValueError):
    pass


class DimensionMismatch(TernaryVoteError, ValueError):
    pass


class TooFewWorkers(TernaryVoteError, ValueError):
    pass


class DegenerateCurve(TernaryVoteError, ValueError):
    pass


class Infeasible(TernaryVoteError, ValueError):
    pass


class DegenerateStep(TernaryVoteError, ValueError):
    pass


class GainOverflow(TernaryVoteError, OverflowError):
    pass


class ConfigError(TernaryVoteError, ValueError):
    pass


class InvariantError(TernaryVoteError, AssertionError):
    """An internal cross-check failed; indicates a bug, not bad input."""


class Mode(enum.Enum):
    PRIVACY = "privacy"
    VOTE_BOUND = "vote_bound"


@dataclass(frozen=True)
class CompressorParams:
    """Parameters ``(A, B, c, b)`` of the ternary compressor.

    ``A`` and ``B`` set the signal scale and the normalisation, ``c`` is the
    per-coordinate clipping threshold and ``b`` the mini-batch size.
    """

    A: float
    B: float
    c: float
    b: int = 1

    @property
    def sparsity(self) -> float:
        """Expected fraction of nonzero output coordinates, ``A / B``."""
        return self.A / self.B


def validate_params(p: CompressorParams, mode: Mode | str) -> None:
    """Raise :class:`ParamViolation` naming the first violated inequality.

    Checks run in a fixed order: ``c > 0``, ``c <= A``, ``A <= B``, ``b >= 1``
    and then the mode-specific one (``B > A + c`` for privacy curves,
    ``B >= 2A`` for the vote error bound).
    """
    mode = Mode(mode)
    if not p.c > 0:
        raise ParamViolation("c > 0", f"c={p.c}")
    if not p.c <= p.A:
        raise ParamViolation("c <= A", f"c={p.c}, A={p.A}")
    if not p.A <= p.B:
        raise ParamViolation("A <= B", f"A={p.A}, B={p.B}")
    if int(p.b) != p.b or p.b < 1:
        raise ParamViolation("b >= 1", f"b={p.b}")
    if mode is Mode.PRIVACY and not p.B > p.A + p.c:
        raise ParamViolation("B > A + c", f"A={p.A}, B={p.B}, c={p.c}")
    if mode is Mode.VOTE_BOUND and not p.B >= 2 * p.A:
        raise ParamViolation("B >= 2A", f"A={p.A}, B={p.B}")


# ---------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class FullParticipation:
    pass


@dataclass(frozen=True)
class FixedSubset:
    n_t: int


@dataclass(frozen=True)
class IndependentBernoulli:
    p_s: float


Sampling = Union[FullParticipation, FixedSubset, IndependentBernoulli]


@dataclass(frozen=True)
class TopologyConfig:
    """``M`` honest workers (ids ``0..M-1``) followed by ``K`` Byzantine ones."""

    M: int
    K: int = 0
    sampling: Sampling = field(default_factory=FullParticipation)

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError(f"need M >= 1, got {self.M}")
        if self.K < 0:
            raise ConfigError(f"need K >= 0, got {self.K}")
        s = self.sampling
        if isinstance(s, FixedSubset) and not 1 <= s.n_t <= self.M + self.K:
            raise ConfigError(f"FixedSubset n_t={s.n_t} outside [1, {self.M + self.K}]")
        if isinstance(s, IndependentBernoulli) and not 0 < s.p_s <= 1:
            raise ConfigError(f"IndependentBernoulli p_s={s.p_s} outside (0, 1]")

    @property
    def n_workers(self) -> int:
        return self.M + self.K

    def is_byzantine(self, worker: int) -> bool:
        return worker >= self.M


# ---------------------------------------------------------------------------
# deterministic randomness


@functools.lru_cache(maxsize=256)
def _purpose_key(purpose: str | int) -> int:
    if isinstance(purpose, int):
        # negative ids (e.g. the server as worker -1) wrap into the unsigned 64-bit range
        return purpose & (2**64 - 1)
    digest = hashlib.blake2b(purpose.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by ``(seed, path)``.

    The path is mixed into a :class:`numpy.random.SeedSequence` spawn key, so
    streams with different paths are independent and the draws never depend
    on the order in which streams are created.
    """

    seed: int
    path: tuple = ()

    def child(self, *parts: str | int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(parts))

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream.

        Philox is counter-based: the first two path parts (round, worker)
        occupy the high 128 bits of the counter and the rest of the path plus
        the seed select the key, so distinct paths never share a block unless
        a stream draws more than 2^128 blocks.
        """
        head = [_purpose_key(p) for p in self.path[:2]]
        head += [0] * (2 - len(head))
        key = _philox_key(self.seed & (2**64 - 1), len(self.path), tuple(_purpose_key(p) for p in self.path[2:]))
        return np.random.Generator(np.random.Philox(key=key, counter=np.array([0, 0, *head], dtype=np.uint64)))


@functools.lru_cache(maxsize=1024)
def _philox_key(seed: int, depth: int, tail: tuple) -> np.ndarray:
    state = np.random.SeedSequence(entropy=seed, spawn_key=(depth, *tail)).generate_state(2, np.uint64)
    state.flags.writeable = False
    return state


def stream(seed: int, round: int, worker: int, purpose: str) -> RngStream:
    return RngStream(seed, (round, worker, purpose))


RngLike = Union[RngStream, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


def as_vector(g, name: str = "g") -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    arr = np.asarray(g, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionMismatch(f"{name} must be a non-empty vector, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFinite(f"{name} has non-finite coordinates")
    return arr
