"""Exact computations used to check the probabilistic claims and bound formulas.

Nothing here samples: vote-sign laws come from convolving per-worker
three-point distributions (or, independently, from full enumeration), tails
of Poisson-binomial sums from a DP over the count, and the convergence bounds
are plain evaluations of their right-hand sides.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .core import (
    CompressorParams,
    DegenerateStep,
    GainOverflow,
    Mode,
    OutOfRange,
    ParamViolation,
    validate_params,
)
from .privacy import TradeoffCurve

MAX_GAIN_M = 60


@dataclass(frozen=True)
class VoteDistribution:
    p_plus: float
    p_zero: float
    p_minus: float

    @property
    def bias(self) -> float:
        """``P(vote = +1) - P(vote = -1)``; ties contribute nothing either way."""
        return self.p_plus - self.p_minus


def _worker_pmf(u: float, A: float, B: float) -> np.ndarray:
    # index 0, 1, 2 <-> message -1, 0, +1
    return np.array([(A - u) / (2 * B), 1 - A / B, (A + u) / (2 * B)])


def _check_inputs(u: Sequence[float], p: CompressorParams) -> np.ndarray:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.size == 0:
        raise ValueError("need at least one worker")
    bad = np.flatnonzero(np.abs(u) > p.A)
    if bad.size:
        raise OutOfRange(int(bad[0]), float(u[bad[0]]), p.A)
    return u


def sum_distribution(u: Sequence[float], p: CompressorParams) -> np.ndarray:
    """Law of ``sum_m ternary(u_m)``; entry ``j`` is ``P(sum = j - M)``."""
    u = _check_inputs(u, p)
    dist = np.array([1.0])
    for um in u:
        dist = np.convolve(dist, _worker_pmf(um, p.A, p.B))
    return dist


def vote_distribution_exact(u: Sequence[float], p: CompressorParams) -> VoteDistribution:
    dist = sum_distribution(u, p)
    M = (dist.size - 1) // 2
    return VoteDistribution(
        p_plus=float(math.fsum(dist[M + 1:])),
        p_zero=float(dist[M]),
        p_minus=float(math.fsum(dist[:M])),
    )


def vote_distribution_enumerate(u: Sequence[float], p: CompressorParams) -> VoteDistribution:
    """Same law as :func:`vote_distribution_exact` by walking all 3^M outcomes."""
    u = _check_inputs(u, p)
    pmfs = [_worker_pmf(um, p.A, p.B) for um in u]
    acc = {1: [], 0: [], -1: []}
    for outcome in itertools.product((-1, 0, 1), repeat=len(u)):
        prob = 1.0
        for pm, z in zip(pmfs, outcome):
            prob *= pm[z + 1]
        acc[int(np.sign(sum(outcome)))].append(prob)
    return VoteDistribution(math.fsum(acc[1]), math.fsum(acc[0]), math.fsum(acc[-1]))


def vote_error_exact(u: Sequence[float], p: CompressorParams) -> float:
    """Probability the vote disagrees with ``sign(mean(u))``, ties weighted 1/2."""
    ubar = float(np.mean(u))
    if ubar == 0:
        raise ParamViolation("mean(u) != 0")
    dist = vote_distribution_exact(u, p)
    wrong = dist.p_minus if ubar > 0 else dist.p_plus
    return wrong + 0.5 * dist.p_zero


def vote_error_bound(u: Sequence[float], p: CompressorParams) -> float:
    """``(1 - mean(u)^2 / B^2)^(M/2)``, valid for ``B >= 2A``."""
    validate_params(p, Mode.VOTE_BOUND)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    ubar = float(np.mean(u))
    if ubar == 0:
        raise ParamViolation("mean(u) != 0")
    return max(0.0, 1 - ubar * ubar / (p.B * p.B)) ** (u.size / 2)


def vote_gain(p: CompressorParams, M: int) -> float:
    """Signal gain ``I(A, B, M)`` of the majority vote.

    Summed in exact rational arithmetic from the float values of ``A`` and
    ``B`` and rounded once at the end.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if M > MAX_GAIN_M:
        raise GainOverflow(f"M={M} exceeds the exact range M <= {MAX_GAIN_M}")
    A, B = Fraction(p.A), Fraction(p.B)
    rest = 1 - A / B
    total = Fraction(0)
    for n in range(1, M + 1):
        coeff = math.comb(n - 1, (n - 1) // 2) * M * math.comb(M - 1, n - 1)
        total += rest ** (M - n) * coeff * A ** (n - 1) / (2 ** (n - 1) * B ** n)
    return float(total)


def vote_bias_residual(u: Sequence[float], p: CompressorParams) -> float:
    """Exact vote bias minus its leading linear term ``I(A,B,M) * mean(u)``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return vote_distribution_exact(u, p).bias - vote_gain(p, u.size) * float(np.mean(u))


def poisson_binomial_pmf(ps: Sequence[float]) -> np.ndarray:
    ps = np.asarray(ps, dtype=float)
    if np.any((ps < 0) | (ps > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    pmf = np.zeros(ps.size + 1)
    pmf[0] = 1.0
    for i, q in enumerate(ps):
        pmf[1:i + 2] = pmf[1:i + 2] * (1 - q) + pmf[0:i + 1] * q
        pmf[0] *= 1 - q
    return pmf


def poisson_binomial_tail(ps: Sequence[float], k: int) -> float:
    """``P(S >= k)`` for a sum of independent Bernoulli(p_i)."""
    pmf = poisson_binomial_pmf(ps)
    if k <= 0:
        return 1.0
    if k >= pmf.size:
        return 0.0
    return float(min(1.0, math.fsum(pmf[k:])))


# ---------------------------------------------------------------------------
# exact tradeoff of the d-fold product mechanism


def exact_product_tradeoff(P: Sequence[float], Q: Sequence[float], d: int) -> TradeoffCurve:
    """Tradeoff curve ``T(P^d, Q^d)`` for three-point laws on {-1, 0, +1}.

    Outcomes are grouped by their counts of each symbol, ranked by likelihood
    ratio ``Q/P`` and accumulated into the Neyman-Pearson frontier.
    """
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    logP = np.log(np.where(P > 0, P, 1.0))
    logQ = np.log(np.where(Q > 0, Q, 1.0))
    rows = []
    for n_minus in range(d + 1):
        for n_plus in range(d + 1 - n_minus):
            counts = np.array([n_minus, d - n_minus - n_plus, n_plus])
            if np.any((counts > 0) & (P == 0) & (Q == 0)):
                continue
            logc = special.gammaln(d + 1) - special.gammaln(counts + 1).sum()
            p_in = not np.any((counts > 0) & (P == 0))
            q_in = not np.any((counts > 0) & (Q == 0))
            lp = logc + (counts * logP).sum() if p_in else -np.inf
            lq = logc + (counts * logQ).sum() if q_in else -np.inf
            rows.append((lq - lp, math.exp(lp), math.exp(lq)))
    rows.sort(key=lambda r: -r[0])
    alpha, beta = 0.0, 1.0
    points = [(0.0, 1.0)]
    for _, pp, qq in rows:
        alpha += pp
        beta -= qq
        points.append((min(alpha, 1.0), max(beta, 0.0)))
    points[-1] = (1.0, 0.0)
    return TradeoffCurve.from_points(points, tol=1e-15)


def worst_case_pair(p: CompressorParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate output laws for the neighbouring inputs ``c`` and ``c - 2c/b``."""
    hi = p.c
    lo = p.c - 2 * p.c / p.b
    return _worker_pmf(hi, p.A, p.B), _worker_pmf(lo, p.A, p.B)


# ---------------------------------------------------------------------------
# right-hand sides of the convergence bounds


@dataclass(frozen=True)
class BoundInputs:
    """Analysis-time constants plus the run's parameters.

    ``sigma_bar`` is the vector of per-coordinate standard-deviation bounds of
    the workers' stochastic gradients; ``Q`` bounds ``|grad F(w)_i|``.
    """

    L: float
    sigma_bar: tuple[float, ...]
    F0_minus_Fstar: float
    A: float
    B: float
    c: float
    d: int
    M: int
    T: int
    b: int = 1
    K: int = 0
    Q: float = 0.0
    eta: Optional[float] = None

    @property
    def params(self) -> CompressorParams:
        return CompressorParams(self.A, self.B, self.c, self.b)

    @property
    def step(self) -> float:
        return self.eta if self.eta is not None else 1 / math.sqrt(self.T * self.L * self.d)

    @property
    def sigma_l1(self) -> float:
        return float(np.sum(np.abs(self.sigma_bar)))

    @property
    def sigma_l2sq(self) -> float:
        return float(np.sum(np.square(self.sigma_bar)))


def bound_ternary_mean(x: BoundInputs) -> float:
    """Bound on the average squared L2 gradient norm for mean aggregation."""
    eta, B, L = x.step, x.B, x.L
    denom = eta / B - L * eta * eta / (2 * B * B)
    if denom <= 0:
        raise DegenerateStep(f"eta={eta} too large: eta/B - L eta^2 / 2B^2 = {denom} <= 0")
    first = x.F0_minus_Fstar / (x.T * denom)
    second = L * eta * eta / (2 * B * B * denom) * (x.A * B * x.d / x.M + x.sigma_l2sq / x.M)
    return first + second


def _vote_terms(x: BoundInputs) -> tuple[float, float]:
    root = math.sqrt(x.L * x.d) / math.sqrt(x.T)
    return x.F0_minus_Fstar * root, root / 2


def _disagreement_term(B: float, d: int, n: int) -> float:
    return 2 * B * d / math.sqrt(n + 1) * (1 - 1 / (n + 1)) ** (n / 2)


def bound_ternary_vote(x: BoundInputs) -> float:
    """Bound on the average L1 gradient norm for majority-vote aggregation."""
    t1, t2 = _vote_terms(x)
    return t1 + t2 + 4 * x.sigma_l1 / math.sqrt(x.M) + _disagreement_term(x.B, x.d, x.M)


def bound_byzantine(x: BoundInputs) -> float:
    """Majority-vote bound with ``K`` Byzantine workers taking part every round."""
    t1, t2 = _vote_terms(x)
    n = x.M + x.K
    attack = 4 * x.K * (x.Q + x.A) * x.d / n
    noise = 4 * math.sqrt(x.M) * x.sigma_l1 / n
    return t1 + t2 + attack + noise + _disagreement_term(x.B, x.d, n)


@dataclass(frozen=True)
class HighPrivacyBound:
    computable: float
    gain: float
    residual_heuristic: float
    heuristic: bool = field(default=True)


def bound_vote_highprivacy(x: BoundInputs) -> HighPrivacyBound:
    """Large-``B`` majority-vote bound on the average squared L2 gradient norm.

    ``computable`` is the two explicit bracket terms divided by the vote gain.
    The remaining series only has a big-O statement; ``residual_heuristic``
    fills it in with unit constants and is not a proven number.
    """
    validate_params(x.params, Mode.VOTE_BOUND)
    gain = vote_gain(x.params, x.M)
    t1, t2 = _vote_terms(x)
    A, B, M = x.A, x.B, x.M
    series = sum(
        (1 - A / B) ** (M - n) * math.comb(M, n) * A ** (n - 2) / B ** n for n in range(2, M + 1)
    )
    return HighPrivacyBound(
        computable=(t1 + t2) / gain,
        gain=gain,
        residual_heuristic=series * x.Q * x.d / gain,
    )
