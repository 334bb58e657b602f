"""f-DP accounting for the ternary compressor.

Tradeoff curves are stored as continuous piecewise-linear functions on
[0, 1]. The vector guarantee is a Gaussian-DP approximation obtained from a
central limit theorem for tradeoff functions, and everything can be turned
into (epsilon, delta) pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from scipy import special

from .core import (
    CompressorParams,
    DegenerateCurve,
    Infeasible,
    InvariantError,
    Mode,
    ParamViolation,
    validate_params,
)

# Berry-Esseen constant in the CLT for tradeoff functions.
BERRY_ESSEEN = 0.56


@dataclass(frozen=True)
class TradeoffCurve:
    """Piecewise-linear tradeoff function through ``(alpha, beta)`` breakpoints."""

    alphas: tuple[float, ...]
    betas: tuple[float, ...]
    # Optional ``(width, log|slope|)`` per segment, supplied by constructors that
    # know them in closed form; differencing breakpoints loses relative precision
    # when slopes are close to -1.
    exact_segments: Optional[tuple[tuple[float, float], ...]] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=float)
        b = np.asarray(self.betas, dtype=float)
        if a.shape != b.shape or a.size < 2:
            raise ValueError("need at least two breakpoints with matching alpha/beta")
        if a[0] != 0.0 or a[-1] != 1.0:
            raise ValueError("breakpoints must start at alpha=0 and end at alpha=1")
        if np.any(np.diff(a) <= 0):
            raise ValueError("breakpoint alphas must be strictly increasing")
        if np.any(b < -1e-12) or np.any(b > 1 + 1e-12):
            raise ValueError("beta values must lie in [0, 1]")
        if self.exact_segments is not None:
            approx = [(w, math.log(abs(s))) for w, s in self.segments()]
            if len(approx) != len(self.exact_segments) or not np.allclose(approx, self.exact_segments, atol=1e-9):
                raise InvariantError("exact segment data disagrees with the breakpoints")

    @classmethod
    def from_points(cls, points: Iterable[tuple[float, float]], tol: float = 1e-15) -> "TradeoffCurve":
        """Build a curve, merging breakpoints that coincide (zero-width segments)."""
        alphas: list[float] = []
        betas: list[float] = []
        for a, b in points:
            if alphas and abs(a - alphas[-1]) <= tol:
                # a vertical drop keeps the lower value
                betas[-1] = min(betas[-1], float(b))
                continue
            alphas.append(float(a))
            betas.append(float(b))
        return cls(tuple(alphas), tuple(betas))

    def __call__(self, alpha):
        return np.interp(alpha, self.alphas, self.betas)

    @property
    def breakpoints(self) -> list[tuple[float, float]]:
        return list(zip(self.alphas, self.betas))

    def segments(self) -> list[tuple[float, float]]:
        """``(width, slope)`` for each linear piece."""
        a = np.asarray(self.alphas)
        b = np.asarray(self.betas)
        widths = np.diff(a)
        slopes = np.diff(b) / widths
        return list(zip(widths.tolist(), slopes.tolist()))

    def is_nonincreasing(self, tol: float = 1e-12) -> bool:
        return bool(np.all(np.diff(self.betas) <= tol))

    def is_convex(self, tol: float = 1e-9) -> bool:
        slopes = [s for _, s in self.segments()]
        return all(s2 >= s1 - tol for s1, s2 in zip(slopes, slopes[1:]))

    def to_csv(self) -> str:
        rows = ["alpha,beta"] + [f"{a!r},{b!r}" for a, b in self.breakpoints]
        return "\n".join(rows) + "\n"


IDENTITY_CURVE = TradeoffCurve((0.0, 1.0), (1.0, 0.0))


def _three_piece_curve(A: float, B: float, c: float, b: int) -> TradeoffCurve:
    # Shared shape of the scalar and mini-batch curves; b=1 gives the scalar one.
    steep = (A * b - (b - 2) * c) / ((A - c) * b)
    a1 = (A - c) / (2 * B)
    a2 = 1 - (A * b - (b - 2) * c) / (2 * B * b)
    flat = lambda x: 1 - c / (B * b) - x  # noqa: E731
    points = [(0.0, 1.0), (a1, 1 - steep * a1), (a2, flat(a2)), (1.0, 0.0)]
    if a2 < a1 - 1e-15:
        raise ParamViolation("B > A + c", "middle segment has negative width")
    curve = TradeoffCurve.from_points(points)
    # steep = 1 + 2c / ((A - c) b); the widths below avoid differencing a1, a2
    log_steep = math.log1p(2 * c / ((A - c) * b))
    widths = ((A - c) / (2 * B), 1 - (A - c) / B - c / (B * b), (A - c) / (2 * B) + c / (B * b))
    exact = tuple((w, l) for w, l in zip(widths, (log_steep, 0.0, -log_steep)) if w > 1e-15)
    if len(exact) != len(curve.alphas) - 1:
        return curve
    return TradeoffCurve(curve.alphas, curve.betas, exact)


def curve_ternary_scalar(p: CompressorParams) -> TradeoffCurve:
    """Tradeoff curve of one coordinate for inputs symmetric about zero (b = 1)."""
    validate_params(p, Mode.PRIVACY)
    if p.b != 1:
        raise ParamViolation("b = 1", f"b={p.b}; use curve_ternary_minibatch")
    return _three_piece_curve(p.A, p.B, p.c, 1)


def curve_ternary_minibatch(p: CompressorParams) -> TradeoffCurve:
    """Tradeoff curve of one coordinate when the private example is one of ``b``."""
    validate_params(p, Mode.PRIVACY)
    return _three_piece_curve(p.A, p.B, p.c, int(p.b))


def curve_stochastic_sign(B: float, c: float) -> TradeoffCurve:
    """Scalar curve for ``A = B`` (the middle segment collapses to a point)."""
    if not 0 < c < B:
        raise ParamViolation("0 < c < B", f"B={B}, c={c}")
    return _three_piece_curve(B, B, c, 1)


class Functionals(NamedTuple):
    kl: float
    kappa2: float
    kappa3: float
    kappa3_bar: float


def curve_functionals(f: TradeoffCurve) -> Functionals:
    """Integrals of ``log|f'|`` used by the CLT, exact per linear segment."""
    if f.exact_segments is not None:
        logs = list(f.exact_segments)
    else:
        segs = [(w, s) for w, s in f.segments() if w > 0]
        for w, s in segs:
            if s == 0:
                raise DegenerateCurve(f"zero slope over a segment of width {w}")
        logs = [(w, math.log(abs(s))) for w, s in segs]
    kl = -sum(w * l for w, l in logs)
    kappa2 = sum(w * l * l for w, l in logs)
    kappa3 = sum(w * abs(l) ** 3 for w, l in logs)
    kappa3_bar = sum(w * abs(l + kl) ** 3 for w, l in logs)
    return Functionals(kl, kappa2, kappa3, kappa3_bar)


def clt_mu_gamma(functionals: Sequence[Functionals]) -> tuple[float, float]:
    """Generic CLT ``(mu, gamma)`` for the tensor product of the given curves."""
    kl1 = sum(fn.kl for fn in functionals)
    kl2sq = sum(fn.kl ** 2 for fn in functionals)
    k2 = sum(fn.kappa2 for fn in functionals)
    k3bar = sum(fn.kappa3_bar for fn in functionals)
    spread = k2 - kl2sq
    if spread <= 0:
        raise DegenerateCurve("kappa2 - kl^2 vanishes; the curve carries no information")
    return 2 * kl1 / math.sqrt(spread), BERRY_ESSEEN * k3bar / spread ** 1.5


@dataclass(frozen=True)
class GdpApproximation:
    mu: float
    gamma: float

    @property
    def clt_valid(self) -> bool:
        """The sandwich bound only says something when ``gamma < 1/2``."""
        return self.gamma < 0.5

    def lower(self, alpha):
        return np.maximum(gaussian_curve(self.mu)(np.clip(np.asarray(alpha) + self.gamma, 0, 1)) - self.gamma, 0.0)

    def upper(self, alpha):
        return np.minimum(gaussian_curve(self.mu)(np.clip(np.asarray(alpha) - self.gamma, 0, 1)) + self.gamma, 1.0)


def mu_closed_form(p: CompressorParams, d: int) -> float:
    A, B, c, b = p.A, p.B, p.c, p.b
    return 2 * math.sqrt(d) * c / math.sqrt((A - c) * B * b * b + B * b * c - c * c)


def gamma_closed_form(p: CompressorParams, d: int, form: str = "combined") -> float:
    """Berry-Esseen error of the vector approximation.

    ``form="combined"`` evaluates the single fraction with three summed terms;
    ``form="split"`` evaluates the two-fraction display. They are algebraically
    equal and kept side by side only so the equality can be checked.
    """
    A, B, c, b = p.A, p.B, p.c, p.b
    q = c / (B * b)
    w_lo = (A - c) / (2 * B)
    w_hi = (A * b - (b - 2) * c) / (2 * B * b)
    if form == "combined":
        nonflat = (A - c + c / b) / B
        num = w_lo * abs(1 + q) ** 3 + w_hi * abs(1 - q) ** 3 + (1 - nonflat) * abs(q) ** 3
        den = (nonflat - q * q) ** 1.5 * math.sqrt(d)
        return BERRY_ESSEEN * num / den
    if form == "split":
        nonflat = ((A - c) * b + c) / (B * b)
        den = (nonflat - c * c / (B * B * b * b)) ** 1.5 * d ** 0.5
        first = BERRY_ESSEEN * (w_lo * abs(1 + q) ** 3 + w_hi * abs(1 - q) ** 3) / den
        second = BERRY_ESSEEN * ((1 - nonflat) * abs(q) ** 3) / den
        return first + second
    raise ValueError(f"unknown gamma form {form!r}")


def gdp_approx_vector(p: CompressorParams, d: int, gamma_form: str = "combined") -> GdpApproximation:
    """Gaussian-DP parameter and CLT error for a ``d``-coordinate message.

    The closed form is checked against the generic CLT expressions built
    from ``d`` copies of the per-coordinate curve.
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    curve = curve_ternary_minibatch(p)
    mu = mu_closed_form(p, d)
    gamma = gamma_closed_form(p, d, gamma_form)
    fn = curve_functionals(curve)
    # d identical copies: mu scales by sqrt(d), gamma by 1/sqrt(d)
    mu_clt, gamma_clt = clt_mu_gamma([fn])
    mu_clt *= math.sqrt(d)
    gamma_clt /= math.sqrt(d)
    if not math.isclose(mu, mu_clt, rel_tol=1e-9, abs_tol=1e-12):
        raise InvariantError(f"closed-form mu {mu!r} != CLT mu {mu_clt!r}")
    if not math.isclose(gamma, gamma_clt, rel_tol=1e-9, abs_tol=1e-12):
        raise InvariantError(f"closed-form gamma {gamma!r} != CLT gamma {gamma_clt!r}")
    return GdpApproximation(mu, gamma)


def gdp_compose(mus: Iterable[float]) -> float:
    """mu of the composition of mu_i-GDP mechanisms: root sum of squares."""
    mus = np.asarray(list(mus), dtype=float)
    if np.any(mus < 0):
        raise ValueError("GDP parameters must be >= 0")
    return float(math.sqrt(math.fsum(mus * mus)))


def curve_to_epsilon_delta(f: TradeoffCurve, epsilon: float) -> float:
    """Smallest delta for which ``f`` is (epsilon, delta)-DP.

    Both envelope pieces are checked, so the answer is also right for curves
    that are not symmetric. Each piece is concave in alpha once ``f`` is
    convex, so the supremum sits on a breakpoint.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    a = np.asarray(f.alphas)
    b = np.asarray(f.betas)
    e = math.exp(epsilon)
    first = 1 - e * a - b
    second = 1 - a - e * b
    return float(max(0.0, first.max(), second.max()))


def epsilon_for_delta(f: TradeoffCurve, delta: float, eps_max: float = 50.0) -> float:
    """Inverse of :func:`curve_to_epsilon_delta` by bisection (delta is monotone in epsilon)."""
    if curve_to_epsilon_delta(f, 0.0) <= delta:
        return 0.0
    if curve_to_epsilon_delta(f, eps_max) > delta:
        return math.inf
    lo, hi = 0.0, eps_max
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if curve_to_epsilon_delta(f, mid) > delta:
            lo = mid
        else:
            hi = mid
    return hi


class GaussianTradeoff:
    """``G_mu(alpha) = Phi(Phi^{-1}(1 - alpha) - mu)``."""

    def __init__(self, mu: float):
        if mu < 0:
            raise ValueError("mu must be >= 0")
        self.mu = float(mu)

    def __call__(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        out = special.ndtr(special.ndtri(1 - alpha) - self.mu)
        return out if out.ndim else float(out)

    def __repr__(self):
        return f"GaussianTradeoff(mu={self.mu!r})"


def gaussian_curve(mu: float) -> GaussianTradeoff:
    return GaussianTradeoff(mu)


def gdp_delta(mu: float, epsilon: float) -> float:
    """delta(epsilon) of a mu-GDP mechanism."""
    if mu == 0:
        return 0.0
    return float(special.ndtr(-epsilon / mu + mu / 2) - math.exp(epsilon) * special.ndtr(-epsilon / mu - mu / 2))


def solve_params(target_mu: float, ratio: float, c: float, b: int, d: int) -> CompressorParams:
    """Find ``(A, B)`` with ``A = ratio * B`` that give exactly ``target_mu``.

    Substituting ``A = rB`` into the closed-form mu leaves the quadratic
    ``r b^2 B^2 + c b (1 - b) B - c^2 (1 + 4d / mu^2) = 0``; its positive
    root is taken.
    """
    if not target_mu > 0:
        raise ValueError("target mu must be > 0")
    if not 0 < ratio <= 0.5:
        raise ValueError("ratio A/B must be in (0, 1/2]")
    if not c > 0 or b < 1 or d < 1:
        raise ValueError("need c > 0, b >= 1, d >= 1")
    qa = ratio * b * b
    qb = c * b * (1 - b)
    qc = -c * c * (1 + 4 * d / target_mu ** 2)
    disc = qb * qb - 4 * qa * qc
    # qb <= 0 and qc < 0, so the '+' root is positive and free of cancellation
    B = (-qb + math.sqrt(disc)) / (2 * qa)
    A = ratio * B
    if not A > c:
        raise Infeasible(
            f"infeasible: A > c fails (target mu={target_mu} gives A={A:.6g}, c={c} at A/B={ratio}); "
            "lower mu or raise b"
        )
    p = CompressorParams(A=A, B=B, c=c, b=int(b))
    validate_params(p, Mode.PRIVACY)
    return p
