"""Parameter-server training loop on synthetic objectives.

Each round the server samples participants, every participant returns one
compressed message computed from its own ``(seed, round, worker)`` stream, the
server aggregates and takes a step. Records are bit-reproducible for a given
seed whatever the execution order of the workers.
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import aggregators as agg
from . import attacks as atk
from .compressors import (
    GaussianSparseParams,
    clip_l2,
    clip_linf,
    gaussian_sparse_compress,
    ternary_compress,
)
from .core import (
    CompressorParams,
    ConfigError,
    FixedSubset,
    FullParticipation,
    IndependentBernoulli,
    RngLike,
    RngStream,
    TopologyConfig,
    as_generator,
    stream,
)
from .oracle import BoundInputs

FLOAT_BITS = 32


# ---------------------------------------------------------------------------
# objectives


@dataclass(frozen=True, eq=False)
class Quadratic:
    """Per-example loss ``0.5 * ||w - s||^2`` with one optimum ``s`` per example."""

    optima: np.ndarray
    smoothness: float = 1.0

    @property
    def d(self) -> int:
        return self.optima.shape[1]

    @property
    def n_examples(self) -> int:
        return self.optima.shape[0]

    def example_grads(self, w: np.ndarray, idx) -> np.ndarray:
        return w[None, :] - self.optima[idx]

    def example_losses(self, w: np.ndarray, idx) -> np.ndarray:
        return 0.5 * np.sum((w[None, :] - self.optima[idx]) ** 2, axis=1)


@dataclass(frozen=True, eq=False)
class Logistic:
    """Binary cross-entropy with labels in {0, 1} plus ``0.5 * lam * ||w||^2``."""

    features: np.ndarray
    labels: np.ndarray
    lam: float = 0.0

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_examples(self) -> int:
        return self.features.shape[0]

    @property
    def smoothness(self) -> float:
        X = self.features
        return float(np.linalg.eigvalsh(X.T @ X / X.shape[0]).max() / 4 + self.lam)

    def example_grads(self, w, idx) -> np.ndarray:
        X = self.features[idx]
        z = X @ w
        resid = 1 / (1 + np.exp(-z)) - self.labels[idx]
        return resid[:, None] * X + self.lam * w[None, :]

    def example_losses(self, w, idx) -> np.ndarray:
        z = self.features[idx] @ w
        y = self.labels[idx]
        return np.logaddexp(0, z) - y * z + 0.5 * self.lam * float(w @ w)


Objective = Union[Quadratic, Logistic]


@dataclass(frozen=True, eq=False)
class Problem:
    """An objective split into per-worker shards.

    The first ``n_honest`` shards define the global objective
    ``F(w) = mean_m f_m(w)``; any further shards belong to Byzantine workers.
    """

    objective: Objective
    shards: tuple
    n_honest: int

    @property
    def d(self) -> int:
        return self.objective.d

    @functools.cached_property
    def _quadratic_moments(self) -> tuple[np.ndarray, float]:
        # F(w) = 0.5 ||w||^2 - w . m1 + 0.5 m2 with m1, m2 shard-averaged moments of the optima
        S = self.objective.optima
        honest = self.shards[: self.n_honest]
        m1 = np.mean([S[s].mean(axis=0) for s in honest], axis=0)
        m2 = float(np.mean([np.sum(S[s] ** 2, axis=1).mean() for s in honest]))
        return m1, m2

    def loss(self, w) -> float:
        w = np.asarray(w, dtype=float)
        if isinstance(self.objective, Quadratic):
            m1, m2 = self._quadratic_moments
            return float(0.5 * (w @ w) - w @ m1 + 0.5 * m2)
        return float(np.mean([self.objective.example_losses(w, s).mean() for s in self.shards[: self.n_honest]]))

    def grad(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if isinstance(self.objective, Quadratic):
            return w - self._quadratic_moments[0]
        return np.mean([self.objective.example_grads(w, s).mean(axis=0) for s in self.shards[: self.n_honest]], axis=0)


def dirichlet_partition(labels: Sequence, M: int, alpha: float, rng: RngLike) -> list[np.ndarray]:
    """Split example indices over ``M`` workers with Dir(alpha) class proportions.

    Counts per class use largest-remainder rounding. A worker left empty gets
    one example donated from the largest shard.
    """
    if not alpha > 0 or M < 1:
        raise ValueError("need alpha > 0 and M >= 1")
    gen = as_generator(rng)
    labels = np.asarray(labels)
    buckets: list[list[int]] = [[] for _ in range(M)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        gen.shuffle(idx)
        props = gen.dirichlet(np.full(M, float(alpha)))
        raw = props * idx.size
        counts = np.floor(raw).astype(int)
        short = idx.size - counts.sum()
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
        start = 0
        for m in range(M):
            buckets[m].extend(idx[start:start + counts[m]].tolist())
            start += counts[m]
    for m in range(M):
        if not buckets[m]:
            donor = max(range(M), key=lambda j: len(buckets[j]))
            if len(buckets[donor]) < 2:
                raise ValueError("not enough examples to give every worker one")
            pos = int(gen.integers(len(buckets[donor])))
            buckets[m].append(buckets[donor].pop(pos))
    return [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]


def make_quadratic_problem(
    M: int,
    K: int = 0,
    d: int = 50,
    examples_per_worker: int = 32,
    center_scale: float = 1.0,
    worker_spread: float = 0.2,
    example_spread: float = 0.2,
    seed: int = 0,
) -> Problem:
    """Heterogeneous quadratic problem.

    A global centre is drawn from U(-center_scale, center_scale)^d, each worker
    offsets it by N(0, worker_spread^2) and each example by a further
    N(0, example_spread^2).
    """
    gen = RngStream(seed, ("data", "quadratic")).generator()
    n = M + K
    center = gen.uniform(-center_scale, center_scale, size=d)
    worker_opt = center + worker_spread * gen.standard_normal((n, d))
    optima = np.repeat(worker_opt, examples_per_worker, axis=0)
    optima += example_spread * gen.standard_normal(optima.shape)
    shards = tuple(np.arange(m * examples_per_worker, (m + 1) * examples_per_worker) for m in range(n))
    return Problem(Quadratic(optima), shards, M)


def make_logistic_problem(
    M: int,
    K: int = 0,
    d: int = 20,
    n_examples: int = 2000,
    lam: float = 1e-3,
    dirichlet_alpha: float = 0.1,
    seed: int = 0,
) -> Problem:
    """Linearly separable-ish logistic data split by label with Dir(alpha)."""
    gen = RngStream(seed, ("data", "logistic")).generator()
    w_true = gen.standard_normal(d)
    X = gen.standard_normal((n_examples, d)) / math.sqrt(d)
    y = (X @ w_true + 0.1 * gen.standard_normal(n_examples) > 0).astype(float)
    shards = dirichlet_partition(y, M + K, dirichlet_alpha, RngStream(seed, ("data", "partition")))
    return Problem(Logistic(X, y, lam), tuple(shards), M)


def quadratic_bound_inputs(problem: Problem, p: CompressorParams, T: int, K: int = 0, w0=None) -> BoundInputs:
    """Analysis constants of a quadratic problem for the bound evaluators.

    ``L = 1``. ``F* `` is attained at the mean of the honest optima. ``sigma_bar``
    is the largest per-coordinate standard deviation, over honest workers, of
    a size-``b`` mini-batch mean drawn without replacement. ``Q`` is the largest
    ``|grad F(w0)_i|``; it only bounds the gradient along trajectories that stay
    in the box spanned by the start and the optimum.
    """
    obj = problem.objective
    if not isinstance(obj, Quadratic):
        raise ConfigError("closed-form bound inputs need a quadratic objective")
    d = obj.d
    w0 = np.zeros(d) if w0 is None else np.asarray(w0, dtype=float)
    honest = problem.shards[: problem.n_honest]
    centers = np.stack([obj.optima[s].mean(axis=0) for s in honest])
    w_star = centers.mean(axis=0)
    F0 = problem.loss(w0)
    Fstar = problem.loss(w_star)
    sig = np.zeros(d)
    for s in honest:
        n = len(s)
        b = min(p.b, n)
        var = obj.optima[s].var(axis=0)
        fpc = (n - b) / (n - 1) if n > 1 else 0.0
        sig = np.maximum(sig, np.sqrt(var / b * fpc))
    return BoundInputs(
        L=obj.smoothness,
        sigma_bar=tuple(sig.tolist()),
        F0_minus_Fstar=F0 - Fstar,
        A=p.A,
        B=p.B,
        c=p.c,
        d=d,
        M=problem.n_honest,
        T=T,
        b=p.b,
        K=K,
        Q=float(np.max(np.abs(problem.grad(w0)))),
    )


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class LinfClip:
    c: float


@dataclass(frozen=True)
class L2Clip:
    C: float


@dataclass(frozen=True)
class StepDecay:
    factor: float
    at_rounds: tuple[int, ...]


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs besides the problem.

    ``eta="auto"`` uses ``1 / sqrt(T L d)`` with ``L`` from the config or,
    failing that, the objective. ``debias`` multiplies mean aggregates of
    ternary messages by ``B``.
    """

    T: int
    batch: int
    compressor: Union[CompressorParams, GaussianSparseParams]
    topology: TopologyConfig
    aggregator: agg.AggregatorChoice = agg.TernaryVote()
    attack: atk.AttackChoice = atk.NoAttack()
    eta: Union[float, str] = "auto"
    L: Optional[float] = None
    clip: Optional[Union[LinfClip, L2Clip]] = None
    schedule: Optional[StepDecay] = None
    debias: bool = False
    seed: int = 0
    w0: Optional[tuple] = None

    @property
    def ternary(self) -> bool:
        return isinstance(self.compressor, CompressorParams)

    @property
    def resolved_clip(self) -> Union[LinfClip, L2Clip]:
        if self.clip is not None:
            return self.clip
        if self.ternary:
            return LinfClip(self.compressor.c)
        return L2Clip(self.compressor.C)

    def validate(self, problem: Problem) -> None:
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if not (self.eta == "auto" or (isinstance(self.eta, (int, float)) and self.eta >= 0)):
            raise ConfigError(f"eta must be 'auto' or a number >= 0, got {self.eta!r}")
        if self.w0 is not None and len(self.w0) != problem.d:
            raise ConfigError(f"w0 has length {len(self.w0)}, problem has d={problem.d}")
        if problem.n_honest != self.topology.M:
            raise ConfigError(f"problem has {problem.n_honest} honest shards, topology M={self.topology.M}")
        clip = self.resolved_clip
        if self.ternary:
            p = self.compressor
            if not isinstance(clip, LinfClip):
                raise ConfigError("the ternary compressor needs an L-infinity clip")
            if not 0 < clip.c <= p.c <= p.A:
                raise ConfigError(f"need 0 < clip {clip.c} <= c {p.c} <= A {p.A}")
            if p.b != self.batch:
                raise ConfigError(f"compressor b={p.b} differs from batch={self.batch}")
        needs_data = isinstance(self.attack, atk.FlipSign) and self.topology.K > 0
        if needs_data and len(problem.shards) < self.topology.n_workers:
            raise ConfigError("flip-sign attackers need their own data shards")
        if isinstance(self.attack, atk.LittleIsEnough):
            n, f = self.lie_nf
            atk.lie_z(n, f)

    @property
    def lie_nf(self) -> tuple[int, int]:
        a = self.attack
        n = a.n if a.n is not None else self.topology.n_workers
        f = a.f if a.f is not None else self.topology.K
        return n, f

    def base_eta(self, problem: Problem) -> float:
        if self.eta != "auto":
            return float(self.eta)
        L = self.L if self.L is not None else problem.objective.smoothness
        return 1 / math.sqrt(self.T * L * problem.d)

    def eta_at(self, t: int, problem: Problem) -> float:
        eta = self.base_eta(problem)
        if self.schedule is not None:
            eta *= self.schedule.factor ** sum(1 for r in self.schedule.at_rounds if t >= r)
        return eta


@dataclass(frozen=True)
class RoundRecord:
    t: int
    grad_l1: float
    grad_l2sq: float
    loss: float
    uplink_bits: int
    downlink_bits: int
    participants: tuple[int, ...] = field(default=())


CSV_COLUMNS = ("t", "grad_l1", "grad_l2sq", "loss", "uplink_bits", "downlink_bits", "n_participants")


def records_to_csv(records: Sequence[RoundRecord]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for r in records:
        lines.append(
            f"{r.t},{r.grad_l1!r},{r.grad_l2sq!r},{r.loss!r},{r.uplink_bits},{r.downlink_bits},{len(r.participants)}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# communication accounting


def _index_bits(d: int) -> int:
    return math.ceil(math.log2(d)) if d > 1 else 0


def ternary_entropy_bits(msg) -> float:
    """``d * H(empirical frequencies of -1, 0, +1)``: an idealised encoding size."""
    z = np.asarray(msg)
    freqs = np.array([np.mean(z == v) for v in (-1, 0, 1)])
    freqs = freqs[freqs > 0]
    return float(-z.size * np.sum(freqs * np.log2(freqs)))


def account_bits(msg, direction: str, kind: str = "ternary") -> int:
    """Positional bits to send ``msg``.

    Ternary messages cost a sign bit plus an index per nonzero coordinate.
    Real-valued uplink messages cost a 32-bit float plus an index per nonzero.
    A dense real downlink costs 32 bits per coordinate.
    """
    z = np.asarray(msg)
    d = z.size
    nnz = int(np.count_nonzero(z))
    if kind == "ternary":
        return nnz * (1 + _index_bits(d))
    if kind == "real":
        if direction == "uplink":
            return nnz * (FLOAT_BITS + _index_bits(d))
        return FLOAT_BITS * d
    raise ValueError(f"unknown message kind {kind!r}")


# ---------------------------------------------------------------------------
# one worker, one round


def _sample_batch(gen: np.random.Generator, shard: np.ndarray, b: int) -> np.ndarray:
    if b >= shard.size:
        return shard
    # the b smallest of shard.size uniform keys: a uniform b-subset without replacement
    return shard[np.argpartition(gen.random(shard.size), b - 1)[:b]]


def local_gradient(problem: Problem, worker: int, w, config: TrainConfig, gen: np.random.Generator) -> np.ndarray:
    """Mini-batch mean of per-example clipped gradients on the worker's shard."""
    batch = _sample_batch(gen, problem.shards[worker], config.batch)
    grads = problem.objective.example_grads(w, batch)
    clip = config.resolved_clip
    if isinstance(clip, LinfClip):
        grads = np.minimum(np.maximum(grads, -clip.c), clip.c)
    else:
        norms = np.linalg.norm(grads, axis=1)
        grads = grads * np.minimum(1.0, clip.C / np.maximum(norms, 1e-300))[:, None]
    return grads.sum(axis=0) / grads.shape[0]


@dataclass
class RoundContext:
    """What the server exposes to attackers in a round."""

    true_grad: np.ndarray
    honest_grads: list = field(default_factory=list)


def _byzantine_gradient(problem, worker, w, config, gen, ctx: RoundContext) -> np.ndarray:
    a = config.attack
    if isinstance(a, (atk.Blind, atk.NoAttack)):
        return atk.attack_blind(ctx.true_grad)
    if isinstance(a, atk.FlipSign):
        return atk.attack_flip_sign(local_gradient(problem, worker, w, config, gen))
    if isinstance(a, atk.FallOfEmpire):
        mean = np.mean(ctx.honest_grads, axis=0) if ctx.honest_grads else ctx.true_grad
        return atk.attack_foe(mean, a.scale)
    if isinstance(a, atk.LittleIsEnough):
        if len(ctx.honest_grads) < 2:
            base = ctx.honest_grads[0] if ctx.honest_grads else ctx.true_grad
            return np.array(base, dtype=float)
        n, f = config.lie_nf
        return atk.attack_lie(ctx.honest_grads, n, f)
    raise ConfigError(f"unknown attack {a!r}")


def worker_round(problem: Problem, worker: int, w, config: TrainConfig, rng: RngLike, ctx: Optional[RoundContext] = None):
    """Message sent by ``worker`` at weights ``w``.

    Honest workers clip per-example gradients, average and compress.
    Byzantine workers build their estimate from the attack, clip it to the
    same box and compress without privacy noise (``A = c`` for the ternary
    compressor, ``sigma = 0`` for the baseline).
    """
    gen = as_generator(rng)
    w = np.asarray(w, dtype=float)
    byz = config.topology.is_byzantine(worker)
    if byz:
        if ctx is None:
            ctx = RoundContext(problem.grad(w))
        g = _byzantine_gradient(problem, worker, w, config, gen, ctx)
    else:
        g = local_gradient(problem, worker, w, config, gen)
    comp = config.compressor
    if config.ternary:
        if byz:
            g = clip_linf(g, comp.c)
            comp = CompressorParams(A=comp.c, B=comp.B, c=comp.c, b=comp.b)
        return ternary_compress(g, comp, gen)
    if byz:
        g = clip_l2(g, comp.C)
        comp = GaussianSparseParams(comp.C, 0.0, comp.keep_prob, comp.rescale, comp.order)
    return gaussian_sparse_compress(g, comp, gen)


# ---------------------------------------------------------------------------
# the training loop


def sample_participants(topology: TopologyConfig, rng: RngLike) -> tuple[int, ...]:
    n = topology.n_workers
    s = topology.sampling
    if isinstance(s, FullParticipation):
        return tuple(range(n))
    gen = as_generator(rng)
    if isinstance(s, FixedSubset):
        return tuple(sorted(int(i) for i in gen.choice(n, size=s.n_t, replace=False)))
    if isinstance(s, IndependentBernoulli):
        return tuple(int(i) for i in np.flatnonzero(gen.random(n) < s.p_s))
    raise ConfigError(f"unknown sampling {s!r}")


def _aggregate(config: TrainConfig, msgs, state: dict) -> np.ndarray:
    choice = config.aggregator
    scale = config.compressor.B if (config.ternary and config.debias) else 1.0
    if isinstance(choice, agg.TernaryVote):
        return agg.aggregate_vote(msgs).astype(float)
    if isinstance(choice, (agg.TernaryMean, agg.PlainMean)):
        return scale * agg.aggregate_mean(msgs)
    if isinstance(choice, agg.MultiKrum):
        return scale * agg.aggregate_multikrum(msgs, choice.f, choice.m)
    if isinstance(choice, agg.CenteredClipping):
        v = agg.aggregate_centered_clipping(msgs, state["cc"], choice.tau, choice.iters)
        state["cc"] = v
        return scale * v
    raise ConfigError(f"unknown aggregator {choice!r}")


def _downlink_kind(config: TrainConfig) -> str:
    return "ternary" if isinstance(config.aggregator, agg.TernaryVote) else "real"


def _record(problem: Problem, t: int, w, up: int, down: int, participants) -> RoundRecord:
    g = problem.grad(w)
    return RoundRecord(
        t=t,
        grad_l1=float(np.sum(np.abs(g))),
        grad_l2sq=float(g @ g),
        loss=problem.loss(w),
        uplink_bits=int(up),
        downlink_bits=int(down),
        participants=tuple(participants),
    )


def train(problem: Problem, config: TrainConfig, n_jobs: int = 1) -> tuple[list[RoundRecord], np.ndarray]:
    """Run the loop; returns the records for ``w_0 .. w_T`` and the final weights.

    Record ``t`` holds the metrics at ``w_t`` and the traffic of round ``t``;
    the last record (``t = T``) has no traffic.
    """
    config.validate(problem)
    d = problem.d
    w = np.zeros(d) if config.w0 is None else np.asarray(config.w0, dtype=float).copy()
    state = {"cc": np.zeros(d)}
    records: list[RoundRecord] = []
    up_kind = "ternary" if config.ternary else "real"
    attackers_need_snapshot = isinstance(config.attack, (atk.FallOfEmpire, atk.LittleIsEnough))
    pool = ThreadPoolExecutor(n_jobs) if n_jobs > 1 else None
    try:
        for t in range(config.T):
            participants = sample_participants(config.topology, stream(config.seed, t, -1, "participants"))
            true_grad = problem.grad(w)
            honest = [i for i in participants if not config.topology.is_byzantine(i)]
            byz = [i for i in participants if config.topology.is_byzantine(i)]

            def run(i, ctx=None):
                return worker_round(problem, i, w, config, stream(config.seed, t, i, "local"), ctx)

            ctx = RoundContext(true_grad)
            if attackers_need_snapshot and byz:
                # attackers see the honest clipped gradients of this round before choosing theirs
                ctx.honest_grads = [
                    local_gradient(problem, i, w, config, stream(config.seed, t, i, "local").generator())
                    for i in honest
                ]
            if pool is not None:
                msgs = list(pool.map(lambda i: run(i, ctx), participants))
            else:
                msgs = [run(i, ctx) for i in participants]
            up = sum(account_bits(m, "uplink", up_kind) for m in msgs)
            if msgs:
                ghat = _aggregate(config, msgs, state)
                down = account_bits(ghat, "downlink", _downlink_kind(config)) * len(participants)
            else:
                ghat = np.zeros(d)
                down = 0
            records.append(_record(problem, t, w, up, down, participants))
            w = w - config.eta_at(t, problem) * ghat
        records.append(_record(problem, config.T, w, 0, 0, ()))
    finally:
        if pool is not None:
            pool.shutdown()
    return records, w


def run_training(problem: Problem, config: TrainConfig, n_jobs: int = 1) -> list[RoundRecord]:
    return train(problem, config, n_jobs)[0]
