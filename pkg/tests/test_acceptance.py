"""Acceptance suite: twelve end-to-end criteria at their stated tolerances.

Each test prints exactly one ``PASS``/``FAIL`` line (shown even under pytest's
output capture). Run directly with ``python tests/test_acceptance.py`` for the
summary alone.
"""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import stats

from ternaryvote import aggregators as agg
from ternaryvote import attacks as atk
from ternaryvote import oracle, privacy
from ternaryvote import simulation as sim
from ternaryvote.compressors import ternary_compress, ternary_compress_sampled
from ternaryvote.core import CompressorParams, Infeasible, RngStream, TopologyConfig

_capture = None


@pytest.fixture(autouse=True)
def _expose_capture(pytestconfig):
    global _capture
    _capture = pytestconfig.pluginmanager.getplugin("capturemanager")
    yield
    _capture = None


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} [{n:2d}] {title}: {detail}"
    if _capture is not None:
        with _capture.global_and_fixture_disabled():
            print("\n" + line, flush=True)
    else:
        print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# 1


def test_01_compressor_statistics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    n = 10**6
    worst_mean = worst_m2 = 0.0
    fails = 0
    for k in range(100):
        A = rng.uniform(0.1, 5.0)
        B = A * rng.uniform(1.0, 6.0)
        x = rng.uniform(-A, A)
        z = ternary_compress(np.full(n, x), CompressorParams(A, B, A), RngStream(1, ("acc1", k))).astype(np.float64)
        bz = B * z
        mean_err = abs(bz.mean() - x)
        m2 = bz * bz
        m2_err = abs(m2.mean() - A * B) / (m2.std(ddof=1) / math.sqrt(n))
        worst_mean = max(worst_mean, mean_err / (4 * math.sqrt(A * B) / 1e3))
        worst_m2 = max(worst_m2, m2_err)
        fails += mean_err > 4 * math.sqrt(A * B) / 1e3 or m2_err > 5
    dt = time.perf_counter() - t0
    report(1, "compressor statistics", fails == 0 and dt < 30,
           f"100 settings x 1e6 draws; worst mean error {worst_mean:.3f} of tolerance, "
           f"worst second moment {worst_m2:.2f} SE (<= 5); {dt:.1f}s (< 30s)")


# ---------------------------------------------------------------------------
# 2


def _random_valid(rng):
    c = rng.uniform(0.05, 2.0)
    A = c + rng.uniform(0.01, 3.0)
    B = A + c + rng.uniform(0.01, 5.0)
    return A, B, c


def test_02_privacy_formula_cross_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = worst_b1 = 0.0
    for _ in range(1000):
        A, B, c = _random_valid(rng)
        b = int(rng.integers(1, 129))
        d = int(rng.integers(1, 1001))
        p = CompressorParams(A, B, c, b)
        fn = privacy.curve_functionals(privacy.curve_ternary_minibatch(p))
        mu_generic, _ = privacy.clt_mu_gamma([fn] * d)
        worst = max(worst, abs(privacy.mu_closed_form(p, d) - mu_generic) / mu_generic)
        p1 = CompressorParams(A, B, c, 1)
        collapsed = 2 * math.sqrt(d) * c / math.sqrt(A * B - c * c)
        worst_b1 = max(worst_b1, abs(privacy.mu_closed_form(p1, d) - collapsed) / collapsed)
    dt = time.perf_counter() - t0
    report(2, "closed-form mu vs generic CLT mu", worst <= 1e-9 and worst_b1 <= 1e-12 and dt < 5,
           f"1000 sets; max rel diff {worst:.1e} (<= 1e-9), b=1 collapse {worst_b1:.1e} (<= 1e-12); {dt:.2f}s (< 5s)")


# ---------------------------------------------------------------------------
# 3


def test_03_solver_round_trip():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    worst = 0.0
    solved = rejected = wrong = 0
    while solved < 1000:
        r = rng.uniform(0.05, 0.5)
        c = rng.uniform(0.1, 3.0)
        b = int(rng.integers(1, 65))
        d = int(rng.integers(1, 10**5))
        # A > c  <=>  mu < 2 sqrt(d) / sqrt(b / r - 1), the value at A = c on the line A = rB
        mu_max = 2 * math.sqrt(d) / math.sqrt(b / r - 1)
        mu = mu_max * rng.uniform(0.01, 0.99)
        p = privacy.solve_params(mu, r, c, b, d)
        worst = max(worst, abs(privacy.mu_closed_form(p, d) - mu) / mu)
        solved += 1
        try:
            privacy.solve_params(mu_max * rng.uniform(1.001, 10), r, c, b, d)
            wrong += 1
        except Infeasible:
            rejected += 1
    dt = time.perf_counter() - t0
    report(3, "solver round trip", worst <= 1e-9 and wrong == 0 and dt < 5,
           f"1000 feasible targets, max rel error {worst:.1e} (<= 1e-9); "
           f"{rejected}/{rejected + wrong} infeasible targets rejected; {dt:.2f}s (< 5s)")


# ---------------------------------------------------------------------------
# 4


def test_04_epsilon_delta_conversion():
    worst_eps = worst_zero = 0.0
    for B, c in ((3.0, 1.0), (2.0, 0.5), (10.0, 3.0), (1.0, 0.9), (5.0, 0.01)):
        f = privacy.curve_stochastic_sign(B, c)
        worst_eps = max(worst_eps, abs(privacy.curve_to_epsilon_delta(f, math.log((B + c) / (B - c)))))
        worst_zero = max(worst_zero, abs(privacy.curve_to_epsilon_delta(f, 0.0) - c / B))
    report(4, "(eps, delta) of the stochastic-sign curve", worst_eps <= 1e-12 and worst_zero <= 1e-12,
           f"|delta(log((B+c)/(B-c)))| max {worst_eps:.1e}, |delta(0) - c/B| max {worst_zero:.1e} (<= 1e-12)")


# ---------------------------------------------------------------------------
# 5


def test_05_gdp_composition():
    pyth = privacy.gdp_compose([3, 4])
    T, c0 = 10**6, 1.3
    err = abs(privacy.gdp_compose([c0 / math.sqrt(T)] * T) - c0)
    report(5, "GDP composition", pyth == 5 and err <= 1e-9,
           f"compose([3,4]) = {pyth!r}; 1e6 copies of c0/sqrt(T) give error {err:.1e} (<= 1e-9)")


# ---------------------------------------------------------------------------
# 6


def _u_grid(A, M):
    levels = [-A + 2 * A * (k + 0.5) / 10 for k in range(10)]
    grid = []
    for t in levels:
        grid.append(np.full(M, t))
        grid.append(np.clip(t + 0.4 * A * (-1.0) ** np.arange(M), -A, A))
    return [u for u in grid if abs(float(np.mean(u))) > 1e-12]


def test_06_vote_error_bound():
    t0 = time.perf_counter()
    checked = violations = 0
    worst = 0.0
    for A, B in ((2, 4), (1, 4), (2, 8)):
        p = CompressorParams(A, B, A)
        for M in range(1, 7):
            for u in _u_grid(A, M):
                exact = oracle.vote_error_exact(u, p)
                enum = oracle.vote_distribution_enumerate(u, p)
                wrong = enum.p_minus if np.mean(u) > 0 else enum.p_plus
                assert abs(exact - (wrong + 0.5 * enum.p_zero)) < 1e-12
                bound = oracle.vote_error_bound(u, p)
                checked += 1
                violations += exact > bound
                worst = max(worst, exact / bound)
    dt = time.perf_counter() - t0
    report(6, "vote error bound", violations == 0 and dt < 10,
           f"{checked} (u, A, B, M) points, {violations} violations, max exact/bound {worst:.3f}; {dt:.2f}s (< 10s)")


# ---------------------------------------------------------------------------
# 7


def test_07_vote_gain_link():
    t0 = time.perf_counter()
    worst_m2 = 0.0
    for A, B in ((2, 4), (1, 4), (2, 8), (1.5, 3.5)):
        p = CompressorParams(A, B, A)
        I2 = oracle.vote_gain(p, 2)
        for u1 in np.linspace(-A, A, 11):
            for u2 in np.linspace(-A, A, 11):
                bias = oracle.vote_distribution_exact([u1, u2], p).bias
                worst_m2 = max(worst_m2, abs(bias - I2 * (u1 + u2) / 2))
    rng = np.random.default_rng(707)
    min_ratio = math.inf
    for M in (3, 4, 5):
        for A, B in ((1, 4), (2, 4), (1.5, 6)):
            for _ in range(10):
                u = rng.uniform(-A, A, M)
                r1 = abs(oracle.vote_bias_residual(u, CompressorParams(A, B, A)))
                r2 = abs(oracle.vote_bias_residual(u, CompressorParams(2 * A, 2 * B, 2 * A)))
                min_ratio = min(min_ratio, r1 / r2)
    dt = time.perf_counter() - t0
    report(7, "vote bias = I * mean(u) + residual", worst_m2 <= 1e-12 and min_ratio >= 1.6 and dt < 10,
           f"M=2 max |bias - I*ubar| {worst_m2:.1e} (<= 1e-12); M in 3..5 residual shrink factor "
           f"min {min_ratio:.2f} (>= 1.6) when A and B double; {dt:.2f}s (< 10s)")


# ---------------------------------------------------------------------------
# 8


def test_08_poisson_binomial_median():
    t0 = time.perf_counter()
    rng = np.random.default_rng(808)
    violations = 0
    worst = 0.0
    for _ in range(10**5):
        ps = rng.uniform(0, 1, int(rng.integers(1, 13)))
        # the tail is non-increasing in k, so the smallest admissible k is the binding case
        k = math.ceil(1 + float(ps.sum()))
        tail = oracle.poisson_binomial_tail(ps, k)
        worst = max(worst, tail)
        violations += tail >= 0.5
    dt = time.perf_counter() - t0
    report(8, "Poisson-binomial tail below 1/2", violations == 0 and dt < 30,
           f"1e5 instances, {violations} violations, max tail {worst:.4f}; {dt:.1f}s (< 30s)")


# ---------------------------------------------------------------------------
# 9

D, B_SIZE, C_CLIP, RATIO, MU = 50, 8, 1.0, 0.5, 1.0


def _params():
    return privacy.solve_params(MU, RATIO, C_CLIP, B_SIZE, D)


def test_09_convergence_without_attackers():
    t0 = time.perf_counter()
    p = _params()
    M, T = 16, 2000
    finals, initials, ratios_to_bound = [], [], []
    for seed in range(10):
        prob = sim.make_quadratic_problem(M, d=D, seed=seed)
        cfg = sim.TrainConfig(T=T, batch=B_SIZE, compressor=p, topology=TopologyConfig(M),
                              aggregator=agg.TernaryVote(), eta="auto", L=1.0, seed=seed)
        recs = sim.run_training(prob, cfg)
        initials.append(recs[0].grad_l1)
        finals.append(recs[-1].grad_l1)
        traj = float(np.mean([r.grad_l1 for r in recs[:-1]]))
        rhs = oracle.bound_ternary_vote(sim.quadratic_bound_inputs(prob, p, T))
        ratios_to_bound.append(traj / rhs)
    dt = time.perf_counter() - t0
    decay = np.mean(finals) / np.mean(initials)
    ok = decay <= 0.1 and max(ratios_to_bound) <= 1.05 and dt < 120
    report(9, "convergence, no attackers", ok,
           f"A={p.A:.4f} B={p.B:.4f}; mean final/initial ||grad F||_1 = {decay:.4f} (<= 0.1); "
           f"trajectory average / bound max {max(ratios_to_bound):.3f} (<= 1.05); {dt:.1f}s (< 120s)")


# ---------------------------------------------------------------------------
# 10


def _byzantine_runs(aggregator, attack, p, T=5000, M=5, K=4):
    finals, initials = [], []
    for seed in range(10):
        prob = sim.make_quadratic_problem(M, K=K, d=D, seed=seed)
        cfg = sim.TrainConfig(T=T, batch=B_SIZE, compressor=p, topology=TopologyConfig(M, K),
                              aggregator=aggregator, attack=attack, eta="auto", L=1.0, seed=seed)
        recs = sim.run_training(prob, cfg)
        initials.append(recs[0].grad_l1)
        finals.append(recs[-1].grad_l1)
    return np.mean(finals) / np.mean(initials)


def test_10_byzantine_resilience():
    t0 = time.perf_counter()
    p = _params()
    vote = _byzantine_runs(agg.TernaryVote(), atk.Blind(), p)
    plain = _byzantine_runs(agg.PlainMean(), atk.FlipSign(), p)
    dt = time.perf_counter() - t0
    ok = vote <= 0.5 and plain > 0.5 and dt < 120
    report(10, "Byzantine resilience", ok,
           f"vote vs 4 blind attackers: final/initial {vote:.3f} (<= 0.5); plain mean vs 4 flip-sign: "
           f"{plain:.3f} (> 0.5 expected); {dt:.1f}s (< 120s)")


# ---------------------------------------------------------------------------
# 11


def test_11_worker_sampling_equivalence():
    rng = np.random.default_rng(1111)
    n = 10**6
    pvals = []
    for k in range(20):
        A = rng.uniform(0.2, 3.0)
        B = A * rng.uniform(1.0, 4.0)
        c = A * rng.uniform(0.1, 1.0)
        ps = rng.uniform(0.05, 1.0)
        g = np.full(n, rng.uniform(-A, A))
        a = ternary_compress_sampled(g, CompressorParams(A, B, c), ps, RngStream(11, ("sampled", k)))
        b = ternary_compress(g, CompressorParams(A, B / ps, c), RngStream(11, ("plain", k)))
        table = np.array([np.bincount(a + 1, minlength=3), np.bincount(b + 1, minlength=3)])
        table = table[:, table.sum(axis=0) > 0]
        pvals.append(stats.chi2_contingency(table)[1])
    report(11, "worker sampling equals B / p_s", min(pvals) > 0.001,
           f"20 settings x 1e6 draws; min chi-square p-value {min(pvals):.4f} (> 0.001)")


# ---------------------------------------------------------------------------
# 12


def test_12_determinism(tmp_path):
    spec = {
        "name": "determinism",
        "objective": {"kind": "quadratic", "d": 20},
        "topology": {"M": 6, "K": 2, "sampling": {"kind": "fixed", "n_t": 5}},
        "compressor": {"kind": "ternary_solve", "mu": 1.0, "ratio": 0.5, "c": 1.0},
        "aggregator": {"kind": "vote"},
        "attack": {"kind": "lie"},
        "T": 150,
        "batch": 4,
        "seeds": [0, 1, 2],
    }
    cfg = tmp_path / "spec.json"
    cfg.write_text(json.dumps(spec))
    outputs = []
    for i, extra in enumerate(([], [], ["--jobs", "2"])):
        out = tmp_path / f"run{i}" / "run.csv"
        subprocess.run([sys.executable, "-m", "ternaryvote", "simulate", "--config", str(cfg), "--out", str(out), *extra],
                       check=True, capture_output=True)
        outputs.append({p.name: p.read_bytes() for p in sorted(out.parent.iterdir())})
    same = outputs[0] == outputs[1] == outputs[2]
    n_csv = sum(name.endswith(".csv") for name in outputs[0])
    report(12, "simulate is byte-reproducible", same and n_csv == 3,
           f"3 invocations (one with 2 processes) x {n_csv} CSVs + sidecars: {'identical' if same else 'DIFFER'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
