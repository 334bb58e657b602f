"""Command-line front end.

Exit codes: 0 success, 2 user or configuration error, 3 internal invariant
failure. Every JSON output carries the tool version and the resolved inputs.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Optional, Sequence

import jsonschema

from . import __version__
from . import aggregators as agg
from . import attacks as atk
from . import oracle, privacy
from . import simulation as sim
from .compressors import GaussianSparseParams
from .core import (
    CompressorParams,
    ConfigError,
    FixedSubset,
    FullParticipation,
    IndependentBernoulli,
    InvariantError,
    Mode,
    ParamViolation,
    TernaryVoteError,
    TopologyConfig,
    validate_params,
)

TOOL = "ternaryvote"

EXIT_OK, EXIT_USER, EXIT_INVARIANT = 0, 2, 3


# ---------------------------------------------------------------------------
# experiment specification

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_INT0 = {"type": "integer", "minimum": 0}


def _kind(name: str, props: Optional[dict] = None, required: Sequence[str] = ()) -> dict:
    props = dict(props or {})
    props["kind"] = {"const": name}
    return {"type": "object", "properties": props, "required": ["kind", *required], "additionalProperties": False}


EXPERIMENT_SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "required": ["objective", "topology", "compressor", "aggregator", "T", "batch"],
    "properties": {
        "name": {"type": "string"},
        "objective": {
            "oneOf": [
                _kind("quadratic", {
                    "d": _INT1, "examples_per_worker": _INT1, "center_scale": _NUM,
                    "worker_spread": {"type": "number", "minimum": 0},
                    "example_spread": {"type": "number", "minimum": 0}, "data_seed": _INT0,
                }),
                _kind("logistic", {
                    "d": _INT1, "n_examples": _INT1, "lam": {"type": "number", "minimum": 0},
                    "dirichlet_alpha": _POS, "data_seed": _INT0,
                }),
            ]
        },
        "topology": {
            "type": "object",
            "additionalProperties": False,
            "required": ["M"],
            "properties": {
                "M": _INT1,
                "K": _INT0,
                "sampling": {
                    "oneOf": [
                        _kind("full"),
                        _kind("fixed", {"n_t": _INT1}, ["n_t"]),
                        _kind("bernoulli", {"p_s": _POS}, ["p_s"]),
                    ]
                },
            },
        },
        "compressor": {
            "oneOf": [
                _kind("ternary", {"A": _POS, "B": _POS, "c": _POS}, ["A", "B", "c"]),
                _kind("ternary_solve", {"mu": _POS, "ratio": _POS, "c": _POS}, ["mu", "ratio", "c"]),
                _kind("gaussian_sparse", {
                    "C": _POS, "sigma": {"type": "number", "minimum": 0}, "keep_prob": _POS,
                    "rescale": {"type": "boolean"},
                    "order": {"enum": ["noise_then_sparsify", "sparsify_then_noise"]},
                }, ["C", "sigma"]),
            ]
        },
        "aggregator": {
            "oneOf": [
                _kind("vote"),
                _kind("mean"),
                _kind("plain_mean"),
                _kind("multikrum", {"f": _INT0, "m": _INT1}, ["f"]),
                _kind("centered_clipping", {"tau": _POS, "iters": _INT1}, ["tau"]),
            ]
        },
        "attack": {
            "oneOf": [
                _kind("none"),
                _kind("blind"),
                _kind("flip_sign"),
                _kind("foe", {"scale": {"type": "number", "minimum": 0}}),
                _kind("lie", {"n": _INT1, "f": _INT1}),
            ]
        },
        "T": _INT1,
        "batch": _INT1,
        "eta": {"oneOf": [{"const": "auto"}, {"type": "number", "minimum": 0}]},
        "L": _POS,
        "clip": {"oneOf": [_kind("linf", {"c": _POS}, ["c"]), _kind("l2", {"C": _POS}, ["C"])]},
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "required": ["factor", "at_rounds"],
            "properties": {"factor": _POS, "at_rounds": {"type": "array", "items": _INT0}},
        },
        "debias": {"type": "boolean"},
        "w0": {"type": "array", "items": _NUM},
        "seeds": {"type": "array", "items": _INT0, "minItems": 1},
    },
}


def validate_spec(spec: dict) -> None:
    try:
        jsonschema.validate(spec, EXPERIMENT_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"experiment spec invalid at {where}: {e.message}") from None


def resolve_spec(spec: dict) -> dict:
    """Fill defaults and solve compressor parameters; the result is what gets persisted."""
    validate_spec(spec)
    r = copy.deepcopy(spec)
    r.setdefault("name", "experiment")
    r.setdefault("attack", {"kind": "none"})
    r.setdefault("eta", "auto")
    r.setdefault("debias", False)
    r.setdefault("seeds", [0])
    r["topology"].setdefault("K", 0)
    r["topology"].setdefault("sampling", {"kind": "full"})
    obj = r["objective"]
    if obj["kind"] == "quadratic":
        for k, v in (("d", 50), ("examples_per_worker", 32), ("center_scale", 1.0),
                     ("worker_spread", 0.2), ("example_spread", 0.2), ("data_seed", None)):
            obj.setdefault(k, v)
    else:
        for k, v in (("d", 20), ("n_examples", 2000), ("lam", 1e-3), ("dirichlet_alpha", 0.1), ("data_seed", None)):
            obj.setdefault(k, v)
    comp = r["compressor"]
    if comp["kind"] == "ternary_solve":
        p = privacy.solve_params(comp["mu"], comp["ratio"], comp["c"], r["batch"], obj["d"])
        r["compressor"] = {"kind": "ternary", "A": p.A, "B": p.B, "c": p.c, "solved_from": comp}
    elif comp["kind"] == "gaussian_sparse":
        comp.setdefault("keep_prob", 1.0)
        comp.setdefault("rescale", False)
        comp.setdefault("order", "noise_then_sparsify")
    if r["compressor"]["kind"] == "ternary":
        validate_params(_compressor(r), Mode.PRIVACY)
    return r


def _compressor(r: dict):
    comp = r["compressor"]
    if comp["kind"] == "ternary":
        return CompressorParams(comp["A"], comp["B"], comp["c"], r["batch"])
    return GaussianSparseParams(comp["C"], comp["sigma"], comp["keep_prob"], comp["rescale"], comp["order"])


def _topology(r: dict) -> TopologyConfig:
    t = r["topology"]
    s = t["sampling"]
    sampling = {
        "full": lambda: FullParticipation(),
        "fixed": lambda: FixedSubset(s["n_t"]),
        "bernoulli": lambda: IndependentBernoulli(s["p_s"]),
    }[s["kind"]]()
    return TopologyConfig(M=t["M"], K=t["K"], sampling=sampling)


def _aggregator(r: dict) -> agg.AggregatorChoice:
    a = r["aggregator"]
    return {
        "vote": lambda: agg.TernaryVote(),
        "mean": lambda: agg.TernaryMean(),
        "plain_mean": lambda: agg.PlainMean(),
        "multikrum": lambda: agg.MultiKrum(a["f"], a.get("m")),
        "centered_clipping": lambda: agg.CenteredClipping(a["tau"], a.get("iters", 1)),
    }[a["kind"]]()


def _attack(r: dict) -> atk.AttackChoice:
    a = r["attack"]
    return {
        "none": lambda: atk.NoAttack(),
        "blind": lambda: atk.Blind(),
        "flip_sign": lambda: atk.FlipSign(),
        "foe": lambda: atk.FallOfEmpire(a.get("scale", 1.0)),
        "lie": lambda: atk.LittleIsEnough(a.get("n"), a.get("f")),
    }[a["kind"]]()


def build_problem(r: dict, seed: int) -> sim.Problem:
    obj = r["objective"]
    t = r["topology"]
    data_seed = seed if obj["data_seed"] is None else obj["data_seed"]
    if obj["kind"] == "quadratic":
        return sim.make_quadratic_problem(
            t["M"], t["K"], obj["d"], obj["examples_per_worker"], obj["center_scale"],
            obj["worker_spread"], obj["example_spread"], seed=data_seed,
        )
    return sim.make_logistic_problem(
        t["M"], t["K"], obj["d"], obj["n_examples"], obj["lam"], obj["dirichlet_alpha"], seed=data_seed,
    )


def build_config(r: dict, seed: int) -> sim.TrainConfig:
    clip = None
    if "clip" in r:
        clip = sim.LinfClip(r["clip"]["c"]) if r["clip"]["kind"] == "linf" else sim.L2Clip(r["clip"]["C"])
    schedule = None
    if "schedule" in r:
        schedule = sim.StepDecay(r["schedule"]["factor"], tuple(r["schedule"]["at_rounds"]))
    return sim.TrainConfig(
        T=r["T"],
        batch=r["batch"],
        compressor=_compressor(r),
        topology=_topology(r),
        aggregator=_aggregator(r),
        attack=_attack(r),
        eta=r["eta"],
        L=r.get("L"),
        clip=clip,
        schedule=schedule,
        debias=r["debias"],
        seed=seed,
        w0=tuple(r["w0"]) if "w0" in r else None,
    )


def privacy_accounting(r: dict) -> dict:
    """Per-round GDP of one worker's message and its worst-case composition over ``T`` rounds.

    No amplification from worker subsampling is claimed.
    """
    if r["compressor"]["kind"] != "ternary":
        return {"mechanism": "gaussian_sparse", "mu_round": None, "gamma_round": None, "mu_total": None}
    approx = privacy.gdp_approx_vector(_compressor(r), r["objective"]["d"])
    return {
        "mechanism": "ternary",
        "mu_round": approx.mu,
        "gamma_round": approx.gamma,
        "clt_valid": approx.clt_valid,
        "rounds": r["T"],
        "mu_total": privacy.gdp_compose([approx.mu] * r["T"]),
    }


def _run_seed(args: tuple[dict, int]) -> tuple[str, dict]:
    r, seed = args
    problem = build_problem(r, seed)
    records = sim.run_training(problem, build_config(r, seed))
    first, last = records[0], records[-1]
    stats = {
        "seed": seed,
        "initial_grad_l1": first.grad_l1,
        "final_grad_l1": last.grad_l1,
        "final_over_initial": last.grad_l1 / first.grad_l1 if first.grad_l1 > 0 else None,
        "uplink_bits_total": sum(x.uplink_bits for x in records),
        "downlink_bits_total": sum(x.downlink_bits for x in records),
    }
    return sim.records_to_csv(records), stats


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _envelope(command: str, config: dict, **result) -> dict:
    return {"tool": TOOL, "version": __version__, "command": command, "config": config, **result}


def _summary_stats(values: list) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "min": None, "max": None}
    return {"mean": math.fsum(vals) / len(vals), "min": min(vals), "max": max(vals)}


def output_paths(out: Path, seeds: Sequence[int]) -> dict:
    """CSV and sidecar paths per seed plus the summary path.

    One seed writes exactly ``out``; several seeds write ``<stem>.seed<k><suffix>``.
    """
    out = Path(out)
    stem, suffix = out.stem, out.suffix or ".csv"
    per = {}
    for s in seeds:
        csv = out if len(seeds) == 1 else out.with_name(f"{stem}.seed{s}{suffix}")
        per[s] = (csv, csv.with_suffix(".json"))
    return {"seeds": per, "summary": out.with_name(f"{stem}.summary.json")}


def _write_all(files: dict[Path, str]) -> None:
    """Write every file or none: stage to temporaries, then rename."""
    staged = []
    try:
        for path, text in files.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".part")
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            staged.append((tmp, path))
        for tmp, path in staged:
            os.replace(tmp, path)
        staged = []
    finally:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)


def simulate(spec: dict, out: Path, jobs: int = 1) -> dict:
    """Run every seed of an experiment and write CSVs, sidecars and a summary."""
    r = resolve_spec(spec)
    seeds = list(r["seeds"])
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    # fail fast on problem/config inconsistencies before spending any time
    build_config(r, seeds[0]).validate(build_problem(r, seeds[0]))
    accounting = privacy_accounting(r)
    work = [(r, s) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(min(jobs, len(seeds))) as ex:
            results = list(ex.map(_run_seed, work))
    else:
        results = [_run_seed(w) for w in work]
    paths = output_paths(out, seeds)
    files: dict[Path, str] = {}
    for s, (csv_text, stats) in zip(seeds, results):
        csv_path, side_path = paths["seeds"][s]
        files[csv_path] = csv_text
        files[side_path] = _dump(_envelope(
            "simulate", r, seed=s, csv=csv_path.name, columns=list(sim.CSV_COLUMNS),
            privacy=accounting, stats=stats,
        ))
    all_stats = [st for _, st in results]
    summary = _envelope(
        "simulate", r,
        seeds=seeds,
        csvs=[paths["seeds"][s][0].name for s in seeds],
        privacy=accounting,
        final_grad_l1=_summary_stats([st["final_grad_l1"] for st in all_stats]),
        final_over_initial=_summary_stats([st["final_over_initial"] for st in all_stats]),
        per_seed=all_stats,
    )
    files[paths["summary"]] = _dump(summary)
    _write_all(files)
    return summary


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(d.get(k), dict):
            raise ConfigError(f"sweep path {dotted!r} does not exist in the spec")
        d = d[k]
    d[keys[-1]] = value


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _print_json(obj) -> None:
    sys.stdout.write(_dump(obj))


def _cmd_privacy(a) -> int:
    if a.action == "solve":
        cfg = {"mu": a.mu, "ratio": a.ratio, "c": a.c, "b": a.b, "d": a.d}
        p = privacy.solve_params(a.mu, a.ratio, a.c, a.b, a.d)
        _print_json(_envelope("privacy solve", cfg, A=p.A, B=p.B, mu_check=privacy.mu_closed_form(p, a.d)))
    elif a.action == "curve":
        p = CompressorParams(a.A, a.B, a.c, a.b)
        curve = privacy.curve_ternary_scalar(p) if a.b == 1 else privacy.curve_ternary_minibatch(p)
        text = curve.to_csv()
        if a.out:
            _write_all({Path(a.out): text})
        else:
            sys.stdout.write(text)
    elif a.action == "gdp":
        p = CompressorParams(a.A, a.B, a.c, a.b)
        g = privacy.gdp_approx_vector(p, a.d)
        cfg = {"A": a.A, "B": a.B, "c": a.c, "b": a.b, "d": a.d}
        _print_json(_envelope("privacy gdp", cfg, mu=g.mu, gamma=g.gamma, clt_valid=g.clt_valid))
    elif a.action == "eps-delta":
        p = CompressorParams(a.A, a.B, a.c, a.b)
        validate_params(p, Mode.PRIVACY)
        curve = privacy.curve_ternary_minibatch(p)
        cfg = {"A": a.A, "B": a.B, "c": a.c, "b": a.b, "eps": a.eps}
        _print_json(_envelope("privacy eps-delta", cfg, delta=privacy.curve_to_epsilon_delta(curve, a.eps)))
    elif a.action == "compose":
        _print_json(_envelope("privacy compose", {"mus": a.mus}, mu=privacy.gdp_compose(a.mus)))
    return EXIT_OK


def _cmd_oracle(a) -> int:
    if a.action in ("vote-dist", "vote-bound"):
        p = CompressorParams(a.A, a.B, a.c if a.c is not None else a.A)
        cfg = {"u": a.u, "A": a.A, "B": a.B}
        if a.action == "vote-dist":
            fn = oracle.vote_distribution_enumerate if a.enumerate else oracle.vote_distribution_exact
            dist = fn(a.u, p)
            _print_json(_envelope("oracle vote-dist", cfg, p_plus=dist.p_plus, p_zero=dist.p_zero, p_minus=dist.p_minus))
        else:
            _print_json(_envelope(
                "oracle vote-bound", cfg,
                error_exact=oracle.vote_error_exact(a.u, p), bound=oracle.vote_error_bound(a.u, p),
            ))
    elif a.action == "gain":
        p = CompressorParams(a.A, a.B, a.A)
        _print_json(_envelope("oracle gain", {"A": a.A, "B": a.B, "M": a.M}, gain=oracle.vote_gain(p, a.M)))
    elif a.action == "pb-tail":
        _print_json(_envelope("oracle pb-tail", {"ps": a.ps, "k": a.k}, tail=oracle.poisson_binomial_tail(a.ps, a.k)))
    elif a.action == "bounds":
        x = oracle.BoundInputs(
            L=a.L, sigma_bar=tuple(a.sigma), F0_minus_Fstar=a.gap, A=a.A, B=a.B, c=a.c, d=a.d,
            M=a.M, T=a.T, b=a.b, K=a.K, Q=a.Q, eta=a.eta,
        )
        cfg = {k: getattr(a, k) for k in ("L", "sigma", "gap", "A", "B", "c", "d", "M", "T", "b", "K", "Q", "eta")}
        out = {"step": x.step, "ternary_vote": oracle.bound_ternary_vote(x)}
        try:
            out["ternary_mean"] = oracle.bound_ternary_mean(x)
        except TernaryVoteError as e:
            out["ternary_mean"] = None
            out["ternary_mean_error"] = str(e)
        if a.K > 0:
            out["byzantine"] = oracle.bound_byzantine(x)
        try:
            hp = oracle.bound_vote_highprivacy(x)
            out["high_privacy"] = {"computable": hp.computable, "gain": hp.gain,
                                   "residual_heuristic": hp.residual_heuristic, "heuristic": hp.heuristic}
        except TernaryVoteError as e:
            out["high_privacy"] = None
            out["high_privacy_error"] = str(e)
        _print_json(_envelope("oracle bounds", cfg, **out))
    return EXIT_OK


def _load_spec(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read experiment spec {path!r}: {e}") from None


def _cmd_simulate(a) -> int:
    summary = simulate(_load_spec(a.config), Path(a.out), a.jobs)
    _print_json({k: summary[k] for k in ("tool", "version", "seeds", "csvs", "final_grad_l1", "final_over_initial")})
    return EXIT_OK


def _cmd_sweep(a) -> int:
    base = _load_spec(a.config)
    out_dir = Path(a.out_dir)
    rows = []
    for v in a.values:
        spec = copy.deepcopy(base)
        _set_path(spec, a.param, v)
        tag = f"{a.param}={v:g}"
        summary = simulate(spec, out_dir / f"{tag}.csv", a.jobs)
        rows.append({"value": v, "final_grad_l1": summary["final_grad_l1"],
                     "final_over_initial": summary["final_over_initial"], "privacy": summary["privacy"]})
    result = _envelope("sweep", {"base": base, "param": a.param, "values": a.values}, results=rows)
    _write_all({out_dir / "sweep.json": _dump(result)})
    _print_json(result)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog=TOOL, description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("privacy", help="privacy accounting").add_subparsers(dest="action", required=True)
    s = pr.add_parser("solve", help="solve (A, B) for a target per-round mu")
    s.add_argument("--mu", type=float, required=True)
    s.add_argument("--ratio", type=float, required=True, help="A / B")
    s.add_argument("--c", type=float, required=True)
    s.add_argument("--b", type=int, default=1)
    s.add_argument("--d", type=int, required=True)
    for name, hlp in (("curve", "per-coordinate tradeoff curve as CSV"),
                      ("gdp", "vector mu and gamma"), ("eps-delta", "delta(eps) of one coordinate")):
        s = pr.add_parser(name, help=hlp)
        s.add_argument("--A", type=float, required=True)
        s.add_argument("--B", type=float, required=True)
        s.add_argument("--c", type=float, required=True)
        s.add_argument("--b", type=int, default=1)
        if name == "curve":
            s.add_argument("--out", help="CSV path (default stdout)")
        if name == "gdp":
            s.add_argument("--d", type=int, required=True)
        if name == "eps-delta":
            s.add_argument("--eps", type=float, required=True)
    s = pr.add_parser("compose", help="compose GDP parameters")
    s.add_argument("mus", type=float, nargs="+")

    s = sub.add_parser("simulate", help="run an experiment spec")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="CSV path; several seeds get .seed<k> inserted")
    s.add_argument("--jobs", type=int, default=1, help="seeds run in this many processes")

    s = sub.add_parser("sweep", help="run an experiment for several values of one spec field")
    s.add_argument("--config", required=True)
    s.add_argument("--param", required=True, help="dotted path, e.g. compressor.mu")
    s.add_argument("--values", type=_floats, required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--jobs", type=int, default=1)

    orc = sub.add_parser("oracle", help="exact checks").add_subparsers(dest="action", required=True)
    for name in ("vote-dist", "vote-bound"):
        s = orc.add_parser(name)
        s.add_argument("--u", type=_floats, required=True)
        s.add_argument("--A", type=float, required=True)
        s.add_argument("--B", type=float, required=True)
        s.add_argument("--c", type=float, default=None, help="defaults to A; the vote law does not depend on it")
        if name == "vote-dist":
            s.add_argument("--enumerate", action="store_true", help="walk all 3^M outcomes")
    s = orc.add_parser("gain")
    s.add_argument("--A", type=float, required=True)
    s.add_argument("--B", type=float, required=True)
    s.add_argument("--M", type=int, required=True)
    s = orc.add_parser("pb-tail")
    s.add_argument("--ps", type=_floats, required=True)
    s.add_argument("--k", type=int, required=True)
    s = orc.add_parser("bounds")
    for name, typ in (("L", float), ("gap", float), ("A", float), ("B", float), ("c", float),
                      ("d", int), ("M", int), ("T", int)):
        s.add_argument(f"--{name}", type=typ, required=True)
    s.add_argument("--sigma", type=_floats, required=True, help="per-coordinate sigma_bar, comma-separated")
    s.add_argument("--b", type=int, default=1)
    s.add_argument("--K", type=int, default=0)
    s.add_argument("--Q", type=float, default=0.0)
    s.add_argument("--eta", type=float, default=None)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"privacy": _cmd_privacy, "oracle": _cmd_oracle, "simulate": _cmd_simulate, "sweep": _cmd_sweep}
    try:
        return handler[args.command](args)
    except InvariantError as e:
        print(f"internal invariant failed: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except ParamViolation as e:
        print(f"error: violated {e.inequality}: {e}", file=sys.stderr)
        return EXIT_USER
    except (TernaryVoteError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
