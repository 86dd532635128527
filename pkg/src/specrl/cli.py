"""Command line: run, search, analyze, benchmark, selftest.

Exit codes: 0 ok, 1 spec/validation error, 2 runtime error, 3 selftest failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import signal
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import analysis, executor
from .algorithms import RandomAgent
from .algorithms.base import DISCRETE_ONLY
from .envs import Box, ENV_REGISTRY, make_env
from .specfile import SpecError, apply_overrides, load_spec, validate_spec

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3
BENCHMARK_ENVS = ("cartpole", "pendulum", "chain5")
BENCHMARK_ALGOS = ("reinforce", "a2c_nstep", "a2c_gae", "ppo", "dqn", "ddqn_per", "sac")
RANDOM_EPISODES = 100

log = logging.getLogger("specrl")


def shipped_spec_dir() -> Path:
    return Path(str(resources.files("specrl") / "specs" / "benchmark"))


def _install_signal_handlers() -> None:
    def handler(signum, frame):
        log.warning("signal %d received: stopping after the current step and flushing results", signum)
        executor.request_stop()

    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            signal.signal(sig, handler)
        except (ValueError, OSError):  # not the main thread
            pass


def load_with_overrides(path, overrides=(), mode=None, workers=None):
    """Parse, apply overrides (including --mode/--workers), validate. Raises SpecError."""
    spec = load_spec(path)
    overrides = list(overrides or [])
    if mode is not None:
        overrides.append(f"meta.distributed={json.dumps(mode)}")
    if workers is not None:
        overrides.append(f"meta.num_sessions={int(workers)}")
    if overrides:
        spec = apply_overrides(spec, overrides)
    problems = validate_spec(spec)
    if problems:
        raise SpecError("spec is invalid:\n  " + "\n  ".join(problems))
    return spec


# --- verbs ----------------------------------------------------------------------

def cmd_run(args) -> int:
    spec = load_with_overrides(args.spec, args.set, args.mode, args.workers)
    run_dir = executor.make_run_dir(spec, args.out)
    executor.write_manifest(spec, run_dir, "run")
    print(f"run directory: {run_dir}")
    try:
        trial = executor.run_trial(spec, 0, run_dir)
    except executor.TrialError as exc:
        print(f"trial failed: {exc}", file=sys.stderr)
        if exc.result is not None and any(s.records for s in exc.result.sessions):
            analysis.emit_plots(exc.result, run_dir)
        return EXIT_RUNTIME
    analysis.emit_plots(trial, run_dir)
    agg = trial.aggregate()
    for s in trial.sessions:
        print(f"session {s.session_idx}: final_score {s.final_score:.3f}  frames {s.frames}  fps {s.fps:.0f}")
    print(f"trial final_score {agg.final_score:.3f} +/- {agg.final_score_std:.3f}")
    return EXIT_OK


def cmd_search(args) -> int:
    spec = load_with_overrides(args.spec, args.set, args.mode, args.workers)
    if spec.search is None:
        raise SpecError("search needs a spec with a search section")
    run_dir = executor.make_run_dir(spec, args.out)
    executor.write_manifest(spec, run_dir, "search")
    print(f"run directory: {run_dir}")
    result = executor.run_experiment(spec, run_dir)
    if any(t.sessions and t.sessions[0].records for t in result.trials):
        analysis.emit_plots(result, run_dir)
    for rank, (idx, score) in enumerate(result.ranking(), 1):
        prov = next(t.spec.meta.provenance for t in result.trials if t.trial_idx == idx)
        print(f"#{rank} trial {idx}: final_score {score:.3f}  {json.dumps(prov, sort_keys=True)}")
    for idx, err in result.failures.items():
        print(f"trial {idx} failed: {err}", file=sys.stderr)
    return EXIT_RUNTIME if result.failures and len(result.failures) == len(result.trials) else EXIT_OK


_METRICS_RE = re.compile(r"trial(\d+)_session(\d+)_metrics\.csv$")


def load_run(run_dir) -> list[executor.TrialResult]:
    """Rebuild trial results from the CSVs of a run directory."""
    run_dir = Path(run_dir)
    base = load_spec(run_dir / "spec.json")
    trials: dict[int, executor.TrialResult] = {}
    for path in sorted(run_dir.glob("trial*_session*_metrics.csv")):
        m = _METRICS_RE.search(path.name)
        i, j = int(m.group(1)), int(m.group(2))
        if i not in trials:
            spec_path = run_dir / f"trial{i}_spec.json"
            trials[i] = executor.TrialResult(load_spec(spec_path) if spec_path.exists() else base, i)
        records = analysis.read_metrics_csv(path)
        trials[i].sessions.append(executor.SessionResult(trials[i].spec, 0, i, j, records,
                                                         records[-1].frame if records else 0))
    for t in trials.values():
        t.sessions.sort(key=lambda s: s.session_idx)
    return [trials[i] for i in sorted(trials)]


def cmd_analyze(args) -> int:
    trials = [t for t in load_run(args.run_dir) if t.sessions and t.sessions[0].records]
    if not trials:
        print(f"no metrics found under {args.run_dir}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out) if args.out else Path(args.run_dir)
    if len(trials) == 1:
        analysis.emit_plots(trials[0], out)
    else:
        analysis.emit_plots(executor.ExperimentResult(trials[0].spec, trials), out)
    for t in trials:
        agg = t.aggregate()
        print(f"trial {t.trial_idx}: final_score {agg.final_score:.3f} +/- {agg.final_score_std:.3f} "
              f"({len(t.sessions)} sessions)")
    return EXIT_OK


def applicable(algo: str, env_name: str) -> bool:
    continuous = isinstance(ENV_REGISTRY[env_name].action_space, Box)
    return not (continuous and algo in DISCRETE_ONLY)


def random_baseline(env_name: str, episodes: int = RANDOM_EPISODES, seed: int = 0) -> float:
    """Mean return of uniformly random actions over ``episodes`` episodes."""
    env = make_env(env_name, seed)
    agent = RandomAgent(env.observation_dim, env.action_space, np.random.default_rng(seed))
    total = 0.0
    for _ in range(episodes):
        state, done = env.reset(), False
        while not done:
            r = env.step(agent.act(state)[0])
            total += r.reward
            state, done = r.state, r.done
    return total / episodes


def benchmark_table(cells: dict, randoms: dict, envs=BENCHMARK_ENVS, algos=BENCHMARK_ALGOS) -> str:
    """Markdown matrix: rows envs, columns algorithms plus Random."""
    header = "| env | " + " | ".join(algos) + " | Random |"
    lines = [header, "|" + "---|" * (len(algos) + 2)]
    for env in envs:
        row = [env]
        for algo in algos:
            cell = cells.get((env, algo))
            if cell is None:
                row.append("n/a" if not applicable(algo, env) else "-")
            elif isinstance(cell, str):
                row.append(cell)
            else:
                row.append(f"{cell[0]:.2f} ± {cell[1]:.2f}")
        row.append(f"{randoms[env]:.2f}")
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def cmd_benchmark(args) -> int:
    spec_dir = Path(args.specs) if args.specs else shipped_spec_dir()
    paths = sorted(spec_dir.glob("*.json"))
    if not paths:
        print(f"no specs in {spec_dir}", file=sys.stderr)
        return EXIT_INVALID
    out_root = Path(args.out) / "benchmark"
    out_root.mkdir(parents=True, exist_ok=True)
    cells: dict = {}
    rows = []
    for path in paths:
        try:
            spec = load_with_overrides(path, args.set, args.mode, args.workers)
        except SpecError as exc:
            print(f"{path.name}: invalid: {exc}", file=sys.stderr)
            continue
        env, algo = spec.env_spec.name, spec.agent_spec.algorithm.name
        if not applicable(algo, env):
            continue
        run_dir = out_root / spec.meta.spec_name
        run_dir.mkdir(parents=True, exist_ok=True)
        executor.write_manifest(spec, run_dir, "benchmark")
        print(f"running {spec.meta.spec_name} ...", flush=True)
        try:
            trial = executor.run_trial(spec, 0, run_dir)
            analysis.emit_plots(trial, run_dir)
            agg = trial.aggregate()
            cells[(env, algo)] = (agg.final_score, agg.final_score_std)
            rows.append([env, algo, analysis.fmt(agg.final_score), analysis.fmt(agg.final_score_std)]
                        + [analysis.fmt(s) for s in agg.session_final_scores])
            print(f"  final_score {agg.final_score:.2f} +/- {agg.final_score_std:.2f}")
        except Exception as exc:
            cells[(env, algo)] = "FAILED"
            rows.append([env, algo, "FAILED", str(exc)])
            print(f"  failed: {exc}", file=sys.stderr)
    randoms = {env: random_baseline(env) for env in BENCHMARK_ENVS}
    table = benchmark_table(cells, randoms)
    (out_root / "benchmark_table.md").write_text(table)
    with open(out_root / "benchmark_results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["env", "algorithm", "final_score_mean", "final_score_std", "session_final_scores..."])
        w.writerows(rows)
        for env in BENCHMARK_ENVS:
            w.writerow([env, "random", analysis.fmt(randoms[env]), "", f"{RANDOM_EPISODES} episodes"])
    print(table)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import format_report, run_selftest
    results = run_selftest(args.seed)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFTEST


# --- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specrl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="verb", required=True)

    def spec_args(p, spec_required=True):
        p.add_argument("--spec", required=spec_required, help="spec JSON file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. agent.net.lr=0.001 (repeatable)")
        p.add_argument("--out", default="data", help="output root (default: data)")
        p.add_argument("--mode", choices=("none", "hogwild", "server_worker"), help="override meta.distributed")
        p.add_argument("--workers", type=int, help="override meta.num_sessions (one session per worker)")

    spec_args(sub.add_parser("run", help="run one trial of a spec"))
    spec_args(sub.add_parser("search", help="run a hyperparameter search experiment"))
    p = sub.add_parser("analyze", help="re-emit plots and scores for a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", help="write plots here instead of the run directory")
    p = sub.add_parser("benchmark", help="run the benchmark spec matrix and print the results table")
    spec_args(p, spec_required=False)
    p.add_argument("--specs", help="directory of benchmark specs (default: the shipped set)")
    p = sub.add_parser("selftest", help="run the fast oracle suites")
    p.add_argument("--seed", type=int, default=0)
    return parser


COMMANDS = {"run": cmd_run, "search": cmd_search, "analyze": cmd_analyze,
            "benchmark": cmd_benchmark, "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    _install_signal_handlers()
    if getattr(args, "spec", None) and not Path(args.spec).exists():
        print(f"spec file not found: {args.spec}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.verb](args)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.exception("runtime failure")
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
