"""Sessions, trials and experiments, plus the Hogwild and server-worker modes.

A Session is one agent on one vector env with one seed. A Trial runs
``meta.num_sessions`` Sessions; in the asynchronous modes each Session is a
worker process sharing one :class:`SharedParamStore`. Synchronous runs are
bit-reproducible from (spec, seed); wall-clock data is therefore kept out of
the metrics CSV and written to a separate timing CSV.
"""
from __future__ import annotations

import json
import logging
import multiprocessing as mp
import os
import platform
import threading
import time
import traceback
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis
from .algorithms import make_agent
from .analysis import CheckpointRecord
from .envs import RunningStats, VectorEnv, lane_seeds, preprocess
from .netcore import Params, OptState, clip_grad_norm, grad_norm, optimizer_step, save_params
from .specfile import Spec, derive_seed, expand_search, save_spec, serialize_spec, spec_from_dict, spec_to_dict

log = logging.getLogger(__name__)

_stop = threading.Event()


def request_stop() -> None:
    """Ask running sessions to stop at the next step; partial results are kept."""
    _stop.set()


class TrialError(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass
class SessionResult:
    spec: Spec
    seed: int
    trial_idx: int
    session_idx: int
    records: list = field(default_factory=list)
    frames: int = 0
    wall_s: float = 0.0
    params: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def fps(self) -> float:
        return self.frames / self.wall_s if self.wall_s > 0 else 0.0

    @property
    def final_score(self) -> float:
        return analysis.final_score(self.records) if self.records else float("nan")


@dataclass
class TrialResult:
    spec: Spec
    trial_idx: int
    sessions: list = field(default_factory=list)
    mode: str = "none"

    @property
    def total_frames(self) -> int:
        return sum(s.frames for s in self.sessions)

    def aggregate(self) -> analysis.TrialAggregate:
        return analysis.aggregate_trial(self.sessions)

    @property
    def final_score(self) -> float:
        return self.aggregate().final_score


@dataclass
class ExperimentResult:
    spec: Spec
    trials: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    run_dir: Path | None = None

    def ranking(self) -> list[tuple[int, float]]:
        scored = [(t.trial_idx, t.final_score) for t in self.trials if t.sessions]
        return sorted(scored, key=lambda p: (-p[1] if np.isfinite(p[1]) else np.inf, p[0]))


# --- shared parameter store -----------------------------------------------------

class SharedParamStore:
    """Per-net parameter (and optimizer) buffers in shared memory.

    hogwild: workers add parameter deltas without a lock; only the version
    counter is locked. server_worker: gradients are applied serially under the
    lock by the pushing worker, so versions form one serial order and every
    pulled snapshot (read under the lock) equals one of them.
    """

    def __init__(self, nets: dict, mode: str, ctx=None):
        if mode not in ("hogwild", "server_worker"):
            raise ValueError(f"unknown store mode {mode!r}")
        ctx = ctx or mp.get_context("spawn")
        self.mode = mode
        self.lock = ctx.Lock()
        self.version = ctx.RawValue("q", 0)
        self.buffers = {}
        for name, params in nets.items():
            n = params.size
            bufs = {"params": ctx.RawArray("d", n), "m": ctx.RawArray("d", n), "v": ctx.RawArray("d", n),
                    "t": ctx.RawValue("q", 0)}
            np.frombuffer(bufs["params"], dtype=np.float64)[:] = params.flat
            self.buffers[name] = bufs

    def _view(self, name, key="params") -> np.ndarray:
        return np.frombuffer(self.buffers[name][key], dtype=np.float64)

    def snapshot(self, name) -> np.ndarray:
        if self.mode == "server_worker":
            with self.lock:
                return self._view(name).copy()
        return self._view(name).copy()

    def pull(self, agent) -> None:
        for name, net in agent.nets.items():
            net.params.flat[:] = self.snapshot(name)

    def add_delta(self, name, delta) -> None:
        view = self._view(name)
        view += delta  # racy by design
        with self.lock:
            self.version.value += 1

    def apply_grads(self, name, grads: Params, net) -> np.ndarray:
        """Clip and optimizer step on the shared buffers; returns the fresh snapshot."""
        bufs = self.buffers[name]
        with self.lock:
            if net.spec.grad_clip_norm is not None:
                grads = clip_grad_norm(grads, net.spec.grad_clip_norm)
            params = Params(net.params.shapes, self._view(name))
            state = OptState(self._view(name, "m"), self._view(name, "v"), bufs["t"].value)
            optimizer_step(params, grads, state, net.spec, lr=net.lr, inplace=True)
            bufs["t"].value = state.t
            self.version.value += 1
            return self._view(name).copy()


class HogwildUpdater:
    """Worker-private optimizer; the resulting parameter delta is added to shared memory unlocked."""

    def __init__(self, store: SharedParamStore):
        self.store = store

    def apply(self, agent, name, grads) -> float:
        net = agent.nets[name]
        before = net.params.flat.copy()
        norm = net.step(grads)
        self.store.add_delta(name, net.params.flat - before)
        net.params.flat[:] = self.store.snapshot(name)
        return norm


class ServerUpdater:
    """Accumulates gradients per net and pushes their mean every ``push_frequency`` applies."""

    def __init__(self, store: SharedParamStore, push_frequency: int):
        self.store = store
        self.push_frequency = push_frequency
        self.acc: dict = {}
        self.count: dict = {}

    def apply(self, agent, name, grads) -> float:
        net = agent.nets[name]
        norm = grad_norm(grads)
        if name in self.acc:
            self.acc[name] += grads.flat
        else:
            self.acc[name] = grads.flat.copy()
        self.count[name] = self.count.get(name, 0) + 1
        if self.count[name] >= self.push_frequency:
            mean = Params(grads.shapes, self.acc.pop(name) / self.count.pop(name))
            net.params.flat[:] = self.store.apply_grads(name, mean, net)
        return norm


# --- session loop ----------------------------------------------------------------

# stream keys above 2**32 stay clear of the per-lane env seeds (keyed by lane index)
def _agent_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 2**32 + 1]))


def _eval_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 2**32 + 2]))


def build_agent(spec: Spec, seed: int):
    env_spec = spec.env_spec
    venv = VectorEnv(env_spec.name, lane_seeds(seed, env_spec.num_envs), env_spec.max_episode_steps)
    agent = make_agent(spec.agent_spec, venv.observation_dim, venv.action_space, _agent_rng(seed),
                       num_lanes=env_spec.num_envs, max_frame=env_spec.max_frame)
    return agent, venv


def _mean_metrics(metrics: list[dict]) -> dict:
    out = {}
    for key in analysis.LOSS_FIELDS:
        vals = [m[key] for m in metrics if key in m and m[key] is not None]
        out[key] = float(np.mean(vals)) if vals else float("nan")
    return out


def run_session(spec: Spec, seed: int, trial_idx: int = 0, session_idx: int = 0, store=None,
                time_budget: float | None = None, checkpoint_dir=None, catch: bool = False) -> SessionResult:
    """act -> step -> store -> train, with a checkpoint eval every ``eval_frequency`` frames.

    ``store`` switches parameter updates to a shared store (asynchronous modes).
    ``time_budget`` stops after that many wall seconds and skips evaluation
    (throughput measurement). With ``catch`` a failure returns the partial
    result with ``error`` set instead of raising.
    """
    result = SessionResult(spec, seed, trial_idx, session_idx)
    t0 = time.perf_counter()
    try:
        _session_loop(spec, seed, result, store, time_budget, checkpoint_dir, t0)
    except Exception as exc:
        result.wall_s = time.perf_counter() - t0
        if not catch:
            raise
        result.error = f"{type(exc).__name__}: {exc}"
        log.error("session t%d s%d failed: %s\n%s", trial_idx, session_idx, result.error, traceback.format_exc())
    return result


def _session_loop(spec, seed, result, store, time_budget, checkpoint_dir, t0):
    env_spec, meta = spec.env_spec, spec.meta
    agent, venv = build_agent(spec, seed)
    if store is not None:
        store.pull(agent)
        agent.updater = (HogwildUpdater(store) if store.mode == "hogwild"
                         else ServerUpdater(store, meta.push_frequency))
    eval_rng = _eval_rng(seed)
    stats = RunningStats(venv.observation_dim) if env_spec.normalize_state else None

    def state_fn(x):
        return stats.normalize(x) if stats is not None else x

    raw_states = venv.reset()
    states, _ = preprocess(raw_states, 0.0, env_spec, stats)
    frame, next_eval, next_ckpt, next_log = 0, meta.eval_frequency, meta.checkpoint_frequency, meta.log_frequency
    pending: list[dict] = []
    episode_returns: list[float] = []
    max_frame = env_spec.max_frame
    while frame < max_frame:
        if _stop.is_set():
            raise InterruptedError(f"stop requested at frame {frame}")
        if time_budget is not None and time.perf_counter() - t0 >= time_budget:
            break
        actions = agent.act(states)
        res = venv.step(actions)
        truncated = np.array([info["truncated"] for info in res.infos])
        next_raw = res.states.copy()
        for lane, info in enumerate(res.infos):
            if res.dones[lane]:
                next_raw[lane] = info["terminal_state"]
                episode_returns.append(info["episode_return"])
        next_states, rewards = preprocess(next_raw, res.rewards, env_spec, stats, update=False)
        agent.observe(states, actions, rewards, next_states, res.dones, truncated)
        frame += venv.num_envs
        if store is not None and store.mode == "hogwild":
            store.pull(agent)
        metrics = agent.train()
        if metrics is not None:
            pending.append(metrics)
        states, _ = preprocess(res.states, 0.0, env_spec, stats)
        if time_budget is None and frame >= next_eval:
            returns = analysis.evaluate_episodes(agent, env_spec, meta.eval_episodes, eval_rng, state_fn)
            snap = _mean_metrics(pending)
            snap["train_return"] = float(np.mean(episode_returns[-100:])) if episode_returns else float("nan")
            result.records.append(CheckpointRecord(frame, float(np.mean(returns)), float(np.std(returns)),
                                                   len(returns), snap, time.perf_counter() - t0))
            pending = []
            next_eval = (frame // meta.eval_frequency + 1) * meta.eval_frequency
        if frame >= next_log:
            log.info("t%d s%d frame %d train_return %.3f", result.trial_idx, result.session_idx, frame,
                     np.mean(episode_returns[-100:]) if episode_returns else float("nan"))
            next_log = (frame // meta.log_frequency + 1) * meta.log_frequency
        if checkpoint_dir is not None and frame >= next_ckpt:
            _save_agent(agent, spec, Path(checkpoint_dir), f"trial{result.trial_idx}_session{result.session_idx}"
                        f"_frame{frame}")
            next_ckpt = (frame // meta.checkpoint_frequency + 1) * meta.checkpoint_frequency
    result.frames = frame
    result.wall_s = time.perf_counter() - t0
    result.params = {name: net.params.flat.copy() for name, net in agent.nets.items()}


def _save_agent(agent, spec: Spec, out_dir: Path, stem: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, net in agent.nets.items():
        save_params(out_dir / f"{stem}_{name}", net.params, net.spec, __version__)


# --- trials -------------------------------------------------------------------------

def session_seeds(spec: Spec, trial_idx: int) -> list[int]:
    return [derive_seed(spec.meta.base_seed, trial_idx, j) for j in range(spec.meta.num_sessions)]


def _worker(spec_text, seed, trial_idx, session_idx, store, time_budget, checkpoint_dir, queue):
    spec = spec_from_dict(json.loads(spec_text))
    result = run_session(spec, seed, trial_idx, session_idx, store, time_budget, checkpoint_dir, catch=True)
    result.spec = None  # the parent already holds the spec
    queue.put(result)


def _run_workers(spec: Spec, seeds, trial_idx, store, time_budget=None, checkpoint_dir=None) -> list[SessionResult]:
    ctx = mp.get_context("spawn")
    queue = ctx.Queue()
    text = json.dumps(spec_to_dict(spec))
    procs = [ctx.Process(target=_worker, args=(text, seed, trial_idx, j, store, time_budget, checkpoint_dir, queue))
             for j, seed in enumerate(seeds)]
    for p in procs:
        p.start()
    results = {}
    while len(results) < len(procs):
        try:
            r = queue.get(timeout=1.0)
            r.spec = spec
            results[r.session_idx] = r
        except Exception:
            dead = [j for j, p in enumerate(procs) if not p.is_alive() and j not in results]
            if dead and queue.empty():
                time.sleep(0.5)
                if queue.empty():
                    for j in dead:
                        results[j] = SessionResult(spec, seeds[j], trial_idx, j,
                                                   error=f"worker exited with code {procs[j].exitcode}")
    for p in procs:
        p.join()
    return [results[j] for j in range(len(seeds))]


def run_trial(spec: Spec, trial_idx: int = 0, run_dir=None) -> TrialResult:
    """Run every Session of a Trial; write metrics CSVs when ``run_dir`` is given.

    A failed Session aborts the trial with :class:`TrialError` after the
    partial results have been written.
    """
    mode = spec.meta.distributed
    seeds = session_seeds(spec, trial_idx)
    ckpt_dir = Path(run_dir) / "checkpoints" if run_dir is not None else None
    if mode == "none":
        sessions = [run_session(spec, seed, trial_idx, j, checkpoint_dir=ckpt_dir, catch=True)
                    for j, seed in enumerate(seeds)]
    else:
        template, _ = build_agent(spec, seeds[0])
        store = SharedParamStore({n: net.params for n, net in template.nets.items()}, mode)
        if len(seeds) == 1:
            sessions = [run_session(spec, seeds[0], trial_idx, 0, store, checkpoint_dir=ckpt_dir, catch=True)]
        else:
            sessions = _run_workers(spec, seeds, trial_idx, store, checkpoint_dir=ckpt_dir)
    result = TrialResult(spec, trial_idx, sessions, mode)
    if run_dir is not None:
        write_trial(result, Path(run_dir))
    failed = [s for s in sessions if s.error]
    if failed:
        raise TrialError("; ".join(f"session {s.session_idx}: {s.error}" for s in failed), result)
    return result


def write_trial(result: TrialResult, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    for s in result.sessions:
        stem = f"trial{result.trial_idx}_session{s.session_idx}"
        analysis.write_metrics_csv(run_dir / f"{stem}_metrics.csv", s.records)
        analysis.write_timing_csv(run_dir / f"{stem}_timing.csv", s.records)
        if s.error:
            (run_dir / f"{stem}_error.txt").write_text(s.error + "\n")


# --- run directories and experiments ------------------------------------------------

def make_run_dir(spec: Spec, out_root="data") -> Path:
    stamp = datetime.now().strftime("%Y_%m_%d_%H%M%S")
    base = Path(out_root) / f"{spec.meta.spec_name}_{stamp}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}_{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def write_manifest(spec: Spec, run_dir: Path, command: str = "run", extra: dict | None = None) -> dict:
    mode = spec.meta.distributed
    manifest = {
        "version": __version__,
        "command": command,
        "mode": mode,
        "reproducible": mode == "none",
        "reproducibility_note": ("synchronous: metrics CSVs are bit-reproducible from spec.json" if mode == "none"
                                 else f"{mode}: asynchronous updates, runs are not bit-reproducible"),
        "overrides": spec.meta.overrides,
        "base_seed": spec.meta.base_seed,
        "host": {"platform": platform.platform(), "python": platform.python_version(),
                 "machine": platform.machine(), "cpu_count": os.cpu_count(), "numpy": np.__version__},
        "created": datetime.now().isoformat(timespec="seconds"),
    }
    manifest.update(extra or {})
    save_spec(spec, run_dir / "spec.json")
    (run_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def run_experiment(spec: Spec, run_dir=None, seed: int | None = None) -> ExperimentResult:
    """expand_search -> one Trial per concrete spec -> ranking by trial final_score."""
    rng = np.random.default_rng(spec.meta.base_seed if seed is None else seed)
    specs = expand_search(spec, spec.meta.num_trials, rng)
    result = ExperimentResult(spec, run_dir=Path(run_dir) if run_dir is not None else None)
    for i, trial_spec in enumerate(specs):
        trial_dir = None
        if run_dir is not None:
            trial_dir = Path(run_dir)
            (trial_dir / f"trial{i}_spec.json").write_text(serialize_spec(trial_spec))
        try:
            result.trials.append(run_trial(trial_spec, i, trial_dir))
        except TrialError as exc:
            log.error("trial %d failed: %s", i, exc)
            result.failures[i] = str(exc)
            if exc.result is not None:
                result.trials.append(exc.result)
        except Exception as exc:
            log.error("trial %d failed: %s", i, exc)
            result.failures[i] = f"{type(exc).__name__}: {exc}"
    return result


# --- throughput ---------------------------------------------------------------------

def measure_fps(spec: Spec, duration_seconds: float, num_workers: int = 1) -> dict:
    """Summed frames per second of the training loop over a wall-clock budget.

    Several workers run as Hogwild processes over one shared store.
    """
    if not duration_seconds > 0:
        raise ValueError("duration must be > 0")
    data = spec_to_dict(spec)
    data["env"][0]["max_frame"] = 10**12
    data["meta"]["num_sessions"] = num_workers
    data["meta"]["distributed"] = "hogwild" if num_workers > 1 else "none"
    spec = spec_from_dict(data)
    seeds = session_seeds(spec, 0)
    if num_workers == 1:
        sessions = [run_session(spec, seeds[0], time_budget=duration_seconds)]
    else:
        template, _ = build_agent(spec, seeds[0])
        store = SharedParamStore({n: net.params for n, net in template.nets.items()}, "hogwild")
        sessions = _run_workers(spec, seeds, 0, store, time_budget=duration_seconds)
    errors = [s.error for s in sessions if s.error]
    if errors:
        raise RuntimeError("; ".join(errors))
    return {"num_envs": spec.env_spec.num_envs, "num_workers": num_workers,
            "frames": sum(s.frames for s in sessions),
            "fps": float(sum(s.fps for s in sessions))}
