"""Checkpoint evaluation, final-score metric, trial aggregation, CSV and SVG output."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import EnvSpec, make_env

FINAL_SCORE_WINDOW = 100

METRIC_COLUMNS = ("frame", "eval_score_mean", "eval_score_std", "eval_episodes", "train_return",
                  "loss", "policy_loss", "value_loss", "entropy", "grad_norm", "q_mean", "explore_var")
TIMING_COLUMNS = ("frame", "wall_s", "fps")
LOSS_FIELDS = ("loss", "policy_loss", "value_loss", "entropy", "grad_norm", "q_mean", "explore_var")


@dataclass
class CheckpointRecord:
    frame: int
    eval_score: float
    eval_score_std: float = 0.0
    eval_episodes: int = 0
    metrics: dict = field(default_factory=dict)
    wall_s: float = 0.0


# --- evaluation ----------------------------------------------------------------

def evaluate_episodes(agent, env_spec: EnvSpec, episodes: int, rng: np.random.Generator,
                      state_fn=None) -> np.ndarray:
    """Raw (unclipped) returns of ``episodes`` eval-mode episodes, stepped as one batch."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    seeds = rng.integers(0, 2**63 - 1, size=episodes)
    envs = [make_env(env_spec.name, int(s), env_spec.max_episode_steps) for s in seeds]
    states = [env.reset() for env in envs]
    returns = np.zeros(episodes)
    active = list(range(episodes))
    while active:
        batch = np.array([states[i] for i in active])
        if state_fn is not None:
            batch = state_fn(batch)
        actions = agent.act(batch, mode="eval")
        still = []
        for k, i in enumerate(active):
            r = envs[i].step(actions[k])
            returns[i] += r.reward
            if not r.done:
                states[i] = r.state
                still.append(i)
        active = still
    return returns


def checkpoint_eval(agent, env_spec: EnvSpec, episodes: int, rng: np.random.Generator, state_fn=None) -> float:
    return float(np.mean(evaluate_episodes(agent, env_spec, episodes, rng, state_fn)))


# --- scores and aggregation ----------------------------------------------------------

def _scores(records) -> np.ndarray:
    return np.array([r.eval_score if isinstance(r, CheckpointRecord) else float(r) for r in records])


def final_score(records, window: int = FINAL_SCORE_WINDOW) -> float:
    """Mean eval score over the last ``min(window, len(records))`` checkpoints."""
    scores = _scores(records)
    if len(scores) == 0:
        raise ValueError("final_score needs at least one checkpoint record")
    if window < 1:
        raise ValueError("window must be >= 1")
    return float(np.mean(scores[-window:]))


@dataclass
class TrialAggregate:
    frames: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    final_score: float
    session_final_scores: list

    @property
    def final_score_std(self) -> float:
        return float(np.std(self.session_final_scores))


def _records_of(session):
    return session.records if hasattr(session, "records") else session


def aggregate_trial(sessions, window: int = FINAL_SCORE_WINDOW) -> TrialAggregate:
    """Pointwise mean and population std across sessions on a shared checkpoint grid."""
    sessions = [_records_of(s) for s in sessions]
    if not sessions:
        raise ValueError("aggregate_trial needs at least one session")
    frames = np.array([r.frame for r in sessions[0]], dtype=np.int64)
    for recs in sessions[1:]:
        other = np.array([r.frame for r in recs], dtype=np.int64)
        if other.shape != frames.shape or np.any(other != frames):
            raise ValueError("sessions have mismatched checkpoint frames")
    grid = np.array([_scores(recs) for recs in sessions]).reshape(len(sessions), len(frames))
    finals = [final_score(recs, window) for recs in sessions] if len(frames) else []
    return TrialAggregate(frames, grid.mean(axis=0), grid.std(axis=0),
                          float(np.mean(finals)) if finals else float("nan"), finals)


# --- CSV ---------------------------------------------------------------------------

def fmt(value) -> str:
    """Full-precision text: ints as-is, floats via repr (round-trips exactly)."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return "nan"
    return repr(float(value))


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            values = [row.get(c) for c in columns] if isinstance(row, dict) else row
            w.writerow([fmt(v) for v in values])


def read_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header)}


def metrics_rows(records) -> list[dict]:
    rows = []
    for r in records:
        row = {"frame": r.frame, "eval_score_mean": r.eval_score, "eval_score_std": r.eval_score_std,
               "eval_episodes": r.eval_episodes}
        row.update({k: r.metrics.get(k, float("nan")) for k in ("train_return",) + LOSS_FIELDS})
        rows.append(row)
    return rows


def write_metrics_csv(path, records) -> None:
    write_csv(path, METRIC_COLUMNS, metrics_rows(records))


def write_timing_csv(path, records) -> None:
    rows = [{"frame": r.frame, "wall_s": r.wall_s, "fps": r.frame / r.wall_s if r.wall_s > 0 else float("nan")}
            for r in records]
    write_csv(path, TIMING_COLUMNS, rows)


def read_metrics_csv(path) -> list[CheckpointRecord]:
    cols = read_csv(path)
    out = []
    for i in range(len(cols["frame"])):
        metrics = {k: float(cols[k][i]) for k in ("train_return",) + LOSS_FIELDS}
        out.append(CheckpointRecord(int(cols["frame"][i]), float(cols["eval_score_mean"][i]),
                                    float(cols["eval_score_std"][i]), int(cols["eval_episodes"][i]), metrics))
    return out


# --- SVG -----------------------------------------------------------------------------

def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not hi > lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out, v = [], start
    while v <= hi + 1e-9 * step:
        out.append(v)
        v += step
    return out


def _tick_label(v: float) -> str:
    if v != 0 and (abs(v) >= 1e5 or abs(v) < 1e-3):
        return f"{v:.1e}"
    return f"{v:.6g}"


def svg_plot(x, lines, band=None, title="", xlabel="frame", ylabel="eval score",
             width=640, height=400) -> str:
    """Self-contained SVG: one polyline per (label, ys), optional (lo, hi) band polygon."""
    x = np.asarray(x, dtype=np.float64)
    ml, mr, mt, mb = 70, 20, 30, 50
    pw, ph = width - ml - mr, height - mt - mb
    ys_all = [np.asarray(ys, dtype=np.float64) for _, ys in lines]
    if band is not None:
        ys_all += [np.asarray(band[0]), np.asarray(band[1])]
    finite = np.concatenate([y[np.isfinite(y)] for y in ys_all]) if ys_all else np.array([])
    y_lo, y_hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    x_lo, x_hi = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 1.0, x_hi + 1.0

    def px(v):
        return ml + (v - x_lo) / (x_hi - x_lo) * pw

    def py(v):
        return mt + ph - (v - y_lo) / (y_hi - y_lo) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>']
    if band is not None and x.size:
        lo, hi = np.asarray(band[0]), np.asarray(band[1])
        pts = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, hi)]
        pts += [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[::-1], lo[::-1])]
        parts.append(f'<polygon points="{" ".join(pts)}" fill="#1f77b4" fill-opacity="0.2" stroke="none"/>')
    palette = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")
    for k, (label, ys) in enumerate(lines):
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, ys) if np.isfinite(b))
        color = palette[k % len(palette)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{ml + 8}" y="{mt + 14 + 14 * k}" fill="{color}">{_esc(label)}</text>')
    parts.append(f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>')
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>')
    for t in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{px(t):.2f}" y1="{mt + ph}" x2="{px(t):.2f}" y2="{mt + ph + 5}" stroke="black"/>')
        parts.append(f'<text x="{px(t):.2f}" y="{mt + ph + 18}" text-anchor="middle">{_tick_label(t)}</text>')
    for t in _ticks(y_lo, y_hi):
        parts.append(f'<line x1="{ml - 5}" y1="{py(t):.2f}" x2="{ml}" y2="{py(t):.2f}" stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{py(t) + 4:.2f}" text-anchor="end">{_tick_label(t)}</text>')
    parts.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{_esc(xlabel)}</text>')
    parts.append(f'<text x="15" y="{mt + ph / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 15 {mt + ph / 2:.1f})">{_esc(ylabel)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(text: str) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


# --- plot emission -----------------------------------------------------------------

SESSION_CURVE_COLUMNS = ("frame", "eval_score")
TRIAL_CURVE_COLUMNS = ("frame", "mean", "std", "lower", "upper")
FINAL_SCORE_COLUMNS = ("trial_idx", "final_score_mean", "final_score_std")


def _emit_trial(trial, out_dir: Path) -> list[Path]:
    files = []
    i = trial.trial_idx
    for s in trial.sessions:
        stem = out_dir / f"trial{i}_session{s.session_idx}_curve"
        frames = [r.frame for r in s.records]
        scores = [r.eval_score for r in s.records]
        write_csv(stem.with_suffix(".csv"), SESSION_CURVE_COLUMNS, list(zip(frames, scores)))
        stem.with_suffix(".svg").write_text(
            svg_plot(frames, [(f"session {s.session_idx}", scores)], title=f"trial {i} session {s.session_idx}"))
        files += [stem.with_suffix(".csv"), stem.with_suffix(".svg")]
    agg = aggregate_trial(trial.sessions)
    stem = out_dir / f"trial{i}_curve"
    lower, upper = agg.mean - agg.std, agg.mean + agg.std
    write_csv(stem.with_suffix(".csv"), TRIAL_CURVE_COLUMNS,
              [(int(f), m, s, lo, hi) for f, m, s, lo, hi in zip(agg.frames, agg.mean, agg.std, lower, upper)])
    stem.with_suffix(".svg").write_text(
        svg_plot(agg.frames, [("mean", agg.mean)], band=(lower, upper),
                 title=f"trial {i}: mean +/- 1 std over {len(trial.sessions)} sessions"))
    files += [stem.with_suffix(".csv"), stem.with_suffix(".svg")]
    return files


def write_final_scores(trials, path) -> list[str]:
    """Ranked experiment table; sampled parameters come from each trial's provenance."""
    params = sorted({k for t in trials for k in t.spec.meta.provenance})
    rows = []
    for t in trials:
        agg = aggregate_trial(t.sessions)
        rows.append([t.trial_idx] + [t.spec.meta.provenance.get(k) for k in params]
                    + [agg.final_score, agg.final_score_std])
    rows.sort(key=lambda r: (-r[-2] if math.isfinite(r[-2]) else math.inf, r[0]))
    columns = ["trial_idx"] + params + ["final_score_mean", "final_score_std"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) if isinstance(v, (int, float, np.number)) or v is None
                        else repr(v) for v in row])
    return columns


def emit_plots(result, out_dir) -> list[Path]:
    """Curves for a trial (``sessions`` attribute) or for every trial of an experiment."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if hasattr(result, "sessions"):
        if not result.sessions:
            raise ValueError("trial has no sessions")
        return _emit_trial(result, out_dir)
    trials = [t for t in result.trials if t.sessions]
    if not trials:
        raise ValueError("experiment has no completed trials")
    files = []
    for t in trials:
        files += _emit_trial(t, out_dir)
    write_final_scores(trials, out_dir / "final_scores.csv")
    files.append(out_dir / "final_scores.csv")
    return files
