"""Fast oracle suites run by ``specrl selftest``.

Each suite compares a production code path against an independent oracle
and reports the worst observed error. Setting ``SPECRL_SELFTEST_FAULT=gae_sign``
flips the sign of the GAE output, which must make the GAE suite fail.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import distributions as D
from . import oracles
from .algorithms import returns
from .memory import MemorySpec, PrioritizedReplay, SumTree, Transition


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    detail: str
    seconds: float = 0.0


def _calc_gae(*args, **kwargs):
    adv, targets = returns.calc_gae(*args, **kwargs)
    if os.environ.get("SPECRL_SELFTEST_FAULT") == "gae_sign":
        return -adv, targets
    return adv, targets


def suite_gradients(rng, n_nets=100) -> SuiteResult:
    errs = oracles.loss_gradient_errors(rng, n_nets)
    worst = max(errs.values())
    detail = ", ".join(f"{k}={v:.1e}" for k, v in errs.items())
    return SuiteResult("gradient finite-difference", worst < 1e-5, worst, detail)


def _random_sequence(rng):
    T = int(rng.integers(1, 65))
    dones = (rng.random(T) < rng.uniform(0.0, 0.3)).astype(np.float64)
    return T, rng.normal(size=T), dones


def suite_gae(rng, cases=1000) -> SuiteResult:
    worst = 0.0
    for _ in range(cases):
        T, r, d = _random_sequence(rng)
        v = rng.normal(size=T + 1)
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.0, 1.0)
        adv, targets = _calc_gae(r, d, v, gamma, lam)
        ref = oracles.gae_oracle(r, d, v, gamma, lam)
        worst = max(worst, float(np.max(np.abs(adv - ref))), float(np.max(np.abs(targets - (ref + v[:-1])))))
    return SuiteResult("GAE oracle", worst <= 1e-12, worst, f"{cases} random sequences, T<=64")


def suite_nstep(rng, cases=1000) -> SuiteResult:
    worst = 0.0
    for _ in range(cases):
        T, r, d = _random_sequence(rng)
        v = rng.normal(size=T)
        boot = float(rng.normal())
        n = int(rng.integers(1, 2 * T + 1))
        gamma = rng.uniform(0.8, 1.0)
        got = returns.calc_nstep_returns(r, d, boot, gamma, n, values=v)
        worst = max(worst, float(np.max(np.abs(got - oracles.nstep_oracle(r, d, boot, v, gamma, n)))))
        got = returns.discounted_returns(r, d, gamma)
        worst = max(worst, float(np.max(np.abs(got - oracles.discounted_oracle(r, d, gamma)))))
    return SuiteResult("n-step oracle", worst <= 1e-12, worst, f"{cases} random sequences, T<=64")


def suite_sumtree(rng, ops=10_000) -> SuiteResult:
    cap = 1000
    tree = SumTree(cap)
    ref = np.zeros(tree.capacity)
    mismatches = 0
    for _ in range(ops):
        if rng.random() < 0.5:
            k = int(rng.integers(1, 8))
            idx = rng.integers(0, cap, size=k)
            p = rng.uniform(0, 10, size=k)
            tree.set(idx, p)
            for i, pi in zip(idx, p):
                ref[i] = pi
        elif tree.total() > 0:
            u = float(rng.uniform(0, tree.total()))
            mismatches += int(tree.find(u)[0] != oracles.linear_scan_find(ref, u))
    worst = max(tree.audit(), abs(tree.total() - float(np.sum(ref))), float(np.max(np.abs(tree.leaves() - ref))))
    ok = worst <= 1e-9 and mismatches == 0
    return SuiteResult("sum-tree audit", ok, worst, f"{ops} random ops, {mismatches} find mismatches vs linear scan")


def _filled_per(priorities, alpha=1.0, batch_size=100):
    n = len(priorities)
    mem = PrioritizedReplay(MemorySpec(name="prioritized_replay", max_size=n, batch_size=batch_size,
                                       per_alpha=alpha, per_epsilon=1e-12))
    for i in range(n):
        mem.add(Transition(np.zeros(1), 0, 0.0, np.zeros(1), False))
    mem.tree.set(np.arange(n), priorities)
    return mem


def suite_per_sampling(rng, draws=100_000) -> SuiteResult:
    p = rng.uniform(0.1, 2.0, size=20)
    mem = _filled_per(p, batch_size=20)
    counts = np.zeros(len(p))
    for _ in range(draws // mem.batch_size):
        _, idx, _ = mem.sample(rng, beta=0.4)
        counts += np.bincount(idx % len(p), minlength=len(p))
    expected = p / p.sum() * counts.sum()
    pval = float(stats.chisquare(counts, expected).pvalue)
    _, _, w0 = mem.sample(rng, beta=0.0)
    uniform = _filled_per(np.ones(16), batch_size=16)
    _, _, wu = uniform.sample(rng, beta=0.7)
    exact = bool(np.all(w0 == 1.0) and np.all(wu == 1.0))
    err = float(max(np.max(np.abs(w0 - 1.0)), np.max(np.abs(wu - 1.0))))
    return SuiteResult("PER sampling", pval > 0.01 and exact, err,
                       f"chi-square p={pval:.3f} at {int(counts.sum())} draws; unit weights exact={exact}")


def suite_gumbel(rng, draws=100_000) -> SuiteResult:
    probs = np.array([0.1, 0.3, 0.6])
    logits = np.log(probs)
    worst = 0.0
    pvals = []
    for tau in (0.1, 1.0, 5.0):
        y = D.gumbel_softmax_sample(np.tile(logits, (draws, 1)), tau, rng, hard=True)
        counts = y.sum(axis=0)
        worst = max(worst, float(np.max(np.abs(counts / draws - probs))))
        pvals.append(float(stats.chisquare(counts, probs * draws).pvalue))
    y = D.gumbel_softmax_sample(rng.normal(size=(1000, 4)), 0.01, rng, hard=True)
    onehot_err = float(np.max(np.abs(y - np.eye(4)[np.argmax(y, axis=1)])))
    ok = worst <= 0.01 and min(pvals) > 0.01 and onehot_err <= 1e-3
    return SuiteResult("Gumbel-Softmax marginals", ok, worst,
                       f"chi-square p min={min(pvals):.3f}; tau=0.01 one-hot err={onehot_err:.1e}")


SUITES = (suite_gradients, suite_gae, suite_nstep, suite_sumtree, suite_per_sampling, suite_gumbel)


def run_selftest(seed: int = 0, suites=SUITES) -> list[SuiteResult]:
    out = []
    for suite in suites:
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            res = suite(rng)
        except Exception as exc:
            res = SuiteResult(suite.__name__.removeprefix("suite_"), False, float("nan"),
                              f"raised {type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out


def format_report(results: list[SuiteResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<28} max_error={r.max_error:.3e}  ({r.seconds:.1f}s)  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    lines.append("all suites passed" if not failed else "failed: " + ", ".join(failed))
    return "\n".join(lines)
