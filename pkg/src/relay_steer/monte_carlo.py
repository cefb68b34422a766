"""Ensembles of closed-loop trajectories and empirical checks of the
hitting-probability bound and of the supermartingale property.

Paths are integrated in fixed blocks of consecutive stream indices and the
block summaries are reduced in stream order, so reports do not depend on
how many worker processes ran the blocks.
"""

import csv
import json
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DivergenceError, InvalidInputError
from .relay_control import bound_constants, success_probability_lower_bound
from .sde_sim import (
    default_grid,
    default_hit_tol,
    default_regularization,
    sample_increments,
    simulate_batch,
)

SCHEMA = "relay-steer/1"
BLOCK_SIZE = 256
WILSON_Z = 1.959963984540054
VERDICT_MARGIN = 0.01
MAX_EXCLUDED_FRACTION = 1e-3
HIST_BINS = 20


def wilson_interval(successes, trials, z=WILSON_Z):
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        return 0.0, 1.0
    p = successes / trials
    denom = 1.0 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * np.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return float(max(0.0, centre - half)), float(min(1.0, centre + half))


def verdict_for(lo, hi, bound, margin=VERDICT_MARGIN):
    if hi < bound:
        return "bound_violated"
    if lo >= bound - margin:
        return "bound_satisfied"
    return "inconclusive"


@dataclass
class EnsembleReport:
    paths_run: int
    hits: int
    p_hat: float
    wilson_ci: tuple
    bound_rhs: float
    verdict: str
    rho: float
    T: float
    dt: float
    hit_tol: float
    seed: int
    C_star: float
    excluded: int
    tau_hist_edges: np.ndarray
    tau_hist_counts: np.ndarray
    times: np.ndarray
    mean_supermartingale: np.ndarray
    se_supermartingale: np.ndarray
    extras: dict = field(default_factory=dict)

    def summary(self):
        """Scalar fields as a JSON-ready dict."""
        return {
            "schema": SCHEMA,
            "paths_run": self.paths_run,
            "hits": self.hits,
            "p_hat": self.p_hat,
            "wilson_lo": self.wilson_ci[0],
            "wilson_hi": self.wilson_ci[1],
            "bound_rhs": self.bound_rhs,
            "verdict": self.verdict,
            "rho": self.rho,
            "T": self.T,
            "dt": self.dt,
            "hit_tol": self.hit_tol,
            "seed": self.seed,
            "C_star": self.C_star,
            "excluded": self.excluded,
            "extras": self.extras,
        }

    def equals(self, other):
        if self.summary() != other.summary():
            return False
        pairs = [
            (self.tau_hist_edges, other.tau_hist_edges),
            (self.tau_hist_counts, other.tau_hist_counts),
            (self.times, other.times),
            (self.mean_supermartingale, other.mean_supermartingale),
            (self.se_supermartingale, other.se_supermartingale),
        ]
        return all(np.array_equal(a, b) for a, b in pairs)


@dataclass
class _BlockOut:
    start: int
    hit_idx: np.ndarray
    diverged: np.ndarray
    hold_infeasible: np.ndarray
    dist_sum: np.ndarray
    dist_sq: np.ndarray
    post_hit_max: np.ndarray
    window_max: np.ndarray
    terminal: np.ndarray


# set before forking workers; holds (scenario, grid, reg, hit_tol, seed, hold, hit_until, window_start)
_JOB = None


def _run_block(bounds):
    scenario, grid, reg, hit_tol, seed, hold, hit_until, window_start = _JOB
    start, stop = bounds
    dW = sample_increments(grid, scenario.d, seed, range(start, stop))
    res = simulate_batch(scenario, grid, dW, reg, hit_tol, hold=hold, hit_until=hit_until)
    ok = ~res.diverged
    dist = res.dist[ok]
    K1 = grid.steps + 1
    idx = np.arange(K1)
    after = (res.hit_idx[:, None] >= 0) & (idx[None, :] >= res.hit_idx[:, None])
    post = np.where(after, res.dist, -np.inf).max(axis=1)
    post[res.hit_idx < 0] = np.inf
    window = res.dist[:, window_start:].max(axis=1)
    return _BlockOut(
        start=start,
        hit_idx=res.hit_idx,
        diverged=res.diverged,
        hold_infeasible=res.hold_infeasible,
        dist_sum=dist.sum(axis=0),
        dist_sq=(dist * dist).sum(axis=0),
        post_hit_max=post,
        window_max=window,
        terminal=res.terminal,
    )


def resolve_workers(workers=None):
    if workers is None:
        workers = int(os.environ.get("RELAY_STEER_WORKERS", "1"))
    if workers < 1:
        raise InvalidInputError("workers must be >= 1")
    return workers


def run_blocks(scenario, paths, seed, grid, reg, hit_tol, hold=True, hit_until=None,
               window_start=0, workers=None, block_size=BLOCK_SIZE):
    """Integrate ``paths`` trajectories and return block summaries in stream order."""
    global _JOB
    if paths < 1:
        raise InvalidInputError("paths must be >= 1")
    workers = resolve_workers(workers)
    bounds = [(s, min(s + block_size, paths)) for s in range(0, paths, block_size)]
    _JOB = (scenario, grid, reg, hit_tol, int(seed), hold, hit_until, window_start)
    try:
        if workers == 1 or len(bounds) == 1:
            return [_run_block(b) for b in bounds]
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            return list(pool.map(_run_block, bounds))
    finally:
        _JOB = None


def run_ensemble(scenario, paths, seed, reg=None, hit_tol=None, workers=None, grid=None,
                 drift="norm", C_star=None, block_size=BLOCK_SIZE):
    """Closed-loop ensemble over streams ``0..paths-1`` with a bound verdict."""
    grid = grid or default_grid(scenario)
    if not np.isclose(grid.T, scenario.T):
        raise InvalidInputError("grid horizon must equal the scenario horizon")
    reg = reg or default_regularization(scenario, grid)
    hit_tol = default_hit_tol(scenario) if hit_tol is None else hit_tol
    consts = bound_constants(scenario, drift=drift)
    C = consts.C_star if C_star is None else C_star
    blocks = run_blocks(scenario, paths, seed, grid, reg, hit_tol, workers=workers, block_size=block_size)
    rho = scenario.rho
    bound = success_probability_lower_bound(consts, scenario.x, scenario.y, scenario.T, rho) if rho > 0 else 0.0
    return _assemble(blocks, grid, scenario, seed, hit_tol, C, bound)


def _assemble(blocks, grid, scenario, seed, hit_tol, C, bound, hit_until=None):
    hit_idx = np.concatenate([b.hit_idx for b in blocks])
    diverged = np.concatenate([b.diverged for b in blocks])
    excluded = int(diverged.sum())
    total = hit_idx.size
    if excluded > MAX_EXCLUDED_FRACTION * total:
        raise DivergenceError(f"{excluded} of {total} trajectories diverged; reduce dt")
    n_ok = total - excluded
    s1 = np.zeros(grid.steps + 1)
    s2 = np.zeros(grid.steps + 1)
    for b in blocks:
        s1 += b.dist_sum
        s2 += b.dist_sq
    mean = s1 / n_ok
    var = np.maximum(s2 - n_ok * mean * mean, 0.0) / max(n_ok - 1, 1)
    times = grid.times
    weight = np.exp(-C * times)
    limit = scenario.T if hit_until is None else hit_until
    ok_hits = hit_idx[(~diverged) & (hit_idx >= 0)]
    taus = ok_hits * grid.dt
    hits = int(np.sum(taus <= limit + 1e-12))
    edges = np.linspace(0.0, limit, HIST_BINS + 1)
    counts = np.histogram(taus[taus <= limit + 1e-12], bins=edges)[0]
    p_hat = hits / n_ok
    lo, hi = wilson_interval(hits, n_ok)
    return EnsembleReport(
        paths_run=n_ok,
        hits=hits,
        p_hat=p_hat,
        wilson_ci=(lo, hi),
        bound_rhs=float(bound),
        verdict=verdict_for(lo, hi, bound),
        rho=float(scenario.rho),
        T=float(scenario.T),
        dt=float(grid.dt),
        hit_tol=float(hit_tol),
        seed=int(seed),
        C_star=float(C),
        excluded=excluded,
        tau_hist_edges=edges,
        tau_hist_counts=counts,
        times=times,
        mean_supermartingale=weight * mean,
        se_supermartingale=weight * np.sqrt(var / n_ok),
    )


def verify_bound(report, bound=None, margin=VERDICT_MARGIN):
    """Compare the Wilson interval of ``report`` with ``bound``."""
    bound = report.bound_rhs if bound is None else bound
    lo, hi = report.wilson_ci
    return verdict_for(lo, hi, bound, margin)


def supermartingale_check(report, every=100, n_se=3.0):
    """Pairs ``k < k'`` on a decimated grid where the mean series rises too much.

    Returns a list of ``(t_k, t_k', excess)``; an empty list is a pass.
    """
    idx = np.arange(0, report.times.size, every)
    mean = report.mean_supermartingale[idx]
    se = report.se_supermartingale[idx]
    slack = mean[None, :] - mean[:, None] - n_se * (se[:, None] + se[None, :])
    upper = np.triu(np.ones_like(slack, dtype=bool), k=1)
    bad = np.argwhere(upper & (slack > 0))
    t = report.times[idx]
    return [(float(t[i]), float(t[j]), float(slack[i, j])) for i, j in bad]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else int(v) for v in row])


def export_report(report, path_prefix):
    """Write ``<prefix>.summary.json``, ``.tau_histogram.csv`` and ``.supermartingale.csv``."""
    prefix = str(path_prefix)
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    files = {
        "summary": prefix + ".summary.json",
        "tau_histogram": prefix + ".tau_histogram.csv",
        "supermartingale": prefix + ".supermartingale.csv",
    }
    with open(files["summary"], "w") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    e, c = report.tau_hist_edges, report.tau_hist_counts
    _write_csv(files["tau_histogram"], ["bin_lo", "bin_hi", "count"],
               [(float(e[i]), float(e[i + 1]), int(c[i])) for i in range(c.size)])
    _write_csv(files["supermartingale"], ["t", "mean", "se"],
               zip(map(float, report.times), map(float, report.mean_supermartingale),
                   map(float, report.se_supermartingale)))
    return files


def _read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return [row for row in r]


def load_report(path_prefix):
    """Read back the files written by :func:`export_report`."""
    prefix = str(path_prefix)
    with open(prefix + ".summary.json") as fh:
        s = json.load(fh)
    if s.get("schema") != SCHEMA:
        raise InvalidInputError(f"unsupported report schema {s.get('schema')!r}")
    hist = _read_csv(prefix + ".tau_histogram.csv")
    sm = np.array(_read_csv(prefix + ".supermartingale.csv"), dtype=float).reshape(-1, 3)
    edges = np.array([float(r[0]) for r in hist] + [float(hist[-1][1])]) if hist else np.zeros(1)
    return EnsembleReport(
        paths_run=s["paths_run"],
        hits=s["hits"],
        p_hat=s["p_hat"],
        wilson_ci=(s["wilson_lo"], s["wilson_hi"]),
        bound_rhs=s["bound_rhs"],
        verdict=s["verdict"],
        rho=s["rho"],
        T=s["T"],
        dt=s["dt"],
        hit_tol=s["hit_tol"],
        seed=s["seed"],
        C_star=s["C_star"],
        excluded=s["excluded"],
        tau_hist_edges=edges,
        tau_hist_counts=np.array([int(r[2]) for r in hist]),
        times=sm[:, 0],
        mean_supermartingale=sm[:, 1],
        se_supermartingale=sm[:, 2],
        extras=s.get("extras", {}),
    )
