"""Monte Carlo experiment harness.

Experiments are pure functions of their configuration, seed included.
Replicates run through a pluggable map (serial or a process pool); every
replicate derives its own generator stream from (seed, replicate index),
and records are emitted in replicate order, so serial and parallel runs
produce byte-identical output.
"""

from __future__ import annotations

import csv
import functools
import json
import math
import multiprocessing
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import bernoulli_uq, estimate, lbdemo, trace_uq
from .core import DomainError, NoiseSpec, clip_entries, minimax_rate_sq
from .synth import child_seed, make_low_rank, rng_for, sample_bernoulli, sample_trace


class ConfigError(ValueError):
    """Experiment configuration failed validation."""


KINDS = ("coverage", "diameter", "risk", "test_power", "lbdemo")
MODELS = ("trace", "bernoulli")
METHODS = ("u_ci", "rss_ci", "adaptive_ci")


@dataclass
class ExperimentConfig:
    """Everything a run needs.  See README for the JSON schema."""

    kind: str
    model: str = "trace"
    m1: int = 20
    m2: int = 20
    n: int = 200
    k_truth: int = 1
    k0: int = 1
    k: int = 3
    a: float = 1.0
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec("scaled-rademacher", 0.5, 0.5))
    alpha: float = 0.1
    reps: int = 100
    seed: int = 0
    method: str = "u_ci"
    threshold_mode: str = "calibrated"
    z: float = 1.0
    K: float = bernoulli_uq.ADAPTIVE_K_DEFAULT
    C_op: float = 1.0
    lam: float | None = None
    restarts: int = 8
    separation_grid: tuple = (0.0, 5.0, 10.0, 25.0)
    k_grid: tuple = ()
    n_grid: tuple = ()
    v: float = 0.05
    alpha_test: float = 0.05
    cal_reps: int = 200
    reveal_sigma: bool = False
    out: str = "uq_out"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = {"kind": self.noise.kind, "sigma": self.noise.sigma, "U": self.noise.U}
        d["separation_grid"] = list(self.separation_grid)
        d["k_grid"] = list(self.k_grid)
        d["n_grid"] = list(self.n_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "noise" in d and isinstance(d["noise"], dict):
            try:
                d["noise"] = NoiseSpec(**d["noise"])
            except (TypeError, DomainError) as e:
                raise ConfigError(f"noise: {e}") from e
        for key in ("separation_grid", "k_grid", "n_grid"):
            if key in d:
                d[key] = tuple(d[key])
        if "kind" not in d:
            raise ConfigError("kind: required field is missing")
        return cls(**d)

    def validate(self) -> None:
        errors = []
        if self.kind not in KINDS:
            errors.append(f"kind: must be one of {KINDS}, got {self.kind!r}")
        if self.model not in MODELS:
            errors.append(f"model: must be one of {MODELS}, got {self.model!r}")
        if self.m1 < 1 or self.m2 < 1:
            errors.append(f"m1/m2: must be >= 1, got {self.m1}x{self.m2}")
        if self.n < 1:
            errors.append(f"n: must be >= 1, got {self.n}")
        if self.model == "bernoulli" and self.n > self.m1 * self.m2:
            errors.append(f"n: must be <= m1*m2={self.m1 * self.m2} in the bernoulli model")
        if not 1 <= self.k_truth <= min(self.m1, self.m2):
            errors.append(f"k_truth: must lie in [1, {min(self.m1, self.m2)}], got {self.k_truth}")
        if self.a <= 0:
            errors.append(f"a: must be positive, got {self.a}")
        if not 0 < self.alpha < 1:
            errors.append(f"alpha: must lie in (0, 1), got {self.alpha}")
        if self.reps < 0:
            errors.append(f"reps: must be >= 0, got {self.reps}")
        if self.kind in ("coverage", "diameter"):
            if self.method not in METHODS:
                errors.append(f"method: must be one of {METHODS}, got {self.method!r}")
            elif self.method == "adaptive_ci" and self.model != "bernoulli":
                errors.append("method: adaptive_ci needs model='bernoulli'")
            elif self.method in ("u_ci", "rss_ci") and self.model != "trace":
                errors.append(f"method: {self.method} needs model='trace'")
        if self.method == "adaptive_ci" or self.kind == "test_power":
            if not 0 <= self.k0 < min(self.m1, self.m2):
                errors.append(f"k0: must lie in [0, {min(self.m1, self.m2) - 1}], got {self.k0}")
            if self.method == "adaptive_ci" and not self.k0 < self.k:
                errors.append(f"k: must exceed k0={self.k0}, got {self.k}")
        if self.threshold_mode not in ("calibrated", "theoretical"):
            errors.append(f"threshold_mode: must be 'calibrated' or 'theoretical', "
                          f"got {self.threshold_mode!r}")
        if self.z <= 0:
            errors.append(f"z: must be positive, got {self.z}")
        if self.K <= 0:
            errors.append(f"K: must be positive, got {self.K}")
        if self.kind == "test_power" and not self.separation_grid:
            errors.append("separation_grid: must not be empty")
        if self.kind == "lbdemo":
            if self.m1 != self.m2:
                errors.append(f"m1/m2: lbdemo needs a square matrix, got {self.m1}x{self.m2}")
            if not 0 < self.v <= 1:
                errors.append(f"v: must lie in (0, 1], got {self.v}")
            if not 0 <= self.k0 < self.k:
                errors.append(f"k0/k: need 0 <= k0 < k, got {self.k0}, {self.k}")
        if errors:
            raise ConfigError("; ".join(errors))


@dataclass
class ExperimentReport:
    """Per-replicate records plus aggregates; aggregates are recomputable
    from the records."""

    records: list
    columns: list
    aggregates: dict
    config: dict
    wall_time_s: float

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "aggregates": self.aggregates,
            "wall_time_s": self.wall_time_s,
            "n_records": len(self.records),
        }


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_records_csv(report: ExperimentReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(report.columns)
        for rec in report.records:
            w.writerow([_fmt(rec[c]) for c in report.columns])


def write_report_json(report: ExperimentReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def rate_se(p_hat: float, reps: int) -> float:
    """Standard error sqrt(p*(1-p)/reps) of an empirical rate."""
    if reps <= 0:
        return 0.0
    return math.sqrt(p_hat * (1.0 - p_hat) / reps)


def _map_for(threads: int):
    if threads <= 1:
        return map, None
    ctx = multiprocessing.get_context("fork")
    pool = ctx.Pool(threads)
    return pool.map, pool


def _build_ci(cfg: ExperimentConfig, data, extras: dict):
    if cfg.method == "u_ci":
        return trace_uq.u_ci(data, cfg.alpha, cfg.a, cfg.noise.U, lam=cfg.lam)
    if cfg.method == "rss_ci":
        return trace_uq.rss_ci(data, cfg.alpha, cfg.noise.sigma, cfg.noise.U,
                               z=cfg.z, a=cfg.a, lam=cfg.lam)
    return bernoulli_uq.adaptive_ci(
        data, cfg.k0, cfg.k, cfg.a, cfg.noise.sigma, cfg.noise.U, cfg.alpha,
        K=cfg.K, lam=cfg.lam, mode=cfg.threshold_mode,
        threshold=extras.get("threshold"), noise=cfg.noise,
        restarts=cfg.restarts, seed=extras.get("test_seed", 0))


def _sample(cfg: ExperimentConfig, M, r: int):
    if cfg.model == "trace":
        return sample_trace(M, cfg.n, cfg.noise, child_seed(cfg.seed, 11, r))
    return sample_bernoulli(M, cfg.n, cfg.noise, child_seed(cfg.seed, 11, r))


def _coverage_replicate(cfg: ExperimentConfig, extras: dict, r: int) -> dict:
    M = make_low_rank(cfg.m1, cfg.m2, cfg.k_truth, cfg.a, child_seed(cfg.seed, 10, r))
    data = _sample(cfg, M, r)
    ball = _build_ci(cfg, data, {**extras, "test_seed": child_seed(cfg.seed, 12, r)})
    return {
        "replicate": r,
        "covered": int(ball.contains(M)),
        "radius_sq": ball.radius_sq,
        "risk": estimate.estimator_risk(ball.center, M),
        "n_aux": int(ball.meta.get("N_or_n", 0)),
        "flag": int(bool(ball.meta.get("flags"))),
    }


def run_coverage(config: ExperimentConfig, threads: int = 1) -> ExperimentReport:
    """Empirical coverage of the configured confidence set."""
    config.validate()
    t0 = time.perf_counter()
    extras = _prepare_extras(config)
    map_fn, pool = _map_for(threads)
    try:
        records = list(map_fn(functools.partial(_coverage_replicate, config, extras),
                              range(config.reps)))
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    covered = [rec["covered"] for rec in records]
    cov = float(np.mean(covered)) if records else 0.0
    radius = np.array([rec["radius_sq"] for rec in records]) if records else np.zeros(0)
    aggregates = {
        "coverage": cov,
        "coverage_se": rate_se(cov, len(records)),
        "radius_sq_median": float(np.median(radius)) if records else 0.0,
        "radius_sq_q90": float(np.quantile(radius, 0.9)) if records else 0.0,
        "risk_median": float(np.median([rec["risk"] for rec in records])) if records else 0.0,
        "flagged": int(sum(rec["flag"] for rec in records)),
    }
    cols = ["replicate", "covered", "radius_sq", "risk", "n_aux", "flag"]
    return ExperimentReport(records, cols, aggregates, config.to_dict(),
                            time.perf_counter() - t0)


def _diameter_replicate(cfg: ExperimentConfig, extras: dict, job: tuple) -> dict:
    # Common random numbers: the sampling stream depends on the replicate
    # only, so the two truth-rank cells share masks, positions, and noise
    # and their radius difference isolates the rank effect.
    idx, k_t, r = job
    sub = replace(cfg, k_truth=k_t)
    M = make_low_rank(sub.m1, sub.m2, k_t, sub.a, child_seed(cfg.seed, 10, r, k_t))
    data = _sample(sub, M, r)
    ball = _build_ci(sub, data, {**extras, "test_seed": child_seed(cfg.seed, 12, r)})
    reject = ball.meta.get("reject")
    return {
        "replicate": idx,
        "k_truth": k_t,
        "radius_sq": ball.radius_sq,
        "covered": int(ball.contains(M)),
        "reject": -1 if reject is None else int(reject),
        "flag": int(bool(ball.meta.get("flags"))),
    }


def run_diameter(config: ExperimentConfig, threads: int = 1) -> ExperimentReport:
    """Median squared diameter under the sub-model rank and the full rank.

    Runs ``reps`` replicates with truth rank ``k0`` and another ``reps``
    with truth rank ``k_truth``, and reports the adaptivity ratio of the
    median squared radii.
    """
    config.validate()
    if not 1 <= config.k0 <= min(config.m1, config.m2):
        raise ConfigError(f"k0: must lie in [1, {min(config.m1, config.m2)}] "
                          f"for a diameter run, got {config.k0}")
    t0 = time.perf_counter()
    extras = _prepare_extras(config)
    jobs = [(i, k_t, r)
            for i, (k_t, r) in enumerate(
                (k_t, r) for k_t in (config.k0, config.k_truth) for r in range(config.reps))]
    map_fn, pool = _map_for(threads)
    try:
        records = list(map_fn(functools.partial(_diameter_replicate, config, extras), jobs))
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    med = {}
    for k_t in (config.k0, config.k_truth):
        vals = [rec["radius_sq"] for rec in records if rec["k_truth"] == k_t]
        med[k_t] = float(np.median(vals)) if vals else 0.0
    small = [1 - rec["reject"] for rec in records
             if rec["k_truth"] == config.k0 and rec["reject"] >= 0]
    aggregates = {
        "radius_sq_median_k0": med[config.k0],
        "radius_sq_median_k": med[config.k_truth],
        "adaptivity_ratio": (med[config.k_truth] / med[config.k0]
                             if med[config.k0] > 0 else float("inf")),
        "small_radius_freq_k0": float(np.mean(small)) if small else float("nan"),
        "flagged": int(sum(rec["flag"] for rec in records)),
    }
    cols = ["replicate", "k_truth", "radius_sq", "covered", "reject", "flag"]
    return ExperimentReport(records, cols, aggregates, config.to_dict(),
                            time.perf_counter() - t0)


def _risk_replicate(cfg: ExperimentConfig, job: tuple) -> dict:
    idx, k_t, n_t, r = job
    sub = replace(cfg, k_truth=k_t, n=n_t)
    M = make_low_rank(sub.m1, sub.m2, k_t, sub.a, child_seed(cfg.seed, 10, idx))
    data = _sample(sub, M, idx)
    if cfg.model == "bernoulli":
        lam = cfg.lam or estimate.lambda_data_driven(data)
        M_hat = clip_entries(estimate.soft_threshold_estimator(data, lam), cfg.a)
        flag = 0
    else:
        lam = cfg.lam or estimate.lambda_practical_trace(
            cfg.noise.sigma, cfg.m1, cfg.m2, data.n)
        fit = estimate.matrix_lasso(data, lam, cfg.a)
        M_hat, flag = fit.estimate, int(not fit.converged)
    return {"replicate": idx, "k": k_t, "n": n_t,
            "risk": estimate.estimator_risk(M_hat, M), "flag": flag}


def _loglog_slope(xs, ys) -> float:
    lx, ly = np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float))
    if len(lx) < 2:
        return float("nan")
    return float(np.polyfit(lx, ly, 1)[0])


def run_risk(config: ExperimentConfig, threads: int = 1) -> ExperimentReport:
    """Median normalized estimator risk over a (k, n) grid, with log-log slopes."""
    config.validate()
    t0 = time.perf_counter()
    k_grid = tuple(config.k_grid) or (config.k_truth,)
    n_grid = tuple(config.n_grid) or (config.n,)
    jobs = [(i, k_t, n_t, r)
            for i, (k_t, n_t, r) in enumerate(
                (k_t, n_t, r) for k_t in k_grid for n_t in n_grid
                for r in range(config.reps))]
    map_fn, pool = _map_for(threads)
    try:
        records = list(map_fn(functools.partial(_risk_replicate, config), jobs))
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    med = {}
    for k_t in k_grid:
        for n_t in n_grid:
            vals = [rec["risk"] for rec in records
                    if rec["k"] == k_t and rec["n"] == n_t]
            med[(k_t, n_t)] = float(np.median(vals)) if vals else float("nan")
    slope_k = float("nan")
    if len(k_grid) >= 2:
        slope_k = float(np.mean([_loglog_slope(k_grid, [med[(k_t, n_t)] for k_t in k_grid])
                                 for n_t in n_grid]))
    slope_inv_n = float("nan")
    if len(n_grid) >= 2:
        slope_inv_n = float(np.mean([-_loglog_slope(n_grid, [med[(k_t, n_t)] for n_t in n_grid])
                                     for k_t in k_grid]))
    aggregates = {
        "risk_median": {f"k={k_t},n={n_t}": med[(k_t, n_t)]
                        for k_t in k_grid for n_t in n_grid},
        "slope_k": slope_k,
        "slope_inv_n": slope_inv_n,
        "flagged": int(sum(rec["flag"] for rec in records)),
    }
    cols = ["replicate", "k", "n", "risk", "flag"]
    return ExperimentReport(records, cols, aggregates, config.to_dict(),
                            time.perf_counter() - t0)


def separated_truth(m1: int, m2: int, k0: int, a: float, rho: float,
                    seed: int) -> np.ndarray:
    """Rank-(k0+1) matrix at Frobenius distance exactly ``rho`` from rank k0.

    A strong rank-``k0`` base is perturbed along a flat direction orthogonal
    to it, so the trailing singular value block contributes exactly
    ``rho^2`` and entries stay controlled.  Draws whose entries overflow the
    bound are regenerated.
    """
    if rho <= 0:
        raise DomainError(f"rho must be positive, got {rho}")
    sigma0 = max(1.2 * rho, 0.3 * a * math.sqrt(m1 * m2))
    last_max = 0.0
    for attempt in range(10):
        rng = rng_for(seed, attempt)
        U0 = np.linalg.qr(rng.integers(0, 2, (m1, k0)) * 2.0 - 1.0)[0]
        V0 = np.linalg.qr(rng.integers(0, 2, (m2, k0)) * 2.0 - 1.0)[0]
        u = rng.integers(0, 2, m1) * 2.0 - 1.0
        v = rng.integers(0, 2, m2) * 2.0 - 1.0
        u = u - U0 @ (U0.T @ u)
        v = v - V0 @ (V0.T @ v)
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0.0 or nv == 0.0:
            continue
        M = sigma0 * (U0 @ V0.T) + rho * np.outer(u / nu, v / nv)
        last_max = float(np.max(np.abs(M)))
        if last_max <= a:
            return M
    raise DomainError(
        f"separated truth needs entries up to {last_max:.3g}; "
        f"raise the entry bound a={a}")


def _power_replicate(cfg: ExperimentConfig, extras: dict, job: tuple) -> dict:
    idx, s_mult, r = job
    unit = math.sqrt(minimax_rate_sq(cfg.m1, cfg.m2, max(cfg.k0, 1), cfg.n))
    if s_mult == 0.0:
        M = make_low_rank(cfg.m1, cfg.m2, max(cfg.k0, 1), cfg.a,
                          child_seed(cfg.seed, 10, idx))
    else:
        M = separated_truth(cfg.m1, cfg.m2, max(cfg.k0, 1), cfg.a,
                            s_mult * unit, child_seed(cfg.seed, 10, idx))
    data = sample_bernoulli(M, cfg.n, cfg.noise, child_seed(cfg.seed, 11, idx))
    verdict = bernoulli_uq.low_rank_test(
        data, cfg.k0, cfg.a, cfg.noise.sigma, cfg.noise.U, cfg.alpha,
        mode=cfg.threshold_mode, threshold=extras.get("threshold"),
        noise=cfg.noise, restarts=cfg.restarts,
        seed=child_seed(cfg.seed, 12, idx))
    return {"replicate": idx, "separation": s_mult, "T_n": verdict.statistic,
            "threshold": verdict.threshold, "reject": int(verdict.reject),
            "flag": int(verdict.gap_flag)}


def run_test_power(config: ExperimentConfig, threads: int = 1) -> ExperimentReport:
    """Size and power of the low-rank test across a separation sweep.

    Separations are multiples of the rate unit sqrt(m1*m2*k0*d/n); the zero
    point is the size of the test.
    """
    config.validate()
    if config.model != "bernoulli":
        raise ConfigError("model: test_power runs in the bernoulli model")
    t0 = time.perf_counter()
    extras = _prepare_extras(config)
    jobs = [(i, s, r)
            for i, (s, r) in enumerate(
                (s, r) for s in config.separation_grid for r in range(config.reps))]
    map_fn, pool = _map_for(threads)
    try:
        records = list(map_fn(functools.partial(_power_replicate, config, extras), jobs))
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    rates = {}
    for s in config.separation_grid:
        vals = [rec["reject"] for rec in records if rec["separation"] == s]
        rates[s] = float(np.mean(vals)) if vals else float("nan")
    power_vals = [rates[s] for s in sorted(config.separation_grid)]
    aggregates = {
        "rejection_rate": {repr(float(s)): rates[s] for s in config.separation_grid},
        "size": rates.get(0.0, float("nan")),
        "size_se": rate_se(rates.get(0.0, 0.0), config.reps),
        "power_max_separation": rates[max(config.separation_grid)],
        "monotone_within": float(max(
            (power_vals[i] - power_vals[j]
             for i in range(len(power_vals)) for j in range(i + 1, len(power_vals))),
            default=0.0)),
        "flagged": int(sum(rec["flag"] for rec in records)),
    }
    cols = ["replicate", "separation", "T_n", "threshold", "reject", "flag"]
    return ExperimentReport(records, cols, aggregates, config.to_dict(),
                            time.perf_counter() - t0)


def run_lbdemo(config: ExperimentConfig, threads: int = 1) -> ExperimentReport:
    """Indistinguishability demo, reported in the common harness framing."""
    config.validate()
    t0 = time.perf_counter()
    map_fn, pool = _map_for(threads)
    try:
        result = lbdemo.indistinguishability_experiment(
            config.m1, config.n, config.k, config.k0, config.v, config.reps,
            seed=config.seed, alpha_test=config.alpha_test,
            cal_reps=config.cal_reps, reveal_sigma=config.reveal_sigma,
            map_fn=map_fn)
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    aggregates = {
        "min_error_sum": result["min_error_sum"],
        "error_sum": {row["test_name"]: row["error_sum"] for row in result["rows"]},
        "thresholds": result["thresholds"],
        "rho": result["config"]["rho"],
        "flagged": 0,
    }
    cols = ["test_name", "type1", "type2", "error_sum", "v", "rho", "m", "n", "k", "reps"]
    return ExperimentReport(result["rows"], cols, aggregates, config.to_dict(),
                            time.perf_counter() - t0)


def _prepare_extras(config: ExperimentConfig) -> dict:
    """Work shared across replicates, done once up front (e.g. calibration)."""
    extras = {}
    needs_test = (config.kind == "test_power"
                  or (config.kind in ("coverage", "diameter")
                      and config.method == "adaptive_ci"))
    if needs_test and config.threshold_mode == "calibrated":
        extras["threshold"] = bernoulli_uq.u_alpha_calibrated(
            config.alpha, config.noise.sigma, config.noise,
            (config.m1, config.m2), config.n, reps=max(100, config.cal_reps),
            seed=child_seed(config.seed, 999))
    elif needs_test:
        extras["threshold"] = bernoulli_uq.u_alpha_theoretical(
            config.alpha, config.noise.sigma, config.noise.U)
    return extras


RUNNERS = {
    "coverage": run_coverage,
    "diameter": run_diameter,
    "risk": run_risk,
    "test_power": run_test_power,
    "lbdemo": run_lbdemo,
}


def run(config: ExperimentConfig, threads: int = 1) -> ExperimentReport:
    """Dispatch to the runner for ``config.kind``."""
    config.validate()
    return RUNNERS[config.kind](config, threads=threads)
