"""Probability estimates: importance sampling under a bias, plain Monte Carlo,
and the weight diagnostics used to judge them (ESS, CV, confidence intervals).
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .dynamics import SimConfig, simulate
from .errors import EstimatorError

Z95 = 1.959963984540054
LOG_WEIGHT_CAP = 700.0


@dataclass
class Estimate:
    p_hat: float
    ci_half_width: float
    cv: float
    ess: float
    ess_ratio: float  # ESS / M
    ess_per_success: float  # ESS / number of successes
    success_rate: float
    n_samples: int
    n_success: int
    wall_seconds: float
    std: float = math.nan
    degenerate: bool = False
    breakdown: int = 0  # weights whose log exceeded the overflow cap

    COLUMNS = (
        "p_hat", "ci_half_width", "cv", "success_rate", "ess", "ess_ratio",
        "ess_per_success", "n_samples", "n_success", "std", "degenerate", "breakdown", "wall_seconds",
    )

    @property
    def ci(self) -> tuple[float, float]:
        return self.p_hat - self.ci_half_width, self.p_hat + self.ci_half_width

    def overlaps(self, other: "Estimate") -> bool:
        lo, hi = self.ci
        olo, ohi = other.ci
        return lo <= ohi and olo <= hi

    def to_csv(self, timing: bool = True) -> str:
        cols = [c for c in self.COLUMNS if timing or c != "wall_seconds"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        w.writerow([_fmt(getattr(self, c)) for c in cols])
        return buf.getvalue()

    def summary(self, label: str = "estimate") -> str:
        lines = [
            f"[{label}]",
            f"  confidence interval : {self.p_hat:.4e} +/- {self.ci_half_width:.3e} (95%)",
            f"  CV                  : {self.cv:.4f}",
            f"  success rate        : {self.success_rate:.4g} ({self.n_success}/{self.n_samples})",
            f"  ESS ratio           : {self.ess_ratio:.4f} (ESS {self.ess:.1f}; per success {self.ess_per_success:.4f})",
            f"  time                : {self.wall_seconds:.2f} s",
        ]
        if self.degenerate:
            lines.append("  note                : no successes, confidence interval is degenerate")
        if self.breakdown:
            lines.append(f"  note                : {self.breakdown} weights overflowed (estimator breakdown)")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return asdict(self)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def ess(weights) -> float:
    """``(Σ W)² / Σ W²`` over the supplied (successful-trajectory) weights."""
    w = np.asarray(weights, dtype=float)
    m = float(np.max(np.abs(w))) if w.size else 0.0
    if m == 0.0 or not np.isfinite(m):
        raise EstimatorError("ESS undefined: no nonzero finite weights")
    # rescale first so squaring cannot overflow or underflow
    w = w / m
    return float(np.sum(w) ** 2 / np.sum(w * w))


def cv(contributions) -> float:
    """Sample standard deviation (ddof=1) over sample mean."""
    c = np.asarray(contributions, dtype=float)
    mu = float(np.mean(c)) if c.size else 0.0
    if mu == 0.0:
        raise EstimatorError("CV undefined: zero mean")
    return float(np.std(c, ddof=1) / mu)


def _summarise(contrib, success, weights, t0, mc: bool = False, breakdown: int = 0) -> Estimate:
    M = len(contrib)
    k = int(success.sum())
    p = float(contrib.mean())
    if mc:
        std = math.sqrt(p * (1.0 - p) * M / (M - 1)) if M > 1 else 0.0
    else:
        std = float(np.std(contrib, ddof=1)) if M > 1 else 0.0
    half = Z95 * std / math.sqrt(M)
    if k == 0 or p == 0.0:
        return Estimate(0.0, 0.0, math.nan, 0.0, 0.0, 0.0, 0.0, M, 0, time.perf_counter() - t0, 0.0, True, breakdown)
    e = ess(weights) if not mc else float(k)
    return Estimate(
        p, half, std / p, e, e / M, e / k, k / M, M, k,
        time.perf_counter() - t0, std, False, breakdown,
    )


def importance_estimate(bias, potential, cfg: SimConfig, M: int, seed: int | None = None, stream: int = 0, threads: int = 1, chunk: int = 8192) -> Estimate:
    """Importance-sampling estimate of P(ν ∈ S) from ``M`` biased rollouts.

    Weight ``W_i = exp(-log dQ/dP)`` on successes, zero otherwise; the CI is
    the normal approximation over all ``M`` contributions.
    """
    if M < 1:
        raise EstimatorError("M must be >= 1")
    t0 = time.perf_counter()
    b = simulate(potential, bias, cfg, M, seed=seed, stream=stream, keep_paths=False, threads=threads, chunk=chunk)
    logw = -b.log_ratio[b.success]
    breakdown = int(np.sum(logw > LOG_WEIGHT_CAP))
    w = np.exp(np.minimum(logw, LOG_WEIGHT_CAP))
    contrib = np.zeros(M)
    contrib[b.success] = w
    return _summarise(contrib, b.success, w, t0, breakdown=breakdown)


def monte_carlo_estimate(potential, cfg: SimConfig, M: int, seed: int | None = None, stream: int = 0, threads: int = 1, chunk: int = 8192) -> Estimate:
    """Plain Monte Carlo under the unbiased dynamics; binomial-normal CI."""
    if M < 1:
        raise EstimatorError("M must be >= 1")
    t0 = time.perf_counter()
    b = simulate(potential, None, cfg, M, seed=seed, stream=stream, keep_paths=False, threads=threads, chunk=chunk)
    return _summarise(b.success.astype(float), b.success, None, t0, mc=True)


def from_counts(successes: int, M: int) -> Estimate:
    """Monte Carlo estimate from a success count alone."""
    contrib = np.zeros(M)
    contrib[:successes] = 1.0
    return _summarise(contrib, contrib > 0, None, time.perf_counter(), mc=True)


def loglog_slope(x, y) -> float:
    """Least-squares slope of log y on log x; nan unless every value is positive."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or not (np.all(x > 0) and np.all(y > 0)):
        return math.nan
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


@dataclass
class ScalingRow:
    n: int
    mean: float
    std: float
    ess: float
    seconds: float


@dataclass
class ScalingTable:
    rows: list[ScalingRow]
    std_slope: float
    ess_slope: float
    time_slope: float

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["n", "mean", "std", "ess"] + (["seconds"] if timing else [])
        w.writerow(cols)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in cols])
        w.writerow(["# slopes", "std", repr(self.std_slope), "ess", repr(self.ess_slope)] + (["seconds", repr(self.time_slope)] if timing else []))
        return buf.getvalue()


def scaling_study(bias, potential, cfg: SimConfig, sample_counts, replications: int = 20, seed: int | None = None, threads: int = 1) -> ScalingTable:
    """Spread, ESS and time of the estimator as the sample count grows.

    For each ``n``: std of ``p_hat`` over ``replications`` independent runs,
    mean ESS and mean wall time per run; log-log slopes are fitted across ``n``.
    """
    counts = [int(n) for n in sample_counts]
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise EstimatorError("sample counts must be increasing")
    seed = cfg.seed if seed is None else seed
    rows = []
    for j, n in enumerate(counts):
        ests = [
            importance_estimate(bias, potential, cfg, n, seed=seed, stream=1000 * (j + 1) + r, threads=threads)
            for r in range(replications)
        ]
        p = np.array([e.p_hat for e in ests])
        rows.append(ScalingRow(n, float(p.mean()), float(p.std(ddof=1)), float(np.mean([e.ess for e in ests])), float(np.mean([e.wall_seconds for e in ests]))))
    ns = [r.n for r in rows]
    return ScalingTable(
        rows,
        loglog_slope(ns, [r.std for r in rows]),
        loglog_slope(ns, [r.ess for r in rows]),
        loglog_slope(ns, [r.seconds for r in rows]),
    )
