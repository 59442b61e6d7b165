"""Bootstrap resampling and paired Wilcoxon signed-rank comparison.

Resampling draws 30-instance samples with replacement, 100 times by
default, and reports mean ± sample standard deviation per metric. The
resample index schedule is a pure function of (seed, replicate, draw), so
two models evaluated under the same config land on identical replicates
and their replicate values form proper pairs for the signed-rank test.

Resample generator ``volmo-resample-v1``: draw index =
``SHA-256("volmo-resample-v1" || seed || replicate || draw)`` taken as a
big-endian uint64 modulo the population size. The construction is
counter-based, so parallel and sequential evaluation are bit-identical;
the modulo bias is negligible for any realistic population size.
"""

from __future__ import annotations

import hashlib
import math
import struct
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

from .errors import ConfigMismatch, EmptyInput, InsufficientPairs, LengthMismatch

RESAMPLE_SCHEME = "volmo-resample-v1"


@dataclass(frozen=True)
class BootstrapConfig:
    sample_size: int = 30
    repeats: int = 100
    seed: int = 0
    unit: str = "instance"

    def __post_init__(self):
        if self.sample_size < 1:
            raise ValueError("sample_size must be >= 1")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


def resample_index(seed: int, replicate: int, draw: int, population: int) -> int:
    """Deterministic draw index under the ``volmo-resample-v1`` scheme."""
    msg = RESAMPLE_SCHEME.encode() + struct.pack(
        "<QQQ", seed & 0xFFFFFFFFFFFFFFFF, replicate, draw
    )
    value = int.from_bytes(hashlib.sha256(msg).digest()[:8], "big")
    return value % population


def resample_schedule(config: BootstrapConfig, population: int) -> list[list[int]]:
    """The full index schedule; persisting it reproduces the replicates."""
    if population < 1:
        raise EmptyInput("population must be non-empty")
    return [
        [resample_index(config.seed, r, d, population) for d in range(config.sample_size)]
        for r in range(config.repeats)
    ]


@dataclass
class BootstrapSummary:
    metric_id: str
    replicate_values: list[float]
    mean: float
    std: float  # sample standard deviation, n-1 denominator
    config: BootstrapConfig

    def to_json_dict(self) -> dict:
        return {
            "metric_id": self.metric_id,
            "mean": self.mean,
            "std": self.std,
            "replicate_values": self.replicate_values,
            "config": {
                "sample_size": self.config.sample_size,
                "repeats": self.config.repeats,
                "seed": self.config.seed,
                "unit": self.config.unit,
                "resample_scheme": RESAMPLE_SCHEME,
                "std_denominator": "n-1",
            },
        }


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    if n < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


def bootstrap(
    instances: Sequence,
    metric: Callable[[list], float],
    config: BootstrapConfig,
    metric_id: str = "metric",
    workers: int = 1,
) -> BootstrapSummary:
    """Evaluate ``metric`` on ``config.repeats`` resamples of ``instances``.

    ``metric`` receives a list of drawn instances and returns one float.
    With ``workers > 1`` replicates are evaluated in a thread pool; the
    counter-based schedule keeps results identical to a sequential run.
    """
    if not instances:
        raise EmptyInput("cannot bootstrap an empty instance list")
    schedule = resample_schedule(config, len(instances))

    def run_one(indices: list[int]) -> float:
        return float(metric([instances[i] for i in indices]))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(run_one, schedule))
    else:
        values = [run_one(indices) for indices in schedule]

    mean, std = _mean_std(values)
    return BootstrapSummary(metric_id, values, mean, std, config)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test
# ---------------------------------------------------------------------------


@dataclass
class WilcoxonResult:
    statistic: float  # W = min(W+, W-)
    n_effective: int
    zeros_dropped: int
    method: str  # "exact" | "normal_approx"
    p_value: float

    def to_json_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "n_effective": self.n_effective,
            "zeros_dropped": self.zeros_dropped,
            "method": self.method,
            "p_value": self.p_value,
        }


def _average_ranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1  # ranks are 1-based
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _exact_tail_count(n: int, w: float) -> int:
    # subsets of ranks {1..n} with sum <= w; equivalent to enumerating all
    # 2^n sign assignments of distinct |differences|
    max_sum = n * (n + 1) // 2
    ways = [0] * (max_sum + 1)
    ways[0] = 1
    for rank in range(1, n + 1):
        for s in range(max_sum, rank - 1, -1):
            ways[s] += ways[s - rank]
    limit = int(math.floor(w))
    return sum(ways[: limit + 1])


def _normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> WilcoxonResult:
    """Two-sided paired signed-rank test on ``a - b``.

    Zero differences are dropped (classical convention) and counted.
    For tie-free |differences| with at most 25 effective pairs the exact
    two-sided p is min(1, 2k / 2^n) where k counts sign assignments with
    a rank sum at or below the observed W; otherwise a normal
    approximation with tie-corrected variance and a 0.5 continuity
    correction is used.
    """
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} vs {len(b)} paired values")
    diffs = [x - y for x, y in zip(a, b)]
    nonzero = [d for d in diffs if d != 0]
    zeros_dropped = len(diffs) - len(nonzero)
    n = len(nonzero)
    if n < 5:
        raise InsufficientPairs(
            f"{n} non-zero differences after dropping {zeros_dropped} zeros; need >= 5"
        )

    abs_d = [abs(d) for d in nonzero]
    ranks = _average_ranks(abs_d)
    w_plus = sum(r for r, d in zip(ranks, nonzero) if d > 0)
    w_minus = sum(r for r, d in zip(ranks, nonzero) if d < 0)
    w = min(w_plus, w_minus)

    has_ties = len(set(abs_d)) != n
    if n <= 25 and not has_ties:
        k = _exact_tail_count(n, w)
        p = min(1.0, 2.0 * k / (2.0**n))
        method = "exact"
    else:
        mu = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        counts: dict[float, int] = {}
        for d in abs_d:
            counts[d] = counts.get(d, 0) + 1
        var -= sum(t**3 - t for t in counts.values()) / 48.0
        z = (w - mu + 0.5) / math.sqrt(var)
        p = min(1.0, 2.0 * _normal_cdf(z))
        method = "normal_approx"

    p = max(p, sys.float_info.min)
    return WilcoxonResult(w, n, zeros_dropped, method, p)


# ---------------------------------------------------------------------------
# Report formatting
# ---------------------------------------------------------------------------


def format_mean_std(mean: float, std: float, percent: bool = False) -> str:
    """"mean ± std": 4 decimals for text metrics, 2 for percentage metrics."""
    digits = 2 if percent else 4
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def format_p(p_value: float) -> str:
    if p_value < 0.0001:
        return "(p < 0.0001)"
    return f"(p = {p_value:.4f})"


def format_comparison(
    summary: BootstrapSummary,
    baseline: BootstrapSummary,
    test: WilcoxonResult,
    percent: bool = False,
) -> str:
    """Render one comparison row: the summary's mean ± std plus the p-value."""
    if summary.metric_id != baseline.metric_id:
        raise ConfigMismatch(
            f"metric ids differ: {summary.metric_id!r} vs {baseline.metric_id!r}"
        )
    if summary.config != baseline.config:
        raise ConfigMismatch("bootstrap configs differ between the two summaries")
    return f"{format_mean_std(summary.mean, summary.std, percent)} {format_p(test.p_value)}"
