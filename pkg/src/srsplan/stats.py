"""Paired nonparametric statistics: Wilcoxon signed-rank tests (exact by full
sign enumeration when feasible, normal approximation otherwise),
Benjamini-Hochberg FDR control within two pre-specified endpoint families,
bootstrap confidence intervals on median paired differences, and long-format
plot-data emission.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats as sps

from .errors import DegenerateSampleError
from .metrics import PRIMARY_METRICS, SECONDARY_METRICS

EXACT_N_MAX = 15
MIN_BOOT = 1000
DEFAULT_BOOT = 10000
FDR_Q = 0.05

DEFAULT_FAMILIES: dict[str, tuple[str, ...]] = {
    "primary": PRIMARY_METRICS,
    "secondary": SECONDARY_METRICS,
}


@dataclass(frozen=True)
class PairedSample:
    endpoint: str
    pairs: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.pairs) < 2:
            raise ValueError(f"endpoint {self.endpoint}: need >= 2 pairs, got {len(self.pairs)}")
        flat = [v for pair in self.pairs for v in pair]
        if not all(math.isfinite(v) for v in flat):
            raise ValueError(f"endpoint {self.endpoint}: pairs must be finite")
        object.__setattr__(self, "pairs", tuple((float(a), float(b)) for a, b in self.pairs))

    def differences(self) -> np.ndarray:
        return np.asarray([a - b for a, b in self.pairs], dtype=float)


@dataclass(frozen=True)
class TestResult:
    endpoint: str
    w: float
    p_value: float
    n_effective: int
    zero_count: int
    method: str  # "exact" | "normal-approximation"


def _exact_p(ranks: np.ndarray, w: float) -> float:
    """Two-sided exact p for tie-free integer ranks via the distribution of
    W+ over all 2^n equally likely sign assignments."""
    r = ranks.astype(int)
    total = int(r.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for rank in r:
        shifted = np.zeros_like(counts)
        shifted[rank:] = counts[:-rank] if rank > 0 else counts
        counts = counts + shifted
    cdf_at_w = float(counts[: int(w) + 1].sum()) / float(2 ** len(r))
    return min(1.0, 2.0 * cdf_at_w)


def wilcoxon_signed_rank(sample: PairedSample) -> TestResult:
    """Two-sided paired Wilcoxon signed-rank test. Zero differences are
    dropped (their count is reported). The test is exact when the effective n
    is at most 15 and the absolute differences are tie-free; otherwise it uses
    the normal approximation with tie and continuity corrections."""
    diffs = sample.differences()
    nonzero = diffs[diffs != 0.0]
    zero_count = int(diffs.size - nonzero.size)
    n = int(nonzero.size)
    if n == 0:
        raise DegenerateSampleError(f"endpoint {sample.endpoint}: all paired differences are zero")

    abs_d = np.abs(nonzero)
    ranks = sps.rankdata(abs_d)  # average ranks for ties
    w_plus = float(ranks[nonzero > 0].sum())
    w_minus = float(ranks[nonzero < 0].sum())
    w = min(w_plus, w_minus)

    tie_free = np.unique(abs_d).size == n
    if n <= EXACT_N_MAX and tie_free:
        p = _exact_p(ranks, w)
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(abs_d, return_counts=True)
        var -= float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        d = w_plus - mean
        if var <= 0 or d == 0:
            p = 1.0
        else:
            z = (d - 0.5 * math.copysign(1.0, d)) / math.sqrt(var)
            p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
        method = "normal-approximation"
    return TestResult(
        endpoint=sample.endpoint,
        w=w,
        p_value=p,
        n_effective=n,
        zero_count=zero_count,
        method=method,
    )


def bh_adjust(p_values: Sequence[float]) -> list[float]:
    """Benjamini-Hochberg step-up q-values, returned in input order."""
    ps = list(p_values)
    for p in ps:
        if not (isinstance(p, (int, float)) and 0.0 <= p <= 1.0):
            raise ValueError(f"p-values must lie in [0, 1], got {p!r}")
    m = len(ps)
    if m == 0:
        return []
    order = sorted(range(m), key=lambda i: ps[i])
    qs = [0.0] * m
    running = 1.0
    for pos in range(m - 1, -1, -1):
        i = order[pos]
        running = min(running, ps[i] * m / (pos + 1))
        qs[i] = running
    return qs


@dataclass(frozen=True)
class PairedSummary:
    endpoint: str
    median_diff: float
    ci_low: float
    ci_high: float
    n: int
    n_boot: int


def paired_summary(sample: PairedSample, n_boot: int = DEFAULT_BOOT, seed: int = 0) -> PairedSummary:
    """Median of (a - b) with a percentile-bootstrap 95% CI over patient
    resamples; deterministic per seed."""
    if n_boot < MIN_BOOT:
        raise ValueError(f"n_boot must be >= {MIN_BOOT}, got {n_boot}")
    diffs = sample.differences()
    n = diffs.size
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_boot, n))
    boot_medians = np.median(diffs[idx], axis=1)
    lo, hi = np.percentile(boot_medians, [2.5, 97.5])
    return PairedSummary(
        endpoint=sample.endpoint,
        median_diff=float(np.median(diffs)),
        ci_low=float(lo),
        ci_high=float(hi),
        n=int(n),
        n_boot=int(n_boot),
    )


# ---------------------------------------------------------------------------
# Family analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EndpointResult:
    endpoint: str
    family: str
    n: int
    n_effective: int
    zero_count: int
    w: float | None
    p_value: float | None
    q_value: float | None
    significant: bool
    method: str
    median_diff: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class FamilyResult:
    family: str
    endpoints: tuple[EndpointResult, ...]


MetricTable = dict[str, dict[str, float]]  # metric -> patient -> value


def _paired_sample(endpoint: str, table_a: MetricTable, table_b: MetricTable) -> PairedSample:
    if endpoint not in table_a or endpoint not in table_b:
        raise ValueError(f"endpoint {endpoint!r} missing from metrics tables")
    a, b = table_a[endpoint], table_b[endpoint]
    if set(a) != set(b):
        only_a = sorted(set(a) - set(b))[:3]
        only_b = sorted(set(b) - set(a))[:3]
        raise ValueError(
            f"endpoint {endpoint!r}: patient ids differ between tables (a-only {only_a}, b-only {only_b})"
        )
    patients = sorted(a)
    return PairedSample(endpoint=endpoint, pairs=tuple((a[p], b[p]) for p in patients))


def endpoint_family_analysis(
    table_a: MetricTable,
    table_b: MetricTable,
    families: dict[str, Sequence[str]] | None = None,
    n_boot: int = DEFAULT_BOOT,
    seed: int = 0,
) -> list[FamilyResult]:
    """Wilcoxon per endpoint, BH correction within each family separately,
    plus bootstrap median-difference summaries. Degenerate endpoints (all
    zero differences) are reported without a p-value and never significant."""
    families = families or {k: list(v) for k, v in DEFAULT_FAMILIES.items()}
    results = []
    endpoint_counter = 0
    for family, endpoints in families.items():
        rows: list[dict] = []
        for endpoint in endpoints:
            sample = _paired_sample(endpoint, table_a, table_b)
            summary = paired_summary(sample, n_boot=n_boot, seed=seed + endpoint_counter)
            endpoint_counter += 1
            try:
                test = wilcoxon_signed_rank(sample)
                rows.append({"sample": sample, "summary": summary, "test": test})
            except DegenerateSampleError:
                rows.append({"sample": sample, "summary": summary, "test": None})

        tested = [r for r in rows if r["test"] is not None]
        qs = bh_adjust([r["test"].p_value for r in tested])
        for r, q in zip(tested, qs):
            r["q"] = q

        endpoint_results = []
        for r in rows:
            test, summary = r["test"], r["summary"]
            if test is None:
                endpoint_results.append(
                    EndpointResult(
                        endpoint=summary.endpoint, family=family, n=summary.n,
                        n_effective=0, zero_count=summary.n, w=None, p_value=None,
                        q_value=None, significant=False, method="degenerate",
                        median_diff=summary.median_diff, ci_low=summary.ci_low, ci_high=summary.ci_high,
                    )
                )
            else:
                q = r["q"]
                endpoint_results.append(
                    EndpointResult(
                        endpoint=test.endpoint, family=family, n=summary.n,
                        n_effective=test.n_effective, zero_count=test.zero_count,
                        w=test.w, p_value=test.p_value, q_value=q,
                        significant=q < FDR_Q, method=test.method,
                        median_diff=summary.median_diff, ci_low=summary.ci_low, ci_high=summary.ci_high,
                    )
                )
        results.append(FamilyResult(family=family, endpoints=tuple(endpoint_results)))
    return results


def load_families_config(path: str | Path) -> dict[str, list[str]]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or not doc:
        raise ValueError("families config must be a non-empty JSON object of family -> endpoint list")
    for family, endpoints in doc.items():
        if not isinstance(endpoints, list) or not all(isinstance(e, str) for e in endpoints):
            raise ValueError(f"family {family!r} must map to a list of endpoint ids")
    return doc


def write_family_results_csv(results: Iterable[FamilyResult], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["family", "endpoint", "n", "n_effective", "zero_count", "w", "p_value",
             "q_value", "significant", "method", "median_diff", "ci_low", "ci_high"]
        )
        for family in results:
            for e in family.endpoints:
                writer.writerow(
                    [
                        e.family, e.endpoint, e.n, e.n_effective, e.zero_count,
                        "" if e.w is None else f"{e.w:g}",
                        "" if e.p_value is None else f"{e.p_value:.6g}",
                        "" if e.q_value is None else f"{e.q_value:.6g}",
                        str(e.significant).lower(), e.method,
                        f"{e.median_diff:.6g}", f"{e.ci_low:.6g}", f"{e.ci_high:.6g}",
                    ]
                )
    return path


def family_results_to_json(results: Iterable[FamilyResult]) -> str:
    return json.dumps(
        [{"family": f.family, "endpoints": [asdict(e) for e in f.endpoints]} for f in results],
        indent=1,
        sort_keys=True,
    )


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------

def emit_plot_data(
    tables: dict[str, MetricTable],
    endpoint: str,
) -> tuple[list[tuple[str, str, float]], list[dict]]:
    """Long-format per-patient points plus per-group median/IQR summaries for
    one endpoint across named groups."""
    if not any(endpoint in t for t in tables.values()):
        raise ValueError(f"endpoint {endpoint!r} not present in any group table")
    points = []
    summaries = []
    for group in sorted(tables):
        table = tables[group].get(endpoint, {})
        values = [table[p] for p in sorted(table)]
        for patient in sorted(table):
            points.append((patient, group, table[patient]))
        if values:
            arr = np.asarray(values, dtype=float)
            summaries.append(
                {
                    "group": group,
                    "n": int(arr.size),
                    "median": float(np.median(arr)),
                    "q1": float(np.percentile(arr, 25)),
                    "q3": float(np.percentile(arr, 75)),
                }
            )
        else:
            summaries.append({"group": group, "n": 0, "median": None, "q1": None, "q3": None})
    return points, summaries


def write_plot_data_csv(
    tables: dict[str, MetricTable],
    endpoint: str,
    path: str | Path,
) -> Path:
    points, summaries = emit_plot_data(tables, endpoint)
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record", "patient", "group", "value", "n", "median", "q1", "q3"])
        for patient, group, value in points:
            writer.writerow(["point", patient, group, f"{value:.10g}", "", "", "", ""])
        for s in summaries:
            writer.writerow(
                [
                    "summary", "", s["group"], "", s["n"],
                    "" if s["median"] is None else f"{s['median']:.10g}",
                    "" if s["q1"] is None else f"{s['q1']:.10g}",
                    "" if s["q3"] is None else f"{s['q3']:.10g}",
                ]
            )
    return path
