"""Break-prediction metrics and the descriptive statistics suite.

The metric side scores probabilities against labels at word-final positions
(F0.5 with threshold sweeping). The statistics side covers pause frequency
and duration summaries, Wasserstein-1 and Kolmogorov-Smirnov distances,
seeded k-means, and chi-squared tests with Cramer's V over characteristic
contingency tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .rng import stream

# ---------------------------------------------------------------------------
# F-beta with beta = 0.5 and threshold search


def f_beta_half(precision: float, recall: float) -> float:
    """F0.5 = 1.25*P*R / (0.25*P + R); zero when both inputs are zero."""
    if precision < 0 or recall < 0:
        raise ShapeError(f"negative precision/recall: {precision}, {recall}")
    if precision == 0.0 and recall == 0.0:
        return 0.0
    return 1.25 * precision * recall / (0.25 * precision + recall)


@dataclass
class EvalReport:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f_half: float


def evaluate(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray,
             threshold: float) -> EvalReport:
    """Score p > threshold against labels at mask-selected positions."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    mask = np.asarray(mask).astype(bool)
    if not (probs.shape == labels.shape == mask.shape):
        raise ShapeError(
            f"evaluate shape mismatch: {probs.shape} {labels.shape} {mask.shape}"
        )
    pred = (probs > threshold) & mask
    truth = (labels != 0) & mask
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return EvalReport(threshold, tp, fp, fn, precision, recall,
                      f_beta_half(precision, recall))


def sweep_threshold(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray,
                    grid_step: float = 0.01) -> EvalReport:
    """Best-F0.5 report over the grid {0, grid_step, ..., 1}.

    Ties go to the smallest threshold; with an empty mask the threshold-0
    all-negative report comes back.
    """
    if grid_step <= 0 or grid_step > 1:
        raise ShapeError(f"bad grid step: {grid_step}")
    n = round(1.0 / grid_step)
    best = None
    for k in range(n + 1):
        report = evaluate(probs, labels, mask, k / n)
        if best is None or report.f_half > best.f_half:
            best = report
    return best


# ---------------------------------------------------------------------------
# pause statistics


def rp_stats(utterances) -> dict[int, tuple[float, float | None]]:
    """Per speaker: (breath-pause frequency in Hz, mean pause duration in s).

    Frequency is pause count over summed utterance duration; the mean
    duration is None for speakers who never pause.
    """
    totals: dict[int, list[float]] = {}
    for utt in utterances:
        n_rp = int(sum(utt.rp_label))
        t_rp = sum(ms for ms, is_rp in zip(utt.boundary_pause_ms, utt.rp_label)
                   if is_rp) / 1000.0
        if utt.total_duration_s <= 0:
            raise DataError(f"utterance {utt.utterance_id}: non-positive duration")
        acc = totals.setdefault(utt.speaker_id, [0.0, 0.0, 0.0])
        acc[0] += n_rp
        acc[1] += t_rp
        acc[2] += utt.total_duration_s
    out = {}
    for spk, (n_rp, t_rp, t_all) in totals.items():
        freq = n_rp / t_all
        out[spk] = (freq, t_rp / n_rp if n_rp else None)
    return out


def wasserstein1(a, b) -> float:
    """W1 distance between two empirical distributions.

    Computed as the integral of |ECDF_a - ECDF_b| over the pooled support,
    which equals the quantile-function integral for one-dimensional samples.
    """
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise DataError("wasserstein1 needs non-empty samples")
    pooled = np.sort(np.concatenate([a, b]))
    deltas = np.diff(pooled)
    cdf_a = np.searchsorted(a, pooled[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, pooled[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * deltas))


def ks_statistic(a, b) -> float:
    """Two-sample KS statistic: sup |ECDF_a - ECDF_b| over pooled points."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise DataError("ks_statistic needs non-empty samples")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


# ---------------------------------------------------------------------------
# clustering


def kmeans(points: np.ndarray, k: int, seed: int, max_iters: int = 300):
    """Seeded k-means++ with Lloyd iterations.

    Returns (assignments [N], centroids [k, d]). An emptied cluster is
    reseeded with the point farthest from its current centroid. Iteration
    stops when assignments no longer change.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ShapeError(f"k={k} with {n} points")
    rng = stream(seed, "kmeans")

    # k-means++: first centroid uniform, then proportional to squared distance
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total == 0:
            centroids[j] = points[rng.integers(n)]
        else:
            r = rng.random() * total
            centroids[j] = points[np.searchsorted(np.cumsum(d2), r)]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))

    assign = np.full(n, -1)
    for _ in range(max_iters):
        dist = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(dist, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = points[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            else:
                own = dist[np.arange(n), assign]
                far = int(np.argmax(own))
                centroids[j] = points[far]
                assign[far] = j
    return assign, centroids


# ---------------------------------------------------------------------------
# chi-squared with Cramer's V


def _regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x) = Gamma(a,x)/Gamma(a).

    Series expansion below x < a+1, Lentz continued fraction above; both
    converge to ~1e-15 for the degrees of freedom seen here.
    """
    if a <= 0 or x < 0:
        raise ShapeError(f"bad incomplete gamma arguments: a={a}, x={x}")
    if x == 0:
        return 1.0
    lg = math.lgamma(a)
    if x < a + 1.0:
        # P(a, x) by series, return 1 - P
        term = 1.0 / a
        total = term
        ap = a
        for _ in range(10000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        p = total * math.exp(-x + a * math.log(x) - lg)
        return 1.0 - p
    # Q(a, x) by continued fraction (modified Lentz)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - lg)


def expected_counts(table: np.ndarray) -> np.ndarray:
    """Expected cell counts under independence: row_sum * col_sum / n."""
    table = np.asarray(table, dtype=np.float64)
    rows = table.sum(axis=1, keepdims=True)
    cols = table.sum(axis=0, keepdims=True)
    return rows * cols / table.sum()


def chi_squared(table: np.ndarray) -> tuple[float, float, float]:
    """Pearson chi-squared without continuity correction.

    Returns (statistic, p value, Cramer's V). The table must be at least
    2x2 with no zero row or column marginal.
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] < 2 or table.shape[1] < 2:
        raise DataError(f"contingency table must be at least 2x2, got {table.shape}")
    if np.any(table < 0):
        raise DataError("contingency table has negative counts")
    if np.any(table.sum(axis=1) == 0) or np.any(table.sum(axis=0) == 0):
        raise DataError("contingency table has a zero marginal")
    n = table.sum()
    expected = expected_counts(table)
    stat = float(np.sum((table - expected) ** 2 / expected))
    df = (table.shape[0] - 1) * (table.shape[1] - 1)
    p = _regularized_gamma_q(df / 2.0, stat / 2.0)
    v = math.sqrt(stat / (n * (min(table.shape) - 1)))
    return stat, p, v


# ---------------------------------------------------------------------------
# characteristic tables from free-text annotations

DEGREE_ADVERBS = ("slightly", "very")

GENDER_VALUES = ("feminine", "masculine", "gender-neutral")
AGE_VALUES = ("young", "adult-like", "middle-aged", "old")
UNLABELED = "unlabeled"


def _strip_degree(term: str) -> str:
    parts = term.strip().lower().split()
    while len(parts) > 1 and parts[0] in DEGREE_ADVERBS:
        parts = parts[1:]
    return " ".join(parts)


def normalize_annotations(prompts) -> set[str]:
    """Degree-adverb-free characteristic terms for one speaker."""
    return {_strip_degree(p) for p in prompts if _strip_degree(p)}


def build_characteristic_tables(assignments: dict[int, int],
                                annotations: dict[int, list[str]]):
    """Cluster-vs-characteristic contingency tables.

    Gender expression and age become multi-class tables (with an explicit
    "unlabeled" column); every other term becomes a binary presence table.
    Tables that would carry a zero row or column are skipped; the skip
    reasons come back alongside the usable tables.

    Returns (tables, notices) where tables maps name -> (array, row_labels,
    col_labels) with clusters as rows.
    """
    speakers = sorted(assignments)
    clusters = sorted(set(assignments.values()))
    cluster_row = {c: i for i, c in enumerate(clusters)}
    terms = {spk: normalize_annotations(annotations.get(spk, []))
             for spk in speakers}

    tables = {}
    notices = []

    for name, values in (("gender", GENDER_VALUES), ("age", AGE_VALUES)):
        cols = list(values) + [UNLABELED]
        counts = np.zeros((len(clusters), len(cols)), dtype=np.int64)
        for spk in speakers:
            hits = [v for v in values if v in terms[spk]]
            label = hits[0] if hits else UNLABELED
            counts[cluster_row[assignments[spk]], cols.index(label)] += 1
        keep = counts.sum(axis=0) > 0
        trimmed = counts[:, keep]
        kept_cols = [c for c, k in zip(cols, keep) if k]
        if trimmed.shape[1] < 2 or np.any(trimmed.sum(axis=1) == 0):
            notices.append(f"{name}: skipped, marginal zeroes out")
        else:
            tables[name] = (trimmed, clusters, kept_cols)

    categorical = set(GENDER_VALUES) | set(AGE_VALUES)
    binary_terms = sorted({t for s in terms.values() for t in s} - categorical)
    for term in binary_terms:
        counts = np.zeros((len(clusters), 2), dtype=np.int64)
        for spk in speakers:
            col = 0 if term in terms[spk] else 1
            counts[cluster_row[assignments[spk]], col] += 1
        if np.any(counts.sum(axis=0) == 0) or np.any(counts.sum(axis=1) == 0):
            notices.append(f"{term}: skipped, marginal zeroes out")
        else:
            tables[term] = (counts, clusters, ["present", "absent"])
    return tables, notices
