"""Metrics, data splits, and statistics for virtual-screening evaluation.

No statistics dependency: the Student t CDF uses a continued-fraction
regularized incomplete beta, which the test suite validates against a
quadrature oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import (
    DegenerateVarianceError,
    MissingYearError,
    NoPositivesError,
    NotNormalizedError,
    OneClassOnlyError,
    ParameterError,
    TooFewSamplesError,
)


@dataclass
class MetricBundle:
    n: int
    roc_auc: float | None = None
    pr_auc: float | None = None
    ef_at_1pct: float | None = None
    ef_at_5pct: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    rmse: float | None = None
    r2: float | None = None
    pearson: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _check_binary(labels: np.ndarray):
    pos = int(labels.sum())
    if pos == 0 or pos == labels.size:
        raise OneClassOnlyError(f"need both classes, got {pos}/{labels.size} positives")


def roc_auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counting one half.

    Midrank (Mann-Whitney) formulation; exact against pairwise counting.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _check_binary(y)
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def pr_auc(scores, labels) -> float:
    """Area under precision-recall with right-step interpolation.

    Sum over distinct descending thresholds of (delta recall) * precision at
    the threshold; no trapezoid smoothing.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositivesError("precision-recall needs positives")
    order = np.argsort(-s, kind="stable")
    y_sorted = y[order]
    s_sorted = s[order]
    tp = np.cumsum(y_sorted)
    pred_pos = np.arange(1, y.size + 1)
    # last index of each distinct score block
    distinct = np.nonzero(np.diff(s_sorted))[0]
    cut = np.append(distinct, y.size - 1)
    area = 0.0
    prev_recall = 0.0
    for k in cut:
        recall = tp[k] / n_pos
        precision = tp[k] / pred_pos[k]
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return float(area)


def enrichment_factor(scores, labels, fraction: float) -> float:
    """Hit rate in the top ceil(fraction*n) by score over the base hit rate.

    Ties at the cutoff are broken by stable input order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ParameterError("fraction must be in (0, 1]")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = y.size
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositivesError("enrichment needs positives")
    m = math.ceil(fraction * n)
    order = np.argsort(-s, kind="stable")
    top_hits = int(y[order[:m]].sum())
    return (top_hits / m) / (n_pos / n)


def confusion_metrics(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """(sensitivity, specificity) at the given score threshold (>= is positive)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _check_binary(y)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    return tp / int(y.sum()), tn / int((y == 0).sum())


def regression_metrics(preds, targets) -> tuple[float, float, float]:
    """(rmse, r2, pearson); needs n >= 2 and nonzero target variance."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.size != t.size:
        raise ParameterError("length mismatch")
    if p.size < 2:
        raise DegenerateVarianceError("need at least two samples")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateVarianceError("constant targets")
    rmse = float(np.sqrt(np.mean((p - t) ** 2)))
    r2 = 1.0 - float(np.sum((p - t) ** 2)) / ss_tot
    sp = float(np.sum((p - p.mean()) ** 2))
    if sp == 0.0:
        pearson = 0.0  # constant predictions carry no linear signal
    else:
        pearson = float(np.sum((p - p.mean()) * (t - t.mean())) / math.sqrt(sp * ss_tot))
    return rmse, r2, pearson


def classification_bundle(scores, labels, threshold: float = 0.5) -> MetricBundle:
    y = np.asarray(labels, dtype=np.int64)
    sens, spec = confusion_metrics(scores, labels, threshold)
    return MetricBundle(
        n=int(y.size),
        roc_auc=roc_auc(scores, labels),
        pr_auc=pr_auc(scores, labels),
        ef_at_1pct=enrichment_factor(scores, labels, 0.01),
        ef_at_5pct=enrichment_factor(scores, labels, 0.05),
        sensitivity=sens,
        specificity=spec,
    )


def regression_bundle(preds, targets) -> MetricBundle:
    rmse, r2, pearson = regression_metrics(preds, targets)
    return MetricBundle(n=len(np.asarray(preds)), rmse=rmse, r2=r2, pearson=pearson)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitPlan:
    """Either k-fold assignments or a temporal train/test partition."""

    kind: str  # "kfold" | "temporal"
    folds: list[int] | None = None
    k: int = 0
    train_flags: list[bool] | None = None
    year_buckets: dict[int, list[int]] = field(default_factory=dict)
    cutoff_year: int | None = None
    warnings: list[str] = field(default_factory=list)

    def fold_indices(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        f = np.asarray(self.folds)
        test = np.nonzero(f == fold)[0]
        train = np.nonzero(f != fold)[0]
        return train, test


def stratified_kfold(labels, k: int, seed: int) -> SplitPlan:
    """Deal each class round-robin into k folds after a seeded shuffle."""
    y = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ParameterError("k must be >= 2")
    rng = np.random.default_rng(seed)
    folds = np.full(y.size, -1, dtype=np.int64)
    for cls in np.unique(y):
        idx = np.nonzero(y == cls)[0]
        if idx.size < k:
            raise TooFewSamplesError(
                f"class {cls} has {idx.size} members, need >= {k}")
        rng.shuffle(idx)
        for pos, row in enumerate(idx):
            folds[row] = pos % k
    return SplitPlan(kind="kfold", folds=folds.tolist(), k=k)


def temporal_split(years, cutoff_year: int) -> SplitPlan:
    """train = year <= cutoff, test = year > cutoff, with per-year buckets."""
    out_flags: list[bool] = []
    buckets: dict[int, list[int]] = {}
    for i, yr in enumerate(years):
        if yr is None:
            raise MissingYearError(f"record {i} has no year")
        is_train = yr <= cutoff_year
        out_flags.append(is_train)
        if not is_train:
            buckets.setdefault(int(yr), []).append(i)
    warnings = []
    if not any(not f for f in out_flags):
        warnings.append(f"empty test side for cutoff {cutoff_year}")
    if not any(out_flags):
        warnings.append(f"empty train side for cutoff {cutoff_year}")
    return SplitPlan(
        kind="temporal",
        train_flags=out_flags,
        year_buckets={y: buckets[y] for y in sorted(buckets)},
        cutoff_year=cutoff_year,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: int) -> float:
    """Two-sided tail probability of Student's t."""
    if dof < 1:
        raise ParameterError("dof must be >= 1")
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return betainc(dof / 2.0, 0.5, x)


@dataclass
class TTestResult:
    t: float
    p_raw: float
    p_bonferroni: float
    cohens_d: float
    dof: int
    degenerate: bool = False


def paired_t_test(diffs, m_comparisons: int = 1) -> TTestResult:
    """Two-sided paired t-test on difference scores with Bonferroni scaling.

    Zero-variance convention: all-zero diffs give p = 1; constant nonzero
    diffs give p = 0 with the degenerate flag set.
    """
    d = np.asarray(diffs, dtype=np.float64)
    if d.size < 2:
        raise ParameterError("need at least two differences")
    if m_comparisons < 1:
        raise ParameterError("m_comparisons must be >= 1")
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    dof = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, 1.0, 0.0, dof, degenerate=True)
        t = math.inf if mean > 0 else -math.inf
        return TTestResult(t, 0.0, 0.0, math.inf if mean > 0 else -math.inf,
                           dof, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = student_t_two_sided_p(t, dof)
    return TTestResult(t, p, min(1.0, m_comparisons * p), mean / sd, dof)


def one_way_f(values, groups) -> tuple[float, float]:
    """One-way ANOVA F statistic and p-value over a flat value/group listing."""
    v = np.asarray(values, dtype=np.float64)
    g = list(groups)
    labels = sorted(set(g))
    if len(labels) < 2:
        raise ParameterError("need at least two groups")
    grand = v.mean()
    ss_between = 0.0
    ss_within = 0.0
    for lab in labels:
        members = v[[i for i, x in enumerate(g) if x == lab]]
        if members.size < 1:
            continue
        ss_between += members.size * (members.mean() - grand) ** 2
        ss_within += float(np.sum((members - members.mean()) ** 2))
    df_between = len(labels) - 1
    df_within = v.size - len(labels)
    if df_within < 1:
        raise ParameterError("need more observations than groups")
    if ss_within == 0.0:
        return math.inf, 0.0
    f = (ss_between / df_between) / (ss_within / df_within)
    # F(d1, d2) tail via the incomplete beta
    x = df_within / (df_within + df_between * f)
    p = betainc(df_within / 2.0, df_between / 2.0, x)
    return float(f), float(p)


# ---------------------------------------------------------------------------
# excess-risk decomposition over a finite joint table
# ---------------------------------------------------------------------------

def excess_risk_decomposition(joint) -> tuple[float, float, float, float]:
    """Squared-loss risks of the optimal context-aware and static predictors.

    ``joint`` is an iterable of (molecule_key, y_value, context_key, prob)
    rows summing to 1. Returns (loss_ctx, loss_static, excess, variance_term)
    where the excess equals the molecule-averaged variance across contexts of
    the per-context conditional mean label, exactly (law of total variance).
    """
    rows = list(joint)
    total = sum(p for (_, _, _, p) in rows)
    if abs(total - 1.0) > 1e-9:
        raise NotNormalizedError(f"probabilities sum to {total}")
    if any(p < 0 for (_, _, _, p) in rows):
        raise NotNormalizedError("negative probability")

    mass_gc: dict[tuple, float] = {}
    mean_gc: dict[tuple, float] = {}
    for (g, y, c, p) in rows:
        key = (g, c)
        mass_gc[key] = mass_gc.get(key, 0.0) + p
        mean_gc[key] = mean_gc.get(key, 0.0) + p * y
    for key in mean_gc:
        if mass_gc[key] > 0:
            mean_gc[key] /= mass_gc[key]

    mass_g: dict = {}
    mean_g: dict = {}
    for (g, c), m in mass_gc.items():
        mass_g[g] = mass_g.get(g, 0.0) + m
        mean_g[g] = mean_g.get(g, 0.0) + m * mean_gc[(g, c)]
    for g in mean_g:
        mean_g[g] /= mass_g[g]

    loss_ctx = 0.0
    loss_static = 0.0
    for (g, y, c, p) in rows:
        loss_ctx += p * (y - mean_gc[(g, c)]) ** 2
        loss_static += p * (y - mean_g[g]) ** 2

    variance_term = 0.0
    for (g, c), m in mass_gc.items():
        variance_term += m * (mean_gc[(g, c)] - mean_g[g]) ** 2

    return loss_ctx, loss_static, loss_static - loss_ctx, variance_term
