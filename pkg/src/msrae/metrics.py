"""Ranking metrics and rank-sum significance testing with explicit tie handling.

Scores here are typically small integers (voxel counts), so ties are the
norm rather than the exception.  All three metrics pin down their tie
semantics:

* ``roc_auc``: threshold sweep over descending tie groups, trapezoidal
  area; equals the pair-counting statistic ``(#[s_p > s_n] + 0.5 *
  #[s_p == s_n]) / (n_pos * n_neg)``.
* ``pr_ap``: step-interpolated average precision ``sum_k (R_k - R_{k-1})
  * P_k`` with each tie group processed as a single threshold.
* ``mann_whitney_u``: midrank U statistic; two-sided p-value either by
  exact enumeration over all C(n+m, n) group assignments (a permutation
  test, valid with ties) or by normal approximation with tie-corrected
  variance and continuity correction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from itertools import combinations

import numpy as np


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: int  # 1 = positive (diseased stratum), 0 = negative
    fold: int = 0
    patch_id: str = ""


@dataclass(frozen=True)
class TaskSpec:
    """Binary task over stenosis grades; patches in neither stratum are excluded.

    ``negative`` and ``positive`` are (op, threshold) rules with op in
    {lt, le, gt, ge}, e.g. ``("lt", 0.3)`` vs ``("gt", 0.7)``.
    """

    name: str
    negative: tuple[str, float]
    positive: tuple[str, float]

    _OPS = {"lt": np.less, "le": np.less_equal, "gt": np.greater, "ge": np.greater_equal}

    def __post_init__(self):
        for rule in (self.negative, self.positive):
            if rule[0] not in self._OPS:
                raise ValueError(f"unknown predicate op {rule[0]!r}")

    def assign(self, grade: float) -> int | None:
        neg = bool(self._OPS[self.negative[0]](grade, self.negative[1]))
        pos = bool(self._OPS[self.positive[0]](grade, self.positive[1]))
        if neg and pos:
            raise ValueError(f"task {self.name}: strata overlap at grade {grade}")
        if pos:
            return 1
        if neg:
            return 0
        return None


TASK_MILD_VS_SEVERE = TaskSpec("mild_vs_severe", negative=("lt", 0.3), positive=("gt", 0.7))
TASK_MODERATE_DETECTION = TaskSpec("moderate_detection", negative=("lt", 0.4), positive=("ge", 0.4))
DEFAULT_TASKS = (TASK_MILD_VS_SEVERE, TASK_MODERATE_DETECTION)


def _split_scores(samples) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray([s.score for s in samples], dtype=np.float64)
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    return scores, labels


def _threshold_groups(scores: np.ndarray, labels: np.ndarray):
    """Cumulative (threshold, tp, fp) after each descending tie group."""
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of each tie group
    boundary = np.flatnonzero(np.diff(s) != 0)
    last = np.append(boundary, len(s) - 1)
    tp = np.cumsum(y)[last]
    fp = np.cumsum(1 - y)[last]
    return s[last], tp, fp


def roc_auc(samples) -> tuple[list[tuple[float, float, float]], float]:
    """ROC curve [(threshold, fpr, tpr), ...] and trapezoidal AUC.

    Requires both classes; ties contribute half, so the AUC equals the
    scaled Mann-Whitney statistic U / (n_pos * n_neg).
    """
    scores, labels = _split_scores(samples)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"roc_auc needs both classes (got {n_pos} pos, {n_neg} neg)")
    thr, tp, fp = _threshold_groups(scores, labels)
    tpr = tp / n_pos
    fpr = fp / n_neg
    curve = [(math.inf, 0.0, 0.0)]
    curve += [(float(t), float(f), float(r)) for t, f, r in zip(thr, fpr, tpr)]
    auc = float(np.trapezoid(np.append(0.0, tpr), np.append(0.0, fpr)))
    return curve, auc


def pr_ap(samples) -> tuple[list[tuple[float, float, float]], float]:
    """PR curve [(threshold, recall, precision), ...] and step-wise AP."""
    scores, labels = _split_scores(samples)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("pr_ap needs at least one positive sample")
    thr, tp, fp = _threshold_groups(scores, labels)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    ap = float(np.sum(np.diff(np.append(0.0, recall)) * precision))
    curve = [(math.inf, 0.0, 1.0)]
    curve += [(float(t), float(r), float(p)) for t, r, p in zip(thr, recall, precision)]
    return curve, ap


# --------------------------------------------------------------------- #
# Mann-Whitney U                                                         #
# --------------------------------------------------------------------- #


def _midranks(pooled: np.ndarray) -> np.ndarray:
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(len(pooled), dtype=np.float64)
    sorted_vals = pooled[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def mann_whitney_u(a, b, mode: str = "auto") -> tuple[float, float]:
    """U statistic of ``a`` over ``b`` and a two-sided p-value.

    ``U = #[a_i > b_j] + 0.5 * #[a_i == b_j]``, so ``U(a, b) + U(b, a) =
    len(a) * len(b)``.  ``mode`` is "exact", "normal", or "auto" (exact
    when ``len(a) + len(b) <= 16``).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ValueError("mann_whitney_u requires two non-empty samples")
    if mode not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown mode {mode!r}")
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u = float(ranks[:n].sum() - n * (n + 1) / 2.0)

    if mode == "exact" or (mode == "auto" and n + m <= 16):
        p = _exact_p(ranks, n, m, u)
        return u, p

    # normal approximation with tie correction and continuity correction
    nm = n * m
    big_n = n + m
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(counts**3 - counts)) / (big_n * (big_n - 1))
    var = nm / 12.0 * ((big_n + 1) - tie_term)
    if var <= 0:
        return u, 1.0
    z = max(abs(u - nm / 2.0) - 0.5, 0.0) / math.sqrt(var)
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return u, p


def _exact_p(ranks: np.ndarray, n: int, m: int, u_obs: float) -> float:
    """Permutation-test p: enumerate all C(n+m, n) assignments of the pooled
    midranks to the first sample and count Us at least as extreme."""
    nm = n * m
    offset = n * (n + 1) / 2.0
    dev_obs = abs(u_obs - nm / 2.0)
    total = 0
    extreme = 0
    for subset in combinations(range(n + m), n):
        u = ranks[list(subset)].sum() - offset
        total += 1
        if abs(u - nm / 2.0) >= dev_obs - 1e-9:
            extreme += 1
    return extreme / total


# --------------------------------------------------------------------- #
# experiment-level aggregation                                           #
# --------------------------------------------------------------------- #


def evaluate_variant(samples: list[ScoredSample]) -> dict:
    """Pooled curves over all folds plus fold-wise metric lists.

    Folds missing one of the two classes are dropped from the fold-wise
    lists with a warning but stay in the pooled curves.
    """
    pooled_roc, pooled_auc = roc_auc(samples)
    pooled_pr, pooled_ap = pr_ap(samples)
    folds = sorted({s.fold for s in samples})
    fold_auc, fold_ap, dropped = [], [], []
    for f in folds:
        sub = [s for s in samples if s.fold == f]
        labels = {s.label for s in sub}
        if labels != {0, 1}:
            warnings.warn(f"fold {f} has a single class; dropped from fold-wise metrics")
            dropped.append(f)
            continue
        fold_auc.append(roc_auc(sub)[1])
        fold_ap.append(pr_ap(sub)[1])
    return {
        "pooled_auc": pooled_auc,
        "pooled_ap": pooled_ap,
        "roc_curve": pooled_roc,
        "pr_curve": pooled_pr,
        "fold_auc": fold_auc,
        "fold_ap": fold_ap,
        "folds": [f for f in folds if f not in dropped],
        "dropped_folds": dropped,
        "n_pos": sum(s.label for s in samples),
        "n_neg": sum(1 - s.label for s in samples),
    }


def evaluate_experiment(samples_by_variant: dict[str, list[ScoredSample]],
                        tasks=DEFAULT_TASKS,
                        grades_by_variant: dict[str, list[float]] | None = None) -> dict:
    """Full report: per task, per-variant metrics and pairwise rank tests.

    ``samples_by_variant`` maps a variant name to scored samples carrying
    the raw stenosis grade in place of a label when ``grades_by_variant``
    is given; otherwise the samples must already be labeled per task by
    the caller via :meth:`TaskSpec.assign` (see ``label_samples``).
    """
    report: dict = {"tasks": {}}
    for task in tasks:
        per_variant = {}
        for variant, samples in samples_by_variant.items():
            if grades_by_variant is not None:
                samples = label_samples(samples, grades_by_variant[variant], task)
            per_variant[variant] = evaluate_variant(samples)
        pairwise: dict = {"auc": {}, "ap": {}}
        names = sorted(per_variant)
        for va, vb in combinations(names, 2):
            for key in ("auc", "ap"):
                xs = per_variant[va][f"fold_{key}"]
                ys = per_variant[vb][f"fold_{key}"]
                u, p = mann_whitney_u(xs, ys)
                pairwise[key][f"{va}|{vb}"] = {"U": u, "p": p}
        report["tasks"][task.name] = {"variants": per_variant, "pairwise": pairwise}
    return report


def label_samples(samples: list[ScoredSample], grades: list[float],
                  task: TaskSpec) -> list[ScoredSample]:
    """Relabel scored samples for a task, dropping out-of-strata patches."""
    out = []
    for s, g in zip(samples, grades):
        label = task.assign(g)
        if label is not None:
            out.append(ScoredSample(score=s.score, label=label, fold=s.fold,
                                    patch_id=s.patch_id))
    return out
