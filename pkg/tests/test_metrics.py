import math

import numpy as np
import pytest

from msrae.metrics import (
    DEFAULT_TASKS, ScoredSample, TaskSpec, evaluate_experiment, evaluate_variant,
    label_samples, mann_whitney_u, pr_ap, roc_auc,
)
from msrae.tensor import Rng

from helpers import brute_force_u, enumeration_ap, enumeration_mwu_p, pair_counting_auc


def _samples(scores, labels, folds=None):
    folds = folds if folds is not None else [0] * len(scores)
    return [ScoredSample(score=s, label=int(l), fold=f)
            for s, l, f in zip(scores, labels, folds)]


def _random_scored(rng, n, integer=True):
    scores = (rng.integers(0, 8, size=n).astype(float) if integer
              else rng.uniform(0, 1, size=n))
    labels = (rng.uniform(size=n) > 0.4).astype(int)
    if labels.sum() == 0:
        labels[0] = 1
    if labels.sum() == n:
        labels[-1] = 0
    return scores, labels


class TestRocAuc:
    def test_perfect_separation(self):
        _, auc = roc_auc(_samples([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]))
        assert auc == 1.0

    def test_all_ties_half(self):
        _, auc = roc_auc(_samples([3, 3, 3, 3], [1, 0, 1, 0]))
        assert auc == 0.5

    def test_matches_pair_counting_oracle(self):
        rng = Rng(1)
        for _ in range(50):
            scores, labels = _random_scored(rng, int(rng.integers(4, 50)))
            _, auc = roc_auc(_samples(scores, labels))
            assert abs(auc - pair_counting_auc(scores, labels)) <= 1e-9

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            roc_auc(_samples([1, 2], [1, 1]))

    def test_monotone_transform_invariance(self):
        rng = Rng(2)
        scores, labels = _random_scored(rng, 30)
        _, a1 = roc_auc(_samples(scores, labels))
        _, a2 = roc_auc(_samples(np.exp(scores / 3.0), labels))
        assert a1 == pytest.approx(a2, abs=1e-12)

    def test_label_reversal_without_ties(self):
        rng = Rng(3)
        scores = rng.uniform(0, 1, size=40)  # continuous, ties improbable
        labels = (rng.uniform(size=40) > 0.5).astype(int)
        labels[0], labels[1] = 1, 0
        _, auc = roc_auc(_samples(scores, labels))
        _, rev = roc_auc(_samples(scores, 1 - labels))
        assert auc == pytest.approx(1.0 - rev, abs=1e-12)

    def test_curve_monotone(self):
        rng = Rng(4)
        scores, labels = _random_scored(rng, 25)
        curve, _ = roc_auc(_samples(scores, labels))
        fprs = [c[1] for c in curve]
        tprs = [c[2] for c in curve]
        assert fprs == sorted(fprs) and tprs == sorted(tprs)
        assert curve[0] == (math.inf, 0.0, 0.0)
        assert fprs[-1] == 1.0 and tprs[-1] == 1.0


class TestPrAp:
    def test_perfect_separation(self):
        _, ap = pr_ap(_samples([5, 4, 1, 0], [1, 1, 0, 0]))
        assert ap == 1.0

    def test_single_positive_ranked_last(self):
        _, ap = pr_ap(_samples([4, 3, 2, 1], [0, 0, 0, 1]))
        assert ap == 0.25

    def test_matches_enumeration_oracle(self):
        rng = Rng(5)
        for _ in range(50):
            scores, labels = _random_scored(rng, int(rng.integers(3, 40)))
            _, ap = pr_ap(_samples(scores, labels))
            assert abs(ap - enumeration_ap(scores, labels)) <= 1e-9

    def test_no_positive_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            pr_ap(_samples([1, 2], [0, 0]))

    def test_all_tied_scores_give_prevalence(self):
        samples = _samples([2, 2, 2, 2, 2], [1, 0, 0, 1, 0])
        _, ap = pr_ap(samples)
        assert ap == pytest.approx(2 / 5)


class TestMannWhitney:
    def test_separated_exact(self):
        u, p = mann_whitney_u([1, 2, 3], [4, 5, 6], mode="exact")
        assert u == 0.0
        assert p == pytest.approx(0.1, abs=1e-12)

    def test_identical_lists(self):
        u, p = mann_whitney_u([1, 2, 3], [1, 2, 3])
        assert u == 4.5  # n*m/2
        assert p == pytest.approx(1.0, abs=1e-9)

    def test_u_complement(self):
        rng = Rng(6)
        for _ in range(20):
            a = rng.integers(0, 6, size=int(rng.integers(2, 7))).astype(float)
            b = rng.integers(0, 6, size=int(rng.integers(2, 7))).astype(float)
            ua, _ = mann_whitney_u(a, b)
            ub, _ = mann_whitney_u(b, a)
            assert ua + ub == pytest.approx(len(a) * len(b), abs=1e-9)

    def test_u_matches_brute_force(self):
        rng = Rng(7)
        for _ in range(30):
            a = rng.integers(0, 5, size=int(rng.integers(2, 9))).astype(float)
            b = rng.integers(0, 5, size=int(rng.integers(2, 9))).astype(float)
            u, _ = mann_whitney_u(a, b)
            assert u == pytest.approx(brute_force_u(a, b), abs=1e-9)

    def test_exact_matches_enumeration_oracle(self):
        rng = Rng(8)
        for _ in range(12):
            a = rng.integers(0, 4, size=int(rng.integers(2, 6))).astype(float)
            b = rng.integers(0, 4, size=int(rng.integers(2, 6))).astype(float)
            _, p = mann_whitney_u(a, b, mode="exact")
            assert p == pytest.approx(enumeration_mwu_p(a, b), abs=1e-12)

    def test_normal_close_to_exact(self):
        rng = Rng(9)
        for _ in range(12):
            a = rng.uniform(0, 1, size=8)
            b = rng.uniform(0, 1, size=8) + float(rng.uniform(-0.2, 0.2))
            _, p_exact = mann_whitney_u(a, b, mode="exact")
            _, p_norm = mann_whitney_u(a, b, mode="normal")
            assert abs(p_exact - p_norm) <= 0.02

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            mann_whitney_u([], [1.0])

    def test_all_identical_values_normal_mode(self):
        u, p = mann_whitney_u([2.0] * 20, [2.0] * 20, mode="normal")
        assert u == 200.0 and p == 1.0


class TestTaskSpec:
    def test_assignments(self):
        task = TaskSpec("t", negative=("lt", 0.3), positive=("gt", 0.7))
        assert task.assign(0.1) == 0
        assert task.assign(0.8) == 1
        assert task.assign(0.5) is None

    def test_moderate_task_boundary(self):
        task = DEFAULT_TASKS[1]
        assert task.assign(0.4) == 1  # at-or-above threshold is positive
        assert task.assign(0.39) == 0

    def test_overlapping_strata_rejected(self):
        task = TaskSpec("bad", negative=("lt", 0.5), positive=("lt", 0.2))
        with pytest.raises(ValueError, match="overlap"):
            task.assign(0.1)

    def test_label_samples_filters(self):
        samples = _samples([1, 2, 3], [0, 0, 0])
        labeled = label_samples(samples, [0.1, 0.5, 0.9], DEFAULT_TASKS[0])
        assert [(s.score, s.label) for s in labeled] == [(1, 0), (3, 1)]


class TestEvaluate:
    def test_two_identical_folds_pool_to_same_auc(self):
        scores = [5, 4, 1, 2]
        labels = [1, 1, 0, 0]
        samples = _samples(scores * 2, labels * 2, folds=[0, 0, 0, 0, 1, 1, 1, 1])
        rep = evaluate_variant(samples)
        single = roc_auc(_samples(scores, labels))[1]
        assert rep["pooled_auc"] == pytest.approx(single, abs=1e-12)
        assert rep["fold_auc"] == [single, single]

    def test_degenerate_fold_dropped_with_warning(self):
        samples = _samples([3, 1, 2, 2], [1, 0, 1, 1], folds=[0, 0, 1, 1])
        with pytest.warns(UserWarning, match="single class"):
            rep = evaluate_variant(samples)
        assert rep["dropped_folds"] == [1]
        assert len(rep["fold_auc"]) == 1

    def test_variant_against_itself_p_near_one(self):
        rng = Rng(10)
        scores, labels = _random_scored(rng, 40)
        folds = rng.integers(0, 4, size=40)
        samples = {"A": _samples(scores, labels, folds),
                   "B": _samples(scores, labels, folds)}
        rep = evaluate_experiment(samples, tasks=(TaskSpec("all", ("lt", 0.5), ("ge", 0.5)),),
                                  grades_by_variant={"A": labels * 1.0, "B": labels * 1.0})
        pair = rep["tasks"]["all"]["pairwise"]["auc"]["A|B"]
        assert pair["p"] == pytest.approx(1.0, abs=1e-9)

    def test_pooled_auc_equals_oracle_on_concatenation(self):
        rng = Rng(11)
        scores, labels = _random_scored(rng, 60)
        folds = rng.integers(0, 3, size=60)
        rep = evaluate_variant(_samples(scores, labels, folds))
        assert rep["pooled_auc"] == pytest.approx(pair_counting_auc(scores, labels), abs=1e-12)
