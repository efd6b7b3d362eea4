import numpy as np
import pytest

from distillwsd.errors import ContractError, InputError
from distillwsd.metrics import (
    MetricsReport,
    PredictionRecord,
    THRESHOLD_GRID,
    average_precision,
    evaluate,
    f1_scores,
    mean_average_precision,
    topk_f1,
    tune_threshold,
    write_per_class_csv,
)


def brute_force_ap(scores, labels):
    """Walk the ranking (score desc, index asc) and average precision at hits."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    precisions = []
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / sum(labels)


def records_from(scores, labels):
    return [PredictionRecord(image_id=str(i), scores=s, labels=l)
            for i, (s, l) in enumerate(zip(scores, labels))]


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_hand_rank_walk(self):
        got = average_precision([0.9, 0.8, 0.7], [0, 1, 1])
        assert got == pytest.approx((1 / 2 + 2 / 3) / 2)
        assert got == pytest.approx(7 / 12)

    def test_matches_bruteforce_over_seeds(self):
        for seed in range(300):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(1, 11))
            labels = rng.integers(0, 2, size=n)
            if labels.sum() == 0:
                labels[int(rng.integers(0, n))] = 1
            scores = np.round(rng.uniform(size=n), 2)  # coarse grid forces ties
            assert average_precision(scores, labels) == pytest.approx(
                brute_force_ap(scores.tolist(), labels.tolist()), abs=1e-12)

    def test_invariant_under_monotone_transform(self, rng):
        scores = rng.uniform(size=20)
        labels = rng.integers(0, 2, size=20)
        labels[0] = 1
        base = average_precision(scores, labels)
        assert average_precision(scores * 3 + 1, labels) == pytest.approx(base)
        assert average_precision(np.exp(scores), labels) == pytest.approx(base)

    def test_worst_case_lower_bound(self, rng):
        # Minimum AP puts every positive at the bottom of the ranking:
        # (1/P) * sum_i i / (N - P + i).  Any ranking stays in [that, 1].
        for seed in range(50):
            r = np.random.default_rng(seed)
            labels = r.integers(0, 2, size=12)
            labels[0] = 1
            scores = r.uniform(size=12)
            ap = average_precision(scores, labels)
            p = int(labels.sum())
            floor = sum(i / (12 - p + i) for i in range(1, p + 1)) / p
            assert floor - 1e-12 <= ap <= 1.0

    def test_zero_positives_rejected(self):
        with pytest.raises(InputError):
            average_precision([0.5, 0.4], [0, 0])


class TestMeanAveragePrecision:
    def test_excludes_empty_classes_with_warning(self, rng, caplog):
        scores = rng.uniform(size=(6, 3))
        labels = np.zeros((6, 3), dtype=int)
        labels[:, 0] = 1
        labels[::2, 1] = 1
        with caplog.at_level("WARNING"):
            m, per_class = mean_average_precision(scores, labels)
        assert per_class[2] is None
        assert "class 2" in caplog.text
        assert m == pytest.approx(np.mean([per_class[0], per_class[1]]))

    def test_order_invariance(self, rng):
        scores = rng.uniform(size=(10, 4))
        labels = (rng.uniform(size=(10, 4)) < 0.4).astype(int)
        labels[0] = 1
        m1, _ = mean_average_precision(scores, labels)
        perm = rng.permutation(10)
        m2, _ = mean_average_precision(scores[perm], labels[perm])
        assert m1 == pytest.approx(m2)


class TestF1Scores:
    def test_perfect_predictions(self):
        labels = np.array([[1, 0], [0, 1], [1, 1]])
        recs = records_from(labels.astype(float) * 0.9 + 0.05, labels)
        f1c, f1o = f1_scores(recs, 0.5)
        assert f1c == 1.0 and f1o == 1.0

    def test_no_positive_predictions_zero_convention(self):
        labels = np.array([[1, 0], [0, 1]])
        recs = records_from(np.full((2, 2), 0.1), labels)
        f1c, f1o = f1_scores(recs, 0.5)
        assert f1c == 0.0 and f1o == 0.0

    def test_hand_counted_confusion(self):
        # 3 images, 2 classes; tau = 0.5
        scores = np.array([[0.9, 0.2], [0.6, 0.7], [0.3, 0.8]])
        labels = np.array([[1, 0], [0, 1], [1, 1]])
        recs = records_from(scores, labels)
        # class 0: predictions (1,1,0) vs labels (1,0,1) -> TP 1 FP 1 FN 1 -> F1 = 1/2
        # class 1: predictions (0,1,1) vs labels (0,1,1) -> F1 = 1
        f1c, f1o = f1_scores(recs, 0.5)
        assert f1c == pytest.approx((0.5 + 1.0) / 2)
        # pooled: TP 3, FP 1, FN 1 -> 2*3/(6+1+1)
        assert f1o == pytest.approx(6 / 8)

    def test_strict_threshold_boundary(self):
        labels = np.array([[1]])
        recs = records_from(np.array([[0.5]]), labels)
        _, f1o = f1_scores(recs, 0.5)
        assert f1o == 0.0


class TestTuneThreshold:
    def test_confident_predictions_tie_to_smallest(self, rng):
        labels = (rng.uniform(size=(8, 3)) < 0.5).astype(int)
        labels[0] = 1
        scores = np.where(labels == 1, 0.99, 0.01)
        assert tune_threshold(records_from(scores, labels)) == pytest.approx(0.05)

    def test_scores_equal_labels(self, rng):
        labels = (rng.uniform(size=(6, 2)) < 0.5).astype(int)
        labels[0, 0] = 1
        assert tune_threshold(records_from(labels.astype(float), labels)) == pytest.approx(0.05)

    def test_matches_grid_oracle(self, rng):
        for seed in range(20):
            r = np.random.default_rng(seed)
            scores = r.uniform(size=(10, 4))
            labels = (r.uniform(size=(10, 4)) < 0.4).astype(int)
            recs = records_from(scores, labels)
            tau = tune_threshold(recs)
            best = max(THRESHOLD_GRID, key=lambda t: (f1_scores(recs, t)[1], -t))
            assert f1_scores(recs, tau)[1] == pytest.approx(f1_scores(recs, best)[1])
            ties = [t for t in THRESHOLD_GRID
                    if f1_scores(recs, t)[1] == pytest.approx(f1_scores(recs, tau)[1])]
            assert tau == min(ties)

    def test_empty_records_rejected(self):
        with pytest.raises(InputError):
            tune_threshold([])


class TestTopkF1:
    def test_k_equals_num_classes_saturates(self, rng):
        labels = (rng.uniform(size=(5, 3)) < 0.5).astype(int)
        labels[0] = 1
        recs = records_from(rng.uniform(size=(5, 3)), labels)
        f1c, f1o = topk_f1(recs, 3)
        tp = labels.sum()
        fp = labels.size - tp
        assert f1o == pytest.approx(2 * tp / (2 * tp + fp))

    def test_exact_topk_hit(self):
        labels = np.array([[1, 1, 1, 0]])
        scores = np.array([[0.9, 0.8, 0.7, 0.1]])
        f1c, f1o = topk_f1(records_from(scores, labels), 3)
        assert f1o == 1.0

    def test_ties_break_by_class_index(self):
        labels = np.array([[1, 0, 0]])
        scores = np.array([[0.5, 0.5, 0.5]])
        _, f1o = topk_f1(records_from(scores, labels), 1)
        assert f1o == 1.0  # class 0 chosen on the tie

    def test_matches_counting_oracle(self, rng):
        for seed in range(20):
            r = np.random.default_rng(seed)
            scores = r.uniform(size=(6, 5))
            labels = (r.uniform(size=(6, 5)) < 0.4).astype(int)
            k = int(r.integers(1, 6))
            pred = np.zeros_like(labels)
            for i in range(6):
                top = sorted(range(5), key=lambda j: (-scores[i, j], j))[:k]
                pred[i, top] = 1
            tp = int(((pred == 1) & (labels == 1)).sum())
            fp = int(((pred == 1) & (labels == 0)).sum())
            fn = int(((pred == 0) & (labels == 1)).sum())
            want_micro = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
            _, f1o = topk_f1(records_from(scores, labels), k)
            assert f1o == pytest.approx(want_micro)

    def test_k_out_of_range(self, rng):
        recs = records_from(rng.uniform(size=(2, 3)), np.ones((2, 3), dtype=int))
        with pytest.raises(ContractError):
            topk_f1(recs, 4)


class TestEvaluateAndReport:
    def test_full_report_fields(self, rng):
        labels = (rng.uniform(size=(12, 4)) < 0.5).astype(int)
        labels[0] = 1
        scores = np.clip(labels * 0.8 + rng.normal(0, 0.1, size=(12, 4)), 0.001, 0.999)
        report = evaluate(records_from(scores, labels))
        d = report.to_dict()
        for key in ("per_class_ap", "map", "f1_c", "f1_o", "topk_f1_c", "topk_f1_o", "tuned_tau"):
            assert key in d
        for v in (d["map"], d["f1_c"], d["f1_o"], d["topk_f1_c"], d["topk_f1_o"]):
            assert 0.0 <= v <= 1.0

    def test_threshold_tuned_on_validation_split(self, rng):
        labels = (rng.uniform(size=(10, 3)) < 0.5).astype(int)
        labels[0] = 1
        scores = np.where(labels == 1, 0.99, 0.01)
        val = records_from(scores, labels)
        report = evaluate(records_from(scores, labels), records_val=val)
        assert report.tuned_tau == pytest.approx(0.05)

    def test_csv_dump(self, tmp_path, rng):
        labels = np.zeros((6, 3), dtype=int)
        labels[:, 0] = 1
        labels[::2, 1] = 1
        report = evaluate(records_from(rng.uniform(size=(6, 3)), labels))
        path = str(tmp_path / "ap.csv")
        write_per_class_csv(report, ["a", "b", "c"], path)
        lines = open(path).read().strip().splitlines()
        assert lines[0] == "class_name,ap"
        assert len(lines) == 4
        assert lines[3].startswith("c,")
        assert lines[3] == "c,"  # no positives -> empty AP cell
