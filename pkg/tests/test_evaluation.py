import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchbag.bovw import EncodedTable
from patchbag.classifier import TrainConfig
from patchbag.evaluation import (
    MetricsReport,
    StratificationError,
    UndefinedMetricError,
    accuracy,
    confusion_matrix,
    cross_validate_table,
    format_report,
    hand_till_auc,
    micro_prf,
    stratified_kfold,
    write_report,
)


def pairwise_auc_oracle(scores, labels):
    """Exhaustive O(n^2) pair counting; independent of the rank-based path."""
    labels = np.asarray(labels)
    classes = range(scores.shape[1])

    def a_given(i, j):
        pos = scores[labels == i][:, i]
        neg = scores[labels == j][:, i]
        total = 0.0
        for p in pos:
            for q in neg:
                if p > q:
                    total += 1.0
                elif p == q:
                    total += 0.5
        return total / (len(pos) * len(neg))

    vals = []
    for i in classes:
        for j in classes:
            if j > i:
                vals.append(0.5 * (a_given(i, j) + a_given(j, i)))
    return sum(vals) / len(vals)


class TestStratifiedKFold:
    def test_balanced_20_samples(self):
        labels = np.repeat([0, 1, 2, 3], 5)
        splits = stratified_kfold(labels, folds=5, seed=0)
        for split in splits:
            test_labels = labels[split.test_indices]
            assert sorted(test_labels.tolist()) == [0, 1, 2, 3]

    def test_ds2_like_counts_within_one(self):
        # class sizes from the WSI dataset: benign/invasive/in-situ/normal
        sizes = {1: 7738, 3: 6444, 2: 2752, 0: 6917}
        labels = np.concatenate([np.full(n, c) for c, n in sizes.items()])
        splits = stratified_kfold(labels, folds=5, seed=1)
        for split in splits:
            test_labels = labels[split.test_indices]
            for c, n in sizes.items():
                got = int((test_labels == c).sum())
                assert abs(got - n / 5) <= 1

    def test_partition_exact(self):
        labels = np.repeat([0, 1, 2, 3], [13, 29, 7, 18])
        splits = stratified_kfold(labels, folds=5, seed=3)
        all_test = np.concatenate([s.test_indices for s in splits])
        assert sorted(all_test.tolist()) == list(range(len(labels)))
        for s in splits:
            assert set(s.train_indices).isdisjoint(set(s.test_indices))
            assert len(s.train_indices) + len(s.test_indices) == len(labels)

    def test_small_class_error_names_it(self):
        labels = np.array([0] * 10 + [1] * 3 + [2] * 10 + [3] * 10)
        with pytest.raises(StratificationError, match="Benign"):
            stratified_kfold(labels, folds=5, seed=0)

    def test_seeded_determinism(self):
        labels = np.repeat([0, 1, 2, 3], 25)
        a = stratified_kfold(labels, folds=5, seed=9)
        b = stratified_kfold(labels, folds=5, seed=9)
        for x, y in zip(a, b):
            assert np.array_equal(x.test_indices, y.test_indices)


class TestMicroPrf:
    def test_identity_matrix(self):
        assert micro_prf(np.eye(4, dtype=int)) == (1.0, 1.0, 1.0)

    def test_one_error(self):
        conf = np.diag([3, 3, 3, 3])
        conf[0, 1] = 1
        p, r, f1 = micro_prf(conf)
        assert p == r == f1 == pytest.approx(12 / 13)

    def test_zero_matrix(self):
        with pytest.raises(UndefinedMetricError):
            micro_prf(np.zeros((4, 4), dtype=int))

    @given(st.lists(st.integers(0, 50), min_size=16, max_size=16))
    @settings(max_examples=200)
    def test_micro_identity_exact(self, cells):
        conf = np.array(cells).reshape(4, 4)
        if conf.sum() == 0:
            conf[0, 0] = 1
        p, r, f1 = micro_prf(conf)
        acc = accuracy(conf)
        assert p == r == f1 == acc  # exact equality, not approx


class TestHandTill:
    def test_perfect_one_hot(self):
        labels = np.array([0, 1, 2, 3, 0, 2])
        scores = np.eye(4)[labels]
        assert hand_till_auc(scores, labels) == 1.0

    def test_all_identical_scores(self):
        labels = np.array([0, 1, 2, 3, 1, 2])
        scores = np.full((6, 4), 0.25)
        assert hand_till_auc(scores, labels) == 0.5

    def test_matches_pair_counting_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(8, 16))
            labels = np.concatenate([np.arange(4), rng.integers(0, 4, size=n - 4)])
            scores = rng.random((n, 4))
            got = hand_till_auc(scores, labels)
            want = pairwise_auc_oracle(scores, labels)
            assert abs(got - want) <= 1e-12

    def test_binary_case_equals_standard_auc(self, rng):
        n = 40
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        p1 = rng.random(n)
        scores = np.column_stack([1 - p1, p1])

        # standard binary AUC by explicit pair counting on class-1 scores
        pos = p1[labels == 1]
        neg = p1[labels == 0]
        std = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
        std /= len(pos) * len(neg)

        got = hand_till_auc(scores, labels)
        assert got == pytest.approx(std, abs=1e-12)

    def test_monotone_transform_invariance(self, rng):
        labels = np.concatenate([np.arange(4), rng.integers(0, 4, size=20)])
        scores = rng.random((24, 4))
        transformed = scores.copy()
        transformed[:, 0] = np.exp(3 * transformed[:, 0])
        transformed[:, 1] = np.log(transformed[:, 1] + 1.5)
        transformed[:, 2] = transformed[:, 2] ** 3
        transformed[:, 3] = 10 * transformed[:, 3] - 4
        assert hand_till_auc(scores, labels) == pytest.approx(
            hand_till_auc(transformed, labels), abs=1e-12
        )

    def test_absent_class_listed(self):
        labels = np.array([0, 1, 1, 0])
        scores = np.random.default_rng(0).random((4, 4))
        with pytest.raises(UndefinedMetricError, match="InSitu, Invasive"):
            hand_till_auc(scores, labels)

    def test_ties_contribute_half(self):
        labels = np.array([0, 1, 2, 3, 0, 1])
        scores = np.zeros((6, 4))
        scores[:, 0] = [0.9, 0.9, 0.1, 0.1, 0.9, 0.5]
        # class 0 vs 1 on column 0: pos (0.9, 0.9), neg (0.9, 0.5):
        # pairs: (0.9,0.9)=0.5 twice, (0.9,0.5)=1 twice -> A(0|1) = 0.75
        pos = scores[labels == 0][:, 0]
        neg = scores[labels == 1][:, 0]
        total = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
        assert total / 4 == 0.75


class TestCrossValidateTable:
    def test_perfect_duplicated_rows(self):
        rows = np.tile(np.eye(4), (10, 1))
        labels = np.tile(np.arange(4), 10)
        table = EncodedTable(
            rows=rows, labels=labels,
            provenance=[("r", i) for i in range(len(labels))],
        )
        report = cross_validate_table(
            table, folds=5, seed=0,
            train_config=TrainConfig(hidden=8, l2=0.0, learning_rate=0.5, epochs=60, seed=0),
        )
        for metric in ("precision", "recall", "f1", "accuracy", "multiclass_auc"):
            assert report.mean[metric] == 1.0
            assert report.spread[metric] == 0.0
        assert report.confusion.sum() == 40
        assert np.trace(report.confusion) == 40

    def test_report_files_and_format(self, tmp_path):
        report = MetricsReport(
            per_fold={m: [0.5, 0.6] for m in
                      ("precision", "recall", "f1", "accuracy", "multiclass_auc", "loss")},
            mean={m: 0.55 for m in
                  ("precision", "recall", "f1", "accuracy", "multiclass_auc", "loss")},
            spread={m: 0.05 for m in
                    ("precision", "recall", "f1", "accuracy", "multiclass_auc", "loss")},
            confusion=np.diag([5, 5, 5, 5]),
        )
        paths = write_report(report, tmp_path)
        assert paths["folds"].read_text().startswith("fold,metric,value")
        summary = paths["summary"].read_text()
        assert summary.splitlines()[0] == "metric,mean,std"
        assert "multiclass_auc,0.55,0.05" in summary
        confusion = paths["confusion"].read_text()
        assert "Normal,5,0,0,0" in confusion
        text = format_report(report)
        assert "accuracy" in text and "confusion" in text

    def test_stderr_flag(self):
        rows = np.tile(np.eye(4), (10, 1))
        labels = np.tile(np.arange(4), 10)
        table = EncodedTable(rows=rows, labels=labels,
                             provenance=[("r", i) for i in range(len(labels))])
        cfg = TrainConfig(hidden=4, l2=0.0, learning_rate=0.5, epochs=30, seed=0)
        std_report = cross_validate_table(table, 5, 0, cfg, use_stderr=False)
        se_report = cross_validate_table(table, 5, 0, cfg, use_stderr=True)
        assert std_report.spread_kind == "std"
        assert se_report.spread_kind == "stderr"


def test_confusion_matrix_oracle(rng):
    truth = rng.integers(0, 4, size=100)
    pred = rng.integers(0, 4, size=100)
    conf = confusion_matrix(truth, pred)
    for t in range(4):
        for p in range(4):
            assert conf[t, p] == int(((truth == t) & (pred == p)).sum())
