"""Stratified 5-fold cross-validation and the metric suite: micro-averaged
precision/recall/F1 (identical to accuracy for single-label multiclass),
cross-entropy loss, and the Hand & Till multiclass AUC (mean of all pairwise
one-vs-one ranking AUCs). Fold statistics are reported mean +/- standard
deviation (population std over folds; a flag switches to standard error).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bovw, classifier
from .bovw import EncodedTable, VocabScope
from .features import DescriptorSet
from .labels import Label
from .seeding import derive_seed

N_CLASSES = 4
METRIC_NAMES = ("precision", "recall", "f1", "accuracy", "multiclass_auc", "loss")


class StratificationError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass
class FoldSplit:
    fold_id: int
    train_indices: np.ndarray
    test_indices: np.ndarray


@dataclass
class MetricsReport:
    per_fold: dict[str, list[float]]  # metric -> one value per fold
    mean: dict[str, float]
    spread: dict[str, float]
    confusion: np.ndarray  # (4, 4) summed over folds, rows = true class
    spread_kind: str = "std"
    extras: dict = field(default_factory=dict)

    def summary_rows(self) -> list[tuple[str, float, float]]:
        return [(m, self.mean[m], self.spread[m]) for m in METRIC_NAMES]


def stratified_kfold(labels, folds: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Seeded shuffle within each class, then round-robin over folds.

    Test sets partition the dataset; every class's per-fold test count is
    within one sample of n_class/folds.
    """
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(derive_seed(seed, "kfold"))
    assignment = np.empty(len(labels), dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < folds:
            raise StratificationError(
                f"class {Label(cls).display} has {idx.size} samples; needs at least {folds}"
            )
        idx = rng.permutation(idx)
        assignment[idx] = np.arange(idx.size) % folds
    out = []
    everything = np.arange(len(labels))
    for f in range(folds):
        test = everything[assignment == f]
        train = everything[assignment != f]
        out.append(FoldSplit(fold_id=f, train_indices=train, test_indices=test))
    return out


def confusion_matrix(true_labels, predicted, n_classes: int = N_CLASSES) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(np.asarray(true_labels), np.asarray(predicted)):
        m[t, p] += 1
    return m


def micro_prf(confusion: np.ndarray) -> tuple[float, float, float]:
    """Micro-averaged precision, recall, F1 from a confusion matrix.

    Micro-P = sum TP / sum (TP+FP); for single-label multiclass the three
    values and accuracy coincide exactly. F1 short-circuits to P when P == R
    so that the identity holds at the bit level, as the harmonic mean of two
    equal numbers is that number.
    """
    confusion = np.asarray(confusion)
    if (confusion < 0).any():
        raise ValueError("confusion matrix must be non-negative")
    total = int(confusion.sum())
    if total == 0:
        raise UndefinedMetricError("confusion matrix is all zero; metrics undefined")
    tp = float(np.trace(confusion))
    tp_fp = float(confusion.sum(axis=0).sum())  # column sums = predicted counts
    tp_fn = float(confusion.sum(axis=1).sum())  # row sums = true counts
    precision = tp / tp_fp
    recall = tp / tp_fn
    f1 = precision if precision == recall else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def accuracy(confusion: np.ndarray) -> float:
    confusion = np.asarray(confusion)
    total = int(confusion.sum())
    if total == 0:
        raise UndefinedMetricError("confusion matrix is all zero; accuracy undefined")
    return float(np.trace(confusion)) / total


def _ranking_auc(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Mann-Whitney AUC with midranks; ties contribute 0.5."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    pooled = np.concatenate([pos, neg])
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(len(pooled), dtype=np.float64)
    sorted_vals = pooled[order]
    i = 0
    while i < len(pooled):
        j = i
        while j + 1 < len(pooled) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    n_pos, n_neg = len(pos), len(neg)
    rank_sum = ranks[:n_pos].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def hand_till_auc(scores: np.ndarray, labels) -> float:
    """M = 2/(c(c-1)) * sum_{i<j} [A(i|j) + A(j|i)] / 2.

    A(i|j) ranks the class-i score column over samples of classes i and j.
    Every class must appear in `labels` at least once.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = list(range(scores.shape[1]))
    present = set(np.unique(labels).tolist())
    absent = [c for c in classes if c not in present]
    if absent:
        raise UndefinedMetricError(
            "multiclass AUC undefined; absent classes: "
            + ", ".join(Label(c).display for c in absent)
        )
    total = 0.0
    n_pairs = 0
    for i in classes:
        for j in classes:
            if j <= i:
                continue
            mask_i = labels == i
            mask_j = labels == j
            a_ij = _ranking_auc(scores[mask_i, i], scores[mask_j, i])
            a_ji = _ranking_auc(scores[mask_j, j], scores[mask_i, j])
            total += 0.5 * (a_ij + a_ji)
            n_pairs += 1
    return total / n_pairs


def _aggregate(values: list[float], use_stderr: bool) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if use_stderr:
        if len(arr) < 2:
            return mean, 0.0
        return mean, float(arr.std(ddof=1) / math.sqrt(len(arr)))
    return mean, float(arr.std(ddof=0))


def _fold_metrics(probs, pred, true_labels, ce) -> dict[str, float]:
    conf = confusion_matrix(true_labels, pred)
    p, r, f1 = micro_prf(conf)
    return {
        "precision": p,
        "recall": r,
        "f1": f1,
        "accuracy": accuracy(conf),
        "multiclass_auc": hand_till_auc(probs, true_labels),
        "loss": ce,
        "_confusion": conf,
    }


def cross_validate_table(
    table: EncodedTable,
    folds: int = 5,
    seed: int = 0,
    train_config: classifier.TrainConfig | None = None,
    use_stderr: bool = False,
) -> MetricsReport:
    """CV over a fixed feature table: only the MLP is refit per fold."""
    base = train_config or classifier.TrainConfig()
    splits = stratified_kfold(table.labels, folds, seed)
    per_fold: dict[str, list[float]] = {m: [] for m in METRIC_NAMES}
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for split in splits:
        cfg = classifier.TrainConfig(
            hidden=base.hidden,
            l2=base.l2,
            learning_rate=base.learning_rate,
            epochs=base.epochs,
            batch_size=base.batch_size,
            seed=derive_seed(seed, "mlp", str(split.fold_id)),
        )
        model = classifier.train_mlp(table.rows[split.train_indices],
                                     table.labels[split.train_indices], cfg)
        probs, pred = classifier.predict(model, table.rows[split.test_indices])
        truth = table.labels[split.test_indices]
        ce = classifier.cross_entropy(model, table.rows[split.test_indices], truth)
        metrics = _fold_metrics(probs, pred, truth, ce)
        confusion += metrics.pop("_confusion")
        for m in METRIC_NAMES:
            per_fold[m].append(metrics[m])
    mean, spread = {}, {}
    for m in METRIC_NAMES:
        mean[m], spread[m] = _aggregate(per_fold[m], use_stderr)
    return MetricsReport(
        per_fold=per_fold,
        mean=mean,
        spread=spread,
        confusion=confusion,
        spread_kind="stderr" if use_stderr else "std",
    )


def _encode_fold(
    sets: list[DescriptorSet],
    row_sets: list[int],
    row_patches: list[int],
    train_rows: np.ndarray,
    scope: VocabScope,
    k: int,
    fraction: float,
    seed: int,
) -> np.ndarray:
    """Encode every row with vocabularies fit only on training-fold patches.

    PER_REGION refits each region's codebook from that region's training
    patches; GLOBAL pools training descriptors from all regions.
    """
    train_mask = np.zeros(len(row_sets), dtype=bool)
    train_mask[train_rows] = True

    def training_descriptors(set_idx: int) -> np.ndarray:
        dset = sets[set_idx]
        rows = [
            dset.descriptors[row_patches[r]]
            for r in range(len(row_sets))
            if row_sets[r] == set_idx and train_mask[r]
        ]
        if not rows:
            return np.zeros((0, dset.d), dtype=np.float64)
        return np.concatenate(rows, axis=0).astype(np.float64)

    codebooks: dict[int, bovw.Codebook] = {}
    if scope is VocabScope.PER_REGION:
        for si, dset in enumerate(sets):
            desc = training_descriptors(si)
            if desc.shape[0] == 0:
                raise bovw.InsufficientDataError(
                    f"set {dset.region_id} has no training-fold patches to fit its codebook"
                )
            kept, _ = bovw.trim_strongest(desc, fraction)
            if kept.shape[0] < k:
                raise bovw.InsufficientDataError(
                    f"set {dset.region_id}: {kept.shape[0]} training descriptors after "
                    f"trimming < k={k}; use the global scope or a smaller k"
                )
            codebooks[si] = bovw.kmeans(kept, k, seed, scope=scope, trim_fraction=fraction)
    else:
        pools = []
        for si in range(len(sets)):
            desc = training_descriptors(si)
            if desc.shape[0]:
                kept, _ = bovw.trim_strongest(desc, fraction)
                pools.append(kept)
        pooled = np.concatenate(pools, axis=0)
        if pooled.shape[0] < k:
            raise bovw.InsufficientDataError(
                f"{pooled.shape[0]} pooled training descriptors < k={k}"
            )
        shared = bovw.kmeans(pooled, k, seed, scope=scope, trim_fraction=fraction)
        codebooks = {si: shared for si in range(len(sets))}

    rows = np.empty((len(row_sets), k), dtype=np.float64)
    for r in range(len(row_sets)):
        dset = sets[row_sets[r]]
        rows[r] = bovw.encode_patch(dset.descriptors[row_patches[r]], codebooks[row_sets[r]])
    return rows


def cross_validate_sets(
    sets: list[DescriptorSet],
    folds: int = 5,
    seed: int = 0,
    scope: VocabScope = VocabScope.PER_REGION,
    k: int = bovw.DEFAULT_K,
    fraction: float = bovw.DEFAULT_TRIM_FRACTION,
    train_config: classifier.TrainConfig | None = None,
    use_stderr: bool = False,
    label_override: np.ndarray | None = None,
) -> MetricsReport:
    """Leakage-safe CV: folds split patches, codebooks and the MLP are fit
    strictly inside each training fold, then the held-out fold is scored.

    `label_override` substitutes the per-row labels (after fold splitting is
    computed on them too); used by the shuffled-label control.
    """
    base = train_config or classifier.TrainConfig()
    row_sets: list[int] = []
    row_patches: list[int] = []
    labels = []
    for si, dset in enumerate(sets):
        for pi in range(dset.n_patches):
            row_sets.append(si)
            row_patches.append(pi)
            labels.append(int(dset.label))
    labels = np.asarray(labels, dtype=np.int64)
    if label_override is not None:
        labels = np.asarray(label_override, dtype=np.int64)
        if labels.shape[0] != len(row_sets):
            raise ValueError("label_override length does not match total patch count")

    splits = stratified_kfold(labels, folds, seed)
    per_fold: dict[str, list[float]] = {m: [] for m in METRIC_NAMES}
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for split in splits:
        rows = _encode_fold(
            sets, row_sets, row_patches, split.train_indices, scope, k, fraction,
            derive_seed(seed, "fold", str(split.fold_id)),
        )
        cfg = classifier.TrainConfig(
            hidden=base.hidden,
            l2=base.l2,
            learning_rate=base.learning_rate,
            epochs=base.epochs,
            batch_size=base.batch_size,
            seed=derive_seed(seed, "mlp", str(split.fold_id)),
        )
        model = classifier.train_mlp(rows[split.train_indices], labels[split.train_indices], cfg)
        probs, pred = classifier.predict(model, rows[split.test_indices])
        truth = labels[split.test_indices]
        ce = classifier.cross_entropy(model, rows[split.test_indices], truth)
        metrics = _fold_metrics(probs, pred, truth, ce)
        confusion += metrics.pop("_confusion")
        for m in METRIC_NAMES:
            per_fold[m].append(metrics[m])
    mean, spread = {}, {}
    for m in METRIC_NAMES:
        mean[m], spread[m] = _aggregate(per_fold[m], use_stderr)
    return MetricsReport(
        per_fold=per_fold,
        mean=mean,
        spread=spread,
        confusion=confusion,
        spread_kind="stderr" if use_stderr else "std",
        extras={"n_rows": len(labels)},
    )


def write_report(report: MetricsReport, out_dir: str | Path, prefix: str = "") -> dict[str, Path]:
    """fold_metrics.csv (fold,metric,value), summary.csv (metric,mean,std)
    and confusion.csv under out_dir; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    fold_path = out_dir / f"{prefix}fold_metrics.csv"
    with open(fold_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "metric", "value"])
        n_folds = len(next(iter(report.per_fold.values())))
        for f in range(n_folds):
            for m in METRIC_NAMES:
                writer.writerow([f, m, f"{report.per_fold[m][f]:.9g}"])
    paths["folds"] = fold_path

    summary_path = out_dir / f"{prefix}summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mean", report.spread_kind])
        for m, mean, spread in report.summary_rows():
            writer.writerow([m, f"{mean:.9g}", f"{spread:.9g}"])
    paths["summary"] = summary_path

    confusion_path = out_dir / f"{prefix}confusion.csv"
    with open(confusion_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + [Label(c).display for c in range(N_CLASSES)])
        for c in range(N_CLASSES):
            writer.writerow([Label(c).display] + [int(v) for v in report.confusion[c]])
    paths["confusion"] = confusion_path
    return paths


def format_report(report: MetricsReport, title: str = "cross-validation") -> str:
    lines = [title, "-" * len(title)]
    width = max(len(m) for m in METRIC_NAMES)
    for m, mean, spread in report.summary_rows():
        lines.append(f"{m:<{width}}  {mean:8.4f} +/- {spread:.4f} ({report.spread_kind})")
    lines.append("confusion (rows = true):")
    header = "          " + "".join(f"{Label(c).display:>10}" for c in range(N_CLASSES))
    lines.append(header)
    for c in range(N_CLASSES):
        lines.append(
            f"{Label(c).display:>10}" + "".join(f"{int(v):>10}" for v in report.confusion[c])
        )
    return "\n".join(lines)
