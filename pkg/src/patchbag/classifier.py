"""Shallow MLP over encoded histograms: k -> hidden (ReLU) -> 4 (softmax),
trained with seeded mini-batch SGD on cross-entropy plus an L2 penalty
(lambda/2) * sum ||W||^2 on the weights (biases excluded).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import Cursor, FileFormatError, FormatErrorCode, read_framed, write_framed
from .seeding import derive_seed

MODEL_MAGIC = b"PBML"
MODEL_VERSION = 1
N_CLASSES = 4
PROB_FLOOR = 1e-12


class DegenerateLabelsError(ValueError):
    """Training data contains fewer than two classes."""


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class InputShapeError(ValueError):
    pass


@dataclass
class TrainConfig:
    hidden: int = 100
    l2: float = 0.2
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0


@dataclass
class MlpModel:
    weights: list[np.ndarray]  # [W1 (k, hidden), W2 (hidden, 4)]
    biases: list[np.ndarray]  # [b1 (hidden,), b2 (4,)]
    l2: float
    seed: int
    train_config: TrainConfig | None = None
    final_loss: float = field(default=float("nan"))

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward(model: MlpModel, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hidden = np.maximum(rows @ model.weights[0] + model.biases[0], 0.0)
    probs = _softmax(hidden @ model.weights[1] + model.biases[1])
    return hidden, probs


def init_model(k: int, config: TrainConfig) -> MlpModel:
    """He-initialized hidden layer, Glorot output layer, seeded."""
    rng = np.random.default_rng(config.seed)
    w1 = rng.normal(0.0, np.sqrt(2.0 / k), size=(k, config.hidden))
    w2 = rng.normal(0.0, np.sqrt(1.0 / config.hidden), size=(config.hidden, N_CLASSES))
    return MlpModel(
        weights=[w1, w2],
        biases=[np.zeros(config.hidden), np.zeros(N_CLASSES)],
        l2=config.l2,
        seed=config.seed,
        train_config=config,
    )


def loss_and_gradients(
    model: MlpModel, rows: np.ndarray, labels: np.ndarray
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Regularized objective and its exact gradients for one batch.

    Objective: mean cross-entropy over the batch + (l2/2) * sum ||W||^2.
    """
    n = rows.shape[0]
    hidden, probs = _forward(model, rows)
    ce = -np.log(np.maximum(probs[np.arange(n), labels], PROB_FLOOR)).mean()
    reg = 0.5 * model.l2 * sum(float((w * w).sum()) for w in model.weights)

    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    dw2 = hidden.T @ dlogits + model.l2 * model.weights[1]
    db2 = dlogits.sum(axis=0)
    dhidden = (dlogits @ model.weights[1].T) * (hidden > 0.0)
    dw1 = rows.T @ dhidden + model.l2 * model.weights[0]
    db1 = dhidden.sum(axis=0)
    return ce + reg, [dw1, dw2], [db1, db2]


def train_mlp(rows: np.ndarray, labels: np.ndarray, config: TrainConfig) -> MlpModel:
    """Mini-batch SGD with per-epoch seeded shuffling; returns the fit model
    with its final full-data training loss attached."""
    rows = np.asarray(rows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if rows.ndim != 2 or rows.shape[0] != labels.shape[0]:
        raise InputShapeError(f"rows {rows.shape} do not match {labels.shape[0]} labels")
    if not np.isfinite(rows).all():
        raise InputShapeError("training rows contain non-finite values")
    if np.unique(labels).size < 2:
        raise DegenerateLabelsError("training data has a single class; nothing to separate")

    model = init_model(rows.shape[1], config)
    rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    n = rows.shape[0]
    batch = max(1, min(config.batch_size, n))

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            value, dws, dbs = loss_and_gradients(model, rows[idx], labels[idx])
            epoch_loss += value
            n_batches += 1
            for w, dw in zip(model.weights, dws):
                w -= config.learning_rate * dw
            for b, db in zip(model.biases, dbs):
                b -= config.learning_rate * db
        if not np.isfinite(epoch_loss / n_batches):
            raise DivergenceError(epoch)
        for w in model.weights:
            if not np.isfinite(w).all():
                raise DivergenceError(epoch)

    model.final_loss = cross_entropy(model, rows, labels)
    return model


def predict(model: MlpModel, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities (rows sum to 1) and argmax labels (ties -> lowest)."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != model.weights[0].shape[0]:
        raise InputShapeError(
            f"rows of width {rows.shape[-1]} do not fit model input {model.weights[0].shape[0]}"
        )
    _, probs = _forward(model, rows)
    return probs, np.argmax(probs, axis=1)


def cross_entropy(model: MlpModel, rows: np.ndarray, labels: np.ndarray) -> float:
    """Mean -log p(true class), natural log, clamped at 1e-12; no L2 term."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= N_CLASSES:
        raise InputShapeError("labels must be in 0..3")
    probs, _ = predict(model, rows)
    picked = np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR)
    return float(-np.log(picked).mean())


def write_model(model: MlpModel, path: str | Path) -> None:
    """magic | version u16 | n_layers u8 | dims u32[] | lambda f32 | seed u64 |
    float32 parameters (W then b per layer) | CRC32."""
    dims = model.layer_dims
    payload = struct.pack("<HB", MODEL_VERSION, len(dims))
    payload += struct.pack(f"<{len(dims)}I", *dims)
    payload += struct.pack("<fQ", model.l2, model.seed)
    for w, b in zip(model.weights, model.biases):
        payload += np.ascontiguousarray(w, dtype="<f4").tobytes()
        payload += np.ascontiguousarray(b, dtype="<f4").tobytes()
    write_framed(path, MODEL_MAGIC, payload)


def read_model(path: str | Path) -> MlpModel:
    cur = Cursor(read_framed(path, MODEL_MAGIC), context=str(path))
    version, n_layers = cur.unpack("HB")
    if version != MODEL_VERSION:
        raise FileFormatError(
            FormatErrorCode.BAD_VERSION, f"{path}: version {version}, expected {MODEL_VERSION}"
        )
    dims = list(cur.unpack(f"{n_layers}I")) if n_layers > 1 else [cur.unpack("I")]
    l2, seed = cur.unpack("fQ")
    weights, biases = [], []
    for i in range(len(dims) - 1):
        raw = cur.take(dims[i] * dims[i + 1] * 4)
        weights.append(np.frombuffer(raw, dtype="<f4").reshape(dims[i], dims[i + 1]).astype(np.float64))
        raw = cur.take(dims[i + 1] * 4)
        biases.append(np.frombuffer(raw, dtype="<f4").astype(np.float64))
    cur.expect_end()
    return MlpModel(weights=weights, biases=biases, l2=float(l2), seed=seed)
