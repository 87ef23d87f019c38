"""Deterministic local training, evaluation, and the centralized FedAvg oracle.

Models are deliberately small: full-batch gradient descent on linear or
logistic objectives over synthetic tabular data.  Full-batch steps remove all
randomness from training, which is what lets the consensus simulation be
compared bit-for-bit against the centralized baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ModelWeights

__all__ = [
    "Dataset",
    "TrainerConfig",
    "local_train",
    "training_loss",
    "evaluate",
    "centralized_fedavg",
    "synthetic_dataset",
    "save_dataset",
    "load_dataset",
]

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass
class Dataset:
    """Feature matrix plus labels owned by one node.

    ``row_ids`` are stable identities assigned by the generator; they exist so
    overlap between nodes' datasets can be measured without comparing values.
    """

    features: np.ndarray
    labels: np.ndarray
    owner: int = -1
    task: str = CLASSIFICATION
    row_ids: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if len(self.labels) != len(self.features):
            raise ValueError("features and labels differ in length")
        if not np.all(np.isfinite(self.features)) or not np.all(np.isfinite(self.labels)):
            raise ValueError("dataset contains non-finite values")
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown task {self.task!r}")
        if self.row_ids and len(self.row_ids) != len(self.features):
            raise ValueError("row_ids length mismatch")

    @property
    def count(self) -> int:
        return len(self.features)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class TrainerConfig:
    model: str = "linear"  # "linear" or "logistic"
    learning_rate: float = 0.1
    local_steps: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model not in ("linear", "logistic"):
            raise ValueError(f"unknown model kind {self.model!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.local_steps < 1:
            raise ValueError("need at least one local step")


def _gradient(w: np.ndarray, x: np.ndarray, y: np.ndarray, model: str) -> np.ndarray:
    if model == "linear":
        return 2.0 * x.T @ (x @ w - y) / len(x)
    p = 1.0 / (1.0 + np.exp(-(x @ w)))
    return x.T @ (p - y) / len(x)


def training_loss(w: ModelWeights, d: Dataset, model: str = "linear") -> float:
    """Mean squared error (linear) or mean cross-entropy (logistic)."""
    if d.count == 0:
        return 0.0
    x, y = d.features, d.labels
    z = x @ w.array
    if model == "linear":
        return float(np.mean((z - y) ** 2))
    p = np.clip(1.0 / (1.0 + np.exp(-z)), 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def local_train(w: ModelWeights, d: Dataset, cfg: TrainerConfig) -> ModelWeights:
    """Run the configured number of full-batch gradient steps from ``w``.

    Deterministic: same inputs give bit-identical outputs.  An empty dataset
    returns the weights unchanged.
    """
    if d.count == 0:
        return w
    if d.n_features != w.dim:
        raise ValueError(f"weight dim {w.dim} does not match {d.n_features} features")
    vec = w.array
    x, y = d.features, d.labels
    for _ in range(cfg.local_steps):
        vec = vec - cfg.learning_rate * _gradient(vec, x, y, cfg.model)
    if not np.all(np.isfinite(vec)):
        raise ValueError("training diverged to non-finite weights")
    return ModelWeights.from_array(vec)


def evaluate(w: ModelWeights, test: Dataset, model: str = "linear") -> float:
    """Score in [0, 1]: accuracy for classification, clipped R^2 for regression.

    Classification predicts class 1 when the linear score crosses the model's
    decision point (0.5 for least-squares on 0/1 labels, 0 for logistic).
    """
    if test.count == 0:
        raise ValueError("empty test set")
    if test.n_features != w.dim:
        raise ValueError("dimension mismatch")
    z = test.features @ w.array
    if test.task == CLASSIFICATION:
        threshold = 0.5 if model == "linear" else 0.0
        pred = (z >= threshold).astype(np.float64)
        return float(np.mean(pred == test.labels))
    ss_res = float(np.sum((test.labels - z) ** 2))
    ss_tot = float(np.sum((test.labels - np.mean(test.labels)) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0))


def centralized_fedavg(
    datasets: Sequence[Dataset],
    cfg: TrainerConfig,
    rounds: int,
    init: ModelWeights | None = None,
) -> ModelWeights:
    """Centralized baseline: per round, every node trains from the shared
    weights and the server takes the data-volume-weighted average.

    This is the correctness oracle the consensus run is compared against, so
    its aggregation arithmetic is written out independently of the protocol's
    merge path.
    """
    if not datasets:
        raise ValueError("no datasets")
    dims = {d.n_features for d in datasets}
    if len(dims) != 1:
        raise ValueError("datasets disagree on feature count")
    total = sum(d.count for d in datasets)
    if total == 0:
        raise ValueError("zero total data volume")
    q = dims.pop()
    w = init if init is not None else ModelWeights.from_array(np.zeros(q))
    for _ in range(rounds):
        acc = np.zeros(q)
        for d in datasets:
            local = local_train(w, d, cfg)
            acc += d.count * local.array
        w = ModelWeights.from_array(acc / total)
    return w


def synthetic_dataset(
    n_rows: int,
    feature_means: Sequence[float],
    feature_stds: Sequence[float],
    seed: int,
    *,
    task: str = CLASSIFICATION,
    true_weights: Sequence[float] | None = None,
    owner: int = -1,
    id_start: int = 0,
    label_noise: float = 0.0,
) -> Dataset:
    """Seed-driven i.i.d. tabular data with known generating distribution.

    Classification labels come from a fixed linear rule through the feature
    means (so classes are balanced-ish and linearly separable when
    ``label_noise`` is zero); regression labels are the same linear score plus
    Gaussian noise.
    """
    means = np.asarray(feature_means, dtype=np.float64)
    stds = np.asarray(feature_stds, dtype=np.float64)
    if means.shape != stds.shape or means.ndim != 1:
        raise ValueError("means and stds must be matching vectors")
    rng = np.random.default_rng(seed)
    x = rng.normal(means, stds, size=(n_rows, len(means)))
    if true_weights is None:
        tw = np.ones(len(means))
    else:
        tw = np.asarray(true_weights, dtype=np.float64)
    score = (x - means) @ tw
    if label_noise > 0:
        score = score + rng.normal(0.0, label_noise, size=n_rows)
    if task == CLASSIFICATION:
        y = (score >= 0.0).astype(np.float64)
    else:
        y = score
    ids = tuple(range(id_start, id_start + n_rows))
    return Dataset(x, y, owner=owner, task=task, row_ids=ids)


def save_dataset(d: Dataset, path: str) -> None:
    """Write the columnar text format: header of feature names plus label."""
    with open(path, "w", encoding="utf-8") as fh:
        names = [f"f{i}" for i in range(d.n_features)] + ["label"]
        fh.write("\t".join(names) + "\n")
        for row, label in zip(d.features, d.labels):
            cells = [repr(float(v)) for v in row] + [repr(float(label))]
            fh.write("\t".join(cells) + "\n")


def load_dataset(path: str, *, owner: int = -1, task: str = CLASSIFICATION) -> Dataset:
    """Read the columnar text format written by :func:`save_dataset`."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split("\t")
        if not header or header[-1] != "label":
            raise ValueError("missing label column in header")
        q = len(header) - 1
        xs: list[list[float]] = []
        ys: list[float] = []
        for line in fh:
            cells = line.strip().split("\t")
            if len(cells) != q + 1:
                raise ValueError("row width does not match header")
            xs.append([float(c) for c in cells[:q]])
            ys.append(float(cells[-1]))
    return Dataset(np.array(xs).reshape(len(xs), q), np.array(ys), owner=owner, task=task)
