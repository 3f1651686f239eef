"""Mini-batch SGD loops shared by cloud and device training."""

import dataclasses
import logging
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from CoDA_Sim.core import config, exceptions, samples
from CoDA_Sim.mlkit import models, ops

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class TrainReport:
    """Outcome of one training call.

    Attributes:
        final_loss: Loss of the last step taken, or NaN when no step ran.
        acc: Validation metric in [0, 1] (AUC unless stated otherwise).
        steps: Number of SGD steps taken.
    """

    final_loss: float
    acc: float
    steps: int

    def __post_init__(self) -> None:
        """Checks the metric range."""
        if not 0.0 <= self.acc <= 1.0:
            raise ValueError(f"acc must lie in [0, 1], got {self.acc}.")


def new_classifier(
    settings: config.ExperimentConfig, seed: int
) -> models.ClassifierModel:
    """Builds a freshly initialized sample classifier."""
    return models.ClassifierModel(
        vocab_size=settings.population.vocab_size,
        hidden=settings.train.classifier_hidden,
        embedding_dim=settings.train.embedding_dim,
        seed=seed,
        init_scale=settings.train.init_scale,
    )


def new_recommender(
    settings: config.ExperimentConfig, seed: int
) -> models.RecommenderModel:
    """Builds a freshly initialized CTR model."""
    population = settings.population
    return models.RecommenderModel(
        vocab_size=population.vocab_size,
        n_items=population.n_items,
        dense_dim=population.profile_dim + population.stats_dim,
        hidden=settings.train.recommender_hidden,
        embedding_dim=settings.train.embedding_dim,
        seed=seed,
        init_scale=settings.train.init_scale,
    )


def minibatch_indices(
    n: int, batch_size: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    """Yields shuffled index blocks covering range(n) once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1.")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def score_metric(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUC when both classes are present, otherwise accuracy at 0.5."""
    labels = np.asarray(labels)
    if labels.size and 0 < labels.sum() < labels.size:
        return ops.auc(scores, labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean((np.asarray(scores) >= 0.5) == (labels == 1)))


def fit(
    model: models.Model,
    data: Sequence[samples.Sample],
    labels: Sequence[int],
    lr: float,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
) -> Tuple[models.Model, TrainReport]:
    """Plain mini-batch SGD over a labeled dataset.

    Args:
        model: Starting model; left untouched.
        data: Training samples.
        labels: One binary label per sample.
        lr: Learning rate.
        epochs: Passes over the data.
        batch_size: Mini-batch size.
        rng: Generator that shuffles each epoch.

    Returns:
        The trained model and a report whose metric is measured on the
        training data.
    """
    label_arr = np.asarray(labels, dtype=np.float64)
    if len(data) != label_arr.size:
        raise ValueError("Every sample needs exactly one label.")
    if not data:
        return model.copy(), TrainReport(float("nan"), 0.0, 0)
    batch = model.encode(data)
    loss = float("nan")
    steps = 0
    for _ in range(epochs):
        for indices in minibatch_indices(len(data), batch_size, rng):
            model, loss = models.sgd_step_batch(
                model, batch.take(indices), label_arr[indices], lr
            )
            steps += 1
    metric = score_metric(model.predict_batch(batch), label_arr)
    return model, TrainReport(loss, metric, steps)


def fit_balanced(
    model: models.Model,
    positives: Sequence[samples.Sample],
    negatives: Sequence[samples.Sample],
    lr: float,
    steps: int,
    batch_size: int,
    rng: np.random.Generator,
) -> Tuple[models.Model, TrainReport]:
    """Class-balanced SGD: every mini-batch is half positives, half negatives.

    Each half is drawn with replacement, so the minority class is oversampled.

    Args:
        model: Starting model; left untouched.
        positives: Samples labeled 1.
        negatives: Samples labeled 0.
        lr: Learning rate.
        steps: Number of SGD steps.
        batch_size: Mini-batch size, split evenly between the classes.
        rng: Generator of the draws.

    Returns:
        The trained model and a report with its AUC over both classes.

    Raises:
        DegenerateDataError: If either class is empty.
    """
    if not positives or not negatives:
        raise exceptions.DegenerateDataError("Balanced training needs both classes.")
    data: List[samples.Sample] = list(positives) + list(negatives)
    labels = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    batch = model.encode(data)
    half = max(batch_size // 2, 1)
    loss = float("nan")
    for _ in range(steps):
        pos = rng.integers(0, len(positives), size=half)
        neg = len(positives) + rng.integers(0, len(negatives), size=half)
        indices = np.concatenate([pos, neg])
        model, loss = models.sgd_step_batch(
            model, batch.take(indices), labels[indices], lr
        )
    metric = ops.auc(model.predict_batch(batch), labels)
    logger.debug("Balanced fit: %d steps, loss %.4f, auc %.4f", steps, loss, metric)
    return model, TrainReport(loss, metric, steps)
