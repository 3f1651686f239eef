"""Module providing the on-device learning tasks.

``train_sample_classifier`` and ``filter_and_augment`` form the filtering task:
matched samples are split, a third trains the classifier against the device's
own samples and the rest is scored and kept when the score reaches sigma.
``train_recommender`` is the validation-gated personalized training: a
mini-batch update is kept only when it strictly improves AUC on local
validation samples.
"""

import dataclasses
import logging
from typing import List, Sequence, Tuple

import numpy as np

from CoDA_Sim.core import config, exceptions, samples
from CoDA_Sim.device import model_store as model_store_lib
from CoDA_Sim.device import store as store_lib
from CoDA_Sim.mlkit import models, ops, training

logger = logging.getLogger(__name__)

STATUS_TRAINED = "trained"
STATUS_NO_SAMPLES = "no_samples"
STATUS_ABORTED = "aborted"


@dataclasses.dataclass(frozen=True)
class ClassifierOutcome:
    """Result of one classifier update.

    Attributes:
        classifier: The classifier after the update (unchanged when skipped).
        train_part: Matched samples used as classifier negatives.
        filter_part: Matched samples left for filtering.
        report: Training report, None when training was skipped.
        skipped: True when a class was missing.
    """

    classifier: models.ClassifierModel
    train_part: List[samples.Sample]
    filter_part: List[samples.Sample]
    report: training.TrainReport | None
    skipped: bool


@dataclasses.dataclass(frozen=True)
class FilterOutcome:
    """Result of scoring matched samples.

    Attributes:
        kept: Samples with score >= sigma, labels unchanged.
        scores: Scores of the kept samples.
        discarded: Number of samples below sigma.
    """

    kept: List[samples.Sample]
    scores: List[float]
    discarded: int


@dataclasses.dataclass(frozen=True)
class RecommenderOutcome:
    """Result of one validation-gated training call.

    Attributes:
        report: Final loss, validation AUC and steps tried.
        status: STATUS_TRAINED, STATUS_NO_SAMPLES or STATUS_ABORTED.
        decision: "commit", "rollback" or None when no transaction was opened.
        accepted: Validation AUC after each accepted update, in order.
        initial_acc: Validation AUC before training, NaN when not measured.
    """

    report: training.TrainReport
    status: str
    decision: str | None = None
    accepted: Tuple[float, ...] = ()
    initial_acc: float = float("nan")


def split_matched(
    matched: Sequence[samples.Sample], fraction: float, rng: np.random.Generator
) -> Tuple[List[samples.Sample], List[samples.Sample]]:
    """Shuffles matched samples and splits off round(n * fraction) for training.

    Returns:
        (classifier part, filter part).
    """
    order = rng.permutation(len(matched))
    n_train = int(round(len(matched) * fraction))
    shuffled = [matched[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


def train_sample_classifier(
    classifier: models.ClassifierModel,
    local: Sequence[samples.Sample],
    matched: Sequence[samples.Sample],
    settings: config.ExperimentConfig,
    rng: np.random.Generator,
) -> ClassifierOutcome:
    """Warm-start update of the sample classifier.

    Local samples are positives, the classifier share of the matched samples
    negatives. Mini-batches are class balanced.

    Args:
        classifier: Classifier carried over from earlier updates.
        local: The device's own samples.
        matched: Pending matched samples of one batch.
        settings: Experiment settings.
        rng: Generator of the split and the mini-batch draws.

    Returns:
        The outcome; ``skipped`` when either class is empty.
    """
    train_part, filter_part = split_matched(
        matched, settings.filter.classifier_fraction, rng
    )
    if not local or not train_part:
        logger.debug(
            "Skipping classifier update: %d local, %d outside.",
            len(local),
            len(train_part),
        )
        return ClassifierOutcome(classifier, train_part, filter_part, None, True)
    updated, report = training.fit_balanced(
        classifier,
        local,
        train_part,
        lr=settings.train.classifier_lr,
        steps=settings.train.classifier_steps,
        batch_size=settings.train.batch_size,
        rng=rng,
    )
    assert isinstance(updated, models.ClassifierModel)
    return ClassifierOutcome(updated, train_part, filter_part, report, False)


def filter_by_scores(
    candidates: Sequence[samples.Sample], scores: Sequence[float], sigma: float
) -> FilterOutcome:
    """Keeps the candidates whose score is at least sigma."""
    if len(candidates) != len(scores):
        raise ValueError("Need exactly one score per candidate.")
    kept = [(s, float(v)) for s, v in zip(candidates, scores) if v >= sigma]
    return FilterOutcome(
        kept=[sample for sample, _ in kept],
        scores=[score for _, score in kept],
        discarded=len(candidates) - len(kept),
    )


def filter_and_augment(
    classifier: models.ClassifierModel,
    candidates: Sequence[samples.Sample],
    sigma: float,
    device_store: store_lib.DeviceStore | None = None,
    day: int = 0,
) -> FilterOutcome:
    """Scores candidates and stores the kept ones as augmented samples.

    Args:
        classifier: A trained sample classifier.
        candidates: Matched samples to filter.
        sigma: Inclusive threshold.
        device_store: Store receiving the kept samples, if any.
        day: Arrival day recorded in the store.

    Returns:
        The filter outcome.
    """
    if not candidates:
        return FilterOutcome([], [], 0)
    scores = classifier.predict(candidates)
    outcome = filter_by_scores(candidates, scores, sigma)
    if device_store is not None and outcome.kept:
        device_store.ingest_matched_batch(outcome.kept, day, outcome.scores)
    return outcome


def _validation_auc(
    model: models.Model, batch: models.Batch, labels: np.ndarray
) -> float:
    return ops.auc(model.predict_batch(batch), labels)


def train_recommender(
    device_store: store_lib.DeviceStore,
    model_store: model_store_lib.ModelStore,
    settings: config.ExperimentConfig,
    now_day: int,
    rng: np.random.Generator,
    use_augmented: bool = True,
) -> RecommenderOutcome:
    """Validation-gated mini-batch training of the serving model.

    Trains on older local samples (plus augmented ones when ``use_augmented``)
    in one shuffled pass per epoch. Each mini-batch update is validated on recent
    local samples and kept only on a strict AUC increase. The transaction commits
    when at least one update was kept and rolls back otherwise. Augmented samples
    used are marked consumed.

    Args:
        device_store: The device's sample tables.
        model_store: The device's model slots.
        settings: Experiment settings.
        now_day: Current day, used for the sample roles.
        rng: Generator of the mini-batch order.
        use_augmented: False trains on local samples only.

    Returns:
        The outcome.

    Raises:
        NonFiniteGradientError: If backprop diverges; the transaction is
            rolled back first.
    """
    dataset = device_store.augmented_view(now_day, use_augmented)
    train_set = dataset.recommender_train
    if not train_set:
        return RecommenderOutcome(
            training.TrainReport(float("nan"), 0.0, 0), STATUS_NO_SAMPLES
        )
    validation = dataset.validation
    model = model_store.begin_training()
    val_labels = np.array([s.label for s in validation], dtype=np.float64)
    if val_labels.size == 0 or val_labels.min() == val_labels.max():
        model_store.rollback()
        logger.info("Training aborted on day %d: degenerate validation set.", now_day)
        return RecommenderOutcome(
            training.TrainReport(float("nan"), 0.0, 0),
            STATUS_ABORTED,
            decision="rollback",
        )
    val_batch = model.encode(validation)
    acc = initial = _validation_auc(model, val_batch, val_labels)
    train_batch = model.encode(train_set)
    train_labels = np.array([s.label for s in train_set], dtype=np.float64)
    accepted: List[float] = []
    loss = float("nan")
    steps = 0
    try:
        for _ in range(settings.train.recommender_epochs):
            for indices in training.minibatch_indices(
                len(train_set), settings.train.batch_size, rng
            ):
                candidate, loss = models.sgd_step_batch(
                    model,
                    train_batch.take(indices),
                    train_labels[indices],
                    settings.train.recommender_lr,
                )
                steps += 1
                candidate_acc = _validation_auc(candidate, val_batch, val_labels)
                if candidate_acc > acc:
                    model, acc = candidate, candidate_acc
                    accepted.append(acc)
        if accepted:
            model_store.update_buffer(model)
    except exceptions.NonFiniteGradientError:
        model_store.rollback()
        raise
    decision = model_store.commit_or_rollback(bool(accepted))
    device_store.mark_consumed(s.sample_id for s in dataset.augmented)
    logger.debug(
        "Day %d training: %d steps, %d accepted, AUC %.4f -> %.4f (%s).",
        now_day,
        steps,
        len(accepted),
        initial,
        acc,
        decision,
    )
    return RecommenderOutcome(
        training.TrainReport(loss, acc, steps),
        STATUS_TRAINED,
        decision=decision,
        accepted=tuple(accepted),
        initial_acc=initial,
    )
