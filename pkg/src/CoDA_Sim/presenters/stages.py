"""Module providing single pipeline stages that run on file inputs.

Each stage reads its inputs, writes its artifacts into an output directory and
returns the written paths, so stages can be chained and checked one by one.

Stages and their inputs:

- gen: none -> samples.ldjson
- match: samples.ldjson -> matches.jsonl, oracle.jsonl
- encode: samples.ldjson -> payload.txt
- decode: payload.txt -> samples.ldjson
- filter: local.ldjson matched.ldjson -> kept.ldjson, filter.json
- train: train.ldjson [validation.ldjson] -> model.bin, train_report.json
- metrics: events.ldjson -> metrics.csv, ratios.json
"""

import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Callable, Dict, List, Sequence

import numpy as np

from CoDA_Sim.cloud import matching
from CoDA_Sim.core import config, exceptions, metrics, samples, synthdata
from CoDA_Sim.device import learning
from CoDA_Sim.mlkit import serialization, training
from CoDA_Sim.tunnel import codec
from CoDA_Sim.views import report_writer

logger = logging.getLogger(__name__)

StageFn = Callable[[Sequence[Path], Path, config.ExperimentConfig], List[Path]]


def _expect_inputs(name: str, inputs: Sequence[Path], low: int, high: int) -> None:
    if not low <= len(inputs) <= high:
        expected = str(low) if low == high else f"{low} to {high}"
        raise ValueError(
            f"Stage '{name}' takes {expected} input file(s), got {len(inputs)}."
        )


def _dump_jsonl(path: Path, records: Sequence[dict]) -> None:
    path.write_text(
        "".join(
            json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"
            for record in records
        ),
        encoding="utf-8",
    )


def stage_gen(
    inputs: Sequence[Path], out_dir: Path, settings: config.ExperimentConfig
) -> List[Path]:
    """Generates every user's samples for days [0, days)."""
    _expect_inputs("gen", inputs, 0, 0)
    population = synthdata.population_from_config(settings.population, settings.seed)
    generated = [
        sample
        for user in population.users
        for day in range(settings.days)
        for sample in population.gen_day(
            user.user_id, day, settings.serve.exposures_per_day
        )
    ]
    path = out_dir / "samples.ldjson"
    samples.write_samples(path, generated)
    return [path]


def stage_match(
    inputs: Sequence[Path], out_dir: Path, settings: config.ExperimentConfig
) -> List[Path]:
    """KNN neighbors of every user, plus the brute-force oracle lists."""
    _expect_inputs("match", inputs, 1, 1)
    by_user: Dict[int, List[samples.Sample]] = defaultdict(list)
    for sample in samples.read_samples(inputs[0]):
        by_user[sample.user_id].append(sample)
    vectors = matching.build_user_vectors(by_user)
    k = settings.cloud.k
    index = matching.ExactIndex(vectors) if vectors else None
    matches, oracle = [], []
    for user_id in sorted(vectors):
        result = matching.knn_match(user_id, vectors, k, index)
        matches.append(
            {
                "user_id": user_id,
                "neighbors": result.neighbors,
                "distances": result.distances,
                "short": result.short,
            }
        )
        oracle.append(
            {
                "user_id": user_id,
                "neighbors": matching.brute_force_knn(user_id, vectors, k),
            }
        )
    paths = [out_dir / "matches.jsonl", out_dir / "oracle.jsonl"]
    _dump_jsonl(paths[0], matches)
    _dump_jsonl(paths[1], oracle)
    return paths


def stage_encode(
    inputs: Sequence[Path], out_dir: Path, settings: config.ExperimentConfig
) -> List[Path]:
    """Encodes a sample file as tunnel payload text."""
    _expect_inputs("encode", inputs, 1, 1)
    payload = codec.encode_payload(samples.read_samples(inputs[0]))
    path = out_dir / "payload.txt"
    path.write_text(payload.text, encoding="ascii")
    logger.info(
        "Encoded %d raw bytes into %d characters (ratio %.3f).",
        payload.declared_raw_len,
        payload.compressed_len,
        payload.compression_ratio,
    )
    return [path]


def stage_decode(
    inputs: Sequence[Path], out_dir: Path, settings: config.ExperimentConfig
) -> List[Path]:
    """Decodes tunnel payload text back into a sample file."""
    _expect_inputs("decode", inputs, 1, 1)
    text = inputs[0].read_text(encoding="ascii").strip()
    path = out_dir / "samples.ldjson"
    samples.write_samples(path, codec.decode_text(text))
    return [path]


def stage_filter(
    inputs: Sequence[Path], out_dir: Path, settings: config.ExperimentConfig
) -> List[Path]:
    """Trains a fresh classifier on local vs. matched samples and filters."""
    _expect_inputs("filter", inputs, 2, 2)
    local = samples.read_samples(inputs[0])
    matched = samples.read_samples(inputs[1])
    rng = np.random.default_rng([settings.seed, 5])
    classifier = training.new_classifier(settings, settings.seed)
    outcome = learning.train_sample_classifier(
        classifier, local, matched, settings, rng
    )
    if outcome.skipped:
        raise exceptions.DegenerateDataError(
            "Filtering needs local samples and at least one matched training sample."
        )
    result = learning.filter_and_augment(
        outcome.classifier, outcome.filter_part, settings.filter.sigma
    )
    paths = [out_dir / "kept.ldjson", out_dir / "filter.json"]
    samples.write_samples(paths[0], result.kept)
    summary = {
        "sigma": settings.filter.sigma,
        "classifier_samples": len(outcome.train_part),
        "kept": len(result.kept),
        "discarded": result.discarded,
        "scores": result.scores,
    }
    paths[1].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return paths


def stage_train(
    inputs: Sequence[Path], out_dir: Path, settings: config.ExperimentConfig
) -> List[Path]:
    """Trains a CTR model; reports validation AUC when a second file is given."""
    _expect_inputs("train", inputs, 1, 2)
    train_set = samples.read_samples(inputs[0])
    labels = [sample.label for sample in train_set]
    model, report = training.fit(
        training.new_recommender(settings, settings.seed),
        train_set,
        labels,
        lr=settings.train.recommender_lr,
        epochs=settings.train.recommender_epochs,
        batch_size=settings.train.batch_size,
        rng=np.random.default_rng([settings.seed, 6]),
    )
    summary: Dict[str, object] = {
        "steps": report.steps,
        "final_loss": None if np.isnan(report.final_loss) else report.final_loss,
        "train_metric": report.acc,
    }
    if len(inputs) == 2:
        validation = samples.read_samples(inputs[1])
        val_labels = np.array([sample.label for sample in validation])
        summary["validation_metric"] = training.score_metric(
            model.predict(validation), val_labels
        )
    paths = [out_dir / "model.bin", out_dir / "train_report.json"]
    paths[0].write_bytes(serialization.dumps(model))
    paths[1].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return paths


def stage_metrics(
    inputs: Sequence[Path], out_dir: Path, settings: config.ExperimentConfig
) -> List[Path]:
    """Recomputes the online metrics of an event log."""
    _expect_inputs("metrics", inputs, 1, 1)
    events = metrics.read_exposures(inputs[0].read_text(encoding="utf-8"))
    report = metrics.compute_metrics(events)
    paths = [out_dir / "metrics.csv", out_dir / "ratios.json"]
    paths[0].write_text(report_writer.metrics_csv(report), encoding="utf-8")
    ratios = {arm: values.ratios() for arm, values in report.totals.items()}
    paths[1].write_text(json.dumps(ratios, indent=2, sort_keys=True) + "\n")
    return paths


STAGES: Dict[str, StageFn] = {
    "gen": stage_gen,
    "match": stage_match,
    "encode": stage_encode,
    "decode": stage_decode,
    "filter": stage_filter,
    "train": stage_train,
    "metrics": stage_metrics,
}


def run_stage(
    name: str,
    inputs: Sequence[str | Path],
    out_dir: str | Path,
    settings: config.ExperimentConfig,
) -> List[Path]:
    """Runs one named stage.

    Args:
        name: Stage name, a key of STAGES.
        inputs: Input files in the order the stage expects.
        out_dir: Directory receiving the artifacts; created when missing.
        settings: Experiment settings.

    Returns:
        Paths of the written artifacts.

    Raises:
        UnknownStageError: If the stage does not exist.
        ValueError: If the number of inputs is wrong.
    """
    stage = STAGES.get(name)
    if stage is None:
        raise exceptions.UnknownStageError(
            f"Unknown stage '{name}'; choose from {', '.join(STAGES)}."
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return stage([Path(p) for p in inputs], out, settings)
