"""Module providing the oracle suites run by ``coda-sim verify``.

Every suite checks a fast component against an independent slow reference and
returns a SuiteResult instead of raising, so one failing suite does not hide the
others. ``quick`` shrinks the instance counts for smoke runs.
"""

import dataclasses
import logging
import math
import tempfile
from collections import Counter
from typing import Callable, Dict, List

import numpy as np

from CoDA_Sim.cloud import match_index, matching
from CoDA_Sim.core import config, exceptions, samples, synthdata
from CoDA_Sim.device import model_store, store
from CoDA_Sim.mlkit import models, ops, serialization, training

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class SuiteResult:
    """Outcome of one oracle suite.

    Attributes:
        name: Suite name.
        passed: Whether every check agreed with the oracle.
        detail: Human readable summary.
    """

    name: str
    passed: bool
    detail: str


def _random_vectors(
    rng: np.random.Generator, n: int, dim: int
) -> Dict[int, matching.UserVector]:
    raw = rng.normal(size=(n, dim))
    # coarse rounding creates exact distance ties
    raw = np.round(raw, 1) + 1e-3
    unit = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return {i: matching.UserVector(i, unit[i]) for i in range(n)}


def knn_suite(quick: bool = False) -> SuiteResult:
    """knn_match against the brute-force scan on random populations."""
    rng = np.random.default_rng(11)
    populations = 4 if quick else 20
    mismatches = checked = 0
    for instance in range(populations):
        n = int(rng.integers(2, 200 if quick else 2_000))
        vectors = _random_vectors(rng, n, 16)
        index = matching.ExactIndex(vectors)
        k = (1, 5, 20, 100)[instance % 4]
        targets = rng.choice(n, size=min(n, 5), replace=False)
        for target in targets:
            fast = matching.knn_match(int(target), vectors, k, index).neighbors
            slow = matching.brute_force_knn(int(target), vectors, k)
            checked += 1
            mismatches += int(fast != slow)
    return SuiteResult(
        "knn", mismatches == 0, f"{mismatches} mismatches in {checked} queries"
    )


def auc_suite(quick: bool = False) -> SuiteResult:
    """Rank AUC against the pairwise definition."""
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(10 if quick else 100):
        n = int(rng.integers(2, 300))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        deviation = abs(ops.auc(scores, labels) - ops.pairwise_auc(scores, labels))
        worst = max(worst, deviation)
    return SuiteResult("auc", worst <= 1e-12, f"max deviation {worst:.3e}")


def _small_settings() -> config.ExperimentConfig:
    population = dataclasses.replace(
        config.PopulationConfig(),
        n_users=8,
        n_archetypes=2,
        vocab_size=40,
        n_items=4,
        stats_dim=4,
        min_seq_len=3,
        max_seq_len=6,
        max_click_seq=3,
    )
    train = dataclasses.replace(
        config.TrainConfig(),
        classifier_hidden=(4,),
        recommender_hidden=(5,),
        init_scale=0.5,
    )
    return dataclasses.replace(
        config.ExperimentConfig(), population=population, train=train
    )


def grad_suite(quick: bool = False) -> SuiteResult:
    """Backprop gradients against central finite differences."""
    settings = _small_settings()
    worst = 0.0
    for seed in range(2 if quick else 10):
        population = synthdata.population_from_config(settings.population, seed)
        batch = population.gen_day(seed % settings.population.n_users, 0, 6)
        minibatch = [(sample, i % 2) for i, sample in enumerate(batch)]
        for model in (
            training.new_classifier(settings, seed),
            training.new_recommender(settings, seed),
        ):
            worst = max(worst, models.grad_check(model, minibatch))
    return SuiteResult("grad", worst < 1e-4, f"max relative error {worst:.3e}")


def _dummy_sample(sample_id: int, day: int) -> samples.Sample:
    return samples.Sample(
        sample_id=sample_id,
        user_id=0,
        day=day,
        target_item=0,
        animation=config.ANIMATIONS[sample_id % len(config.ANIMATIONS)],
        profile=(0.0,),
        click_seq=(),
        behavior_seq=(1,),
        behavior_stats=(1.0,),
        label=sample_id % 2,
    )


def lifecycle_suite(quick: bool = False) -> SuiteResult:
    """Randomized ingest/GC operations against a full-sort eviction oracle."""
    rng = np.random.default_rng(13)
    settings = config.DeviceConfig()
    device_store = store.DeviceStore(settings)
    failures: List[str] = []
    next_id = 0
    day = 0
    for _ in range(1_000 if quick else 10_000):
        op = int(rng.integers(0, 4))
        if op == 0:
            next_id += 1
            sample = _dummy_sample(next_id, day - int(rng.integers(0, 3)))
            before = dict(device_store.local)
            if len(before) >= settings.local_limit:
                keep = math.ceil(settings.local_limit / 2)
                order = sorted(before.values(), key=lambda e: (e.day, e.seq))
                expected = {e.sample.sample_id for e in order[len(order) - keep :]}
                device_store.add_local([sample])
                if set(device_store.local) != expected | {sample.sample_id}:
                    failures.append("local eviction differs from oracle")
            else:
                device_store.add_local([sample])
        elif op == 1:
            next_id += 1
            sample = _dummy_sample(next_id, day)
            score = None if rng.random() < 0.3 else round(float(rng.random()), 2)
            before = dict(device_store.outside)
            scores = None if score is None else [score]
            if len(before) >= settings.outside_limit:
                keep = math.ceil(settings.outside_limit / 2)
                order = sorted(
                    before.values(), key=lambda e: (e.effective_score, e.seq)
                )
                expected = {e.sample.sample_id for e in order[len(order) - keep :]}
                device_store.ingest_matched_batch([sample], day, scores)
                if set(device_store.outside) != expected | {sample.sample_id}:
                    failures.append("outside eviction differs from oracle")
            else:
                device_store.ingest_matched_batch([sample], day, scores)
        elif op == 2:
            day += 1
            device_store.run_lifecycle_gc(day)
            if any(
                day - e.day > settings.t_prime for e in device_store.local.values()
            ):
                failures.append("aged local sample survived GC")
        else:
            used = {s.sample_id for s in device_store.augmented()[:5]}
            device_store.mark_consumed(used)
            if used & {s.sample_id for s in device_store.augmented()}:
                failures.append("consumed sample still augmented")
        if len(device_store.local) > settings.local_limit:
            failures.append("local table over limit")
        if len(device_store.outside) > settings.outside_limit:
            failures.append("outside table over limit")
        if failures:
            break
    return SuiteResult(
        "lifecycle", not failures, failures[0] if failures else "all operations ok"
    )


class _Crash(Exception):
    pass


def version_control_suite(quick: bool = False) -> SuiteResult:
    """Randomized train/commit/rollback/infer interleavings and crash recovery."""
    settings = _small_settings()
    population = synthdata.population_from_config(settings.population, 0)
    query = population.gen_day(0, 0, 4)
    rng = np.random.default_rng(14)
    failures: List[str] = []
    locked_scores: List[float] = []

    def observe(step: str) -> None:
        if step in ("locked", "overwritten"):
            locked_scores.append(slots.infer(query[0]))

    slots = model_store.ModelStore(crash_hook=observe)
    slots.initialize(training.new_recommender(settings, 0))
    backup = slots.slot_bytes(model_store.BACKUP)
    assert backup is not None
    m0_score = serialization.loads(backup).forward(query[0])
    for _ in range(200 if quick else 1_000):
        serving = slots.slot_bytes(model_store.SERVING)
        if slots.in_transaction:
            if rng.random() < 0.5:
                buffer = slots.slot_bytes(model_store.BUFFER)
                slots.commit()
                if slots.slot_bytes(model_store.SERVING) != buffer:
                    failures.append("commit did not install the buffer")
            else:
                slots.rollback()
                if slots.slot_bytes(model_store.SERVING) != serving:
                    failures.append("rollback changed M")
        else:
            model = slots.begin_training()
            model.params["output/b"] += rng.normal()
            slots.update_buffer(model)
        if slots.in_transaction:
            slots.infer(query[int(rng.integers(0, len(query)))])
        if any(score != m0_score for score in locked_scores):
            failures.append("locked inference did not serve M0")
        if slots.slot_bytes(model_store.BACKUP) != backup:
            failures.append("M0 changed")
        if failures:
            break
    for crash_step in model_store.COMMIT_STEPS:
        with tempfile.TemporaryDirectory() as tmp:

            def hook(name: str, crash_at: str = crash_step) -> None:
                if name == crash_at:
                    raise _Crash(name)

            disk = model_store.ModelStore(tmp, crash_hook=hook)
            disk.initialize(training.new_recommender(settings, 1))
            before = disk.slot_bytes(model_store.SERVING)
            model = disk.begin_training()
            model.params["output/b"] += 1.0
            disk.update_buffer(model)
            buffer = disk.slot_bytes(model_store.BUFFER)
            try:
                disk.commit()
            except _Crash:
                pass
            recovered = model_store.ModelStore.open(tmp)
            serving = recovered.slot_bytes(model_store.SERVING)
            if recovered.in_transaction or recovered.write_locked:
                failures.append(f"recovery after '{crash_step}' left state open")
            if serving not in (before, buffer):
                failures.append(f"recovery after '{crash_step}' tore M")
            elif serving != buffer:
                failures.append(f"commit lost after '{crash_step}'")
    return SuiteResult(
        "version_control",
        not failures,
        failures[0] if failures else "all interleavings ok",
    )


def dedup_suite(quick: bool = False) -> SuiteResult:
    """Payload bytes of a heavily overlapping matching stay near unique bytes.

    Unique bytes are counted from the matching itself: every sample matched to
    at least one user, packed once. The matching must share samples between
    users for the check to mean anything.
    """
    settings = dataclasses.replace(config.MatchConfig(), k=20)
    population = synthdata.make_population(
        40 if quick else 100, 4, 15, config.PopulationConfig()
    )
    by_user = {
        user.user_id: population.gen_day(user.user_id, 0, 10)
        for user in population.users
    }
    catalog = {
        sample.sample_id: sample
        for user_samples in by_user.values()
        for sample in user_samples
    }
    vectors = matching.build_user_vectors(by_user)
    index = match_index.MatchIndex(settings)
    matched_to: Counter[int] = Counter()
    for target in sorted(vectors):
        result = matching.knn_match(target, vectors, settings.k)
        matched = matching.matched_samples(result.neighbors, by_user)
        matched_to.update({sample.sample_id for sample in matched})
        index.build_batches(target, matched, 1)
    if not matched_to or max(matched_to.values()) < 2:
        return SuiteResult("dedup", False, "no sample matched to several users")
    unique = sum(
        len(match_index.pack_sample(catalog[sample_id])) for sample_id in matched_to
    )
    stored = index.payload_bytes()
    ratio = stored / unique
    ok = (
        ratio <= 1.1
        and set(index.sample_map) == set(matched_to)
        and not index.check_references()
    )
    return SuiteResult(
        "dedup",
        ok,
        f"payload/unique bytes {ratio:.3f}, "
        f"up to {max(matched_to.values())} users per sample",
    )


SUITES: Dict[str, Callable[[bool], SuiteResult]] = {
    "knn": knn_suite,
    "auc": auc_suite,
    "grad": grad_suite,
    "lifecycle": lifecycle_suite,
    "version_control": version_control_suite,
    "dedup": dedup_suite,
}


def run_suites(quick: bool = False) -> List[SuiteResult]:
    """Runs every suite; an unexpected exception fails only its suite."""
    results = []
    for name, suite in SUITES.items():
        try:
            result = suite(quick)
        except exceptions.CoDAError as err:
            result = SuiteResult(name, False, f"error: {err}")
        except Exception as err:
            result = SuiteResult(name, False, f"Unexpected error: {str(err)}")
        logger.info("Suite %s: %s (%s)", name, result.passed, result.detail)
        results.append(result)
    return results
