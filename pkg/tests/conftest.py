"""Common fixtures for CoDA-Sim testing."""

import dataclasses
from typing import Callable, Sequence

import pytest

from CoDA_Sim.core import config, samples, synthdata

SampleFactory = Callable[..., samples.Sample]


@pytest.fixture
def small_settings() -> config.ExperimentConfig:
    """Creates an experiment config small enough for unit tests.

    Returns:
        A config with 6 users, a 40-token vocabulary and tiny models.
    """
    base = config.ExperimentConfig()
    return dataclasses.replace(
        base,
        days=2,
        warmup_days=2,
        initial_local_samples=20,
        population=dataclasses.replace(
            base.population,
            n_users=6,
            n_archetypes=2,
            vocab_size=40,
            n_items=4,
            profile_dim=2,
            stats_dim=4,
            min_seq_len=3,
            max_seq_len=6,
            max_click_seq=3,
        ),
        cloud=dataclasses.replace(base.cloud, k=3),
        device=dataclasses.replace(base.device, train_trigger=10),
        train=dataclasses.replace(
            base.train,
            classifier_hidden=(4,),
            recommender_hidden=(5,),
            global_epochs=2,
            global_batch_size=16,
        ),
        serve=dataclasses.replace(base.serve, exposures_per_day=5, eval_samples=20),
    )


@pytest.fixture
def population(small_settings: config.ExperimentConfig) -> synthdata.Population:
    """Creates the population described by the small settings.

    Returns:
        A deterministic population seeded with the config seed.
    """
    return synthdata.population_from_config(
        small_settings.population, small_settings.seed
    )


@pytest.fixture
def make_sample() -> SampleFactory:
    """Creates a factory of hand-made samples matching the small settings.

    Returns:
        A function building a sample from an id and optional field overrides.
    """

    def factory(
        sample_id: int,
        user_id: int = 0,
        day: int = 0,
        label: int = 0,
        behavior_seq: Sequence[int] = (1, 2, 3),
        target_item: int = 0,
        animation: str = "none",
        behavior_stats: Sequence[float] = (0.25, 0.25, 0.25, 0.25),
    ) -> samples.Sample:
        return samples.Sample(
            sample_id=sample_id,
            user_id=user_id,
            day=day,
            target_item=target_item,
            animation=animation,
            profile=(0.1, -0.2),
            click_seq=(1,),
            behavior_seq=tuple(behavior_seq),
            behavior_stats=tuple(behavior_stats),
            label=label,
        )

    return factory
