"""Module providing the synthetic non-iid user population.

Users are assigned round-robin to archetypes. An archetype fixes a behavior-token
distribution concentrated on a few "home" regions of the vocabulary, a base click
probability table over (item, animation) and a range of sequence lengths. Each
user perturbs the archetype click table by a small uniform offset.

Every draw comes from ``numpy.random.default_rng`` seeded by a tuple derived
from the population seed, so generation is replayable from (seed, user_id, day).
"""

import dataclasses
from typing import List, Sequence, Tuple

import numpy as np

from CoDA_Sim.core import config, exceptions, samples

STREAM_HISTORY = 0
STREAM_EVAL = 1

_HOME_MASS = 0.65
_HISTORY_STEP_MAX = 4


@dataclasses.dataclass(eq=False)
class Archetype:
    """A behavior archetype shared by a group of users.

    Attributes:
        archetype_id: Index of the archetype.
        token_probs: Categorical distribution over behavior tokens.
        click_table: Base click probability, shape (n_items, n_animations).
        seq_len_range: Inclusive (low, high) range of behavior sequence lengths.
        profile_center: Mean profile vector of the archetype's users.
    """

    archetype_id: int
    token_probs: np.ndarray
    click_table: np.ndarray
    seq_len_range: Tuple[int, int]
    profile_center: np.ndarray


@dataclasses.dataclass(eq=False)
class SynthUser:
    """A simulated user.

    Attributes:
        user_id: Id of the user, equal to its device id.
        archetype_id: Archetype the user belongs to.
        noise: Per-user offset added to the archetype click table.
        click_table: Perturbed click table clamped to [0, 1].
        profile: Profile vector carried by every sample of the user.
        seed: Seed of the user's private random stream.
    """

    user_id: int
    archetype_id: int
    noise: np.ndarray
    click_table: np.ndarray
    profile: Tuple[float, ...]
    seed: int


@dataclasses.dataclass(frozen=True)
class Exposure:
    """One simulated exposure before an animation has been chosen.

    Attributes:
        context: Sample carrying the exposure features and the logged animation.
        click_draw: Uniform draw in [0, 1); the exposure is clicked iff it is
            smaller than the click probability of the served animation.
        explore_draw: Uniform draw deciding whether serving explores.
        explore_animation: Animation index served when exploring.
    """

    context: samples.Sample
    click_draw: float
    explore_draw: float
    explore_animation: int


class Population:
    """A deterministic population of users and archetypes.

    Attributes:
        seed: Seed every draw derives from.
        settings: Population configuration.
        archetypes: Archetype table.
        users: Users indexed by user id.
    """

    def __init__(
        self,
        seed: int,
        settings: config.PopulationConfig,
        archetypes: List[Archetype],
        users: List[SynthUser],
    ) -> None:
        """Initializes the population.

        Args:
            seed: Seed every draw derives from.
            settings: Population configuration.
            archetypes: Archetype table.
            users: Users; user_id must equal the list position.
        """
        self.seed = seed
        self.settings = settings
        self.archetypes = archetypes
        self.users = users

    def user(self, user_id: int) -> SynthUser:
        """Returns a user by id.

        Raises:
            UnknownEntityError: If the id does not exist.
        """
        if not 0 <= user_id < len(self.users):
            raise exceptions.UnknownEntityError(f"Unknown user id {user_id}.")
        return self.users[user_id]

    def click_oracle(
        self, user_id: int, target_item: int, animation: int | str
    ) -> float:
        """Returns the exact click probability used to draw labels.

        Args:
            user_id: Id of the user.
            target_item: Id of the exposed item.
            animation: Animation name or index.

        Returns:
            The perturbed click probability in [0, 1].

        Raises:
            UnknownEntityError: If any id is unknown.
        """
        user = self.user(user_id)
        if isinstance(animation, str):
            if animation not in config.ANIMATIONS:
                raise exceptions.UnknownEntityError(f"Unknown animation {animation}.")
            animation = config.ANIMATIONS.index(animation)
        if not 0 <= animation < len(config.ANIMATIONS):
            raise exceptions.UnknownEntityError(f"Unknown animation {animation}.")
        if not 0 <= target_item < self.settings.n_items:
            raise exceptions.UnknownEntityError(f"Unknown item {target_item}.")
        return float(user.click_table[target_item, animation])

    def gen_exposures(
        self, user_id: int, day: int, n_exposures: int, stream: int = STREAM_HISTORY
    ) -> List[Exposure]:
        """Draws the exposure contexts of one user-day.

        The behavior sequence of exposure i is a sliding window over the user's
        token history for that day, so samples of one day share most tokens.

        Args:
            user_id: Id of the user.
            day: Day index.
            n_exposures: Number of exposures to draw, >= 1.
            stream: Independent stream id (history/serving or evaluation).

        Returns:
            The exposures in serving order.
        """
        if n_exposures < 1:
            raise exceptions.EmptyInputError("n_exposures must be >= 1.")
        user = self.user(user_id)
        archetype = self.archetypes[user.archetype_id]
        settings = self.settings
        rng = np.random.default_rng([user.seed, day, stream])

        low, high = archetype.seq_len_range
        window = int(rng.integers(low, high + 1))
        steps = rng.integers(0, _HISTORY_STEP_MAX, size=n_exposures)
        ends = window + np.cumsum(steps)
        history = rng.choice(
            settings.vocab_size, size=int(ends[-1]), p=archetype.token_probs
        )

        affinity = user.click_table.mean(axis=1) + 1e-3
        n_clicked = int(rng.integers(0, settings.max_click_seq + 1))
        click_seq = tuple(
            int(item)
            for item in rng.choice(
                settings.n_items, size=n_clicked, p=affinity / affinity.sum()
            )
        )

        items = rng.integers(0, settings.n_items, size=n_exposures)
        logged = rng.integers(0, len(config.ANIMATIONS), size=n_exposures)
        click_draws = rng.random(n_exposures)
        explore_draws = rng.random(n_exposures)
        explore_animations = rng.integers(0, len(config.ANIMATIONS), size=n_exposures)

        exposures = []
        for index in range(n_exposures):
            end = int(ends[index])
            sequence = tuple(int(t) for t in history[end - window : end])
            context = samples.Sample(
                sample_id=samples.make_sample_id(user_id, day, index, stream),
                user_id=user_id,
                day=day,
                target_item=int(items[index]),
                animation=config.ANIMATIONS[int(logged[index])],
                profile=user.profile,
                click_seq=click_seq,
                behavior_seq=sequence,
                behavior_stats=behavior_statistics(
                    sequence, settings.vocab_size, settings.stats_dim
                ),
                label=0,
            )
            exposures.append(
                Exposure(
                    context=context,
                    click_draw=float(click_draws[index]),
                    explore_draw=float(explore_draws[index]),
                    explore_animation=int(explore_animations[index]),
                )
            )
        return exposures

    def label(self, exposure: Exposure, animation: int) -> samples.Sample:
        """Serves an exposure with an animation and draws the click.

        Args:
            exposure: The exposure to serve.
            animation: Index of the served animation.

        Returns:
            The labeled sample recording the served animation.
        """
        context = exposure.context
        probability = self.click_oracle(context.user_id, context.target_item, animation)
        return dataclasses.replace(
            context,
            animation=config.ANIMATIONS[animation],
            label=int(exposure.click_draw < probability),
        )

    def gen_day(
        self, user_id: int, day: int, n_exposures: int, stream: int = STREAM_HISTORY
    ) -> List[samples.Sample]:
        """Generates one labeled sample per exposure of a user-day.

        Labels are Bernoulli draws from the user's perturbed click table at the
        logged (uniformly drawn) animation.

        Args:
            user_id: Id of the user.
            day: Day index.
            n_exposures: Number of samples, >= 1.
            stream: Independent stream id.

        Returns:
            The samples of the day.
        """
        return [
            self.label(exposure, exposure.context.animation_index)
            for exposure in self.gen_exposures(user_id, day, n_exposures, stream)
        ]

    def to_bytes(self) -> bytes:
        """Returns a byte fingerprint of every generated parameter."""
        parts: List[bytes] = []
        for archetype in self.archetypes:
            parts.append(archetype.token_probs.tobytes())
            parts.append(archetype.click_table.tobytes())
            parts.append(np.array(archetype.seq_len_range).tobytes())
        for user in self.users:
            ids = np.array([user.user_id, user.archetype_id, user.seed])
            parts.append(ids.tobytes())
            parts.append(user.click_table.tobytes())
            parts.append(np.array(user.profile).tobytes())
        return b"".join(parts)


def behavior_statistics(
    sequence: Sequence[int], vocab_size: int, stats_dim: int
) -> Tuple[float, ...]:
    """Bucketed token histogram of a behavior sequence, rounded to 4 decimals.

    Args:
        sequence: Behavior token ids.
        vocab_size: Size of the behavior vocabulary.
        stats_dim: Number of histogram buckets.

    Returns:
        Fraction of tokens in each bucket.
    """
    if not sequence:
        return tuple(0.0 for _ in range(stats_dim))
    buckets = np.asarray(sequence, dtype=np.int64) * stats_dim // vocab_size
    counts = np.bincount(buckets, minlength=stats_dim)[:stats_dim]
    return tuple(float(round(c / len(sequence), 4)) for c in counts)


def make_population(
    n_users: int,
    n_archetypes: int,
    seed: int,
    settings: config.PopulationConfig | None = None,
) -> Population:
    """Builds a deterministic population.

    Args:
        n_users: Number of users, >= n_archetypes.
        n_archetypes: Number of archetypes, >= 2.
        seed: Seed of every draw.
        settings: Remaining population settings; n_users/n_archetypes here win.

    Returns:
        The population.

    Raises:
        InvalidPopulationError: If the sizes are invalid.
    """
    if n_archetypes < 2:
        raise exceptions.InvalidPopulationError("n_archetypes must be >= 2.")
    if n_users < n_archetypes:
        raise exceptions.InvalidPopulationError("n_users must be >= n_archetypes.")
    settings = dataclasses.replace(
        settings or config.PopulationConfig(),
        n_users=n_users,
        n_archetypes=n_archetypes,
    )
    rng = np.random.default_rng([seed, 0])
    vocab = settings.vocab_size
    token_bucket = np.arange(vocab) * settings.stats_dim // vocab
    bucket_order = rng.permutation(settings.stats_dim)
    n_animations = len(config.ANIMATIONS)

    archetypes = []
    for archetype_id in range(n_archetypes):
        home = [
            bucket_order[(2 * archetype_id) % settings.stats_dim],
            bucket_order[(2 * archetype_id + 1) % settings.stats_dim],
        ]
        home_mask = np.isin(token_bucket, home)
        weights = rng.gamma(1.0, size=vocab) * home_mask
        token_probs = (1.0 - _HOME_MASS) / vocab + _HOME_MASS * weights / weights.sum()
        token_probs = token_probs / token_probs.sum()
        low = int(rng.integers(settings.min_seq_len, settings.max_seq_len + 1))
        high = int(rng.integers(low, settings.max_seq_len + 1))
        archetypes.append(
            Archetype(
                archetype_id=archetype_id,
                token_probs=token_probs,
                click_table=rng.beta(1.5, 6.0, size=(settings.n_items, n_animations)),
                seq_len_range=(low, high),
                profile_center=rng.normal(0.0, 1.0, size=settings.profile_dim),
            )
        )

    users = []
    for user_id in range(n_users):
        archetype = archetypes[user_id % n_archetypes]
        user_rng = np.random.default_rng([seed, 1, user_id])
        noise = user_rng.uniform(
            -settings.noise, settings.noise, size=archetype.click_table.shape
        )
        profile = archetype.profile_center + user_rng.normal(
            0.0, 0.3, size=settings.profile_dim
        )
        users.append(
            SynthUser(
                user_id=user_id,
                archetype_id=archetype.archetype_id,
                noise=noise,
                click_table=np.clip(archetype.click_table + noise, 0.0, 1.0),
                profile=tuple(float(round(v, 3)) for v in profile),
                seed=int(user_rng.integers(0, 2**31 - 1)),
            )
        )
    return Population(seed, settings, archetypes, users)


def population_from_config(
    settings: config.PopulationConfig, seed: int
) -> Population:
    """Builds the population described by a PopulationConfig."""
    return make_population(settings.n_users, settings.n_archetypes, seed, settings)
