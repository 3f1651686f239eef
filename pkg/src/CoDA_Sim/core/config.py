"""Configuration module for CoDA-Sim.

Every tunable lives in one frozen dataclass per section. Defaults equal the
production deployment values where one exists (K=100, sigma=0.2, 12/25/40 batch
parameters, 200/200/100 storage and trigger thresholds, t=3, t'=7). Configuration
files are TOML with flat dotted sections, e.g.::

    cloud.k = 20
    filter.sigma = 0.3

or the equivalent table form (``[cloud]`` followed by ``k = 20``).
"""

import dataclasses
import json
import re
import tomllib
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Tuple

from CoDA_Sim.core import exceptions

ANIMATIONS: Tuple[str, ...] = ("bubble", "gif", "none")
ARMS: Tuple[str, ...] = ("cloud", "local", "coda")


@dataclasses.dataclass(frozen=True)
class PopulationConfig:
    """Synthetic population settings.

    Attributes:
        n_users: Number of simulated users (one device each).
        n_archetypes: Number of behavior archetypes users are assigned to.
        vocab_size: Number of distinct behavior tokens.
        n_items: Number of target items (icons).
        profile_dim: Length of the user profile vector.
        stats_dim: Length of the behavior statistics vector.
        noise: Half-width of the per-user click table perturbation.
        min_seq_len: Shortest behavior sequence an archetype may draw.
        max_seq_len: Longest behavior sequence an archetype may draw (<= 512).
        max_click_seq: Length cap of the item-click sequence.
    """

    n_users: int = 200
    n_archetypes: int = 8
    vocab_size: int = 1000
    n_items: int = 10
    profile_dim: int = 4
    stats_dim: int = 16
    noise: float = 0.05
    min_seq_len: int = 24
    max_seq_len: int = 64
    max_click_seq: int = 7


@dataclasses.dataclass(frozen=True)
class MatchConfig:
    """Cloud-side sample matching and batch serving settings.

    Attributes:
        k: Number of nearest neighbor users matched per target user.
        batch_size_default: Regular batch size.
        batch_size_max: Largest batch allowed when a fragment is absorbed.
        fragment_threshold: Remainders smaller than this merge into the last batch.
        retention_days: Matching results older than this many days are dropped.
        distance: Distance metric tag; only "euclidean" is supported.
        index: "exact" for the brute-force scan, "ivf" for the coarse quantizer.
        n_cells: Number of k-means cells of the coarse quantizer.
        n_search: Number of cells searched per query by the coarse quantizer.
    """

    k: int = 100
    batch_size_default: int = 25
    batch_size_max: int = 40
    fragment_threshold: int = 15
    retention_days: int = 7
    distance: str = "euclidean"
    index: str = "exact"
    n_cells: int = 16
    n_search: int = 4


@dataclasses.dataclass(frozen=True)
class TunnelConfig:
    """Down/up tunnel settings.

    Attributes:
        daily_limit: Maximum batches a device may pull per day.
        failure_rate: Probability that a simulated pull request is dropped.
        latency_s: Simulated latency added to each pull, in seconds.
        max_retries: Retries a device driver spends on a dropped pull.
    """

    daily_limit: int = 12
    failure_rate: float = 0.0
    latency_s: float = 0.0
    max_retries: int = 3


@dataclasses.dataclass(frozen=True)
class DeviceConfig:
    """On-device storage and trigger settings.

    Attributes:
        local_limit: Size limit of the local sample table.
        outside_limit: Size limit of the outside sample table.
        t: Local samples aged [0, t] days validate the recommender.
        t_prime: Local samples aged more than t_prime days are removed.
        train_trigger: Augmented sample count that triggers recommender training.
    """

    local_limit: int = 200
    outside_limit: int = 200
    t: int = 3
    t_prime: int = 7
    train_trigger: int = 100


@dataclasses.dataclass(frozen=True)
class FilterConfig:
    """Classifier-based sample filtering settings.

    Attributes:
        sigma: Inclusive score threshold for keeping an outside sample.
        classifier_fraction: Share of matched samples used to train the classifier.
    """

    sigma: float = 0.2
    classifier_fraction: float = 1.0 / 3.0


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Model shapes and optimizer settings.

    Attributes:
        embedding_dim: Embedding width shared by every model.
        init_scale: Parameters start uniform in (-init_scale, init_scale).
        classifier_hidden: Hidden layer widths of the sample classifier.
        recommender_hidden: Hidden layer widths of the CTR model.
        classifier_lr: SGD learning rate of the sample classifier.
        recommender_lr: SGD learning rate of on-device CTR training.
        batch_size: Mini-batch size of on-device training.
        classifier_steps: Class-balanced SGD steps per classifier update.
        recommender_epochs: Passes over the training set per trigger.
        global_lr: SGD learning rate of cloud-side global training.
        global_epochs: Passes over the pooled data in global training.
        global_batch_size: Mini-batch size of global training.
    """

    embedding_dim: int = 3
    init_scale: float = 0.05
    classifier_hidden: Tuple[int, ...] = (8,)
    recommender_hidden: Tuple[int, ...] = (16,)
    classifier_lr: float = 0.05
    recommender_lr: float = 0.01
    batch_size: int = 16
    classifier_steps: int = 10
    recommender_epochs: int = 1
    global_lr: float = 0.05
    global_epochs: int = 3
    global_batch_size: int = 64


@dataclasses.dataclass(frozen=True)
class ServeConfig:
    """Simulated serving settings.

    Attributes:
        exposures_per_day: Exposures served to each device per day.
        explore_rate: Probability of serving a uniformly drawn animation.
        eval_samples: Held-out samples per device for the final AUC.
    """

    exposures_per_day: int = 20
    explore_rate: float = 0.1
    eval_samples: int = 200


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration of one A/B experiment.

    Attributes:
        seed: Master seed; every random stream derives from it.
        days: Simulated experiment days.
        warmup_days: History days generated before the experiment starts.
        initial_local_samples: Local samples each device holds before day one.
        arms: Arms to run, a subset of ("cloud", "local", "coda").
        jobs: Worker threads used for device drivers.
        population: Synthetic population settings.
        cloud: Matching and batch serving settings.
        tunnel: Tunnel settings.
        device: Device storage settings.
        filter: Sample filtering settings.
        train: Model and optimizer settings.
        serve: Serving settings.
    """

    seed: int = 7
    days: int = 14
    warmup_days: int = 7
    initial_local_samples: int = 300
    arms: Tuple[str, ...] = ARMS
    jobs: int = 1
    population: PopulationConfig = PopulationConfig()
    cloud: MatchConfig = MatchConfig()
    tunnel: TunnelConfig = TunnelConfig()
    device: DeviceConfig = DeviceConfig()
    filter: FilterConfig = FilterConfig()
    train: TrainConfig = TrainConfig()
    serve: ServeConfig = ServeConfig()


SECTIONS: Dict[str, str] = {
    "population": "population",
    "cloud": "cloud",
    "tunnel": "tunnel",
    "device": "device",
    "filter": "filter",
    "train": "train",
    "serve": "serve",
    "experiment": "",
}


def _field_types(cls: type) -> Dict[str, Any]:
    return {field.name: field.type for field in dataclasses.fields(cls)}


def _coerce(value: Any, kind: Any, key: str, line: int | None) -> Any:
    """Converts a TOML value to the declared field type or raises ConfigError."""
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif kind is str:
        if isinstance(value, str):
            return value
    elif kind in (Tuple[int, ...], Tuple[str, ...]):
        item_kind = int if kind == Tuple[int, ...] else str
        if isinstance(value, list) and all(
            isinstance(item, item_kind) and not isinstance(item, bool)
            for item in value
        ):
            return tuple(value)
    else:
        return value
    raise exceptions.ConfigError(
        f"'{key}' expects {getattr(kind, '__name__', str(kind))}, got {value!r}",
        line=line,
    )


def _flatten(data: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, prefix=f"{name}."))
        else:
            flat[name] = value
    return flat


def find_key_line(text: str, dotted_key: str) -> int | None:
    """Finds the 1-based line on which a dotted key is assigned.

    Handles both ``section.key = ...`` and ``[section]`` followed by ``key = ...``.

    Args:
        text: Raw TOML text.
        dotted_key: Key such as "cloud.k".

    Returns:
        The line number, or None when the key cannot be located.
    """
    section, _, key = dotted_key.rpartition(".")
    table = ""
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.]+)\s*\]\s*(#.*)?$")
    for number, raw in enumerate(text.splitlines(), start=1):
        match = header.match(raw)
        if match:
            table = match.group(1)
            continue
        assignment = re.match(r"^\s*([A-Za-z0-9_.]+)\s*=", raw)
        if assignment is None:
            continue
        name = assignment.group(1)
        full = f"{table}.{name}" if table else name
        if full == dotted_key or (not section and full == key):
            return number
    return None


def _apply(
    config: ExperimentConfig, flat: Mapping[str, Any], text: str | None = None
) -> ExperimentConfig:
    """Applies flat dotted settings to a config, validating names and types."""
    sections: Dict[str, Dict[str, Any]] = {}
    top: Dict[str, Any] = {}
    top_types = _field_types(ExperimentConfig)
    for dotted, value in flat.items():
        line = find_key_line(text, dotted) if text is not None else None
        section, _, key = dotted.rpartition(".")
        if section in ("", "experiment"):
            if key not in top_types or key in SECTIONS:
                raise exceptions.ConfigError(f"unknown key '{dotted}'", line=line)
            top[key] = _coerce(value, top_types[key], dotted, line)
            continue
        if section not in SECTIONS:
            raise exceptions.ConfigError(f"unknown section '{section}'", line=line)
        section_cls = type(getattr(config, section))
        types = _field_types(section_cls)
        if key not in types:
            raise exceptions.ConfigError(f"unknown key '{dotted}'", line=line)
        sections.setdefault(section, {})[key] = _coerce(
            value, types[key], dotted, line
        )
    for section, values in sections.items():
        top[section] = dataclasses.replace(getattr(config, section), **values)
    resolved = dataclasses.replace(config, **top)
    validate(resolved, text)
    return resolved


def validate(config: ExperimentConfig, text: str | None = None) -> None:
    """Checks cross-field invariants of a resolved config.

    Args:
        config: The config to check.
        text: Source TOML text, used to report line numbers.

    Raises:
        ConfigError: If an invariant is violated.
    """

    def fail(key: str, message: str) -> None:
        line = find_key_line(text, key) if text is not None else None
        raise exceptions.ConfigError(message, line=line)

    cloud = config.cloud
    if cloud.k < 1:
        fail("cloud.k", "cloud.k must be >= 1")
    if not 0 < cloud.batch_size_default <= cloud.batch_size_max:
        fail(
            "cloud.batch_size_default",
            "require 0 < cloud.batch_size_default <= cloud.batch_size_max",
        )
    if cloud.distance != "euclidean":
        fail("cloud.distance", f"unsupported distance '{cloud.distance}'")
    if cloud.index not in ("exact", "ivf"):
        fail("cloud.index", f"unknown index '{cloud.index}'")
    if not 0.0 <= config.filter.sigma <= 1.0:
        fail("filter.sigma", "filter.sigma must lie in [0, 1]")
    if not 0.0 < config.filter.classifier_fraction < 1.0:
        fail("filter.classifier_fraction", "classifier_fraction must lie in (0, 1)")
    population = config.population
    if population.n_archetypes < 2:
        fail("population.n_archetypes", "population.n_archetypes must be >= 2")
    if population.n_users < population.n_archetypes:
        fail("population.n_users", "population.n_users must be >= n_archetypes")
    if not 1 <= population.min_seq_len <= population.max_seq_len <= 512:
        fail(
            "population.max_seq_len",
            "require 1 <= min_seq_len <= max_seq_len <= 512",
        )
    if not 0 <= config.device.t <= config.device.t_prime:
        fail("device.t", "require 0 <= device.t <= device.t_prime")
    if config.device.local_limit < 2 or config.device.outside_limit < 2:
        fail("device.local_limit", "table limits must be >= 2")
    if config.tunnel.daily_limit < 0:
        fail("tunnel.daily_limit", "tunnel.daily_limit must be >= 0")
    if not 0.0 <= config.tunnel.failure_rate < 1.0:
        fail("tunnel.failure_rate", "tunnel.failure_rate must lie in [0, 1)")
    unknown = [arm for arm in config.arms if arm not in ARMS]
    if unknown or not config.arms or len(set(config.arms)) != len(config.arms):
        fail("arms", f"arms must be distinct values of {list(ARMS)}")
    if config.days < 0 or config.warmup_days < 0:
        fail("days", "days and warmup_days must be >= 0")
    if config.jobs < 1:
        fail("jobs", "jobs must be >= 1")


def load_config(path: str | Path) -> ExperimentConfig:
    """Loads an experiment config from a TOML file.

    Args:
        path: Path of the TOML file.

    Returns:
        The resolved configuration.

    Raises:
        ConfigError: If the file is missing, unparsable or holds invalid values.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise exceptions.ConfigError(
            f"cannot read config: {err.strerror}", path=str(path)
        ) from err
    return parse_config(text, source=str(path))


def parse_config(
    text: str,
    source: str | None = None,
    base: ExperimentConfig | None = None,
) -> ExperimentConfig:
    """Parses TOML text into an ExperimentConfig.

    Args:
        text: TOML source.
        source: Path used in error messages.
        base: Config the settings are applied on top of.

    Returns:
        The resolved configuration.

    Raises:
        ConfigError: If the text is unparsable or holds invalid values.
    """
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        match = re.search(r"line (\d+)", str(err))
        line = int(match.group(1)) if match else None
        raise exceptions.ConfigError(
            f"invalid TOML: {err}", line=line, path=source
        ) from err
    try:
        return _apply(base or ExperimentConfig(), _flatten(data), text)
    except exceptions.ConfigError as err:
        if source is None:
            raise
        raise exceptions.ConfigError(err.message, line=err.line, path=source) from err


def apply_overrides(
    config: ExperimentConfig, overrides: Iterable[str]
) -> ExperimentConfig:
    """Applies ``key=value`` overrides, values written in TOML syntax.

    Bare words that are not valid TOML are taken as strings.

    Args:
        config: Config to update.
        overrides: Strings such as "cloud.k=20" or "filter.sigma=0.3".

    Returns:
        The updated configuration.

    Raises:
        ConfigError: If an override is malformed or invalid.
    """
    flat: Dict[str, Any] = {}
    for override in overrides:
        key, sep, raw = override.partition("=")
        if not sep or not key.strip():
            raise exceptions.ConfigError(f"override '{override}' is not key=value")
        try:
            value = tomllib.loads(f"value = {raw.strip()}")["value"]
        except tomllib.TOMLDecodeError:
            value = raw.strip()
        flat[key.strip()] = value
    return _apply(config, flat)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, tuple):
        return "[" + ", ".join(_format_value(item) for item in value) + "]"
    return json.dumps(value)


def dump_config(config: ExperimentConfig) -> str:
    """Renders a config as dotted-key TOML that parse_config reads back.

    Args:
        config: The configuration to render.

    Returns:
        TOML text, one ``key = value`` per line.
    """
    lines = []
    for field in dataclasses.fields(config):
        value = getattr(config, field.name)
        if dataclasses.is_dataclass(value):
            continue
        lines.append(f"{field.name} = {_format_value(value)}")
    for field in dataclasses.fields(config):
        value = getattr(config, field.name)
        if not dataclasses.is_dataclass(value):
            continue
        for inner in dataclasses.fields(value):
            rendered = _format_value(getattr(value, inner.name))
            lines.append(f"{field.name}.{inner.name} = {rendered}")
    return "\n".join(lines) + "\n"
