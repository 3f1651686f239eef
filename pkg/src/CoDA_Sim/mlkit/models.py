"""Embedding + attention-pooling + MLP models with hand-written backprop.

Two models share the same machinery:

- ``ClassifierModel`` scores whether a sample looks local. It only reads the
  behavior sequence: token embeddings are mean-pooled and fed to a tanh MLP.
- ``RecommenderModel`` predicts CTR. The target item embedding attends to the
  item-click sequence and to the behavior sequence (scaled dot product through
  a learned d x d matrix, softmax, weighted sum); the pooled vectors, the
  target and animation embeddings, the profile and the behavior statistics are
  concatenated and fed to a tanh MLP.

Both end in a logistic output. Parameters are float64 arrays kept in an ordered
dict; models are plain values and ``copy`` returns an independent one.
"""

import dataclasses
from typing import Dict, List, Sequence, Tuple

import numpy as np

from CoDA_Sim.core import config, exceptions, samples
from CoDA_Sim.mlkit import ops

KIND_CLASSIFIER = 1
KIND_RECOMMENDER = 2


@dataclasses.dataclass
class Batch:
    """Padded array view of a list of samples.

    Attributes:
        behavior: Behavior token ids, shape (n, max_len), padded with 0.
        behavior_mask: True where ``behavior`` holds a real token.
        clicks: Clicked item ids, shape (n, max_clicks), padded with 0.
        clicks_mask: True where ``clicks`` holds a real item.
        items: Target item ids, shape (n,).
        animations: Animation indices, shape (n,).
        dense: Profile and behavior statistics, shape (n, dense_dim).
    """

    behavior: np.ndarray
    behavior_mask: np.ndarray
    clicks: np.ndarray
    clicks_mask: np.ndarray
    items: np.ndarray
    animations: np.ndarray
    dense: np.ndarray

    def __len__(self) -> int:
        """Number of samples in the batch."""
        return int(self.items.shape[0])

    def take(self, indices: np.ndarray) -> "Batch":
        """Returns the sub-batch at the given row indices."""
        return Batch(
            behavior=self.behavior[indices],
            behavior_mask=self.behavior_mask[indices],
            clicks=self.clicks[indices],
            clicks_mask=self.clicks_mask[indices],
            items=self.items[indices],
            animations=self.animations[indices],
            dense=self.dense[indices],
        )


def _pad(sequences: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    width = max([len(seq) for seq in sequences] + [1])
    ids = np.zeros((len(sequences), width), dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = seq
        mask[row, : len(seq)] = True
    return ids, mask


def encode_samples(batch: Sequence[samples.Sample]) -> Batch:
    """Converts samples into padded arrays."""
    behavior, behavior_mask = _pad([s.behavior_seq for s in batch])
    clicks, clicks_mask = _pad([s.click_seq for s in batch])
    dense_rows = [tuple(s.profile) + tuple(s.behavior_stats) for s in batch]
    width = len(dense_rows[0]) if dense_rows else 0
    if any(len(row) != width for row in dense_rows):
        raise ValueError("Samples carry dense features of different lengths.")
    return Batch(
        behavior=behavior,
        behavior_mask=behavior_mask,
        clicks=clicks,
        clicks_mask=clicks_mask,
        items=np.array([s.target_item for s in batch], dtype=np.int64),
        animations=np.array(
            [config.ANIMATIONS.index(s.animation) for s in batch], dtype=np.int64
        ),
        dense=np.array(dense_rows, dtype=np.float64).reshape(len(batch), width),
    )


def _check_ids(ids: np.ndarray, mask: np.ndarray, size: int, name: str) -> None:
    valid = ids[mask]
    if valid.size and (valid.min() < 0 or valid.max() >= size):
        raise exceptions.OutOfVocabularyError(
            f"{name} id outside vocabulary of size {size}."
        )


class Model:
    """Base class holding parameters, initialization and the MLP head.

    Attributes:
        kind: Serialization kind code.
        seed: Seed the parameters were initialized from.
        embedding_dim: Embedding width.
        hidden: Hidden layer widths of the MLP.
        params: Ordered parameter arrays keyed by layer name.
    """

    kind: int = 0

    def __init__(
        self,
        seed: int,
        embedding_dim: int,
        hidden: Sequence[int],
        init_scale: float = 0.05,
    ) -> None:
        """Initializes bookkeeping; subclasses call ``_init_params``.

        Args:
            seed: Seed of the uniform initializer.
            embedding_dim: Embedding width.
            hidden: Hidden layer widths.
            init_scale: Half-width of the uniform initializer.
        """
        self.seed = seed
        self.embedding_dim = embedding_dim
        self.hidden = tuple(hidden)
        self.init_scale = init_scale
        self.params: Dict[str, np.ndarray] = {}

    def _init_params(self, shapes: List[Tuple[str, Tuple[int, ...]]]) -> None:
        rng = np.random.default_rng(self.seed)
        for name, shape in shapes:
            self.params[name] = rng.uniform(-self.init_scale, self.init_scale, shape)

    def _mlp_shapes(self, input_dim: int) -> List[Tuple[str, Tuple[int, ...]]]:
        shapes: List[Tuple[str, Tuple[int, ...]]] = []
        width = input_dim
        for index, units in enumerate(self.hidden):
            shapes.append((f"dense_{index}/W", (width, units)))
            shapes.append((f"dense_{index}/b", (units,)))
            width = units
        shapes.append(("output/W", (width,)))
        shapes.append(("output/b", (1,)))
        return shapes

    def hparams(self) -> List[int]:
        """Integer hyper-parameters needed to rebuild the model."""
        raise NotImplementedError

    @classmethod
    def from_hparams(cls, seed: int, hparams: Sequence[int]) -> "Model":
        """Builds a model of this class from serialized hyper-parameters."""
        raise NotImplementedError

    def parameter_count(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Model":
        """Returns an independent copy of the model."""
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {name: p.copy() for name, p in self.params.items()}
        return clone

    def encode(self, batch: Sequence[samples.Sample]) -> Batch:
        """Encodes samples and checks them against the model vocabularies."""
        raise NotImplementedError

    def _features(self, batch: Batch) -> Tuple[np.ndarray, dict]:
        raise NotImplementedError

    def _features_backward(
        self, batch: Batch, cache: dict, d_x: np.ndarray, grads: Dict[str, np.ndarray]
    ) -> None:
        raise NotImplementedError

    def _mlp(self, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        activations = [x]
        h = x
        for index in range(len(self.hidden)):
            weight = self.params[f"dense_{index}/W"]
            h = np.tanh(h @ weight + self.params[f"dense_{index}/b"])
            activations.append(h)
        logits = h @ self.params["output/W"] + self.params["output/b"][0]
        return logits, activations

    def predict_batch(self, batch: Batch) -> np.ndarray:
        """Scores an encoded batch; every score lies in (0, 1)."""
        x, _ = self._features(batch)
        logits, _ = self._mlp(x)
        return ops.logistic(logits)

    def predict(self, batch: Sequence[samples.Sample]) -> np.ndarray:
        """Scores a list of samples."""
        return self.predict_batch(self.encode(batch))

    def forward(self, sample: samples.Sample) -> float:
        """Scores one sample.

        Raises:
            OutOfVocabularyError: If a feature id is outside the vocabulary.
        """
        return float(self.predict([sample])[0])

    def loss_and_grads(
        self, batch: Batch, labels: np.ndarray
    ) -> Tuple[float, Dict[str, np.ndarray]]:
        """Mean BCE loss and its gradient with respect to every parameter.

        Args:
            batch: Encoded samples.
            labels: Binary labels, shape (n,).

        Returns:
            The loss at the current parameters and the gradient per layer.
        """
        labels = np.asarray(labels, dtype=np.float64)
        n = len(batch)
        x, cache = self._features(batch)
        logits, activations = self._mlp(x)
        scores = ops.logistic(logits)
        loss = ops.clamped_bce(scores, labels)

        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        d_logits = (scores - labels) / n
        h = activations[-1]
        grads["output/W"] = h.T @ d_logits
        grads["output/b"] = np.array([d_logits.sum()])
        d_h = np.outer(d_logits, self.params["output/W"])
        for index in reversed(range(len(self.hidden))):
            h = activations[index + 1]
            d_z = d_h * (1.0 - h * h)
            grads[f"dense_{index}/W"] = activations[index].T @ d_z
            grads[f"dense_{index}/b"] = d_z.sum(axis=0)
            d_h = d_z @ self.params[f"dense_{index}/W"].T
        self._features_backward(batch, cache, d_h, grads)
        return loss, grads


class ClassifierModel(Model):
    """Sample classifier over the behavior sequence only.

    Attributes:
        vocab_size: Behavior token vocabulary size.
    """

    kind = KIND_CLASSIFIER

    def __init__(
        self,
        vocab_size: int,
        hidden: Sequence[int] = (8,),
        embedding_dim: int = 3,
        seed: int = 0,
        init_scale: float = 0.05,
    ) -> None:
        """Initializes the classifier with seeded uniform parameters.

        Args:
            vocab_size: Behavior token vocabulary size.
            hidden: Hidden layer widths.
            embedding_dim: Embedding width.
            seed: Initializer seed.
            init_scale: Half-width of the uniform initializer.
        """
        super().__init__(seed, embedding_dim, hidden, init_scale)
        self.vocab_size = vocab_size
        self._init_params(
            [("embedding", (vocab_size, embedding_dim))]
            + self._mlp_shapes(embedding_dim)
        )

    def hparams(self) -> List[int]:
        """Integer hyper-parameters needed to rebuild the model."""
        return [self.vocab_size, self.embedding_dim, len(self.hidden), *self.hidden]

    @classmethod
    def from_hparams(cls, seed: int, hparams: Sequence[int]) -> "ClassifierModel":
        """Builds a classifier from serialized hyper-parameters."""
        vocab_size, embedding_dim, n_hidden, *hidden = hparams
        if len(hidden) != n_hidden:
            raise exceptions.ModelFormatError("Classifier header is inconsistent.")
        return cls(vocab_size, tuple(hidden), embedding_dim, seed)

    def encode(self, batch: Sequence[samples.Sample]) -> Batch:
        """Encodes samples and checks behavior tokens against the vocabulary."""
        encoded = encode_samples(batch)
        _check_ids(encoded.behavior, encoded.behavior_mask, self.vocab_size, "Token")
        return encoded

    def _features(self, batch: Batch) -> Tuple[np.ndarray, dict]:
        mask = batch.behavior_mask.astype(np.float64)
        counts = np.maximum(mask.sum(axis=1), 1.0)
        emb = self.params["embedding"][batch.behavior] * mask[..., None]
        return emb.sum(axis=1) / counts[:, None], {"mask": mask, "counts": counts}

    def _features_backward(
        self, batch: Batch, cache: dict, d_x: np.ndarray, grads: Dict[str, np.ndarray]
    ) -> None:
        scaled = d_x / cache["counts"][:, None]
        per_token = scaled[:, None, :] * cache["mask"][..., None]
        np.add.at(
            grads["embedding"],
            batch.behavior[batch.behavior_mask],
            per_token[batch.behavior_mask],
        )


class RecommenderModel(Model):
    """CTR model with target attention over the click and behavior sequences.

    Attributes:
        vocab_size: Behavior token vocabulary size.
        n_items: Number of target items.
        n_animations: Number of animation types.
        dense_dim: Width of the profile + statistics input.
    """

    kind = KIND_RECOMMENDER

    def __init__(
        self,
        vocab_size: int,
        n_items: int,
        dense_dim: int,
        hidden: Sequence[int] = (16,),
        embedding_dim: int = 3,
        seed: int = 0,
        init_scale: float = 0.05,
        n_animations: int = len(config.ANIMATIONS),
    ) -> None:
        """Initializes the recommender with seeded uniform parameters.

        Args:
            vocab_size: Behavior token vocabulary size.
            n_items: Number of target items.
            dense_dim: Width of the profile + statistics input.
            hidden: Hidden layer widths.
            embedding_dim: Embedding width.
            seed: Initializer seed.
            init_scale: Half-width of the uniform initializer.
            n_animations: Number of animation types.
        """
        super().__init__(seed, embedding_dim, hidden, init_scale)
        self.vocab_size = vocab_size
        self.n_items = n_items
        self.n_animations = n_animations
        self.dense_dim = dense_dim
        d = embedding_dim
        self._init_params(
            [
                ("behavior_embedding", (vocab_size, d)),
                ("item_embedding", (n_items, d)),
                ("animation_embedding", (n_animations, d)),
                ("attention/behavior", (d, d)),
                ("attention/click", (d, d)),
            ]
            + self._mlp_shapes(4 * d + dense_dim)
        )

    def hparams(self) -> List[int]:
        """Integer hyper-parameters needed to rebuild the model."""
        return [
            self.vocab_size,
            self.n_items,
            self.n_animations,
            self.dense_dim,
            self.embedding_dim,
            len(self.hidden),
            *self.hidden,
        ]

    @classmethod
    def from_hparams(cls, seed: int, hparams: Sequence[int]) -> "RecommenderModel":
        """Builds a recommender from serialized hyper-parameters."""
        vocab_size, n_items, n_animations, dense_dim, embedding_dim = hparams[:5]
        n_hidden, *hidden = hparams[5:]
        if len(hidden) != n_hidden:
            raise exceptions.ModelFormatError("Recommender header is inconsistent.")
        return cls(
            vocab_size,
            n_items,
            dense_dim,
            tuple(hidden),
            embedding_dim,
            seed,
            n_animations=n_animations,
        )

    def encode(self, batch: Sequence[samples.Sample]) -> Batch:
        """Encodes samples and checks every id against its vocabulary."""
        encoded = encode_samples(batch)
        _check_ids(encoded.behavior, encoded.behavior_mask, self.vocab_size, "Token")
        _check_ids(encoded.clicks, encoded.clicks_mask, self.n_items, "Clicked item")
        everything = np.ones_like(encoded.items, dtype=bool)
        _check_ids(encoded.items, everything, self.n_items, "Target item")
        _check_ids(encoded.animations, everything, self.n_animations, "Animation")
        if encoded.dense.shape[1] != self.dense_dim:
            raise ValueError(
                f"Expected {self.dense_dim} dense features, "
                f"got {encoded.dense.shape[1]}."
            )
        return encoded

    def _attend(
        self,
        query_emb: np.ndarray,
        keys: np.ndarray,
        mask: np.ndarray,
        weight: np.ndarray,
    ) -> Tuple[np.ndarray, dict]:
        scale = 1.0 / np.sqrt(self.embedding_dim)
        query = query_emb @ weight
        logits = np.einsum("nld,nd->nl", keys, query) * scale
        logits = np.where(mask, logits, -np.inf)
        row_max = np.max(logits, axis=1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        expo = np.where(mask, np.exp(logits - row_max), 0.0)
        totals = expo.sum(axis=1, keepdims=True)
        alpha = expo / np.where(totals > 0, totals, 1.0)
        pooled = np.einsum("nl,nld->nd", alpha, keys)
        return pooled, {"query": query, "keys": keys, "alpha": alpha, "scale": scale}

    def _attend_backward(
        self,
        query_emb: np.ndarray,
        weight: np.ndarray,
        cache: dict,
        d_pooled: np.ndarray,
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns gradients for (keys, query embedding, attention weight)."""
        alpha, keys, query, scale = (
            cache["alpha"],
            cache["keys"],
            cache["query"],
            cache["scale"],
        )
        d_alpha = np.einsum("nld,nd->nl", keys, d_pooled)
        d_logits = alpha * (d_alpha - (alpha * d_alpha).sum(axis=1, keepdims=True))
        d_keys = alpha[..., None] * d_pooled[:, None, :]
        d_keys += (d_logits * scale)[..., None] * query[:, None, :]
        d_query = np.einsum("nl,nld->nd", d_logits, keys) * scale
        d_weight = query_emb.T @ d_query
        d_query_emb = d_query @ weight.T
        return d_keys, d_query_emb, d_weight

    def _features(self, batch: Batch) -> Tuple[np.ndarray, dict]:
        target = self.params["item_embedding"][batch.items]
        animation = self.params["animation_embedding"][batch.animations]
        behavior_keys = self.params["behavior_embedding"][batch.behavior]
        click_keys = self.params["item_embedding"][batch.clicks]
        pooled_behavior, behavior_cache = self._attend(
            target,
            behavior_keys,
            batch.behavior_mask,
            self.params["attention/behavior"],
        )
        pooled_click, click_cache = self._attend(
            target, click_keys, batch.clicks_mask, self.params["attention/click"]
        )
        x = np.concatenate(
            [target, animation, pooled_behavior, pooled_click, batch.dense], axis=1
        )
        return x, {"target": target, "behavior": behavior_cache, "click": click_cache}

    def _features_backward(
        self, batch: Batch, cache: dict, d_x: np.ndarray, grads: Dict[str, np.ndarray]
    ) -> None:
        d = self.embedding_dim
        d_target = d_x[:, 0:d].copy()
        d_animation = d_x[:, d : 2 * d]
        d_pooled_behavior = d_x[:, 2 * d : 3 * d]
        d_pooled_click = d_x[:, 3 * d : 4 * d]
        target = cache["target"]

        d_keys, d_query_emb, d_weight = self._attend_backward(
            target,
            self.params["attention/behavior"],
            cache["behavior"],
            d_pooled_behavior,
        )
        grads["attention/behavior"] += d_weight
        d_target += d_query_emb
        np.add.at(
            grads["behavior_embedding"],
            batch.behavior[batch.behavior_mask],
            d_keys[batch.behavior_mask],
        )

        d_keys, d_query_emb, d_weight = self._attend_backward(
            target, self.params["attention/click"], cache["click"], d_pooled_click
        )
        grads["attention/click"] += d_weight
        d_target += d_query_emb
        np.add.at(
            grads["item_embedding"],
            batch.clicks[batch.clicks_mask],
            d_keys[batch.clicks_mask],
        )
        np.add.at(grads["item_embedding"], batch.items, d_target)
        np.add.at(grads["animation_embedding"], batch.animations, d_animation)


def _labels_of(minibatch: Sequence[Tuple[samples.Sample, int]]) -> np.ndarray:
    return np.array([label for _, label in minibatch], dtype=np.float64)


def apply_gradients(
    model: Model, grads: Dict[str, np.ndarray], lr: float
) -> Model:
    """Returns a copy of the model moved by -lr * grads.

    Raises:
        NonFiniteGradientError: If any gradient holds NaN or Inf.
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise exceptions.NonFiniteGradientError(name)
    updated = model.copy()
    if lr == 0.0:
        return updated
    for name, grad in grads.items():
        updated.params[name] -= lr * grad
    return updated


def sgd_step_batch(
    model: Model, batch: Batch, labels: np.ndarray, lr: float
) -> Tuple[Model, float]:
    """One SGD step on an encoded batch; see ``sgd_step``."""
    if lr < 0:
        raise ValueError("Learning rate must be >= 0.")
    if len(batch) == 0:
        raise exceptions.EmptyInputError("Mini-batch must be nonempty.")
    loss, grads = model.loss_and_grads(batch, labels)
    return apply_gradients(model, grads, lr), loss


def sgd_step(
    model: Model, minibatch: Sequence[Tuple[samples.Sample, int]], lr: float
) -> Tuple[Model, float]:
    """One plain SGD step over a labeled mini-batch.

    Args:
        model: Model to update; it is left untouched.
        minibatch: (sample, label) pairs.
        lr: Learning rate; 0 returns a bitwise copy.

    Returns:
        The updated model and the loss before the step.

    Raises:
        EmptyInputError: If the mini-batch is empty.
        NonFiniteGradientError: If a gradient is not finite.
    """
    if not minibatch:
        raise exceptions.EmptyInputError("Mini-batch must be nonempty.")
    batch = model.encode([sample for sample, _ in minibatch])
    return sgd_step_batch(model, batch, _labels_of(minibatch), lr)


def grad_check(
    model: Model,
    minibatch: Sequence[Tuple[samples.Sample, int]],
    epsilon: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Compares backprop gradients with central finite differences.

    The relative error of one parameter is |a - n| / max(|a|, |n|, floor), and
    0 when both |a| and |n| are below 1e-12.

    Args:
        model: Model to check; its parameters are restored afterwards.
        minibatch: (sample, label) pairs.
        epsilon: Finite-difference step, in (0, 1e-3].
        floor: Absolute floor of the denominator.

    Returns:
        The maximum relative error over every parameter.
    """
    if not 0.0 < epsilon <= 1e-3:
        raise ValueError("epsilon must lie in (0, 1e-3].")
    batch = model.encode([sample for sample, _ in minibatch])
    labels = _labels_of(minibatch)
    _, grads = model.loss_and_grads(batch, labels)

    def loss_at() -> float:
        scores = model.predict_batch(batch)
        return ops.clamped_bce(scores, labels)

    worst = 0.0
    for name, param in model.params.items():
        flat = param.reshape(-1)
        analytic = grads[name].reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + epsilon
            plus = loss_at()
            flat[index] = original - epsilon
            minus = loss_at()
            flat[index] = original
            numeric = (plus - minus) / (2.0 * epsilon)
            a = abs(analytic[index])
            n = abs(numeric)
            if a < 1e-12 and n < 1e-12:
                continue
            error = abs(analytic[index] - numeric) / max(a, n, floor)
            worst = max(worst, error)
    return worst
