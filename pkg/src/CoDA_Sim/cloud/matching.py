"""Module providing user vectors and KNN sample matching.

A user is represented by the L2-normalized mean of the behavior-statistics
vectors of its samples. Neighbors are ranked by Euclidean distance on these
unit vectors (the same order as cosine similarity), ties broken by ascending
user id, and the target user never matches itself.
"""

import dataclasses
import logging
from typing import Dict, Iterable, List, Mapping, Sequence

import numpy as np

from CoDA_Sim.core import exceptions, samples

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class UserVector:
    """Matching representation of one user.

    Attributes:
        user_id: Id of the user.
        vector: Unit-norm mean behavior statistics.
    """

    user_id: int
    vector: np.ndarray


@dataclasses.dataclass(frozen=True)
class KnnResult:
    """Neighbors of one target user.

    Attributes:
        user_id: The target user.
        neighbors: Neighbor ids, nearest first.
        distances: Euclidean distances matching ``neighbors``.
        short: True when fewer than K other users were available.
    """

    user_id: int
    neighbors: List[int]
    distances: List[float]
    short: bool = False


def extract_user_vector(user_samples: Sequence[samples.Sample]) -> UserVector:
    """Builds the matching vector of one user.

    Args:
        user_samples: Samples of a single user, nonempty.

    Returns:
        The user vector.

    Raises:
        EmptyUserError: If there are no samples or the mean has zero norm; such
            users are left out of matching.
    """
    if not user_samples:
        raise exceptions.EmptyUserError("Cannot represent a user without samples.")
    stats = np.array([s.behavior_stats for s in user_samples], dtype=np.float64)
    mean = stats.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0 or not np.isfinite(norm):
        raise exceptions.EmptyUserError(
            f"User {user_samples[0].user_id} has a zero-norm feature mean."
        )
    return UserVector(user_samples[0].user_id, mean / norm)


def build_user_vectors(
    samples_by_user: Mapping[int, Sequence[samples.Sample]],
) -> Dict[int, UserVector]:
    """Extracts vectors for every user that has a usable one."""
    vectors: Dict[int, UserVector] = {}
    for user_id in sorted(samples_by_user):
        try:
            vectors[user_id] = extract_user_vector(samples_by_user[user_id])
        except exceptions.EmptyUserError as err:
            logger.debug("Excluding user %d from matching: %s", user_id, err)
    return vectors


class ExactIndex:
    """Brute-force scan over every user vector.

    Attributes:
        ids: User ids in ascending order.
        matrix: Stacked vectors, one row per id.
    """

    def __init__(self, vectors: Mapping[int, UserVector]) -> None:
        """Stacks the vectors.

        Args:
            vectors: User vectors keyed by user id.
        """
        self.ids = np.array(sorted(vectors), dtype=np.int64)
        dim = len(next(iter(vectors.values())).vector) if vectors else 0
        self.matrix = np.array(
            [vectors[int(i)].vector for i in self.ids], dtype=np.float64
        ).reshape(len(self.ids), dim)

    def _rank(
        self, rows: np.ndarray, query: np.ndarray, k: int, exclude: int
    ) -> KnnResult:
        ids = self.ids[rows]
        diffs = self.matrix[rows] - query
        squared = np.einsum("ij,ij->i", diffs, diffs)
        keep = ids != exclude
        ids, squared = ids[keep], squared[keep]
        order = np.lexsort((ids, squared))[:k]
        return KnnResult(
            user_id=exclude,
            neighbors=[int(i) for i in ids[order]],
            distances=[float(d) for d in np.sqrt(squared[order])],
        )

    def search(self, query: np.ndarray, k: int, exclude: int) -> KnnResult:
        """Returns the k nearest users other than ``exclude``."""
        return self._rank(np.arange(len(self.ids)), query, k, exclude)


class CoarseIndex(ExactIndex):
    """Inverted-file index: k-means cells, only the nearest cells are scanned.

    Attributes:
        centroids: Cell centers.
        assignment: Cell of every stacked vector.
        n_search: Cells scanned per query.
    """

    def __init__(
        self,
        vectors: Mapping[int, UserVector],
        n_cells: int = 16,
        n_search: int = 4,
        seed: int = 0,
        iterations: int = 10,
    ) -> None:
        """Builds the cells with Lloyd iterations.

        Args:
            vectors: User vectors keyed by user id.
            n_cells: Number of cells, capped at the number of users.
            n_search: Cells scanned per query.
            seed: Seed of the initial centroid draw.
            iterations: Lloyd iterations.
        """
        super().__init__(vectors)
        n_cells = max(1, min(n_cells, len(self.ids)))
        rng = np.random.default_rng(seed)
        seeds = rng.choice(len(self.ids), n_cells, replace=False)
        self.centroids = self.matrix[seeds].copy()
        self.assignment = np.zeros(len(self.ids), dtype=np.int64)
        for _ in range(iterations):
            self.assignment = self._nearest_cells(self.matrix, 1)[:, 0]
            for cell in range(n_cells):
                members = self.matrix[self.assignment == cell]
                if len(members):
                    self.centroids[cell] = members.mean(axis=0)
        self.assignment = self._nearest_cells(self.matrix, 1)[:, 0]
        self.n_search = max(1, min(n_search, n_cells))

    def _nearest_cells(self, points: np.ndarray, count: int) -> np.ndarray:
        diffs = points[:, None, :] - self.centroids[None, :, :]
        squared = np.einsum("ijk,ijk->ij", diffs, diffs)
        return np.argsort(squared, axis=1, kind="stable")[:, :count]

    def search(self, query: np.ndarray, k: int, exclude: int) -> KnnResult:
        """Approximate k nearest users other than ``exclude``."""
        cells = self._nearest_cells(query[None, :], self.n_search)[0]
        rows = np.flatnonzero(np.isin(self.assignment, cells))
        result = self._rank(rows, query, k, exclude)
        if len(result.neighbors) < min(k, len(self.ids) - 1):
            return super().search(query, k, exclude)
        return result


def knn_match(
    target: int,
    vectors: Mapping[int, UserVector],
    k: int,
    index: ExactIndex | None = None,
) -> KnnResult:
    """Finds the K users nearest to the target user.

    Args:
        target: Id of the target user.
        vectors: User vectors keyed by user id.
        k: Neighbor count, >= 1.
        index: Prebuilt index over ``vectors``; an exact scan when omitted.

    Returns:
        The neighbors, nearest first. ``short`` is set when fewer than K other
        users exist, in which case all of them are returned.

    Raises:
        UnknownEntityError: If the target has no user vector.
        ValueError: If k < 1.
    """
    if k < 1:
        raise ValueError("k must be >= 1.")
    if target not in vectors:
        raise exceptions.UnknownEntityError(f"User {target} has no user vector.")
    index = index or ExactIndex(vectors)
    result = index.search(vectors[target].vector, k, exclude=target)
    short = len(vectors) - 1 < k
    if short:
        logger.warning(
            "Only %d users available to match user %d with K=%d.",
            len(vectors) - 1,
            target,
            k,
        )
    return dataclasses.replace(result, short=short)


def brute_force_knn(
    target: int, vectors: Mapping[int, UserVector], k: int
) -> List[int]:
    """Reference scan: one distance per user, then a full sort.

    Returns:
        Neighbor ids, nearest first, ties by ascending id.
    """
    query = vectors[target].vector
    scored = []
    for user_id, user in vectors.items():
        if user_id == target:
            continue
        squared = sum((float(a) - float(b)) ** 2 for a, b in zip(user.vector, query))
        distance = float(np.sqrt(squared))
        scored.append((distance, user_id))
    scored.sort()
    return [user_id for _, user_id in scored[:k]]


def matched_samples(
    neighbors: Iterable[int],
    samples_by_user: Mapping[int, Sequence[samples.Sample]],
) -> List[samples.Sample]:
    """Collects the neighbors' samples, nearest neighbor first.

    Within one neighbor samples are ordered by sample id.
    """
    matched: List[samples.Sample] = []
    for user_id in neighbors:
        matched.extend(
            sorted(samples_by_user.get(user_id, ()), key=lambda s: s.sample_id)
        )
    return matched
