"""
Embedding stabilization: spatial grouping, EMA cluster/global/stacked means
and the clustering/stacking consistency losses with their gradients.

EMA targets are constants under differentiation; gradients only reach the raw
embeddings.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from backend.analysis.basic_statistics import check_range, ema_update
from backend.errors import ArgumentError, StateError

logger = logging.getLogger(__name__)

GroupKey = Tuple[int, int]

STATE_VERSION = 1


@dataclass
class Embedding:
    vector: np.ndarray
    center: Tuple[float, float]


@dataclass
class EmbeddingBatch:
    """Embeddings of one iteration as parallel arrays: vectors (N, D), centers (N, 2)"""

    vectors: np.ndarray
    centers: np.ndarray

    @classmethod
    def from_embeddings(cls, embeddings: Sequence[Embedding]) -> "EmbeddingBatch":
        if not embeddings:
            return cls(np.zeros((0, 0)), np.zeros((0, 2)))
        return cls(
            vectors=np.stack([np.asarray(e.vector, dtype=np.float64) for e in embeddings]),
            centers=np.asarray([e.center for e in embeddings], dtype=np.float64),
        )

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass
class EmbeddingGroup:
    group_id: int
    members: np.ndarray
    key: GroupKey

    def __len__(self) -> int:
        return len(self.members)


@dataclass
class StabilizerState:
    """
    EMA references for embedding stabilization.

    cluster_means and stacks are keyed by the quantised group centroid, so
    the same spatial cell keeps its reference across iterations. rho, lam and
    delta are held to the hyperparameter intervals unless unsafe_ranges is set.
    """

    rho: float = 0.05
    lam: float = 1.0
    delta: float = 20.0
    cluster_means: Dict[GroupKey, np.ndarray] = field(default_factory=dict)
    stacks: Dict[GroupKey, np.ndarray] = field(default_factory=dict)
    global_mean: Optional[np.ndarray] = None
    unsafe_ranges: bool = False

    def __post_init__(self):
        for name in ("rho", "lam", "delta"):
            check_range(name, getattr(self, name), self.unsafe_ranges)

    def copy(self) -> "StabilizerState":
        return StabilizerState(
            rho=self.rho,
            lam=self.lam,
            delta=self.delta,
            cluster_means={k: v.copy() for k, v in self.cluster_means.items()},
            stacks={k: v.copy() for k, v in self.stacks.items()},
            global_mean=None if self.global_mean is None else self.global_mean.copy(),
            unsafe_ranges=self.unsafe_ranges,
        )

    def to_dict(self) -> dict:
        def encode(table):
            return {f"{k[0]},{k[1]}": v.tolist() for k, v in sorted(table.items())}

        return {
            "version": STATE_VERSION,
            "rho": self.rho,
            "lam": self.lam,
            "delta": self.delta,
            "cluster_means": encode(self.cluster_means),
            "stacks": encode(self.stacks),
            "global_mean": None if self.global_mean is None else self.global_mean.tolist(),
            "unsafe_ranges": self.unsafe_ranges,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "StabilizerState":
        if payload.get("version") != STATE_VERSION:
            raise StateError(f"Unsupported stabilizer state version: {payload.get('version')}")

        def decode(table):
            out = {}
            for raw_key, vector in table.items():
                x, y = raw_key.split(",")
                out[(int(x), int(y))] = np.asarray(vector, dtype=np.float64)
            return out

        global_mean = payload.get("global_mean")
        return cls(
            rho=float(payload["rho"]),
            lam=float(payload["lam"]),
            delta=float(payload["delta"]),
            cluster_means=decode(payload["cluster_means"]),
            stacks=decode(payload["stacks"]),
            global_mean=None if global_mean is None else np.asarray(global_mean, dtype=np.float64),
            unsafe_ranges=bool(payload.get("unsafe_ranges", False)),
        )


def group_key(centers: np.ndarray, delta: float) -> GroupKey:
    """Quantise the centroid of the given centers onto a delta-sized grid"""
    centroid = np.asarray(centers, dtype=np.float64).mean(axis=0)
    return (int(np.floor(centroid[0] / delta)), int(np.floor(centroid[1] / delta)))


def group_embeddings(centers: np.ndarray, delta: float) -> List[EmbeddingGroup]:
    """
    Single-link connected components under dist(c_a, c_b) < delta.

    Args:
        centers (np.ndarray): (N, 2) spatial centers in pixels
        delta (float): proximity threshold in pixels

    Returns:
        List[EmbeddingGroup]: a partition of range(N), ordered by smallest member
    """
    if delta <= 0:
        raise ArgumentError(f"delta must be positive, got {delta}")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    n = len(centers)
    if n == 0:
        return []

    # query_pairs is inclusive at delta; the relation is strict
    pairs = cKDTree(centers).query_pairs(r=delta, output_type="ndarray").reshape(-1, 2)
    lengths = np.linalg.norm(centers[pairs[:, 0]] - centers[pairs[:, 1]], axis=1)
    close = pairs[lengths < delta]
    adjacency = coo_matrix(
        (np.ones(len(close)), (close[:, 0], close[:, 1])), shape=(n, n)
    )
    _, labels = connected_components(adjacency, directed=False)

    unique_labels, first_index = np.unique(labels, return_index=True)
    ordered = unique_labels[np.argsort(first_index)]

    groups = []
    for group_id, label in enumerate(ordered):
        members = np.flatnonzero(labels == label)
        groups.append(
            EmbeddingGroup(group_id=group_id, members=members, key=group_key(centers[members], delta))
        )
    return groups


def group_by_image(
    centers: np.ndarray, image_index: np.ndarray, delta: float
) -> List[EmbeddingGroup]:
    """Group each image's embeddings separately; member indices refer to the whole batch"""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    image_index = np.asarray(image_index)
    groups: List[EmbeddingGroup] = []
    for image in np.unique(image_index):
        rows = np.flatnonzero(image_index == image)
        for group in group_embeddings(centers[rows], delta):
            groups.append(
                EmbeddingGroup(group_id=len(groups), members=rows[group.members], key=group.key)
            )
    return groups


def _pooled_means(
    groups: Sequence[EmbeddingGroup], vectors: np.ndarray
) -> Dict[GroupKey, np.ndarray]:
    """Current mean per key; groups colliding on a key are pooled"""
    members_by_key: Dict[GroupKey, List[np.ndarray]] = {}
    for group in groups:
        members_by_key.setdefault(group.key, []).append(group.members)
    return {
        key: vectors[np.concatenate(parts)].mean(axis=0)
        for key, parts in members_by_key.items()
    }


def _ema_table(
    table: Dict[GroupKey, np.ndarray], means: Dict[GroupKey, np.ndarray], rho: float
) -> Dict[GroupKey, np.ndarray]:
    updated = {k: v.copy() for k, v in table.items()}
    for key, mean in means.items():
        if key in updated:
            updated[key] = ema_update(updated[key], mean, rho)
        else:
            updated[key] = mean.copy()
    return updated


def update_cluster_means(
    groups: Sequence[EmbeddingGroup], vectors: np.ndarray, state: StabilizerState
) -> StabilizerState:
    """EMA of each group's mean into mu_j; unseen keys are seeded with the current mean"""
    vectors = np.asarray(vectors, dtype=np.float64)
    new_state = state.copy()
    new_state.cluster_means = _ema_table(
        state.cluster_means, _pooled_means(groups, vectors), state.rho
    )
    return new_state


def update_global_mean(vectors: np.ndarray, state: StabilizerState) -> StabilizerState:
    """EMA of the mean of all embeddings of this iteration into mu_global"""
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(vectors) == 0:
        logger.warning("update_global_mean called with no embeddings; state unchanged")
        return state
    new_state = state.copy()
    batch_mean = vectors.mean(axis=0)
    if state.global_mean is None:
        new_state.global_mean = batch_mean
    else:
        new_state.global_mean = ema_update(state.global_mean, batch_mean, state.rho)
    return new_state


def update_stack(
    group: EmbeddingGroup, vectors: np.ndarray, state: StabilizerState
) -> StabilizerState:
    """EMA of one group's mean into its stacked embedding"""
    return update_stacks([group], vectors, state)


def update_stacks(
    groups: Sequence[EmbeddingGroup], vectors: np.ndarray, state: StabilizerState
) -> StabilizerState:
    """update_stack for every group of the iteration, one update per key"""
    vectors = np.asarray(vectors, dtype=np.float64)
    new_state = state.copy()
    new_state.stacks = _ema_table(state.stacks, _pooled_means(groups, vectors), state.rho)
    return new_state


def cluster_loss(
    groups: Sequence[EmbeddingGroup], vectors: np.ndarray, state: StabilizerState
) -> Tuple[float, np.ndarray]:
    """
    Clustering consistency loss and its gradient w.r.t. the embeddings.

    L = 1/J sum_j ( 1/|G_j| sum_e ||e - mu_j||^2 + lam ||mu_j - mu_global||^2 )

    Returns:
        Tuple[float, np.ndarray]: loss value and gradient shaped like vectors
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    grad = np.zeros_like(vectors)
    if not groups:
        return 0.0, grad
    if state.global_mean is None:
        raise StateError("Global mean has not been seeded; call update_global_mean first")

    n_groups = len(groups)
    total = 0.0
    for group in groups:
        if group.key not in state.cluster_means:
            raise StateError(f"No cluster mean for group key {group.key}")
        mu_j = state.cluster_means[group.key]
        diff = vectors[group.members] - mu_j
        size = len(group)
        total += np.sum(diff * diff) / size
        total += state.lam * float(np.sum((mu_j - state.global_mean) ** 2))
        grad[group.members] += (2.0 / (n_groups * size)) * diff
    return float(total / n_groups), grad


def stack_loss(
    group: EmbeddingGroup, vectors: np.ndarray, state: StabilizerState
) -> Tuple[float, np.ndarray]:
    """Mean squared distance of one group's members to its stacked embedding"""
    vectors = np.asarray(vectors, dtype=np.float64)
    if group.key not in state.stacks:
        raise StateError(f"No stacked embedding for group key {group.key}")
    diff = vectors[group.members] - state.stacks[group.key]
    grad = np.zeros_like(vectors)
    grad[group.members] = (2.0 / len(group)) * diff
    return float(np.sum(diff * diff) / len(group)), grad


def batch_stack_loss(
    groups: Sequence[EmbeddingGroup], vectors: np.ndarray, state: StabilizerState
) -> Tuple[float, np.ndarray]:
    """Unweighted mean of the per-group stacking losses"""
    vectors = np.asarray(vectors, dtype=np.float64)
    grad = np.zeros_like(vectors)
    if not groups:
        return 0.0, grad
    total = 0.0
    for group in groups:
        value, group_grad = stack_loss(group, vectors, state)
        total += value
        grad += group_grad
    n_groups = len(groups)
    return total / n_groups, grad / n_groups
