"""N-way K-shot episode construction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from metadro.dataset import EmbeddingStore
from metadro.errors import EpisodeError


@dataclass(frozen=True)
class TaskSpec:
    n_way: int
    k_shot: int
    q_query: int = 1

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.q_query < 1:
            raise ValueError(f"need n_way >= 2, k_shot >= 1, q_query >= 1; got {self}")


@dataclass(frozen=True, eq=False)
class Episode:
    """One few-shot task.

    Rows are grouped by episode label: support rows ``n*K .. n*K+K-1`` and
    query rows ``n*Q .. n*Q+Q-1`` belong to episode label ``n``. Only query
    items carry group codes; the inner loop never sees them.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    query_groups: tuple[str, ...]
    class_map: tuple[str, ...]
    support_ids: tuple[str, ...]
    query_ids: tuple[str, ...]

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.class_map == other.class_map
            and self.support_ids == other.support_ids
            and self.query_ids == other.query_ids
            and self.query_groups == other.query_groups
            and np.array_equal(self.support_x, other.support_x)
            and np.array_equal(self.query_x, other.query_x)
            and np.array_equal(self.support_y, other.support_y)
            and np.array_equal(self.query_y, other.query_y)
        )


def _check_pool(store: EmbeddingStore, spec: TaskSpec, pool: Sequence[str]) -> None:
    if len(pool) < spec.n_way:
        raise EpisodeError(f"{spec.n_way}-way episodes need {spec.n_way} classes, pool has {len(pool)}")
    need = spec.k_shot + spec.q_query
    for c in pool:
        have = len(store.class_index.get(c, ()))
        if have < need:
            raise EpisodeError(f"class {c!r} has {have} records, needs {need} (K+Q)")


def sample_episode(
    store: EmbeddingStore,
    spec: TaskSpec,
    class_pool: Sequence[str] | None,
    rng: np.random.Generator,
) -> Episode:
    """Draw N classes from the pool, then K+Q distinct records per class."""
    pool = list(dict.fromkeys(store.classes if class_pool is None else class_pool))
    _check_pool(store, spec, pool)
    K, Q = spec.k_shot, spec.q_query
    chosen = [pool[i] for i in rng.choice(len(pool), size=spec.n_way, replace=False)]
    sup, qry = [], []
    for c in chosen:
        idx = rng.choice(np.asarray(store.class_index[c]), size=K + Q, replace=False)
        sup.extend(idx[:K].tolist())
        qry.extend(idx[K:].tolist())
    vecs = store.vectors
    return Episode(
        support_x=vecs[sup],
        support_y=np.repeat(np.arange(spec.n_way), K),
        query_x=vecs[qry],
        query_y=np.repeat(np.arange(spec.n_way), Q),
        query_groups=tuple(store.groups[i] for i in qry),
        class_map=tuple(chosen),
        support_ids=tuple(store.ids[i] for i in sup),
        query_ids=tuple(store.ids[i] for i in qry),
    )


def sample_meta_batch(
    store: EmbeddingStore,
    spec: TaskSpec,
    class_pool: Sequence[str] | None,
    batch_size: int,
    rng: np.random.Generator,
) -> list[Episode]:
    # sequential draws from one generator keep batches reproducible
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [sample_episode(store, spec, class_pool, rng) for _ in range(batch_size)]
