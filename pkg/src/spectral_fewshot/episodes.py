"""N-way K-shot task sampling over a class split."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .datasets import ClassSplit
from .graph import Graph


class EpisodeError(ValueError):
    pass


class InsufficientClassesError(EpisodeError):
    pass


class InsufficientNodesError(EpisodeError):
    def __init__(self, class_id: int, available: int, needed: int):
        self.class_id, self.available, self.needed = class_id, available, needed
        super().__init__(f"class {class_id} has {available} labeled nodes, needs {needed}")


@dataclass(frozen=True)
class TaskConfig:
    n_way: int = 2
    k_shot: int = 5
    m_query: int = 10  # per class
    num_tasks: int = 100
    seed: int = 0

    def __post_init__(self):
        for k in ("n_way", "k_shot", "m_query"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.num_tasks < 0:
            raise ValueError("num_tasks must be >= 0")


@dataclass(frozen=True, eq=False)
class Episode:
    support_ids: np.ndarray
    support_labels: np.ndarray
    query_ids: np.ndarray
    query_labels: np.ndarray
    class_map: tuple  # local index -> global class id

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    def key(self) -> tuple:
        return (tuple(self.support_ids.tolist()), tuple(self.query_ids.tolist()), self.class_map)

    def __eq__(self, other):
        return isinstance(other, Episode) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


def _class_members(graph: Graph) -> dict:
    if graph.labels is None:
        raise EpisodeError("episode sampling needs node labels")
    cached = getattr(graph, "_class_members", None)
    if cached is None:
        order = np.argsort(graph.labels, kind="stable")
        bounds = np.searchsorted(graph.labels[order], np.arange(graph.num_classes + 1))
        cached = {c: order[bounds[c] : bounds[c + 1]] for c in range(graph.num_classes)}
        graph._class_members = cached
    return cached


def sample_episode(graph: Graph, classes, n_way: int, k_shot: int, m_query: int,
                   rng: np.random.Generator) -> Episode:
    """Draw ``n_way`` classes, then ``k_shot`` support and ``m_query`` query nodes per class."""
    members = _class_members(graph)
    need = k_shot + m_query
    pool = sorted(int(c) for c in classes)
    eligible = [c for c in pool if c in members and len(members[c]) >= need]
    if len(eligible) < n_way:
        short = [c for c in pool if c not in eligible]
        if short and len(pool) >= n_way:
            c = short[0]
            raise InsufficientNodesError(c, len(members.get(c, ())), need)
        raise InsufficientClassesError(
            f"{len(eligible)} eligible classes in {pool}, need {n_way}")
    chosen = rng.choice(len(eligible), size=n_way, replace=False)
    class_map = tuple(eligible[i] for i in chosen)
    s_ids, q_ids = [], []
    for c in class_map:
        picked = rng.choice(members[c], size=need, replace=False)
        s_ids.append(picked[:k_shot])
        q_ids.append(picked[k_shot:])
    local = np.arange(n_way, dtype=np.int64)
    return Episode(
        support_ids=np.concatenate(s_ids).astype(np.int64),
        support_labels=np.repeat(local, k_shot),
        query_ids=np.concatenate(q_ids).astype(np.int64),
        query_labels=np.repeat(local, m_query),
        class_map=class_map,
    )


def episode_stream(graph: Graph, split: ClassSplit, phase: str, task_config: TaskConfig,
                   rng: Optional[np.random.Generator] = None,
                   num_tasks: Optional[int] = None) -> Iterator[Episode]:
    """Yield ``num_tasks`` (default ``task_config.num_tasks``) episodes from one phase.

    The class set is validated eagerly so a bad configuration fails before
    the first ``next()``.
    """
    classes = split.classes_for(phase)
    if not classes:
        raise EpisodeError(f"phase {phase!r} has no classes")
    if rng is None:
        rng = np.random.default_rng(task_config.seed)
    count = task_config.num_tasks if num_tasks is None else num_tasks
    tc = task_config

    def gen():
        for _ in range(count):
            yield sample_episode(graph, classes, tc.n_way, tc.k_shot, tc.m_query, rng)

    return gen()
