"""Decentralized greedy group formation from l1 model dissimilarity.

Every client probes ``H`` random peers and records the l1 distance between
their flattened (DP-trained) proxy parameters. Clients then pair up:

1. mutually most similar clients pair first,
2. a still-unpaired client joins its most similar unpaired known peer,
3. whoever is left pairs at random (an odd one out stays alone).

Groups then repeat the same three steps one level up, using the smallest
cached cross-member distance as the group-to-group distance, until no merge
fits under the group size cap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .numerics import RandomSource, as_vector, l1_distance


def model_dissimilarity(wi, wj) -> float:
    """l1 distance between two flattened parameter vectors (weights row-major, then bias)."""
    wi, wj = as_vector(wi), as_vector(wj)
    if wi.shape != wj.shape:
        raise ShapeError(f"parameter vectors differ in length: {wi.size} vs {wj.size}")
    return l1_distance(wi, wj)


@dataclass
class SimilarityCache:
    """Symmetric sparse store of probed pairwise dissimilarities."""

    entries: dict = field(default_factory=dict)

    @staticmethod
    def _key(i: int, j: int):
        return (i, j) if i < j else (j, i)

    def put(self, i: int, j: int, value: float) -> None:
        if i == j:
            raise ParameterError("a client does not probe itself")
        if value < 0:
            raise ParameterError("dissimilarities are non-negative")
        self.entries[self._key(i, j)] = float(value)

    def get(self, i: int, j: int, default=None):
        return self.entries.get(self._key(i, j), default)

    def __contains__(self, pair) -> bool:
        return self._key(*pair) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def known(self, i: int) -> dict:
        """Peers with a cached distance to ``i``, whoever initiated the probe."""
        out = {}
        for (a, b), d in self.entries.items():
            if a == i:
                out[b] = d
            elif b == i:
                out[a] = d
        return out


def sample_peers(client: int, num_clients: int, probes: int, rng: RandomSource) -> list[int]:
    """``probes`` distinct peers of ``client`` drawn uniformly at random."""
    if probes > num_clients - 1:
        raise ParameterError(f"cannot probe {probes} peers among {num_clients - 1} others")
    if probes < 0:
        raise ParameterError("probe count must be non-negative")
    others = [c for c in range(num_clients) if c != client]
    picks = rng.choice(len(others), probes)
    return sorted(others[k] for k in picks)


def sample_and_probe(client: int, weights, probes: int, rng: RandomSource,
                     cache: SimilarityCache | None = None) -> dict:
    """Probe ``probes`` random peers of ``client`` and record the distances.

    Args:
        client: the probing client's id.
        weights: flattened parameters of every client, indexed by id.
        probes: how many peers to sample (H).
        rng: the probing client's own stream.
        cache: cache to update in place, if given.

    Returns:
        Mapping ``peer -> dissimilarity`` for the sampled peers.
    """
    peers = sample_peers(client, len(weights), probes, rng)
    found = {j: model_dissimilarity(weights[client], weights[j]) for j in peers}
    if cache is not None:
        for j, d in found.items():
            cache.put(client, j, d)
    return found


def group_dissimilarity(group_a, group_b, cache: SimilarityCache) -> float:
    """Smallest cached distance between a member of ``group_a`` and one of ``group_b``."""
    best = math.inf
    for i in group_a:
        for j in group_b:
            d = cache.get(i, j)
            if d is not None and d < best:
                best = d
    return best


def _merge_round(groups: list[tuple], cache: SimilarityCache, max_size: int,
                 rng: RandomSource, random_needs_link: bool) -> list[tuple]:
    """One mutual / unilateral / random merge pass over ``groups``."""
    groups = sorted(groups, key=min)
    n = len(groups)
    dist = np.full((n, n), math.inf)
    for a in range(n):
        for b in range(a + 1, n):
            if len(groups[a]) + len(groups[b]) <= max_size:
                dist[a, b] = dist[b, a] = group_dissimilarity(groups[a], groups[b], cache)

    def most_similar(a, allowed):
        best, best_d = None, math.inf
        for b in allowed:
            # groups are sorted by lowest member, so strict < keeps the lowest id on ties
            if b != a and dist[a, b] < best_d:
                best, best_d = b, dist[a, b]
        return best

    merged: list[tuple] = []
    taken = [False] * n
    choice = [most_similar(a, range(n)) for a in range(n)]
    for a in range(n):
        b = choice[a]
        if b is not None and b > a and choice[b] == a:
            merged.append(groups[a] + groups[b])
            taken[a] = taken[b] = True

    for a in range(n):
        if taken[a]:
            continue
        b = most_similar(a, [k for k in range(n) if not taken[k]])
        if b is not None:
            merged.append(groups[a] + groups[b])
            taken[a] = taken[b] = True

    rest = [k for k in range(n) if not taken[k]]
    rest = [rest[k] for k in rng.permutation(len(rest))] if rest else []
    for a in rest:
        if taken[a]:
            continue
        candidates = [b for b in rest if b != a and not taken[b]
                      and len(groups[a]) + len(groups[b]) <= max_size
                      and (not random_needs_link or math.isfinite(dist[a, b]))]
        if candidates:
            b = candidates[int(rng.uniform() * len(candidates))]
            merged.append(groups[a] + groups[b])
            taken[a] = taken[b] = True
        else:
            merged.append(groups[a])
            taken[a] = True
    return sorted((tuple(sorted(g)) for g in merged), key=min)


def form_pairs(cache: SimilarityCache, clients, rng: RandomSource) -> list[tuple]:
    """Pair up clients; every client ends in exactly one group of size 1 or 2."""
    return _merge_round([(c,) for c in clients], cache, 2, rng, random_needs_link=False)


@dataclass
class CollaborationGraph:
    """Disjoint groups over ``m`` clients; adjacency is derived, never stored."""

    m: int
    labels: np.ndarray  # group id per client

    @classmethod
    def from_groups(cls, m: int, groups) -> "CollaborationGraph":
        labels = np.full(m, -1, dtype=np.int64)
        for gid, members in enumerate(sorted((sorted(g) for g in groups), key=min)):
            for c in members:
                if labels[c] != -1:
                    raise ParameterError(f"client {c} is in two groups")
                labels[c] = gid
        if np.any(labels < 0):
            raise ParameterError("every client must belong to a group")
        return cls(m, labels)

    @property
    def groups(self) -> list[list[int]]:
        return [np.flatnonzero(self.labels == g).tolist() for g in range(int(self.labels.max()) + 1)]

    @property
    def adjacency(self) -> np.ndarray:
        adj = self.labels[:, None] == self.labels[None, :]
        np.fill_diagonal(adj, False)
        return adj

    def group_of(self, client: int) -> list[int]:
        return np.flatnonzero(self.labels == self.labels[client]).tolist()

    def max_group_size(self) -> int:
        return int(np.bincount(self.labels).max())


def merge_until(groups, cache: SimilarityCache, max_size: int, rng: RandomSource,
                num_clients: int | None = None, on_merge=None) -> CollaborationGraph:
    """Merge groups round by round until no further merge fits under ``max_size``.

    Members of a group pool their cached distances, which is what makes the
    group distance the minimum over all member pairs. ``on_merge(groups)`` is
    called after every round that changed the grouping.
    """
    if max_size < 1:
        raise ParameterError("group size cap must be at least 1")
    groups = [tuple(sorted(g)) for g in groups]
    m = num_clients if num_clients is not None else sum(len(g) for g in groups)
    while True:
        nxt = _merge_round(groups, cache, max_size, rng, random_needs_link=True)
        if len(nxt) == len(groups):
            break
        groups = nxt
        if on_merge is not None:
            on_merge(groups)
    return CollaborationGraph.from_groups(m, groups)


def grouping_objective(graph: CollaborationGraph, weights) -> float:
    """Sum of l1 distances over all ordered co-grouped pairs."""
    total = 0.0
    for members in graph.groups:
        for i in members:
            for j in members:
                if i != j:
                    total += model_dissimilarity(weights[i], weights[j])
    return total


def probe_all(weights, probes: int, seed: int) -> SimilarityCache:
    """Every client probes ``probes`` peers using its own stream."""
    cache = SimilarityCache()
    for i in range(len(weights)):
        sample_and_probe(i, weights, probes, RandomSource.for_client(seed, i, "probe"), cache)
    return cache


def form_groups(weights, probes: int, max_size: int, rng: RandomSource) -> CollaborationGraph:
    """Probe, pair, then merge up to ``max_size`` members per group.

    Args:
        weights: flattened post-DP-training parameters, one vector per client.
        probes: peers sampled per client (H).
        max_size: group size cap.
        rng: coordinator stream; per-client probe streams derive from its seed.
    """
    m = len(weights)
    if max_size < 1:
        raise ParameterError("group size cap must be at least 1")
    cache = probe_all(weights, probes, rng.seed)
    if max_size == 1:
        return CollaborationGraph.from_groups(m, [(c,) for c in range(m)])
    pairs = form_pairs(cache, range(m), rng)
    return merge_until(pairs, cache, max_size, rng, m)


def random_groups(m: int, max_size: int, rng: RandomSource) -> CollaborationGraph:
    """Uniformly random partition into consecutive groups of ``max_size``."""
    perm = rng.permutation(m).tolist()
    groups = [perm[k:k + max_size] for k in range(0, m, max_size)]
    return CollaborationGraph.from_groups(m, groups)
