"""Frequent tag-pair mining and per-query token adjacency.

The static attention mode consumes an undirected tag association graph:
an edge between two tags means they co-occurred in at least
``min_support`` queries (counted once per query, set semantics). A
query's token-level adjacency is then the union of self-edges,
consecutive-token edges, and edges between tokens whose tag pair is in
the graph.
"""

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DataError


def tag_pair_key(a, b):
    """Canonical unordered pair: lexicographically sorted."""
    return (a, b) if a <= b else (b, a)


def count_tag_pairs(records):
    """Per-query co-occurrence counts for every unordered tag pair.

    Each pair is counted at most once per query no matter how many token
    pairs realize it; the self-pair (t, t) counts only when tag ``t``
    appears on at least two distinct positions. Counts are associative and
    commutative, so partial maps from corpus shards merge by addition.
    """
    counts = Counter()
    for rec in records:
        tags = rec.tags
        pairs = {
            tag_pair_key(tags[i], tags[j])
            for i in range(len(tags))
            for j in range(i + 1, len(tags))
        }
        counts.update(pairs)
    return counts


@dataclass(frozen=True)
class TagGraph:
    """Undirected tag association graph with the counts that built it.

    ``edges`` maps canonical pairs (a <= b) to their per-query
    co-occurrence counts; ``min_support`` records the threshold used.
    """

    edges: Mapping[tuple, int] = field(default_factory=dict)
    min_support: int = 1

    def __post_init__(self):
        for (a, b), count in self.edges.items():
            if a > b:
                raise ValueError(f"edge ({a!r}, {b!r}) is not canonically ordered")
            if count < 1:
                raise ValueError(f"edge ({a!r}, {b!r}) has count {count} < 1")

    def has_edge(self, a, b):
        return tag_pair_key(a, b) in self.edges

    def __len__(self):
        return len(self.edges)


def mine_tag_pairs(records, min_support=None, *, support_frac=None,
                   scoring="count", pmi_threshold=0.0):
    """Mine the tag pairs whose per-query co-occurrence meets the threshold.

    Exactly one of ``min_support`` (absolute count) and ``support_frac``
    (fraction of the corpus size) may be given; with neither, the default
    is 0.5% of the corpus. ``scoring="pmi"`` additionally requires each
    surviving pair's pointwise mutual information (natural log, query-level
    probabilities) to reach ``pmi_threshold``; the default "count" mode
    uses frequency alone.
    """
    if not records:
        raise ValueError("cannot mine tag pairs from an empty corpus")
    if min_support is not None and support_frac is not None:
        raise ValueError("give min_support or support_frac, not both")
    if min_support is None:
        frac = 0.005 if support_frac is None else float(support_frac)
        if not 0.0 < frac <= 1.0:
            raise ValueError("support_frac must be in (0, 1]")
        min_support = max(1, math.ceil(frac * len(records)))
    min_support = int(min_support)
    if min_support < 1:
        raise ValueError("min_support must be at least 1")
    if scoring not in ("count", "pmi"):
        raise ValueError(f"unknown scoring mode {scoring!r}")

    counts = count_tag_pairs(records)
    kept = {
        pair: count for pair, count in counts.items() if count >= min_support
    }
    if scoring == "pmi":
        n = len(records)
        tag_queries = Counter()
        for rec in records:
            tag_queries.update(set(rec.tags))
        kept = {
            pair: count
            for pair, count in kept.items()
            if math.log(
                (count / n)
                / ((tag_queries[pair[0]] / n) * (tag_queries[pair[1]] / n))
            )
            >= pmi_threshold
        }
    return TagGraph(edges=kept, min_support=min_support)


def query_adjacency(tags, graph):
    """Symmetric 0/1 token adjacency for one query's tag sequence.

    Every token gets a self-edge (attention is always defined), adjacent
    positions are connected, and positions i, k are connected when the
    pair (t_i, t_k) is an edge of ``graph``.
    """
    m = len(tags)
    if m == 0:
        raise ValueError("tags must be non-empty")
    adj = np.eye(m, dtype=np.float64)
    for i in range(m - 1):
        adj[i, i + 1] = adj[i + 1, i] = 1.0
    for i in range(m):
        for k in range(i + 2, m):
            if graph.has_edge(tags[i], tags[k]):
                adj[i, k] = adj[k, i] = 1.0
    return adj


def write_graph(graph, path):
    """Serialize as TSV: header ``#min_support=<n>``, sorted edge lines."""
    lines = [f"#min_support={graph.min_support}"]
    for (a, b), count in sorted(graph.edges.items()):
        lines.append(f"{a}\t{b}\t{count}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_graph(path):
    """Parse a TSV tag graph, reporting problems with line numbers."""
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read graph {path}: {exc}") from exc
    with fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("#min_support="):
            raise DataError(f"{path}:1: expected '#min_support=<n>' header")
        try:
            min_support = int(header.split("=", 1)[1])
        except ValueError as exc:
            raise DataError(f"{path}:1: malformed min_support value") from exc
        edges = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                raise DataError(f"{path}:{lineno}: blank line in graph file")
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, "
                    f"got {len(parts)}"
                )
            a, b, raw_count = parts
            if a > b:
                raise DataError(
                    f"{path}:{lineno}: edge ({a}, {b}) not lexicographically "
                    "ordered"
                )
            try:
                count = int(raw_count)
            except ValueError as exc:
                raise DataError(
                    f"{path}:{lineno}: count {raw_count!r} is not an integer"
                ) from exc
            if count < 1:
                raise DataError(f"{path}:{lineno}: count must be positive")
            if (a, b) in edges:
                raise DataError(f"{path}:{lineno}: duplicate edge ({a}, {b})")
            edges[(a, b)] = count
    try:
        return TagGraph(edges=edges, min_support=min_support)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
