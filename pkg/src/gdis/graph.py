"""Undirected networks with per-node features, treatments and outcomes."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

PARTS = ("train", "val", "test")


class GraphFormatError(ValueError):
    """Malformed edge list, feature file or network invariant violation."""


@dataclass
class Network:
    """Undirected graph over ``node_count`` nodes.

    ``edges`` holds each undirected edge once as ``(u, v)`` with ``u < v``.
    """

    node_count: int
    edges: np.ndarray
    features: np.ndarray
    treatments: np.ndarray | None = None
    outcomes: np.ndarray | None = None
    _nbrs: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.node_count < 1:
            raise GraphFormatError("node_count must be positive")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0 or edges.max() >= self.node_count:
                raise GraphFormatError(
                    f"edge endpoint out of range for {self.node_count} nodes")
            if np.any(edges[:, 0] == edges[:, 1]):
                u = int(edges[edges[:, 0] == edges[:, 1]][0, 0])
                raise GraphFormatError(f"self-loop at node {u}")
            edges = np.sort(edges, axis=1)
            uniq = np.unique(edges, axis=0)
            if len(uniq) != len(edges):
                raise GraphFormatError("duplicate edge")
            edges = uniq
        self.edges = edges
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        if self.features.shape[0] != self.node_count:
            raise GraphFormatError(
                f"features have {self.features.shape[0]} rows, expected {self.node_count}")
        if self.treatments is not None:
            self.treatments = np.asarray(self.treatments, dtype=float)
            if self.treatments.shape != (self.node_count,):
                raise GraphFormatError("treatments length must equal node_count")
        if self.outcomes is not None:
            self.outcomes = np.asarray(self.outcomes, dtype=float)
            if self.outcomes.shape != (self.node_count,):
                raise GraphFormatError("outcomes length must equal node_count")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def neighbor_lists(self) -> list:
        if self._nbrs is None:
            nbrs = [[] for _ in range(self.node_count)]
            for u, v in self.edges:
                nbrs[u].append(int(v))
                nbrs[v].append(int(u))
            self._nbrs = [sorted(n) for n in nbrs]
        return self._nbrs

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=np.int64)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency as CSR."""
        m = self.node_count
        if not len(self.edges):
            return sp.csr_matrix((m, m))
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m))

    def directed_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Both orientations of every edge, sorted by (source, target)."""
        adj = self.adjacency().tocoo()
        order = np.lexsort((adj.col, adj.row))
        return adj.row[order].astype(np.int64), adj.col[order].astype(np.int64)

    def with_(self, **changes) -> "Network":
        data = dict(node_count=self.node_count, edges=self.edges, features=self.features,
                    treatments=self.treatments, outcomes=self.outcomes)
        data.update(changes)
        return Network(**data)


def neighbors(net: Network, i: int) -> list:
    if not 0 <= i < net.node_count:
        raise IndexError(f"node {i} out of range [0, {net.node_count})")
    return list(net.neighbor_lists()[i])


def load_network(edge_path, feature_path, unit_path=None) -> Network:
    """Read a whitespace edge list and a header-free numeric feature CSV.

    ``unit_path`` optionally points at a CSV with a ``treatment,outcome`` header.
    Errors carry the offending file and line number.
    """
    features = []
    with open(feature_path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                features.append([float(tok) for tok in line.strip().split(",")])
            except ValueError:
                raise GraphFormatError(f"{feature_path}:{lineno}: non-numeric feature row") from None
            if len(features[-1]) != len(features[0]):
                raise GraphFormatError(f"{feature_path}:{lineno}: ragged feature row")
    if not features:
        raise GraphFormatError(f"{feature_path}: no feature rows")
    m = len(features)

    edges, seen = [], set()
    with open(edge_path) as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks or toks[0].startswith("#"):
                continue
            if len(toks) != 2:
                raise GraphFormatError(f"{edge_path}:{lineno}: expected 'u v'")
            try:
                u, v = int(toks[0]), int(toks[1])
            except ValueError:
                raise GraphFormatError(f"{edge_path}:{lineno}: non-integer node index") from None
            if u == v:
                raise GraphFormatError(f"{edge_path}:{lineno}: self-loop at node {u}")
            if not (0 <= u < m and 0 <= v < m):
                raise GraphFormatError(
                    f"{edge_path}:{lineno}: node index out of range for {m} feature rows")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise GraphFormatError(f"{edge_path}:{lineno}: duplicate edge {key}")
            seen.add(key)
            edges.append(key)

    treatments = outcomes = None
    if unit_path is not None:
        t, y = [], []
        with open(unit_path) as fh:
            header = fh.readline().strip().split(",")
            if header != ["treatment", "outcome"]:
                raise GraphFormatError(f"{unit_path}:1: expected header 'treatment,outcome'")
            for lineno, line in enumerate(fh, 2):
                if not line.strip():
                    continue
                toks = line.strip().split(",")
                try:
                    t.append(float(toks[0]))
                    y.append(float(toks[1]) if len(toks) > 1 and toks[1] != "" else np.nan)
                except (ValueError, IndexError):
                    raise GraphFormatError(f"{unit_path}:{lineno}: malformed unit row") from None
        if len(t) != m:
            raise GraphFormatError(f"{unit_path}: {len(t)} unit rows, expected {m}")
        treatments = np.array(t)
        outcomes = None if np.all(np.isnan(y)) else np.array(y)
    return Network(m, np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(features),
                   treatments, outcomes)


def save_network(net: Network, directory) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"edges": directory / "edges.txt", "features": directory / "features.csv"}
    with open(paths["edges"], "w") as fh:
        for u, v in net.edges:
            fh.write(f"{u} {v}\n")
    np.savetxt(paths["features"], net.features, delimiter=",", fmt="%.17g")
    if net.treatments is not None:
        paths["units"] = directory / "units.csv"
        with open(paths["units"], "w") as fh:
            fh.write("treatment,outcome\n")
            ys = net.outcomes if net.outcomes is not None else [None] * net.node_count
            for t, y in zip(net.treatments, ys):
                fh.write(f"{t:.17g},{'' if y is None else format(y, '.17g')}\n")
    return {k: str(v) for k, v in paths.items()}


@dataclass
class Partition:
    assignment: np.ndarray  # array of "train"/"val"/"test"
    fractions: tuple
    seed: int | None = None

    def mask(self, part: str) -> np.ndarray:
        return self.assignment == part

    def indices(self, part: str) -> np.ndarray:
        return np.flatnonzero(self.assignment == part)

    def sizes(self) -> dict:
        return {p: int(np.sum(self.assignment == p)) for p in PARTS}

    def to_json(self) -> dict:
        return {"assignment": [str(a) for a in self.assignment], "seed": self.seed,
                "fractions": list(self.fractions)}

    @classmethod
    def from_json(cls, data: dict) -> "Partition":
        return cls(np.array(data["assignment"]), tuple(data.get("fractions", ())), data.get("seed"))


def _target_sizes(m: int, fractions) -> list:
    # largest-remainder rounding keeps every part within one node of fraction * m
    raw = [f * m for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda p: (-(raw[p] - sizes[p]), p))
    for p in order[: m - sum(sizes)]:
        sizes[p] += 1
    return sizes


def partition_graph(net: Network, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> Partition:
    """Split nodes into train/val/test by seeded multi-source BFS growth.

    Each part starts from a random seed node and claims unassigned neighbours
    round-robin until it reaches its target size, so parts stay spatially
    local. A part whose frontier dries up restarts from a random unassigned node.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three nonnegative reals summing to 1, got {fractions}")
    m = net.node_count
    sizes = _target_sizes(m, fractions)
    for name, f, s in zip(PARTS, fractions, sizes):
        if f > 0 and s == 0:
            raise ValueError(f"fraction {f} for {name} leaves the part empty at {m} nodes")

    rng = np.random.default_rng(seed)
    nbrs = net.neighbor_lists()
    label = np.full(m, -1, dtype=np.int64)
    frontier = [deque() for _ in PARTS]
    remaining = list(sizes)

    def claim(p, node):
        label[node] = p
        remaining[p] -= 1
        for j in rng.permutation(nbrs[node]):
            if label[j] < 0:
                frontier[p].append(int(j))

    # the largest part is grown last from whatever is left
    grow = [p for p in np.argsort(sizes, kind="stable") if sizes[p] > 0]
    fill, grow = grow[-1], grow[:-1]
    while any(remaining[p] > 0 for p in grow):
        for p in grow:
            if remaining[p] == 0:
                continue
            while frontier[p] and label[frontier[p][0]] >= 0:
                frontier[p].popleft()
            if frontier[p]:
                claim(p, frontier[p].popleft())
            else:
                free = np.flatnonzero(label < 0)
                claim(p, int(rng.choice(free)))
    label[label < 0] = fill
    return Partition(np.array(PARTS)[label], fractions, seed)
