"""Graph container, CSV ingestion, stratified splitting and feature scaling.

On-disk layout of a dataset directory::

    nodes.csv   node_id,pos_x,pos_y,f_1,...,f_D1,label
    edges.csv   src,dst,g_1,...,g_D2

Floats are written with 17 significant digits so a save/load round trip is
bit-exact.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

SPLIT_RATIOS = (0.6, 0.2, 0.2)
NORM_MODES = ("fit-on-train", "per-split")


@dataclass(frozen=True, eq=False)
class Graph:
    """Node-labelled graph with 2-D node positions.

    ``edges`` holds the (src, dst) pairs exactly as given; aggregation treats
    every pair as undirected.
    """

    edges: np.ndarray            # E x 2, int64
    node_features: np.ndarray    # N x D1
    edge_features: np.ndarray    # E x D2
    positions: np.ndarray        # N x 2
    labels: np.ndarray           # N, int64
    n_classes: int = 2

    def __post_init__(self):
        n = len(self.labels)
        if self.node_features.ndim != 2 or self.node_features.shape[0] != n:
            raise ValidationError(f"node_features must be {n} x D1, got {self.node_features.shape}")
        if self.positions.shape != (n, 2):
            raise ValidationError(f"positions must be {n} x 2, got {self.positions.shape}")
        if self.edges.ndim != 2 or self.edges.shape[1] != 2:
            raise ValidationError(f"edges must be E x 2, got {self.edges.shape}")
        if self.edge_features.ndim != 2 or self.edge_features.shape[0] != len(self.edges):
            raise ValidationError("edge_features needs one row per edge")
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ValidationError(f"edge endpoint outside [0, {n})")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def equals(self, other: "Graph") -> bool:
        """Exact equality of every array (bitwise for floats)."""
        def same(a, b):
            return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
        return (self.n_classes == other.n_classes
                and same(self.edges, other.edges)
                and same(self.node_features, other.node_features)
                and same(self.edge_features, other.edge_features)
                and same(self.positions, other.positions)
                and same(self.labels, other.labels))


def make_graph(edges, node_features, positions, labels, edge_features=None, n_classes=None) -> Graph:
    """Build a :class:`Graph` from array-likes, coercing dtypes."""
    labels = np.asarray(labels, dtype=np.int64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    edge_features = np.zeros((len(edges), 0)) if edge_features is None else np.asarray(edge_features, dtype=np.float64)
    if edge_features.ndim == 1:
        edge_features = edge_features.reshape(len(edges), -1 if len(edges) else 0)
    if n_classes is None:
        n_classes = max(2, int(labels.max()) + 1) if len(labels) else 2
    return Graph(
        edges=edges,
        node_features=np.asarray(node_features, dtype=np.float64),
        edge_features=edge_features,
        positions=np.asarray(positions, dtype=np.float64),
        labels=labels,
        n_classes=int(n_classes),
    )


@dataclass(frozen=True)
class SplitMasks:
    """Disjoint train/val/test node index arrays (sorted)."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def as_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}


# --- CSV ------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "%.17g" % x


def save_graph(graph: Graph, directory) -> Path:
    """Write ``nodes.csv`` and ``edges.csv`` into ``directory``."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        d1 = graph.node_features.shape[1]
        d2 = graph.edge_features.shape[1]
        with open(d / "nodes.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_id", "pos_x", "pos_y"] + [f"f_{i + 1}" for i in range(d1)] + ["label"])
            for i in range(graph.n_nodes):
                w.writerow([i, _fmt(graph.positions[i, 0]), _fmt(graph.positions[i, 1])]
                           + [_fmt(v) for v in graph.node_features[i]]
                           + [int(graph.labels[i])])
        with open(d / "edges.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["src", "dst"] + [f"g_{i + 1}" for i in range(d2)])
            for k in range(graph.n_edges):
                w.writerow([int(graph.edges[k, 0]), int(graph.edges[k, 1])]
                           + [_fmt(v) for v in graph.edge_features[k]])
    except OSError as exc:
        raise OSError(f"cannot write graph to {d}: {exc}") from exc
    return d


def _read_rows(path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"missing file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(path, 1, "empty file, header required")
    return rows[0], rows[1:]


def _number(path, line, cell, kind=float):
    try:
        if kind is int:
            v = float(cell)
            if not v.is_integer():
                raise ValueError
            return int(v)
        v = float(cell)
        if not math.isfinite(v):
            raise ValueError
        return v
    except ValueError:
        raise ParseError(path, line, f"non-numeric value {cell!r}") from None


def load_graph(directory, n_classes: int | None = None) -> Graph:
    """Read a dataset directory written in the CSV layout above.

    Nodes are ordered by ``node_id``; edge endpoints refer to node ids.
    ``n_classes`` defaults to ``max(label) + 1`` (at least 2).
    """
    d = Path(directory)
    npath, epath = d / "nodes.csv", d / "edges.csv"
    header, rows = _read_rows(npath)
    if header[:3] != ["node_id", "pos_x", "pos_y"] or header[-1] != "label" or len(header) < 4:
        raise ParseError(npath, 1, "header must be node_id,pos_x,pos_y,f_1..f_D1,label")
    width = len(header)
    ids, pos, feats, labels = [], [], [], []
    for k, row in enumerate(rows):
        line = k + 2
        if not row:
            continue
        if len(row) != width:
            raise ParseError(npath, line, f"expected {width} fields, got {len(row)}")
        ids.append(_number(npath, line, row[0], int))
        pos.append([_number(npath, line, row[1]), _number(npath, line, row[2])])
        feats.append([_number(npath, line, c) for c in row[3:-1]])
        labels.append(_number(npath, line, row[-1], int))
    order = np.argsort(np.asarray(ids, dtype=np.int64), kind="stable")
    sorted_ids = np.asarray(ids, dtype=np.int64)[order]
    if len(sorted_ids) != len(np.unique(sorted_ids)):
        raise ValidationError(f"{npath}: duplicate node_id")
    index_of = {int(v): i for i, v in enumerate(sorted_ids)}
    n = len(sorted_ids)

    eheader, erows = _read_rows(epath)
    if eheader[:2] != ["src", "dst"]:
        raise ParseError(epath, 1, "header must be src,dst,g_1..g_D2")
    ewidth = len(eheader)
    edges, efeats = [], []
    for k, row in enumerate(erows):
        line = k + 2
        if not row:
            continue
        if len(row) != ewidth:
            raise ParseError(epath, line, f"expected {ewidth} fields, got {len(row)}")
        s = _number(epath, line, row[0], int)
        t = _number(epath, line, row[1], int)
        if s not in index_of or t not in index_of:
            bad = s if s not in index_of else t
            raise ValidationError(f"{epath}: row {line}: edge endpoint {bad} is not one of the {n} nodes")
        edges.append((index_of[s], index_of[t]))
        efeats.append([_number(epath, line, c) for c in row[2:]])

    return make_graph(
        edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
        node_features=np.asarray(feats, dtype=np.float64).reshape(n, width - 4)[order],
        positions=np.asarray(pos, dtype=np.float64).reshape(n, 2)[order],
        labels=np.asarray(labels, dtype=np.int64)[order],
        edge_features=np.asarray(efeats, dtype=np.float64).reshape(len(edges), ewidth - 2),
        n_classes=n_classes,
    )


# --- splitting ------------------------------------------------------------

def split_counts(n: int, ratios=SPLIT_RATIOS) -> tuple[int, int, int]:
    """Per-class split sizes: floor of each share, remainder dealt train, val, test.

    If that leaves a split empty (only for n < 5 at 60/20/20) one node moves
    there from the largest split, so every class with >= 3 members reaches
    all three splits.
    """
    counts = [math.floor(n * r + 1e-9) for r in ratios]
    rem = n - sum(counts)
    k = 0
    while rem > 0:
        counts[k % 3] += 1
        rem -= 1
        k += 1
    if n >= 3:
        for i in range(3):
            if counts[i] == 0:
                j = int(np.argmax(counts))
                counts[j] -= 1
                counts[i] += 1
    return tuple(counts)


def stratified_split(labels, ratios=SPLIT_RATIOS, seed: int = 0) -> SplitMasks:
    """Shuffle each class independently and cut it by ``ratios``."""
    labels = np.asarray(labels, dtype=np.int64)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValidationError(f"ratios must be three non-negative shares summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < 3:
            raise ValidationError(
                f"class {int(c)} has {len(members)} labelled node(s); need at least 3 to appear in every split")
        members = rng.permutation(members)
        n_tr, n_va, _ = split_counts(len(members), ratios)
        parts[0].append(members[:n_tr])
        parts[1].append(members[n_tr:n_tr + n_va])
        parts[2].append(members[n_tr + n_va:])
    train, val, test = (np.sort(np.concatenate(p)) if p else np.zeros(0, np.int64) for p in parts)
    return SplitMasks(train=train, val=val, test=test)


# --- normalization --------------------------------------------------------

def _minmax(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    out = np.zeros_like(values)
    ok = span > 0
    out[:, ok] = (values[:, ok] - lo[ok]) / span[ok]
    return out


def _scale_columns(values: np.ndarray) -> np.ndarray:
    if values.size == 0:
        return values.copy()
    return _minmax(values, values.min(axis=0), values.max(axis=0))


def minmax_normalize(graph: Graph, masks: SplitMasks, mode: str = "fit-on-train") -> Graph:
    """Map every node and edge feature column into [0, 1].

    ``fit-on-train`` fits node-feature ranges on training nodes, applies them
    to all nodes and clips. ``per-split`` fits and applies within each split.
    Edge features and positions carry no labels and are scaled over the whole
    graph in both modes. Constant columns become 0.
    """
    if mode not in NORM_MODES:
        raise ValidationError(f"unknown normalization mode {mode!r}; expected one of {NORM_MODES}")
    x = graph.node_features
    if x.shape[1] == 0 or x.shape[0] == 0:
        raise ValidationError("node feature matrix is empty")
    if mode == "fit-on-train":
        tr = x[masks.train]
        new_x = np.clip(_minmax(x, tr.min(axis=0), tr.max(axis=0)), 0.0, 1.0)
    else:
        new_x = _scale_columns(x)
        for idx in (masks.train, masks.val, masks.test):
            if len(idx):
                new_x[idx] = _scale_columns(x[idx])
    return replace(
        graph,
        node_features=new_x,
        edge_features=_scale_columns(graph.edge_features),
        positions=_scale_columns(graph.positions),
    )
