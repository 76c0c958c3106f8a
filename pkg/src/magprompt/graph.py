"""Immutable attributed graphs in destination-grouped compressed form.

Edges are directed (src -> dst) and stored sorted by (dst, src), so all
incoming edges of a node occupy one contiguous block. Undirected datasets
must materialize both directions before building.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    dst_offsets: np.ndarray   # [N+1], incoming block boundaries
    edge_src: np.ndarray      # [E], grouped by destination, sorted by source
    edge_dst: np.ndarray      # [E], non-decreasing
    features: np.ndarray      # [N x d], float64
    labels: np.ndarray | None = None   # per-node ints, or a 0-d int for graph tasks
    has_self_loops: bool = False

    @property
    def num_edges(self) -> int:
        return int(self.edge_src.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def in_degrees(self) -> np.ndarray:
        return np.diff(self.dst_offsets)

    def neighbors(self, node: int) -> np.ndarray:
        lo, hi = self.dst_offsets[node], self.dst_offsets[node + 1]
        return self.edge_src[lo:hi]

    def edge_pairs(self) -> np.ndarray:
        return np.stack([self.edge_src, self.edge_dst], axis=1)


def build_graph(edge_list, num_nodes: int, features, labels=None,
                has_self_loops: bool = False) -> Graph:
    """Build the compressed form; neighbor order is deterministic (by source)."""
    edges = np.asarray(edge_list, dtype=np.int64).reshape(-1, 2)
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != num_nodes:
        raise ValueError(
            f"features have {feats.shape[0] if feats.ndim == 2 else '?'} rows "
            f"for {num_nodes} nodes")
    for k in range(edges.shape[0]):
        s, d = edges[k]
        if not (0 <= s < num_nodes and 0 <= d < num_nodes):
            raise ValueError(f"edge ({s}, {d}) out of range for {num_nodes} nodes")

    order = np.lexsort((edges[:, 0], edges[:, 1])) if edges.size else np.array([], dtype=np.int64)
    src = edges[order, 0] if edges.size else np.array([], dtype=np.int64)
    dst = edges[order, 1] if edges.size else np.array([], dtype=np.int64)
    counts = np.bincount(dst, minlength=num_nodes) if edges.size else np.zeros(num_nodes, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    lab = None
    if labels is not None:
        lab = np.asarray(labels, dtype=np.int64)
        if lab.ndim == 1 and lab.shape[0] != num_nodes:
            raise ValueError(f"{lab.shape[0]} node labels for {num_nodes} nodes")
    return Graph(
        num_nodes=int(num_nodes),
        dst_offsets=_frozen(offsets),
        edge_src=_frozen(src),
        edge_dst=_frozen(dst),
        features=_frozen(feats),
        labels=None if lab is None else _frozen(lab),
        has_self_loops=bool(has_self_loops),
    )


def add_self_loops(g: Graph) -> Graph:
    if g.has_self_loops:
        raise ValueError("graph already has self-loops")
    loops = np.stack([np.arange(g.num_nodes), np.arange(g.num_nodes)], axis=1)
    all_edges = np.concatenate([g.edge_pairs(), loops]) if g.num_edges else loops
    return build_graph(all_edges, g.num_nodes, g.features, g.labels, has_self_loops=True)


@dataclass(frozen=True)
class Permutation:
    mapping: np.ndarray  # node i moves to position mapping[i]

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        if not np.array_equal(np.sort(m), np.arange(m.shape[0])):
            raise ValueError("mapping is not a bijection on [0, n)")
        object.__setattr__(self, "mapping", _frozen(m))

    def __len__(self) -> int:
        return int(self.mapping.shape[0])

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(len(self))
        return Permutation(inv)

    @staticmethod
    def random(n: int, rng: np.random.Generator) -> "Permutation":
        return Permutation(rng.permutation(n))


def permute_graph(g: Graph, p: Permutation) -> Graph:
    if len(p) != g.num_nodes:
        raise ValueError(f"permutation of length {len(p)} for {g.num_nodes} nodes")
    m = p.mapping
    feats = np.empty_like(g.features)
    feats[m] = g.features
    edges = np.stack([m[g.edge_src], m[g.edge_dst]], axis=1)
    labels = g.labels
    if labels is not None and labels.ndim == 1:
        out = np.empty_like(labels)
        out[m] = labels
        labels = out
    return build_graph(edges, g.num_nodes, feats, labels, has_self_loops=g.has_self_loops)


@dataclass(frozen=True)
class FewShotSplit:
    train_indices: np.ndarray
    val_indices: np.ndarray
    test_indices: np.ndarray
    shots_per_class: int
    seed: int
    warnings: tuple = ()


def sample_few_shot(labels, k: int, seed: int) -> FewShotSplit:
    """Pick k examples per class for training; split the rest 1:1 into val/test."""
    if k <= 0:
        raise ValueError(f"shots per class must be positive, got {k}")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    train, warnings = [], []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.shape[0] < k:
            warnings.append(f"class {cls} has only {members.shape[0]} items for {k} shots")
            chosen = members
        else:
            chosen = rng.choice(members, size=k, replace=False)
        train.append(np.sort(chosen))
    train = np.concatenate(train)
    rest = np.setdiff1d(np.arange(labels.shape[0]), train)
    rest = rng.permutation(rest)
    half = rest.shape[0] // 2
    return FewShotSplit(
        train_indices=_frozen(np.sort(train)),
        val_indices=_frozen(np.sort(rest[:half])),
        test_indices=_frozen(np.sort(rest[half:])),
        shots_per_class=int(k),
        seed=int(seed),
        warnings=tuple(warnings),
    )


def sbm_synthesize(blocks: int, per_block: int, p_in: float, p_out: float,
                   seed: int, noise: float = 1.0) -> Graph:
    """Stochastic-block-model graph; the block index is the node label.

    Features are a one-hot block signal plus uniform noise of the given
    amplitude. Both directions of every sampled pair are stored.
    """
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ValueError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    rng = np.random.default_rng(seed)
    n = blocks * per_block
    block_of = np.repeat(np.arange(blocks), per_block)

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(block_of[iu] == block_of[ju], p_in, p_out)
    keep = rng.random(iu.shape[0]) < prob
    src = np.concatenate([iu[keep], ju[keep]])
    dst = np.concatenate([ju[keep], iu[keep]])

    feats = np.eye(blocks)[block_of] + noise * rng.uniform(-1.0, 1.0, size=(n, blocks))
    return build_graph(np.stack([src, dst], axis=1), n, feats, block_of)


def gnp_synthesize(num_nodes: int, p: float, feature_dim: int, seed: int,
                   num_classes: int = 0) -> Graph:
    """Undirected Erdos-Renyi graph with standard-normal features; optional
    uniform node labels when num_classes > 0."""
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"edge probability must lie in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(num_nodes, k=1)
    keep = rng.random(iu.shape[0]) < p
    src = np.concatenate([iu[keep], ju[keep]])
    dst = np.concatenate([ju[keep], iu[keep]])
    feats = rng.standard_normal((num_nodes, feature_dim))
    labels = rng.integers(0, num_classes, size=num_nodes) if num_classes else None
    return build_graph(np.stack([src, dst], axis=1), num_nodes, feats, labels)


def disjoint_union(graphs) -> tuple:
    """Stack graphs into one block-diagonal graph.

    Returns (union, node_to_graph) where node_to_graph maps each union node
    to its source graph's position in the input sequence. Edge blocks stay
    contiguous per graph, so per-graph quantities remain segment-reducible.
    """
    graphs = list(graphs)
    if not graphs:
        raise ValueError("disjoint union of no graphs")
    loops = {g.has_self_loops for g in graphs}
    if len(loops) > 1:
        raise ValueError("cannot union graphs with mixed self-loop state")
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    edges = [g.edge_pairs() + offsets[k] for k, g in enumerate(graphs) if g.num_edges]
    all_edges = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    feats = np.concatenate([g.features for g in graphs])
    node_to_graph = np.repeat(np.arange(len(graphs)), [g.num_nodes for g in graphs])
    union = build_graph(all_edges, int(offsets[-1]), feats,
                        has_self_loops=loops.pop())
    return union, node_to_graph


@dataclass(frozen=True)
class GraphDataset:
    """A loaded dataset: one graph with node labels, or many labeled graphs."""
    task: str                 # "node" | "graph"
    graphs: tuple
    num_classes: int
    feature_dim: int

    def __post_init__(self):
        if self.task not in ("node", "graph"):
            raise ValueError(f"unknown task {self.task!r}")


def as_node_dataset(g: Graph) -> GraphDataset:
    if g.labels is None or g.labels.ndim != 1:
        raise ValueError("node dataset needs per-node labels")
    return GraphDataset("node", (g,), int(g.labels.max()) + 1, g.feature_dim)


def _read_rows(path: Path):
    """Yield (line_number, fields) skipping blank and '#' comment lines."""
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            yield lineno, row


def _parse(value: str, kind, path: Path, lineno: int):
    try:
        return kind(value)
    except ValueError:
        raise ValueError(f"{path.name}:{lineno}: cannot parse {value!r}") from None


def load_dataset(directory) -> GraphDataset:
    """Load the CSV dataset layout: meta.json, nodes.csv, edges.csv, labels.csv."""
    root = Path(directory)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing {meta_path}")
    meta = json.loads(meta_path.read_text())
    task = meta["task"]
    num_classes = int(meta["num_classes"])
    feature_dim = int(meta["feature_dim"])
    if task not in ("node", "graph"):
        raise ValueError(f"{meta_path.name}: unknown task {task!r}")

    nodes_path, edges_path, labels_path = root / "nodes.csv", root / "edges.csv", root / "labels.csv"
    for p in (nodes_path, edges_path, labels_path):
        if not p.exists():
            raise FileNotFoundError(f"missing {p}")

    feats: dict[int, dict[int, np.ndarray]] = {}
    for lineno, row in _read_rows(nodes_path):
        if len(row) != 2 + feature_dim:
            raise ValueError(
                f"{nodes_path.name}:{lineno}: expected {2 + feature_dim} fields, got {len(row)}")
        gid = _parse(row[0], int, nodes_path, lineno)
        nid = _parse(row[1], int, nodes_path, lineno)
        vec = np.array([_parse(v, float, nodes_path, lineno) for v in row[2:]])
        feats.setdefault(gid, {})[nid] = vec

    edges: dict[int, list] = {gid: [] for gid in feats}
    for lineno, row in _read_rows(edges_path):
        if len(row) != 3:
            raise ValueError(f"{edges_path.name}:{lineno}: expected 3 fields, got {len(row)}")
        gid = _parse(row[0], int, edges_path, lineno)
        if gid not in feats:
            raise ValueError(f"{edges_path.name}:{lineno}: unknown graph id {gid}")
        src = _parse(row[1], int, edges_path, lineno)
        dst = _parse(row[2], int, edges_path, lineno)
        edges[gid].append((src, dst))

    labels: dict[int, int] = {}
    for lineno, row in _read_rows(labels_path):
        if len(row) != 2:
            raise ValueError(f"{labels_path.name}:{lineno}: expected 2 fields, got {len(row)}")
        key = _parse(row[0], int, labels_path, lineno)
        val = _parse(row[1], int, labels_path, lineno)
        if not (0 <= val < num_classes):
            raise ValueError(f"{labels_path.name}:{lineno}: label {val} outside "
                             f"[0, {num_classes})")
        labels[key] = val

    def feature_matrix(gid: int) -> np.ndarray:
        per_node = feats[gid]
        n = len(per_node)
        if sorted(per_node) != list(range(n)):
            raise ValueError(f"{nodes_path.name}: graph {gid} node ids are not 0..{n - 1}")
        return np.stack([per_node[i] for i in range(n)])

    if task == "node":
        if sorted(feats) != [0]:
            raise ValueError(f"{nodes_path.name}: node task expects a single graph id 0")
        x = feature_matrix(0)
        n = x.shape[0]
        if sorted(labels) != list(range(n)):
            raise ValueError(f"{labels_path.name}: need one label per node 0..{n - 1}")
        y = np.array([labels[i] for i in range(n)])
        try:
            g = build_graph(edges[0], n, x, y)
        except ValueError as err:
            raise ValueError(f"{edges_path.name}: {err}") from None
        return GraphDataset(task, (g,), num_classes, feature_dim)

    graphs = []
    for gid in sorted(feats):
        if gid not in labels:
            raise ValueError(f"{labels_path.name}: missing label for graph {gid}")
        x = feature_matrix(gid)
        try:
            g = build_graph(edges[gid], x.shape[0], x, np.int64(labels[gid]))
        except ValueError as err:
            raise ValueError(f"{edges_path.name}: graph {gid}: {err}") from None
        graphs.append(g)
    return GraphDataset(task, tuple(graphs), num_classes, feature_dim)


def save_dataset(dataset: GraphDataset, directory) -> None:
    """Write a dataset in the same CSV layout that load_dataset reads."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"task": dataset.task, "num_classes": dataset.num_classes,
            "feature_dim": dataset.feature_dim}
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")

    with (root / "nodes.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        for gid, g in enumerate(dataset.graphs):
            for nid in range(g.num_nodes):
                w.writerow([gid, nid] + [repr(float(v)) for v in g.features[nid]])
    with (root / "edges.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        for gid, g in enumerate(dataset.graphs):
            for s, d in g.edge_pairs():
                w.writerow([gid, int(s), int(d)])
    with (root / "labels.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        if dataset.task == "node":
            for nid, lab in enumerate(dataset.graphs[0].labels):
                w.writerow([nid, int(lab)])
        else:
            for gid, g in enumerate(dataset.graphs):
                w.writerow([gid, int(g.labels)])
