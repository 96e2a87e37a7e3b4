"""Graph data model, text-file ingestion, batching and synthetic generators."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class GraphFormatError(ValueError):
    """Raised when a graph file cannot be parsed; carries the line number."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True, eq=False)
class Graph:
    """A directed graph with node features and either node or graph labels.

    ``edges`` is an ``(E, 2)`` integer array of ``(src, dst)`` rows.  Undirected
    graphs list both directions.  Self loops are not stored.
    """

    n: int
    edges: np.ndarray
    x: np.ndarray
    node_labels: np.ndarray | None = None
    graph_label: float | int | None = None
    id: str = "g"
    num_classes: int = 0

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        x = np.asarray(self.x, dtype=np.float64)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "x", x)
        if self.node_labels is not None:
            object.__setattr__(self, "node_labels", np.asarray(self.node_labels, dtype=np.int64))
        edges.setflags(write=False)
        x.setflags(write=False)
        self.validate()

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("graph needs at least one node")
        if self.x.ndim != 2 or self.x.shape[0] != self.n:
            raise ValueError(f"feature matrix has {self.x.shape[0]} rows for {self.n} nodes")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= self.n):
            raise ValueError("edge endpoint out of range")
        if (self.node_labels is None) == (self.graph_label is None):
            raise ValueError("exactly one of node labels / graph label must be present")
        if self.node_labels is not None and self.node_labels.shape != (self.n,):
            raise ValueError("node label vector must have length n")
        if len(self.edges):
            keys = self.edges[:, 0] * self.n + self.edges[:, 1]
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate edge")

    @property
    def label_kind(self) -> str:
        return "node" if self.node_labels is not None else "graph"

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True, eq=False)
class Batch:
    """Disjoint union of graphs; node ``v`` of member ``g`` is ``offsets[g] + v``."""

    graph_ids: tuple[str, ...]
    offsets: np.ndarray
    node_to_graph: np.ndarray
    edges: np.ndarray
    x: np.ndarray
    node_labels: np.ndarray | None
    graph_labels: np.ndarray | None
    sizes: np.ndarray
    num_classes: int = 0

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def num_graphs(self) -> int:
        return len(self.graph_ids)

    @property
    def label_kind(self) -> str:
        return "node" if self.node_labels is not None else "graph"

    def induced(self, nodes) -> tuple[np.ndarray, np.ndarray]:
        """Edges of the subgraph induced by ``nodes``, relabelled to ``0..k-1``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = np.full(self.num_nodes, -1, dtype=np.int64)
        remap[nodes] = np.arange(len(nodes))
        src, dst = remap[self.edges[:, 0]], remap[self.edges[:, 1]]
        keep = (src >= 0) & (dst >= 0)
        return nodes, np.stack([src[keep], dst[keep]], axis=1)


def make_batch(graphs: Sequence[Graph]) -> Batch:
    if len(graphs) == 0:
        raise ValueError("empty batch")
    kinds = {g.label_kind for g in graphs}
    if len(kinds) > 1:
        raise ValueError("mixed label kinds in batch")
    widths = {g.dim for g in graphs}
    if len(widths) > 1:
        raise ValueError(f"mixed feature widths in batch: {sorted(widths)}")
    sizes = np.array([g.n for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    node_to_graph = np.repeat(np.arange(len(graphs)), sizes)
    edges = np.concatenate([g.edges + off for g, off in zip(graphs, offsets)], axis=0)
    x = np.concatenate([g.x for g in graphs], axis=0)
    if kinds == {"node"}:
        node_labels = np.concatenate([g.node_labels for g in graphs])
        graph_labels = None
    else:
        node_labels = None
        graph_labels = np.array([g.graph_label for g in graphs])
    for arr in (offsets, node_to_graph, edges, x, sizes):
        arr.setflags(write=False)
    return Batch(
        graph_ids=tuple(g.id for g in graphs),
        offsets=offsets,
        node_to_graph=node_to_graph,
        edges=edges,
        x=x,
        node_labels=node_labels,
        graph_labels=graph_labels,
        sizes=sizes,
        num_classes=max(g.num_classes for g in graphs),
    )


# ---------------------------------------------------------------- file format


def _parse_header(line: str, lineno: int, path: str) -> dict:
    parts = line.split()
    if len(parts) < 2 or parts[0] != "#graph":
        raise GraphFormatError("malformed header: expected '#graph <id> key=value ...'", lineno, path)
    meta = {"id": parts[1]}
    for tok in parts[2:]:
        if "=" not in tok:
            raise GraphFormatError(f"malformed header field {tok!r}", lineno, path)
        k, v = tok.split("=", 1)
        meta[k] = v
    for key in ("nodes", "dim", "labels"):
        if key not in meta:
            raise GraphFormatError(f"malformed header: missing {key}=", lineno, path)
    try:
        meta["nodes"] = int(meta["nodes"])
        meta["dim"] = int(meta["dim"])
        meta["classes"] = int(meta.get("classes", 0))
    except ValueError as exc:
        raise GraphFormatError(f"malformed header: {exc}", lineno, path) from None
    if meta["labels"] not in ("node", "graph"):
        raise GraphFormatError("malformed header: labels must be node or graph", lineno, path)
    if meta["nodes"] < 1 or meta["dim"] < 1:
        raise GraphFormatError("malformed header: nodes and dim must be positive", lineno, path)
    return meta


def load_graph(path: str | os.PathLike) -> Graph:
    path = str(path)
    with open(path) as fh:
        raw = fh.read().splitlines()
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(raw) if ln.strip()]
    if not lines:
        raise GraphFormatError("malformed header: empty file", 1, path)
    meta = _parse_header(lines[0][1], lines[0][0], path)
    n, d = meta["nodes"], meta["dim"]
    try:
        edge_pos = next(k for k, (_, ln) in enumerate(lines) if ln == "#edges")
    except StopIteration:
        raise GraphFormatError("missing '#edges' section", lines[-1][0], path) from None
    body = lines[1:edge_pos]
    n_label_lines = n if meta["labels"] == "node" else 1
    if len(body) < n_label_lines:
        raise GraphFormatError("feature row count mismatch", lines[edge_pos][0], path)
    feat_lines, label_lines = body[: len(body) - n_label_lines], body[len(body) - n_label_lines :]
    if len(feat_lines) != n:
        lineno = feat_lines[-1][0] if feat_lines else lines[0][0]
        raise GraphFormatError(f"feature row count mismatch: expected {n}, found {len(feat_lines)}", lineno, path)
    x = np.empty((n, d))
    for r, (lineno, ln) in enumerate(feat_lines):
        vals = ln.split()
        if len(vals) != d:
            raise GraphFormatError(f"feature row has {len(vals)} values, expected {d}", lineno, path)
        try:
            x[r] = [float(v) for v in vals]
        except ValueError:
            raise GraphFormatError("non-numeric feature value", lineno, path) from None
    node_labels = None
    graph_label = None
    try:
        if meta["labels"] == "node":
            node_labels = np.array([int(ln) for _, ln in label_lines], dtype=np.int64)
        else:
            tok = label_lines[0][1]
            graph_label = int(tok) if tok.lstrip("+-").isdigit() else float(tok)
    except ValueError:
        raise GraphFormatError("malformed label line", label_lines[0][0], path) from None
    edges = []
    seen = set()
    for lineno, ln in lines[edge_pos + 1 :]:
        parts = ln.split()
        if len(parts) != 2:
            raise GraphFormatError("edge line must be 'src dst'", lineno, path)
        try:
            s, t = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError("non-integer edge endpoint", lineno, path) from None
        if not (0 <= s < n and 0 <= t < n):
            raise GraphFormatError("edge endpoint out of range", lineno, path)
        if (s, t) in seen:
            raise GraphFormatError("duplicate edge", lineno, path)
        seen.add((s, t))
        edges.append((s, t))
    return Graph(
        n=n,
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        x=x,
        node_labels=node_labels,
        graph_label=graph_label,
        id=meta["id"],
        num_classes=meta["classes"],
    )


def save_graph(graph: Graph, path: str | os.PathLike) -> None:
    out = [f"#graph {graph.id} nodes={graph.n} dim={graph.dim} labels={graph.label_kind} classes={graph.num_classes}"]
    out.extend(" ".join(repr(float(v)) for v in row) for row in graph.x)
    if graph.node_labels is not None:
        out.extend(str(int(v)) for v in graph.node_labels)
    else:
        out.append(repr(graph.graph_label))
    out.append("#edges")
    out.extend(f"{s} {t}" for s, t in graph.edges)
    Path(path).write_text("\n".join(out) + "\n")


def load_manifest(path: str | os.PathLike) -> list[Graph]:
    base = Path(path).parent
    graphs = []
    for ln in Path(path).read_text().splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        p = Path(ln)
        graphs.append(load_graph(p if p.is_absolute() else base / p))
    return graphs


def write_dataset(graphs: Sequence[Graph], out_dir: str | os.PathLike) -> Path:
    """Write one file per graph plus ``manifest.txt``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for k, g in enumerate(graphs):
        name = f"{k:05d}_{g.id}.graph"
        save_graph(g, out_dir / name)
        names.append(name)
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(names) + "\n")
    return manifest


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.6
    valid: float = 0.2
    test: float = 0.2
    seed: int = 0
    mode: str = "random"

    def __post_init__(self):
        fr = (self.train, self.valid, self.test)
        if min(fr) <= 0:
            raise ValueError("split fractions must be positive")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)}")
        if self.mode not in ("random", "planted-shift"):
            raise ValueError(f"unknown split mode {self.mode!r}")


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


def split_indices(count: int, spec: SplitSpec, key: np.ndarray | None = None) -> Split:
    """Partition ``range(count)`` into train/valid/test.

    ``planted-shift`` orders items by ``key`` (ties broken at random) so the
    test part holds the largest keys, giving a controlled distribution shift.
    """
    if count < 3:
        raise ValueError("need at least 3 items to split")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(count)
    if spec.mode == "planted-shift":
        if key is None:
            raise ValueError("planted-shift split needs a sort key")
        key = np.asarray(key)
        perm = perm[np.argsort(key[perm], kind="stable")]
    n_train = max(1, int(round(spec.train * count)))
    n_valid = max(1, int(round(spec.valid * count)))
    n_train = min(n_train, count - 2)
    n_valid = min(n_valid, count - n_train - 1)
    return Split(
        train=np.sort(perm[:n_train]),
        valid=np.sort(perm[n_train : n_train + n_valid]),
        test=np.sort(perm[n_train + n_valid :]),
    )


# ---------------------------------------------------------------- generators


def synth_sbm(
    blocks: int,
    nodes_per_block: int,
    p_in: float,
    p_out: float,
    d_in: int,
    noise: float,
    seed: int,
) -> Graph:
    """Stochastic block model with block-id labels and noisy one-hot features.

    Block ``b`` sets feature column ``b % d_in`` to 1 before Gaussian noise of
    standard deviation ``noise`` is added.
    """
    if blocks < 1 or nodes_per_block < 1 or d_in < 1:
        raise ValueError("blocks, nodes_per_block and d_in must be positive")
    if not (0.0 <= p_out < p_in <= 1.0):
        raise ValueError(f"synth_sbm requires 0 <= p_out < p_in <= 1 (homophilous), got p_in={p_in}, p_out={p_out}")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    n = blocks * nodes_per_block
    labels = np.repeat(np.arange(blocks), nodes_per_block)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    s, t = iu[keep], ju[keep]
    edges = np.concatenate([np.stack([s, t], 1), np.stack([t, s], 1)])
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    x = np.zeros((n, d_in))
    x[np.arange(n), labels % d_in] = 1.0
    x = x + noise * rng.standard_normal((n, d_in))
    return Graph(n=n, edges=edges, x=x, node_labels=labels, id=f"sbm{seed}", num_classes=blocks)


def _undirected(pairs: list[tuple[int, int]]) -> np.ndarray:
    both = {(a, b) for a, b in pairs} | {(b, a) for a, b in pairs}
    return np.array(sorted(both), dtype=np.int64).reshape(-1, 2)


def has_pendant_triangle(n: int, edges: np.ndarray) -> bool:
    """True if some triangle has a vertex adjacent to a degree-1 node."""
    return count_pendant_triangles(n, edges) > 0


def _random_tree(rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
    return [(int(rng.integers(0, v)), v) for v in range(1, n)]


def synth_molgraphs(count: int, min_n: int, max_n: int, num_classes: int, seed: int) -> list[Graph]:
    """Small connected graphs whose label is decided by a planted motif.

    Each graph is a random tree with zero or more planted triangles, each
    carrying a pendant node.  The label is the number of such pendant
    triangles, capped at ``num_classes - 1``.  Node features are
    ``[1, degree / 4]`` so message passing is needed to see the motif.
    """
    if not (2 <= min_n <= max_n):
        raise ValueError("synth_molgraphs requires 2 <= min_n <= max_n")
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    rng = np.random.default_rng(seed)
    graphs = []
    for k in range(count):
        n = int(rng.integers(min_n, max_n + 1))
        motifs = min(int(rng.integers(0, num_classes)), (n - 1) // 4)
        graphs.append(_make_molgraph(rng, n, motifs, num_classes, k))
    return graphs


def _make_molgraph(rng: np.random.Generator, n: int, motifs: int, num_classes: int, k: int) -> Graph:
    base = n - 4 * motifs
    for _ in range(100):
        pairs = _random_tree(rng, base)
        nxt = base
        for _m in range(motifs):
            anchor = int(rng.integers(0, nxt))
            a, b, c, p = nxt, nxt + 1, nxt + 2, nxt + 3
            pairs += [(anchor, a), (a, b), (b, c), (c, a), (a, p)]
            nxt += 4
        edges = _undirected(pairs)
        found = count_pendant_triangles(n, edges)
        if found == motifs:
            break
    deg = np.bincount(edges[:, 0], minlength=n).astype(np.float64)
    x = np.stack([np.ones(n), deg / 4.0], axis=1)
    label = min(found, num_classes - 1)
    return Graph(n=n, edges=edges, x=x, graph_label=label, id=f"mol{k}", num_classes=num_classes)


def count_pendant_triangles(n: int, edges: np.ndarray) -> int:
    adj = [set() for _ in range(n)]
    for s, t in edges:
        adj[s].add(int(t))
    deg = [len(a) for a in adj]
    tris = set()
    for v in range(n):
        if not any(deg[u] == 1 for u in adj[v]):
            continue
        nb = sorted(adj[v])
        for i, a in enumerate(nb):
            for b in nb[i + 1 :]:
                if b in adj[a]:
                    tris.add(tuple(sorted((v, a, b))))
    return len(tris)
