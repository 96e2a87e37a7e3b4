"""Representational similarity between embedding sets: linear CKA and Mantel tests."""

from __future__ import annotations

import csv
import io
import os
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    F: np.ndarray
    node_ids: tuple[str, ...]
    source: str = ""

    def __post_init__(self):
        F = np.asarray(self.F, dtype=np.float64)
        if F.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if not np.all(np.isfinite(F)):
            raise ValueError(f"embedding set {self.source!r} has non-finite entries")
        ids = tuple(str(i) for i in self.node_ids)
        if len(ids) != F.shape[0]:
            raise ValueError("need one node id per embedding row")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "node_ids", ids)

    @classmethod
    def from_array(cls, F, source: str = "", node_ids=None) -> EmbeddingSet:
        F = np.asarray(F, dtype=np.float64)
        ids = node_ids if node_ids is not None else range(F.shape[0])
        return cls(F, tuple(ids), source)

    @property
    def n(self) -> int:
        return self.F.shape[0]


def _aligned(e1: EmbeddingSet, e2: EmbeddingSet) -> tuple[np.ndarray, np.ndarray]:
    if e1.node_ids != e2.node_ids:
        raise ValueError(f"embedding sets {e1.source!r} and {e2.source!r} are not aligned on node ids")
    if e1.n < 3:
        raise ValueError("similarity measures need at least 3 nodes")
    return e1.F, e2.F


def cka(e1: EmbeddingSet, e2: EmbeddingSet) -> float:
    """Linear centered kernel alignment, in [0, 1]."""
    x, y = _aligned(e1, e2)
    x = x - x.mean(axis=0, keepdims=True)
    y = y - y.mean(axis=0, keepdims=True)
    xx = np.linalg.norm(x.T @ x)
    yy = np.linalg.norm(y.T @ y)
    if xx == 0.0 or yy == 0.0:
        return 0.0
    return float(np.linalg.norm(y.T @ x) ** 2 / (xx * yy))


def _unit_rows(F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(F, axis=1)
    ok = norms > 0
    out = np.zeros_like(F)
    out[ok] = F[ok] / norms[ok, None]
    return out, ok


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if a.size < 3:
        raise ValueError(f"Mantel test needs at least 3 distance pairs, got {a.size}")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("Mantel test undefined: constant distance vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _cosine_distances(F: np.ndarray, i: np.ndarray, j: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u, ok = _unit_rows(F)
    d = 1.0 - np.sum(u[i] * u[j], axis=1)
    return d, ok[i] & ok[j]


def _mantel_pairs(e1: EmbeddingSet, e2: EmbeddingSet, i: np.ndarray, j: np.ndarray) -> float:
    x, y = _aligned(e1, e2)
    d1, ok1 = _cosine_distances(x, i, j)
    d2, ok2 = _cosine_distances(y, i, j)
    keep = ok1 & ok2
    if not np.all(keep):
        warnings.warn(f"Mantel test: excluded {int(np.sum(~keep))} pairs with zero-norm rows", RuntimeWarning, stacklevel=3)
    return _pearson(d1[keep], d2[keep])


def mantel_global(e1: EmbeddingSet, e2: EmbeddingSet) -> float:
    """Pearson correlation of all pairwise cosine distances (strict upper triangle)."""
    i, j = np.triu_indices(e1.n, k=1)
    return _mantel_pairs(e1, e2, i, j)


def undirected_pairs(edges) -> tuple[np.ndarray, np.ndarray]:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    a, b = np.minimum(edges[:, 0], edges[:, 1]), np.maximum(edges[:, 0], edges[:, 1])
    keep = a != b
    pairs = np.unique(np.stack([a[keep], b[keep]], axis=1), axis=0)
    return pairs[:, 0], pairs[:, 1]


def mantel_local(e1: EmbeddingSet, e2: EmbeddingSet, edges) -> float:
    """Mantel correlation restricted to graph edges, each undirected edge once."""
    i, j = undirected_pairs(edges)
    if i.size < 3:
        raise ValueError(f"local Mantel test needs at least 3 distinct edges, got {i.size}")
    if i.size and max(i.max(), j.max()) >= e1.n:
        raise ValueError("edge endpoint outside the embedding set")
    return _mantel_pairs(e1, e2, i, j)


# ---------------------------------------------------------------- embedding files


def save_embeddings(e: EmbeddingSet, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(f"{e.n} {e.F.shape[1]}\n")
        for nid, row in zip(e.node_ids, e.F):
            fh.write(nid + " " + " ".join(repr(float(v)) for v in row) + "\n")


def load_embeddings(path: str | os.PathLike, source: str | None = None) -> EmbeddingSet:
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if not lines or len(lines[0]) != 2:
        raise ValueError(f"{path}:1: embedding header must be 'n d'")
    n, d = int(lines[0][0]), int(lines[0][1])
    if len(lines) - 1 != n:
        raise ValueError(f"{path}: header says {n} rows, found {len(lines) - 1}")
    ids, rows = [], []
    for k, parts in enumerate(lines[1:], start=2):
        if len(parts) != d + 1:
            raise ValueError(f"{path}:{k}: expected node id and {d} values")
        ids.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    return EmbeddingSet(np.array(rows).reshape(n, d), tuple(ids), source or str(path))


def load_edge_list(path: str | os.PathLike) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for k, ln in enumerate(fh, start=1):
            parts = ln.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 2:
                raise ValueError(f"{path}:{k}: edge line must be 'src dst'")
            rows.append((int(parts[0]), int(parts[1])))
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def edges_by_id(edges, node_ids: Sequence[str]) -> np.ndarray:
    """Translate an edge list written in node ids to row positions of an embedding set.

    Edges with an endpoint outside ``node_ids`` are dropped, so a full-graph
    edge list can be used with embeddings of a node subset.
    """
    pos = {nid: k for k, nid in enumerate(node_ids)}
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    out = [(pos[str(a)], pos[str(b)]) for a, b in edges if str(a) in pos and str(b) in pos]
    return np.array(out, dtype=np.int64).reshape(-1, 2)


# ---------------------------------------------------------------- reports

REPORT_COLUMNS = ("student", "cka", "mantel_global", "mantel_local")


def compare(reference: EmbeddingSet, others: Sequence[EmbeddingSet], edges) -> list[dict]:
    rows = []
    for e in others:
        rows.append(
            {
                "student": e.source,
                "cka": cka(reference, e),
                "mantel_global": mantel_global(reference, e),
                "mantel_local": mantel_local(reference, e, edges),
            }
        )
    return rows


def rows_to_csv(rows: Sequence[dict], columns=REPORT_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], str) else repr(float(r[c])) for c in columns])
    return buf.getvalue()


def model_embeddings(model, batch, nodes=None, source: str = "") -> EmbeddingSet:
    """Penultimate node embeddings of ``model`` on ``batch`` (evaluation mode)."""
    from .gnn import forward

    feats, _ = forward(model, batch, train_mode=False)
    F = feats.data
    nodes = np.arange(batch.num_nodes) if nodes is None else np.asarray(nodes)
    return EmbeddingSet(F[nodes], tuple(str(int(v)) for v in nodes), source)


def similarity_report(teacher, students: Sequence, batch, nodes=None, names: Sequence[str] | None = None) -> list[dict]:
    """CKA, global and local Mantel of each student against the teacher.

    ``nodes`` restricts the comparison (and the local test's edges) to a node
    subset such as the validation split.
    """
    nodes = np.arange(batch.num_nodes) if nodes is None else np.asarray(nodes)
    _, local_edges = batch.induced(nodes)
    ref = model_embeddings(teacher, batch, nodes, "teacher")
    names = list(names) if names is not None else [f"student{k}" for k in range(len(students))]
    sets = [model_embeddings(m, batch, nodes, name) for m, name in zip(students, names)]
    return compare(ref, sets, local_edges)
