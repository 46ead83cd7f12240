"""Exact and approximate nearest-neighbour search under angular distance.

The approximate index is a forest of random-projection trees in the style of
ANNOY: each internal node splits its points by the perpendicular bisector of
two sampled points, and queries walk all trees best-first through a shared
priority queue ordered by margin to the hyperplane.
"""
from __future__ import annotations

import base64
import heapq
import io
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from coderag.errors import DataError

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-6
# angular_distance refuses inputs further than this from unit norm
INPUT_UNIT_TOL = 1e-3

EMB_HEADER = "emb v1"
IDX_HEADER = "rpforest v1"


@dataclass(frozen=True)
class AnnConfig:
    n_trees: int = 1000
    search_k: int = 10000
    leaf_size: int = 64
    metric: str = "angular"

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.leaf_size < 1:
            raise ValueError(f"leaf_size must be >= 1, got {self.leaf_size}")
        if self.metric != "angular":
            raise ValueError("only the angular metric is supported")


class VectorStore:
    """An immutable id -> unit-vector table (float32 storage)."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, *, normalize: bool = True):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2:
            raise DataError(f"expected a 2-d array of vectors, got shape {vectors.shape}")
        ids = tuple(str(i) for i in ids)
        if len(ids) != vectors.shape[0]:
            raise DataError(f"{len(ids)} ids for {vectors.shape[0]} vectors")
        seen = set()
        for i in ids:
            if i in seen:
                raise DataError(f"duplicate id {i!r}")
            seen.add(i)
        vectors = vectors.astype(np.float32, copy=True)
        norms = np.sqrt((vectors.astype(np.float64) ** 2).sum(axis=1))
        for row in np.flatnonzero(norms == 0.0):
            raise DataError(f"zero vector for id {ids[row]!r}")
        off = np.abs(norms - 1.0) > UNIT_TOL
        if off.any():
            if not normalize:
                bad = ids[int(np.flatnonzero(off)[0])]
                raise DataError(f"vector for id {bad!r} is not unit-norm")
            # already-unit rows are left untouched so that export/import is bit-exact
            vectors[off] = (vectors[off].astype(np.float64) / norms[off, None]).astype(np.float32)
        vectors.setflags(write=False)
        self.ids = ids
        self.vectors = vectors
        self._pos = {i: k for k, i in enumerate(ids)}

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, doc_id: str) -> int:
        return self._pos[doc_id]

    def vector(self, doc_id: str) -> np.ndarray:
        return self.vectors[self._pos[doc_id]]

    def dots(self, q: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        """Row-wise dot products in float64.

        Each row is reduced independently, so a row's value does not depend on
        which other rows are included; exact and approximate search share it.
        """
        q = np.asarray(q, dtype=np.float64)
        block = self.vectors if rows is None else self.vectors[rows]
        return (block.astype(np.float64) * q).sum(axis=1)


def _check_unit(v: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.sqrt(v @ v))
    if abs(n - 1.0) > INPUT_UNIT_TOL:
        raise ValueError(f"{name} is not unit-norm (norm={n:.6g})")
    return v


def _dist_from_dot(dot):
    return np.sqrt(np.maximum(0.0, 2.0 - 2.0 * dot))


def angular_distance(u, v) -> float:
    """sqrt(2 - 2 cos) between two unit vectors; lies in [0, 2]."""
    u = _check_unit(u, "u")
    v = _check_unit(v, "v")
    return float(_dist_from_dot(float(u @ v)))


def _rank(ids: Sequence[str], rows: np.ndarray, dists: np.ndarray, k: int):
    order = sorted(range(len(rows)), key=lambda j: (dists[j], ids[rows[j]]))
    return [(ids[rows[j]], float(dists[j])) for j in order[:k]]


def exact_search(store: VectorStore, q, k: int) -> list[tuple[str, float]]:
    """Exhaustive top-k by angular distance; ties broken by id ascending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(store) == 0:
        raise ValueError("store is empty")
    q = _check_unit(q, "query")
    rows = np.arange(len(store))
    dists = _dist_from_dot(store.dots(q))
    return _rank(store.ids, rows, dists, k)


@dataclass
class RpTree:
    """Flat node arrays. Internal node i has children[i] = (left, right);
    leaves have children[i] = (-1, -1) and their members in leaves[i]."""

    normals: np.ndarray
    offsets: np.ndarray
    children: np.ndarray
    leaves: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.children.shape[0]

    def route(self, x: np.ndarray) -> int:
        node = 0
        while self.children[node, 0] >= 0:
            margin = float(self.normals[node].astype(np.float64) @ x) - float(self.offsets[node])
            node = int(self.children[node, 1] if margin > 0 else self.children[node, 0])
        return node


@dataclass
class RpForest:
    trees: list[RpTree]
    n_trees: int
    leaf_size: int
    seed: int


_SPLIT_ATTEMPTS = 8


def _pick_pair(vectors: np.ndarray, members: np.ndarray, rng: np.random.Generator):
    n = members.shape[0]
    for _ in range(_SPLIT_ATTEMPTS):
        i, j = rng.choice(n, size=2, replace=False)
        a, b = members[i], members[j]
        if not np.array_equal(vectors[a], vectors[b]):
            return a, b
    first = vectors[members[0]]
    differs = np.flatnonzero(np.any(vectors[members] != first, axis=1))
    if differs.size == 0:
        return None
    return members[0], members[int(differs[rng.integers(differs.size)])]


def _build_tree(vectors: np.ndarray, leaf_size: int, rng: np.random.Generator) -> RpTree:
    d = vectors.shape[1]
    normals: list[np.ndarray] = [np.zeros(d, np.float32)]
    offsets: list[float] = [0.0]
    children: list[list[int]] = [[-1, -1]]
    leaves: dict[int, np.ndarray] = {}
    stack = [(0, np.arange(vectors.shape[0], dtype=np.int64))]
    while stack:
        node, members = stack.pop()
        pair = _pick_pair(vectors, members, rng) if members.size > leaf_size else None
        if pair is None:
            leaves[node] = members
            continue
        a = vectors[pair[0]].astype(np.float64)
        b = vectors[pair[1]].astype(np.float64)
        normal = a - b
        normal /= np.sqrt(normal @ normal)
        offset = float(normal @ (a + b)) / 2.0
        left_id = len(children)
        children.extend([[-1, -1], [-1, -1]])
        normals.extend([np.zeros(d, np.float32)] * 2)
        offsets.extend([0.0, 0.0])
        children[node] = [left_id, left_id + 1]
        normals[node] = normal.astype(np.float32)
        # the stored float32 normal is what queries see; keep routing consistent with it
        offsets[node] = offset
        margins = (vectors[members].astype(np.float64) * normals[node].astype(np.float64)).sum(axis=1) - offset
        right = margins > 0
        stack.append((left_id + 1, members[right]))
        stack.append((left_id, members[~right]))
    return RpTree(
        normals=np.stack(normals),
        offsets=np.asarray(offsets, dtype=np.float64),
        children=np.asarray(children, dtype=np.int64),
        leaves=leaves,
    )


def build_forest(store: VectorStore, cfg: AnnConfig | None = None, leaf_size: int | None = None,
                 seed: int = 0) -> RpForest:
    """Build ``cfg.n_trees`` trees; tree t is seeded with ``seed + t``."""
    cfg = cfg or AnnConfig()
    leaf_size = cfg.leaf_size if leaf_size is None else leaf_size
    if len(store) == 0:
        raise ValueError("cannot index an empty store")
    trees = [_build_tree(store.vectors, leaf_size, np.random.default_rng(seed + t))
             for t in range(cfg.n_trees)]
    return RpForest(trees=trees, n_trees=cfg.n_trees, leaf_size=leaf_size, seed=seed)


def candidates(forest: RpForest, q: np.ndarray, search_k: int) -> np.ndarray:
    """Row indices of the stored points seen before ``search_k`` unique ones were collected."""
    q = np.asarray(q, dtype=np.float64)
    heap = [(-np.inf, t, 0) for t in range(len(forest.trees))]
    heapq.heapify(heap)
    seen: dict[int, None] = {}
    while heap and len(seen) < search_k:
        neg_pri, t, node = heapq.heappop(heap)
        tree = forest.trees[t]
        left, right = tree.children[node]
        if left < 0:
            for m in tree.leaves[node].tolist():
                seen[m] = None
            continue
        pri = -neg_pri
        margin = float(tree.normals[node].astype(np.float64) @ q) - float(tree.offsets[node])
        heapq.heappush(heap, (-min(pri, -margin), t, int(left)))
        heapq.heappush(heap, (-min(pri, margin), t, int(right)))
    return np.fromiter(seen.keys(), dtype=np.int64, count=len(seen))


def ann_search(forest: RpForest, store: VectorStore, q, k: int, search_k: int) -> list[tuple[str, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if search_k < k:
        raise ValueError(f"search_k ({search_k}) must be >= k ({k})")
    q = _check_unit(q, "query")
    rows = candidates(forest, q, search_k)
    dists = _dist_from_dot(store.dots(q, rows))
    return _rank(store.ids, rows, dists, k)


# -- embedding files ---------------------------------------------------------

def export_embeddings(store: VectorStore, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{EMB_HEADER} {len(store)} {store.d}\n")
        for doc_id, vec in zip(store.ids, store.vectors):
            if "\t" in doc_id or "\n" in doc_id:
                raise DataError(f"id {doc_id!r} contains a tab or newline")
            payload = base64.b64encode(vec.astype("<f4").tobytes()).decode("ascii")
            fh.write(f"{doc_id}\t{payload}\n")


def read_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Parse an embedding file without normalizing (rejects zero vectors)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if header[:2] != EMB_HEADER.split() or len(header) != 4:
            raise DataError(f"{path}: bad header {' '.join(header)!r}")
        count, dim = int(header[2]), int(header[3])
        ids: list[str] = []
        rows: list[np.ndarray] = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            doc_id, _, payload = line.partition("\t")
            raw = base64.b64decode(payload)
            if len(raw) != 4 * dim:
                raise DataError(f"{path}:{lineno}: record {doc_id!r} has {len(raw) // 4} values, expected {dim}")
            vec = np.frombuffer(raw, dtype="<f4")
            if not np.any(vec):
                raise DataError(f"{path}:{lineno}: record {doc_id!r} is a zero vector")
            ids.append(doc_id)
            rows.append(vec)
    if len(ids) != count:
        raise DataError(f"{path}: header promises {count} records, found {len(ids)}")
    vectors = np.stack(rows) if rows else np.zeros((0, dim), np.float32)
    return ids, vectors


def import_embeddings(path: str | Path) -> VectorStore:
    ids, vectors = read_embeddings(path)
    return VectorStore(ids, vectors)


# -- index files ------------------------------------------------------------

def save_index(forest: RpForest, store: VectorStore, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {
        "ids": np.asarray(store.ids, dtype=object).astype(str),
        "vectors": store.vectors,
    }
    for t, tree in enumerate(forest.trees):
        leaf_nodes = np.asarray(sorted(tree.leaves), dtype=np.int64)
        sizes = np.asarray([tree.leaves[n].size for n in leaf_nodes], dtype=np.int64)
        members = (np.concatenate([tree.leaves[n] for n in leaf_nodes])
                   if leaf_nodes.size else np.zeros(0, np.int64))
        arrays[f"t{t}_normals"] = tree.normals
        arrays[f"t{t}_offsets"] = tree.offsets
        arrays[f"t{t}_children"] = tree.children
        arrays[f"t{t}_leaf_nodes"] = leaf_nodes
        arrays[f"t{t}_leaf_sizes"] = sizes
        arrays[f"t{t}_leaf_members"] = members
    buf = io.BytesIO()
    # np.savez stamps entries with the wall clock; fixed timestamps keep files byte-identical
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            entry = io.BytesIO()
            np.lib.format.write_array(entry, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), entry.getvalue())
    with open(path, "wb") as fh:
        fh.write(f"{IDX_HEADER} {forest.n_trees} {forest.leaf_size} {forest.seed}\n".encode())
        fh.write(buf.getvalue())


def load_index(path: str | Path) -> tuple[RpForest, VectorStore]:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if header[:2] != IDX_HEADER.split():
            raise DataError(f"{path}: not an index file")
        n_trees, leaf_size, seed = (int(x) for x in header[2:5])
        data = np.load(io.BytesIO(fh.read()), allow_pickle=False)
    store = VectorStore([str(i) for i in data["ids"]], data["vectors"], normalize=False)
    trees = []
    for t in range(n_trees):
        nodes = data[f"t{t}_leaf_nodes"]
        bounds = np.concatenate([[0], np.cumsum(data[f"t{t}_leaf_sizes"])])
        members = data[f"t{t}_leaf_members"]
        leaves = {int(n): members[bounds[i]:bounds[i + 1]] for i, n in enumerate(nodes)}
        trees.append(RpTree(normals=data[f"t{t}_normals"], offsets=data[f"t{t}_offsets"],
                            children=data[f"t{t}_children"], leaves=leaves))
    return RpForest(trees=trees, n_trees=n_trees, leaf_size=leaf_size, seed=seed), store


def random_unit_vectors(n: int, d: int, seed: int) -> np.ndarray:
    x = np.random.default_rng(seed).standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def recall_at_k(approx: Iterable[Sequence[str]], exact: Iterable[Sequence[str]], k: int) -> float:
    # thin alias kept here for index diagnostics; the metric proper lives in coderag.metrics
    from coderag.metrics import ann_recall
    return ann_recall(list(approx), list(exact), k)
