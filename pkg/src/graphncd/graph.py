"""Graph containers, text/JSON IO, adjacency preprocessing, splits, SBM data.

File formats:
  edges     one "u v" pair per line, whitespace separated, '#' starts a comment
  features  one row of floats per node, whitespace separated
  labels    one integer per node
  split     JSON with old/new class lists and the six node-id masks

Edges are undirected; in memory both directions are stored exactly once each.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .autodiff import SparseMatrix


class GraphParseError(ValueError):
    """Malformed text input; message carries file path and line number."""


class GraphValidationError(ValueError):
    """Structurally invalid graph (dangling ids, self loops, NaN features...)."""


@dataclass(frozen=True)
class Graph:
    """Undirected featured labeled graph. Treated as immutable once built."""

    num_nodes: int
    edges: np.ndarray      # (2E, 2) int64, both directions present exactly once
    features: np.ndarray   # (N, d) float64
    labels: np.ndarray     # (N,) int64

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    def num_undirected_edges(self) -> int:
        return self.edges.shape[0] // 2


def _canonical_edges(pairs: np.ndarray, num_nodes: int) -> np.ndarray:
    """Validate endpoints, drop duplicates, return both directions sorted."""
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if pairs.min() < 0 or pairs.max() >= num_nodes:
        bad = pairs[(pairs < 0) | (pairs >= num_nodes)][0]
        raise GraphValidationError(f"edge endpoint {bad} out of range for {num_nodes} nodes")
    if np.any(pairs[:, 0] == pairs[:, 1]):
        u = pairs[pairs[:, 0] == pairs[:, 1]][0, 0]
        raise GraphValidationError(f"self loop on node {u} is not allowed")
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    und = np.unique(np.stack([lo, hi], axis=1), axis=0)
    both = np.vstack([und, und[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    return both[order].astype(np.int64)


def build_graph(num_nodes: int, edge_pairs, features, labels) -> Graph:
    """Assemble and validate a Graph from raw arrays."""
    feats = np.asarray(features, dtype=np.float64)
    labs = np.asarray(labels, dtype=np.int64).reshape(-1)
    if feats.ndim != 2 or feats.shape[0] != num_nodes:
        raise GraphValidationError(f"features must be ({num_nodes}, d), got {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise GraphValidationError("features contain NaN or Inf")
    if labs.size != num_nodes:
        raise GraphValidationError(f"expected {num_nodes} labels, got {labs.size}")
    if labs.size and labs.min() < 0:
        raise GraphValidationError("labels must be non-negative")
    pairs = np.asarray(edge_pairs, dtype=np.int64).reshape(-1, 2)
    return Graph(num_nodes=num_nodes, edges=_canonical_edges(pairs, num_nodes),
                 features=feats, labels=labs)


def _read_lines(path: str) -> list[tuple[int, str]]:
    """Non-empty, non-comment lines with their 1-based line numbers."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.readlines()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc}") from exc
    out = []
    for i, line in enumerate(raw, start=1):
        body = line.split("#", 1)[0].strip()
        if body:
            out.append((i, body))
    return out


def load_graph(edges_path: str, features_path: str, labels_path: str) -> Graph:
    feat_rows = []
    width = None
    for lineno, body in _read_lines(features_path):
        try:
            row = [float(tok) for tok in body.split()]
        except ValueError as exc:
            raise GraphParseError(f"{features_path}: line {lineno}: {exc}") from exc
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise GraphParseError(
                f"{features_path}: line {lineno}: expected {width} values, got {len(row)}")
        feat_rows.append(row)
    if not feat_rows:
        raise GraphParseError(f"{features_path}: no feature rows")

    labels = []
    for lineno, body in _read_lines(labels_path):
        try:
            labels.append(int(body))
        except ValueError as exc:
            raise GraphParseError(f"{labels_path}: line {lineno}: {exc}") from exc

    pairs = []
    for lineno, body in _read_lines(edges_path):
        toks = body.split()
        if len(toks) != 2:
            raise GraphParseError(f"{edges_path}: line {lineno}: expected 'u v', got {body!r}")
        try:
            pairs.append((int(toks[0]), int(toks[1])))
        except ValueError as exc:
            raise GraphParseError(f"{edges_path}: line {lineno}: {exc}") from exc

    n = len(feat_rows)
    if len(labels) != n:
        raise GraphValidationError(
            f"{labels_path}: {len(labels)} labels for {n} feature rows")
    edge_arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return build_graph(n, edge_arr, np.array(feat_rows), np.array(labels))


def canonical_texts(g: Graph) -> tuple[str, str, str]:
    """Canonical (edges, features, labels) text: each undirected edge once
    as 'u v' with u < v, features as repr floats so round-trips are exact."""
    und = g.edges[g.edges[:, 0] < g.edges[:, 1]]
    edges = "".join(f"{u} {v}\n" for u, v in und)
    feats = "".join(" ".join(repr(float(x)) for x in row) + "\n" for row in g.features)
    labels = "".join(f"{y}\n" for y in g.labels)
    return edges, feats, labels


def save_graph(g: Graph, edges_path: str, features_path: str, labels_path: str) -> None:
    texts = canonical_texts(g)
    for path, text in zip((edges_path, features_path, labels_path), texts):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row L2 normalization; zero rows stay zero."""
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.where(norms > 0.0, norms, 1.0)


def normalize_adjacency(g: Graph) -> SparseMatrix:
    """Symmetric GCN operator D^{-1/2} (A + I) D^{-1/2}.

    Entries are built as w / sqrt(d_i * d_j), so symmetric positions are
    bitwise equal by construction.
    """
    n = g.num_nodes
    rows = np.concatenate([g.edges[:, 0], np.arange(n)])
    cols = np.concatenate([g.edges[:, 1], np.arange(n)])
    deg = np.bincount(rows, minlength=n).astype(np.float64)  # includes self loop
    vals = 1.0 / np.sqrt(deg[rows] * deg[cols])
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return SparseMatrix(mat, symmetric=True)


def mean_adjacency(g: Graph) -> SparseMatrix:
    """Row-stochastic neighbor mean, self excluded; isolated rows stay all-zero."""
    n = g.num_nodes
    rows, cols = g.edges[:, 0], g.edges[:, 1]
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    safe = np.where(deg > 0.0, deg, 1.0)
    vals = 1.0 / safe[rows]
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return SparseMatrix(mat, symmetric=False)


def operator_for(backbone: str, g: Graph) -> SparseMatrix:
    """Message-passing operator matching the backbone's aggregation rule."""
    if backbone == "gcn":
        return normalize_adjacency(g)
    if backbone == "sage":
        return mean_adjacency(g)
    raise ValueError(f"unknown backbone {backbone!r}")


@dataclass
class ClassSplit:
    """Old/new class lists plus the node-id masks for both training phases."""

    old_classes: list[int]
    new_classes: list[int]
    p1_train: list[int] = field(default_factory=list)
    p1_val: list[int] = field(default_factory=list)
    p1_test: list[int] = field(default_factory=list)
    p2_train: list[int] = field(default_factory=list)
    p2_val: list[int] = field(default_factory=list)
    p2_test: list[int] = field(default_factory=list)
    all_test: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {k: [int(x) for x in getattr(self, k)] for k in (
            "old_classes", "new_classes", "p1_train", "p1_val", "p1_test",
            "p2_train", "p2_val", "p2_test", "all_test")}
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ClassSplit":
        raw = json.loads(text)
        return cls(**{k: [int(x) for x in raw[k]] for k in (
            "old_classes", "new_classes", "p1_train", "p1_val", "p1_test",
            "p2_train", "p2_val", "p2_test", "all_test")})

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str) -> "ClassSplit":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def validate_split(g: Graph, split: ClassSplit) -> None:
    """Check the split is consistent with the graph's label set."""
    old, new = set(split.old_classes), set(split.new_classes)
    if old & new:
        raise GraphValidationError(f"classes in both old and new: {sorted(old & new)}")
    present = set(int(c) for c in np.unique(g.labels))
    if not present <= (old | new):
        raise GraphValidationError(
            f"labels {sorted(present - old - new)} missing from old/new lists")
    phase1 = split.p1_train + split.p1_val + split.p1_test
    phase2 = split.p2_train + split.p2_val + split.p2_test
    for name, ids, classes in (("phase-1", phase1, old), ("phase-2", phase2, new)):
        arr = np.asarray(ids, dtype=np.int64)
        if arr.size == 0:
            raise GraphValidationError(f"{name} masks are empty")
        if arr.min() < 0 or arr.max() >= g.num_nodes:
            raise GraphValidationError(f"{name} mask has out-of-range node id")
        if len(set(ids)) != len(ids):
            raise GraphValidationError(f"{name} masks overlap")
        bad = set(int(c) for c in np.unique(g.labels[arr])) - classes
        if bad:
            raise GraphValidationError(f"{name} mask contains classes {sorted(bad)}")
    if sorted(split.all_test) != sorted(split.p1_test + split.p2_test):
        raise GraphValidationError("all_test must be the union of p1_test and p2_test")


def _allocate(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Floor allocation with remainder repair; every bucket non-empty for n >= 3."""
    n_train = int(np.floor(ratios[0] * n))
    n_val = int(np.floor(ratios[1] * n))
    n_test = n - n_train - n_val
    counts = [n_train, n_val, n_test]
    for i in range(3):
        while counts[i] == 0:
            j = int(np.argmax(counts))
            counts[j] -= 1
            counts[i] += 1
    return counts[0], counts[1], counts[2]


def split_classes(g: Graph, old_classes: list[int], new_classes: list[int],
                  ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
                  seed: int = 0) -> ClassSplit:
    """Stratified per-class shuffle into train/val/test for both phases."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    if min(ratios) <= 0.0:
        raise ValueError(f"split ratios must be positive, got {ratios}")
    old = [int(c) for c in old_classes]
    new = [int(c) for c in new_classes]
    if set(old) & set(new):
        raise GraphValidationError("old and new class lists overlap")
    present = set(int(c) for c in np.unique(g.labels))
    if not present <= set(old) | set(new):
        raise GraphValidationError(
            f"labels {sorted(present - set(old) - set(new))} not covered by old/new lists")

    rng = np.random.default_rng(seed)
    split = ClassSplit(old_classes=old, new_classes=new)
    for classes, buckets in ((old, ("p1_train", "p1_val", "p1_test")),
                             (new, ("p2_train", "p2_val", "p2_test"))):
        for c in classes:
            ids = np.flatnonzero(g.labels == c)
            if ids.size < 3:
                raise GraphValidationError(f"class {c} has {ids.size} nodes, needs >= 3")
            perm = rng.permutation(ids)
            n_tr, n_va, _ = _allocate(ids.size, ratios)
            getattr(split, buckets[0]).extend(int(x) for x in perm[:n_tr])
            getattr(split, buckets[1]).extend(int(x) for x in perm[n_tr:n_tr + n_va])
            getattr(split, buckets[2]).extend(int(x) for x in perm[n_tr + n_va:])
    for k in ("p1_train", "p1_val", "p1_test", "p2_train", "p2_val", "p2_test"):
        getattr(split, k).sort()
    split.all_test = sorted(split.p1_test + split.p2_test)
    validate_split(g, split)
    return split


def sbm_generate(blocks: list[int], p_in: float, p_out: float,
                 feat_dim: int, feat_shift: float, seed: int = 0) -> Graph:
    """Stochastic block model with Gaussian features.

    Node labels are block indices. Each pair inside a block is an edge with
    probability p_in, across blocks p_out. Features are unit-variance
    Gaussians around a per-class mean of norm feat_shift; mean directions
    are orthonormal (seeded QR), so classes are separated across all axes
    rather than along single coordinates.
    """
    if not 0.0 <= p_in <= 1.0 or not 0.0 <= p_out <= 1.0:
        raise ValueError("edge probabilities must lie in [0, 1]")
    if min(blocks) <= 0:
        raise ValueError("every block needs at least one node")
    n = int(np.sum(blocks))
    k = len(blocks)
    labels = np.repeat(np.arange(k, dtype=np.int64), blocks)
    rng = np.random.default_rng(seed)

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    pairs = np.stack([iu[keep], ju[keep]], axis=1)

    # orthonormal mean directions; extra classes beyond feat_dim fall back
    # to normalized Gaussian draws
    raw = rng.standard_normal((feat_dim, min(k, feat_dim)))
    q, _ = np.linalg.qr(raw)
    dirs = q.T
    if k > feat_dim:
        extra = rng.standard_normal((k - feat_dim, feat_dim))
        extra /= np.sqrt((extra * extra).sum(axis=1, keepdims=True))
        dirs = np.vstack([dirs, extra])
    means = feat_shift * dirs[:k]
    feats = means[labels] + rng.standard_normal((n, feat_dim))
    return build_graph(n, pairs, feats, labels)
