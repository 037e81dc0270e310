"""Graph data model, portable bundle I/O, preprocessing filter, and splits.

A bundle directory holds five plain-text files:

* ``meta.json``     -- ``{"name", "num_nodes", "num_features", "num_classes"}``
* ``edges.tsv``     -- one undirected edge per line, ``src<TAB>dst`` with src < dst
* ``features.tsv``  -- sparse triplets ``node<TAB>dim<TAB>value``
* ``labels.tsv``    -- ``node<TAB>class`` for labelled nodes only
* ``splits.json``   -- ``{"train": [...], "val": [...], "test": [...]}``
  (optional; converted datasets ship without it and get their split from
  :func:`make_split`)

All indices are 0-based, files UTF-8 with LF line endings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

UNLABELED = -1


class BundleError(ValueError):
    """Malformed bundle content; message carries file and line when known."""


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @staticmethod
    def empty() -> "Split":
        e = np.zeros(0, dtype=np.int64)
        return Split(e.copy(), e.copy(), e.copy())


@dataclass(frozen=True)
class SplitSpec:
    """How to draw a class-balanced low-label-rate split."""

    label_rate: float
    val_size: int = 500
    test_size: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class GraphBundle:
    """Immutable graph: sparse features, symmetric binary CSR adjacency, labels, split."""

    name: str
    num_nodes: int
    num_features: int
    num_classes: int
    features: sp.csr_matrix
    adjacency: sp.csr_matrix
    labels: np.ndarray
    split: Split = field(default_factory=Split.empty)

    def __post_init__(self):
        self.labels.setflags(write=False)
        for part in (self.split.train, self.split.val, self.split.test):
            part.setflags(write=False)

    def validate(self) -> "GraphBundle":
        n = self.num_nodes
        a = self.adjacency
        if a.shape != (n, n):
            raise BundleError(f"adjacency shape {a.shape} != ({n}, {n})")
        if a.diagonal().sum() != 0:
            raise BundleError("adjacency has self-loops")
        if a.nnz and not np.all(a.data == 1):
            raise BundleError("adjacency entries must be 0/1")
        if (a != a.T).nnz != 0:
            raise BundleError("adjacency is not symmetric")
        if self.features.shape != (n, self.num_features):
            raise BundleError(f"feature shape {self.features.shape} != ({n}, {self.num_features})")
        if self.labels.shape != (n,):
            raise BundleError("labels must be one entry per node")
        labeled = self.labels[self.labels != UNLABELED]
        if labeled.size and (labeled.min() < 0 or labeled.max() >= self.num_classes):
            raise BundleError("label outside [0, num_classes)")
        parts = [self.split.train, self.split.val, self.split.test]
        flat = np.concatenate(parts)
        if flat.size and (flat.min() < 0 or flat.max() >= n):
            raise BundleError("split index out of range")
        if np.unique(flat).size != flat.size:
            raise BundleError("split lists are not pairwise disjoint")
        if np.any(self.labels[self.split.train] == UNLABELED):
            raise BundleError("train split contains an unlabeled node")
        return self

    @property
    def num_labeled(self) -> int:
        return int(self.split.train.size)

    @property
    def num_unlabeled(self) -> int:
        # every node outside the train set counts as unlabeled supervision-wise
        return self.num_nodes - self.num_labeled

    def unlabeled_indices(self) -> np.ndarray:
        mask = np.ones(self.num_nodes, dtype=bool)
        mask[self.split.train] = False
        return np.nonzero(mask)[0]


# ---------------------------------------------------------------------------
# bundle I/O


def _read_tsv_rows(path: Path, n_cols: int):
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise BundleError(f"{path}: missing file") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != n_cols:
            raise BundleError(f"{path}:{lineno}: expected {n_cols} columns, got {len(cols)}")
        yield lineno, cols


def _parse_index(path: Path, lineno: int, token: str, limit: int, what: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise BundleError(f"{path}:{lineno}: {what} is not an integer: {token!r}") from None
    if not 0 <= value < limit:
        raise BundleError(f"{path}:{lineno}: {what} {value} out of range [0, {limit})")
    return value


def load_bundle(path) -> GraphBundle:
    """Load and validate a bundle directory.

    Edges are symmetrized and deduplicated; a self-loop in the file is an
    error.  ``splits.json`` may be absent (empty split).
    """
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise BundleError(f"{meta_path}: missing file")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    try:
        name = str(meta["name"])
        n = int(meta["num_nodes"])
        m = int(meta["num_features"])
        k = int(meta["num_classes"])
    except KeyError as exc:
        raise BundleError(f"{meta_path}: missing key {exc}") from None

    edges_path = root / "edges.tsv"
    pairs = set()
    for lineno, (s, d) in _read_tsv_rows(edges_path, 2):
        src = _parse_index(edges_path, lineno, s, n, "edge endpoint")
        dst = _parse_index(edges_path, lineno, d, n, "edge endpoint")
        if src == dst:
            raise BundleError(f"{edges_path}:{lineno}: self-loop on node {src}")
        pairs.add((min(src, dst), max(src, dst)))
    if pairs:
        arr = np.array(sorted(pairs), dtype=np.int64)
        rows = np.concatenate([arr[:, 0], arr[:, 1]])
        cols = np.concatenate([arr[:, 1], arr[:, 0]])
        adjacency = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    else:
        adjacency = sp.csr_matrix((n, n))

    feat_path = root / "features.tsv"
    f_rows, f_cols, f_vals = [], [], []
    seen_cells = set()
    for lineno, (node, dim, value) in _read_tsv_rows(feat_path, 3):
        i = _parse_index(feat_path, lineno, node, n, "feature node")
        j = _parse_index(feat_path, lineno, dim, m, "feature dim")
        if (i, j) in seen_cells:
            raise BundleError(f"{feat_path}:{lineno}: duplicate feature cell ({i}, {j})")
        seen_cells.add((i, j))
        try:
            v = float(value)
        except ValueError:
            raise BundleError(f"{feat_path}:{lineno}: bad value {value!r}") from None
        f_rows.append(i)
        f_cols.append(j)
        f_vals.append(v)
    features = sp.csr_matrix((f_vals, (f_rows, f_cols)), shape=(n, m))

    labels_path = root / "labels.tsv"
    labels = np.full(n, UNLABELED, dtype=np.int64)
    for lineno, (node, cls) in _read_tsv_rows(labels_path, 2):
        i = _parse_index(labels_path, lineno, node, n, "labeled node")
        c = _parse_index(labels_path, lineno, cls, k, "class")
        if labels[i] != UNLABELED:
            raise BundleError(f"{labels_path}:{lineno}: duplicate label for node {i}")
        labels[i] = c

    splits_path = root / "splits.json"
    if splits_path.is_file():
        raw = json.loads(splits_path.read_text(encoding="utf-8"))
        def part(key):
            idx = np.asarray(raw.get(key, []), dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise BundleError(f"{splits_path}: {key} index out of range")
            return idx
        split = Split(part("train"), part("val"), part("test"))
    else:
        split = Split.empty()

    return GraphBundle(name, n, m, k, features, adjacency, labels, split).validate()


def save_bundle(bundle: GraphBundle, path, extra_meta: dict | None = None) -> None:
    """Write a bundle directory with canonically sorted TSV rows."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    upper = sp.triu(bundle.adjacency, k=1).tocoo()
    meta = {
        "name": bundle.name,
        "num_nodes": bundle.num_nodes,
        "num_features": bundle.num_features,
        "num_classes": bundle.num_classes,
        "num_edges": int(upper.nnz),
    }
    if extra_meta:
        meta.update(extra_meta)
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    order = np.lexsort((upper.col, upper.row))
    edge_lines = [f"{upper.row[i]}\t{upper.col[i]}" for i in order]
    (root / "edges.tsv").write_text("\n".join(edge_lines) + ("\n" if edge_lines else ""), encoding="utf-8")

    coo = bundle.features.tocoo()
    order = np.lexsort((coo.col, coo.row))
    feat_lines = [f"{coo.row[i]}\t{coo.col[i]}\t{float(coo.data[i])!r}" for i in order]
    (root / "features.tsv").write_text("\n".join(feat_lines) + ("\n" if feat_lines else ""), encoding="utf-8")

    labeled = np.nonzero(bundle.labels != UNLABELED)[0]
    label_lines = [f"{i}\t{bundle.labels[i]}" for i in labeled]
    (root / "labels.tsv").write_text("\n".join(label_lines) + ("\n" if label_lines else ""), encoding="utf-8")

    splits = {
        "train": bundle.split.train.tolist(),
        "val": bundle.split.val.tolist(),
        "test": bundle.split.test.tolist(),
    }
    (root / "splits.json").write_text(json.dumps(splits) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# preprocessing filter


def renormalized_adjacency(adjacency: sp.spmatrix) -> sp.csr_matrix:
    """D^(-1/2) (A + I) D^(-1/2) with D the degree matrix of A + I."""
    n = adjacency.shape[0]
    with_loops = (adjacency + sp.identity(n, format="csr")).tocsr()
    degrees = np.asarray(with_loops.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(degrees)
    scaling = sp.diags(inv_sqrt)
    return (scaling @ with_loops @ scaling).tocsr()


def smooth_features(features, normalized_adjacency: sp.spmatrix, strength: int) -> np.ndarray:
    """Apply the renormalization filter ``strength`` times: X <- A_hat^c X.

    Iterates sparse-dense products; the filtered power is never materialised.
    Returns a dense array (the filter densifies sparse inputs anyway).
    """
    if strength < 0:
        raise ValueError("filter strength must be non-negative")
    if sp.issparse(features):
        current = np.asarray(features.todense(), dtype=np.float64)
    else:
        current = np.array(features, dtype=np.float64)
    for _ in range(strength):
        current = normalized_adjacency @ current
    return current


def default_filter_strength(labels_per_class: int) -> int:
    """Low supervision gets strong smoothing; well-labelled splits get little."""
    if labels_per_class <= 2:
        return 15
    if labels_per_class <= 5:
        return 8
    return 3


# ---------------------------------------------------------------------------
# splits


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def make_split(bundle: GraphBundle, spec: SplitSpec) -> GraphBundle:
    """Draw a class-balanced train set at the given label rate, then val/test.

    Per-class train count is ``round(label_rate * n / k)``, at least 1, capped
    by class availability.  Val and test are drawn uniformly from the labelled
    remainder without replacement.
    """
    n, k = bundle.num_nodes, bundle.num_classes
    per_class = _round_half_up(spec.label_rate * n / k)
    if per_class < 1:
        raise ValueError(
            f"label rate {spec.label_rate} gives {per_class} nodes per class; need at least 1")
    rng = np.random.default_rng(spec.seed)
    train: list[int] = []
    for cls in range(k):
        candidates = np.nonzero(bundle.labels == cls)[0]
        if candidates.size == 0:
            raise ValueError(f"class {cls} has no labeled candidates")
        take = min(per_class, candidates.size)
        train.extend(rng.choice(candidates, size=take, replace=False).tolist())
    train_arr = np.sort(np.asarray(train, dtype=np.int64))

    remainder = np.setdiff1d(np.nonzero(bundle.labels != UNLABELED)[0], train_arr)
    rng.shuffle(remainder)
    if spec.val_size + spec.test_size > remainder.size:
        raise ValueError(
            f"val+test sizes ({spec.val_size}+{spec.test_size}) exceed the "
            f"{remainder.size} labeled nodes left outside the train set")
    val = np.sort(remainder[:spec.val_size].astype(np.int64))
    test = np.sort(remainder[spec.val_size:spec.val_size + spec.test_size].astype(np.int64))
    return replace(bundle, split=Split(train_arr, val, test)).validate()
