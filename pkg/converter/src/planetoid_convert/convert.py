"""Assemble Planetoid shard files into one bundle directory.

A Planetoid distribution ships eight files per dataset:

* ``ind.<name>.x`` / ``ind.<name>.y``   -- labelled training shard
* ``ind.<name>.tx`` / ``ind.<name>.ty`` -- test shard (rows permuted, see
  ``ind.<name>.test.index``)
* ``ind.<name>.allx`` / ``ind.<name>.ally`` -- training plus unlabelled rows
* ``ind.<name>.graph``                  -- adjacency dict {node: [neighbours]}
* ``ind.<name>.test.index``             -- full-graph positions of test rows

Feature/label shards are python2-era pickles of scipy sparse matrices and
numpy arrays.  The full matrices are ``vstack(allx, tx)`` with the test block
re-permuted into its ``test.index`` positions; gaps in the test range (the
well-known Citeseer isolated test nodes) become zero-feature, unlabelled rows
and are logged, not dropped.

The emitted bundle matches the trainer's format byte for byte: canonically
sorted TSV rows, ``repr`` floats, LF endings, and no ``splits.json`` (splits
are drawn downstream at a chosen label rate).
"""

from __future__ import annotations

import json
import logging
import pickle
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger("planetoid_convert")

DATASETS = ("cora", "citeseer", "pubmed")
SHARDS = ("x", "y", "tx", "ty", "allx", "ally", "graph")


class ConversionError(ValueError):
    """Source files missing, malformed, or mutually inconsistent."""


class _CompatUnpickler(pickle.Unpickler):
    """Map legacy scipy module paths from python2-era pickles."""

    RENAMES = {
        "scipy.sparse.csr": "scipy.sparse",
        "scipy.sparse.csc": "scipy.sparse",
        "scipy.sparse.lil": "scipy.sparse",
        "scipy.sparse.coo": "scipy.sparse",
    }

    def find_class(self, module, name):
        return super().find_class(self.RENAMES.get(module, module), name)


def _load_pickle(path: Path):
    with open(path, "rb") as fh:
        return _CompatUnpickler(fh, encoding="latin1").load()


def read_planetoid(source_dir, dataset_name: str) -> dict:
    """Read and assemble the eight shard files into full-graph arrays."""
    source = Path(source_dir)
    parts = {}
    for shard in SHARDS:
        path = source / f"ind.{dataset_name}.{shard}"
        if not path.is_file():
            raise ConversionError(f"missing source file: {path}")
        parts[shard] = _load_pickle(path)
    index_path = source / f"ind.{dataset_name}.test.index"
    if not index_path.is_file():
        raise ConversionError(f"missing source file: {index_path}")
    test_idx = np.array([int(line) for line in index_path.read_text().split()],
                        dtype=np.int64)
    if test_idx.size == 0:
        raise ConversionError(f"{index_path}: no test indices")

    allx = sp.csr_matrix(parts["allx"])
    tx = sp.csr_matrix(parts["tx"])
    ally = np.asarray(parts["ally"])
    ty = np.asarray(parts["ty"])
    if allx.shape[1] != tx.shape[1]:
        raise ConversionError(
            f"feature width mismatch: allx {allx.shape} vs tx {tx.shape}")
    if ally.shape[1] != ty.shape[1]:
        raise ConversionError(
            f"label width mismatch: ally {ally.shape} vs ty {ty.shape}")
    if tx.shape[0] != test_idx.size or ty.shape[0] != test_idx.size:
        raise ConversionError(
            f"test shard rows ({tx.shape[0]}) != test index count ({test_idx.size})")

    # re-extend the test block over the whole tail after allx; positions the
    # index skips (isolated test nodes) stay all-zero and therefore unlabelled
    span_start = allx.shape[0]
    if int(test_idx.min()) < span_start:
        raise ConversionError(
            f"test index {int(test_idx.min())} overlaps the allx block of {span_start} rows")
    span = int(test_idx.max()) - span_start + 1
    if span != test_idx.size:
        log.warning("%s: %d isolated test positions kept as zero-feature unlabeled nodes",
                    dataset_name, span - test_idx.size)
    tx_full = sp.lil_matrix((span, tx.shape[1]), dtype=tx.dtype)
    tx_full[test_idx - span_start] = tx
    ty_full = np.zeros((span, ty.shape[1]), dtype=ty.dtype)
    ty_full[test_idx - span_start] = ty

    features = sp.vstack([allx, tx_full.tocsr()]).tocsr()
    one_hot = np.vstack([ally, ty_full])
    n = features.shape[0]

    graph = parts["graph"]
    if len(graph) != n:
        raise ConversionError(f"graph lists {len(graph)} nodes, features give {n}")

    row_sums = one_hot.sum(axis=1)
    if np.any(row_sums > 1):
        raise ConversionError("a label row has more than one active class")
    labels = np.where(row_sums == 1, one_hot.argmax(axis=1), -1).astype(np.int64)

    edges = set()
    self_loops = 0
    for node, neighbours in graph.items():
        if not 0 <= int(node) < n:
            raise ConversionError(f"graph node {node} out of range [0, {n})")
        for other in neighbours:
            if not 0 <= int(other) < n:
                raise ConversionError(f"graph neighbour {other} out of range [0, {n})")
            if int(node) == int(other):
                self_loops += 1
                continue
            edges.add((min(int(node), int(other)), max(int(node), int(other))))
    if self_loops:
        log.warning("%s: dropped %d self-loop entries", dataset_name, self_loops)
    isolated = n - len({v for pair in edges for v in pair})
    if isolated:
        log.warning("%s: %d isolated nodes kept", dataset_name, isolated)

    return {
        "name": dataset_name,
        "num_nodes": n,
        "num_features": int(features.shape[1]),
        "num_classes": int(one_hot.shape[1]),
        "features": features,
        "labels": labels,
        "edges": sorted(edges),
    }


def write_bundle(data: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": data["name"],
        "num_nodes": data["num_nodes"],
        "num_features": data["num_features"],
        "num_classes": data["num_classes"],
        "num_edges": len(data["edges"]),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")

    edge_lines = [f"{a}\t{b}" for a, b in data["edges"]]
    (out / "edges.tsv").write_text("\n".join(edge_lines) + ("\n" if edge_lines else ""),
                                   encoding="utf-8")

    coo = data["features"].tocoo()
    order = np.lexsort((coo.col, coo.row))
    feat_lines = [f"{coo.row[i]}\t{coo.col[i]}\t{float(coo.data[i])!r}" for i in order]
    (out / "features.tsv").write_text("\n".join(feat_lines) + ("\n" if feat_lines else ""),
                                      encoding="utf-8")

    labels = data["labels"]
    label_lines = [f"{node}\t{labels[node]}" for node in range(len(labels))
                   if labels[node] >= 0]
    (out / "labels.tsv").write_text("\n".join(label_lines) + ("\n" if label_lines else ""),
                                    encoding="utf-8")


def convert(source_dir, dataset_name: str, out_dir) -> dict:
    """Convert one dataset; returns the meta dict that was written."""
    if dataset_name not in DATASETS:
        raise ConversionError(
            f"unknown dataset name {dataset_name!r}; expected one of {DATASETS}")
    data = read_planetoid(source_dir, dataset_name)
    write_bundle(data, out_dir)
    log.info("%s: wrote %s (n=%d, m=%d, k=%d, edges=%d)", dataset_name, out_dir,
             data["num_nodes"], data["num_features"], data["num_classes"],
             len(data["edges"]))
    return {key: data[key] for key in
            ("name", "num_nodes", "num_features", "num_classes")} | \
        {"num_edges": len(data["edges"])}
