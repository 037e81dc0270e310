"""Two-layer multi-head graph attention encoder shared across three views.

Layer 1 runs H heads whose outputs are concatenated and passed through ELU;
layer 2 is a single head producing class logits.  Attention for node i runs
over its neighbours plus itself (self-loops are added here, not stored in the
adjacency).  All three views read the identical parameter object.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tape, Tensor

LEAKY_SLOPE = 0.2


@dataclass
class GatLayerParams:
    """Per-head weight matrices (d_in, d_out) and attention vectors (2*d_out, 1)."""

    weights: list[np.ndarray]
    attention: list[np.ndarray]

    @property
    def heads(self) -> int:
        return len(self.weights)

    @property
    def out_dim(self) -> int:
        return self.weights[0].shape[1]


@dataclass
class ModelParams:
    layer1: GatLayerParams
    layer2: GatLayerParams

    def flat(self) -> list[np.ndarray]:
        """Deterministic parameter order: layer by layer, per head W then a."""
        out = []
        for layer in (self.layer1, self.layer2):
            for w, a in zip(layer.weights, layer.attention):
                out.extend([w, a])
        return out

    def copy(self) -> "ModelParams":
        def dup(layer):
            return GatLayerParams([w.copy() for w in layer.weights],
                                  [a.copy() for a in layer.attention])
        return ModelParams(dup(self.layer1), dup(self.layer2))

    def set_flat(self, values: list[np.ndarray]) -> None:
        for own, new in zip(self.flat(), values):
            own[...] = new

    def astype(self, dtype) -> "ModelParams":
        def cast(layer):
            return GatLayerParams([w.astype(dtype) for w in layer.weights],
                                  [a.astype(dtype) for a in layer.attention])
        return ModelParams(cast(self.layer1), cast(self.layer2))


@dataclass
class BoundLayer:
    weights: list[Tensor]
    attention: list[Tensor]

    @property
    def heads(self) -> int:
        return len(self.weights)


@dataclass
class BoundParams:
    """ModelParams lifted onto one tape so the three views share leaves."""

    layer1: BoundLayer
    layer2: BoundLayer
    tape: Tape

    def flat(self) -> list[Tensor]:
        out = []
        for layer in (self.layer1, self.layer2):
            for w, a in zip(layer.weights, layer.attention):
                out.extend([w, a])
        return out


def bind_params(params: ModelParams, tape: Tape) -> BoundParams:
    def bind(layer):
        return BoundLayer([tape.parameter(w) for w in layer.weights],
                          [tape.parameter(a) for a in layer.attention])
    return BoundParams(bind(params.layer1), bind(params.layer2), tape)


def glorot_init(num_features: int, num_classes: int, heads: int = 8, head_dim: int = 6,
                seed: int = 0, dtype=np.float64) -> ModelParams:
    """Glorot-uniform initialization for every weight matrix and attention vector."""
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out, shape):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape).astype(dtype)

    layer1 = GatLayerParams(
        [glorot(num_features, head_dim, (num_features, head_dim)) for _ in range(heads)],
        [glorot(2 * head_dim, 1, (2 * head_dim, 1)) for _ in range(heads)],
    )
    layer2 = GatLayerParams(
        [glorot(heads * head_dim, num_classes, (heads * head_dim, num_classes))],
        [glorot(2 * num_classes, 1, (2 * num_classes, 1))],
    )
    return ModelParams(layer1, layer2)


def parameter_count(params: ModelParams) -> int:
    return sum(p.size for p in params.flat())


@dataclass(frozen=True)
class EdgeIndex:
    """Attention support: directed (src -> dst) pairs of A + I in CSR order.

    Carries precomputed (n, E) scatter matrices so per-node reductions and
    gather backwards run as sparse-dense products instead of unbuffered
    scatter loops: ``reduce_src @ e`` sums edge values into their source node.
    ``indptr`` delimits each node's contiguous edge segment (never empty
    thanks to the self-loop).
    """

    src: np.ndarray
    dst: np.ndarray
    num_nodes: int
    indptr: np.ndarray
    reduce_src: sp.csr_matrix
    reduce_dst: sp.csr_matrix

    @staticmethod
    def from_adjacency(adjacency: sp.spmatrix) -> "EdgeIndex":
        n = adjacency.shape[0]
        with_loops = (adjacency.tocsr() + sp.identity(n, format="csr")).tocsr()
        with_loops.sort_indices()
        src = np.repeat(np.arange(n, dtype=np.int64), np.diff(with_loops.indptr))
        dst = with_loops.indices.astype(np.int64)
        count = len(dst)
        # float32 ones are exact, so float64 graphs upcast losslessly while
        # float32 training avoids a silent promotion of every product
        ones = np.ones(count, dtype=np.float32)
        rows = np.arange(count)
        reduce_src = sp.csr_matrix((ones, (src, rows)), shape=(n, count))
        reduce_dst = sp.csr_matrix((ones, (dst, rows)), shape=(n, count))
        return EdgeIndex(src, dst, n, with_loops.indptr.astype(np.int64).copy(),
                         reduce_src, reduce_dst)


@dataclass
class ViewOutputs:
    """Latent features Z (post layer 1) and row-stochastic soft predictions Y."""

    z: Tensor
    y: Tensor


def _block_attention_matrix(layer: BoundLayer, head_dim: int, offset: int) -> Tensor:
    """(H*d, H) block-diagonal matrix whose column h holds head h's attention
    half-vector at row offset h*d, so xw_all @ matrix gives per-head scores."""
    heads = layer.heads
    dtype = layer.attention[0].value.dtype
    halves = ad.gather_rows(ad.concat_columns(layer.attention),
                            np.arange(offset, offset + head_dim))  # (d, H)
    if heads == 1:
        return halves
    # tile the halves down H blocks, then zero everything off the diagonal
    tiler = np.tile(np.eye(head_dim, dtype=dtype), (heads, 1))
    block_mask = np.kron(np.eye(heads, dtype=dtype), np.ones((head_dim, 1), dtype=dtype))
    return ad.elementwise_multiply(ad.matmul(halves.tape.constant(tiler), halves),
                                   halves.tape.constant(block_mask))


def gat_layer(x: Tensor, edges: EdgeIndex, layer: BoundLayer, mode: str,
              attn_dropout: float = 0.0, train_mode: bool = False, rng=None,
              feature_keep: np.ndarray | None = None) -> Tensor:
    """One attention layer, all heads batched.

    ``concat`` joins the H head outputs column-wise and applies ELU; ``single``
    returns the lone head's pre-softmax logits.  Isolated nodes are legal: the
    internal self-loop makes them attend to themselves.

    ``feature_keep`` applies a 0/1 input-dimension mask by zeroing weight rows
    instead of feature columns; for a binary mask (X*keep) @ W and
    X @ (keep*W) are bitwise identical, and the weight side is far smaller.
    """
    if mode not in ("concat", "single"):
        raise ValueError(f"unknown mode {mode!r}")
    if isinstance(layer, GatLayerParams):
        layer = BoundLayer([x.tape.parameter(w) for w in layer.weights],
                           [x.tape.parameter(a) for a in layer.attention])
    if mode == "single" and layer.heads != 1:
        raise ValueError("single mode expects exactly one head")
    heads = layer.heads
    head_dim = layer.weights[0].value.shape[1]

    weights_all = ad.concat_columns(layer.weights) if heads > 1 else layer.weights[0]
    if feature_keep is not None:
        weights_all = ad.elementwise_multiply(
            weights_all, x.tape.constant(feature_keep[:, None]))
    xw_all = ad.matmul(x, weights_all)
    score_src = ad.matmul(xw_all, _block_attention_matrix(layer, head_dim, 0))
    score_dst = ad.matmul(xw_all, _block_attention_matrix(layer, head_dim, head_dim))
    raw = ad.leaky_relu(ad.add(ad.gather_rows(score_src, edges.src, edges.reduce_src),
                               ad.gather_rows(score_dst, edges.dst, edges.reduce_dst)),
                        LEAKY_SLOPE)
    # neighbourhood softmax per head; the per-segment max shift is a constant
    # (shift-invariance keeps the gradient exact)
    seg_max = np.maximum.reduceat(raw.value, edges.indptr[:-1], axis=0)
    weights = ad.exp(ad.subtract(raw, raw.tape.constant(seg_max[edges.src])))
    total = ad.sparse_dense_matmul(edges.reduce_src, weights)
    alpha = ad.divide(weights, ad.gather_rows(total, edges.src, edges.reduce_src))
    if train_mode and attn_dropout > 0.0:
        alpha = ad.dropout(alpha, attn_dropout, rng)
    out = ad.multi_head_aggregate(alpha, xw_all, edges.src, edges.dst,
                                  edges.reduce_src, edges.reduce_dst)
    if mode == "single":
        return out
    return ad.elu(out)


def forward_view(x_view, adjacency_or_edges, params, train_mode: bool, rng=None,
                 dropout_rate: float = 0.6,
                 feature_keep: np.ndarray | None = None) -> ViewOutputs:
    """Run one view through the shared encoder.

    ``x_view`` is the (already augmented or raw) dense feature matrix; a
    strong view may instead pass the raw matrix plus its mask as
    ``feature_keep``.  ``params`` may be a ModelParams (a throwaway tape is
    created) or a BoundParams when several views must share one tape.  In
    train mode, dropout hits the attention coefficients of both layers and
    the concatenated latent features; eval mode is deterministic.
    """
    if isinstance(adjacency_or_edges, EdgeIndex):
        edges = adjacency_or_edges
    else:
        edges = EdgeIndex.from_adjacency(adjacency_or_edges)
    if isinstance(params, ModelParams):
        bound = bind_params(params, Tape())
    else:
        bound = params
    tape = bound.tape
    if train_mode and rng is None:
        raise ValueError("train mode requires an rng for dropout")

    x = x_view if isinstance(x_view, Tensor) else tape.constant(np.asarray(x_view))
    hidden = gat_layer(x, edges, bound.layer1, "concat",
                       attn_dropout=dropout_rate, train_mode=train_mode, rng=rng,
                       feature_keep=feature_keep)
    z = ad.dropout(hidden, dropout_rate, rng) if train_mode and dropout_rate > 0 else hidden
    logits = gat_layer(z, edges, bound.layer2, "single",
                       attn_dropout=dropout_rate, train_mode=train_mode, rng=rng)
    return ViewOutputs(z=z, y=ad.row_softmax(logits))


# ---------------------------------------------------------------------------
# checkpointing

CHECKPOINT_FORMAT = "sacn-checkpoint/1"


def _config_hash(params: ModelParams) -> str:
    desc = json.dumps([list(p.shape) for p in params.flat()]).encode()
    return hashlib.sha256(desc).hexdigest()[:16]


def save_checkpoint(params: ModelParams, path) -> None:
    """JSON header line + row-major little-endian float64 parameter values."""
    flat = params.flat()
    header = {
        "format": CHECKPOINT_FORMAT,
        "heads": params.layer1.heads,
        "shapes": [list(p.shape) for p in flat],
        "config_hash": _config_hash(params),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for p in flat:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        shapes = [tuple(s) for s in header["shapes"]]
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape))
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated checkpoint")
            arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
    heads = int(header["heads"])
    layer1 = GatLayerParams([arrays[2 * h] for h in range(heads)],
                            [arrays[2 * h + 1] for h in range(heads)])
    layer2 = GatLayerParams([arrays[2 * heads]], [arrays[2 * heads + 1]])
    params = ModelParams(layer1, layer2)
    if _config_hash(params) != header["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    return params
