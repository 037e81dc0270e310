"""Loss terms: neighbour correlation, decorrelation, supervision, weak-to-strong.

All losses are pure functions over tape tensors and use sum (not mean)
reductions; the alpha weights absorb scale.  The combined consensus objective
normalizes latents so that Z^T Z is the column correlation matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .pseudo import PseudoLabelSet


@dataclass(frozen=True)
class LossWeights:
    """Trade-off lambda for decorrelation, alpha1/alpha2 for the stage losses."""

    lam: float = 1e-3
    alpha1: float = 1.0
    alpha2: float = 0.5

    def __post_init__(self):
        if self.lam < 0 or self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be non-negative")


def one_hot_targets(labels: np.ndarray, indices: np.ndarray, num_classes: int) -> np.ndarray:
    """One-hot target rows for the given node indices."""
    targets = np.zeros((len(indices), num_classes))
    targets[np.arange(len(indices)), labels[indices]] = 1.0
    return targets


def normalize_latent(z: Tensor) -> Tensor:
    """Column z-score then scale by 1/sqrt(n), so Z^T Z is a correlation matrix."""
    n = z.value.shape[0]
    if n < 2:
        raise ValueError("normalization needs at least 2 rows")
    return ad.scalar_multiply(1.0 / np.sqrt(n), ad.zscore_columns(z))


def _with_self_pairs(adjacency: sp.spmatrix, include_self: bool, dtype) -> sp.csr_matrix:
    a = adjacency.tocsr().astype(dtype)
    if include_self:
        a = (a + sp.identity(a.shape[0], format="csr", dtype=dtype)).tocsr()
    return a


def loss_cor(z1: Tensor, z2: Tensor, adjacency: sp.spmatrix, include_self: bool = True) -> Tensor:
    """Negative sum of cross-view inner products over connected (and self) pairs.

    Computed by one sparse-dense product, O((nnz(A) + n) * d).  Inputs are
    expected to be already normalized.
    """
    if z1.value.shape != z2.value.shape:
        raise ad.ShapeMismatchError(f"loss_cor: {z1.shape} vs {z2.shape}")
    pairs = _with_self_pairs(adjacency, include_self, z1.value.dtype)
    neighbour_mix = ad.sparse_dense_matmul(pairs, z2)
    return ad.scalar_multiply(-1.0, ad.sum_all(ad.elementwise_multiply(z1, neighbour_mix)))


def loss_de(z1: Tensor, z2: Tensor) -> Tensor:
    """Frobenius distance of each view's latent correlation matrix from identity."""
    k = z1.value.shape[1]
    eye = np.eye(k)
    d1 = ad.frobenius_sq(ad.subtract(ad.matmul(ad.transpose(z1), z1), z1.tape.constant(eye)))
    d2 = ad.frobenius_sq(ad.subtract(ad.matmul(ad.transpose(z2), z2), z2.tape.constant(eye)))
    return ad.add(d1, d2)


def loss_sacn(z1: Tensor, z2: Tensor, adjacency: sp.spmatrix, lam: float,
              include_self: bool = True) -> Tensor:
    """Structure-aware consensus objective: correlation + lam * decorrelation."""
    n1 = normalize_latent(z1)
    n2 = normalize_latent(z2)
    return ad.add(loss_cor(n1, n2, adjacency, include_self),
                  ad.scalar_multiply(lam, loss_de(n1, n2)))


def loss_sup(y: Tensor, targets: np.ndarray, labeled_idx: np.ndarray) -> Tensor:
    """Summed cross-entropy of soft predictions against one-hot targets."""
    labeled_idx = np.asarray(labeled_idx, dtype=np.int64)
    if labeled_idx.size == 0:
        raise ValueError("loss_sup needs a non-empty labeled set")
    if targets.shape != (labeled_idx.size, y.value.shape[1]):
        raise ad.ShapeMismatchError(
            f"targets {targets.shape} do not align with {labeled_idx.size} labeled rows")
    picked = ad.gather_rows(y, labeled_idx)
    return ad.scalar_multiply(
        -1.0, ad.sum_all(ad.elementwise_multiply(y.tape.constant(targets), ad.log(picked))))


def loss_w2s(pseudo: PseudoLabelSet, y1: Tensor, y2: Tensor) -> Tensor:
    """Cross-entropy from hard weak-view pseudolabels onto both strong views.

    The targets are constants: no gradient flows back into the weak view.
    An empty selection contributes an exact zero.
    """
    tape = y1.tape
    if pseudo.selected_count == 0:
        return tape.constant(np.zeros(()))
    targets = tape.constant(pseudo.targets)
    total = None
    for y in (y1, y2):
        picked = ad.gather_rows(y, pseudo.indices)
        term = ad.sum_all(ad.elementwise_multiply(targets, ad.log(picked)))
        total = term if total is None else ad.add(total, term)
    return ad.scalar_multiply(-1.0, total)


def loss_stage_one(sup: Tensor, sacn: Tensor, alpha1: float) -> Tensor:
    return ad.add(sup, ad.scalar_multiply(alpha1, sacn))


def loss_stage_two(sup: Tensor, sacn: Tensor, w2s: Tensor, alpha1: float, alpha2: float) -> Tensor:
    return ad.add(loss_stage_one(sup, sacn, alpha1), ad.scalar_multiply(alpha2, w2s))
