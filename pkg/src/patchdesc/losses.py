"""Batch-hard negative mining and the descriptor losses.

A batch of N anchor/positive descriptor pairs yields an NxN similarity
matrix whose diagonal holds the positive similarities.  For each anchor the
hardest negative is the largest off-diagonal entry in its row or column.
Three losses consume the mined (pos, neg) values:

* robust angular: mean(1 - tanh(pos - neg)), smooth and bounded, margin-free
* hinge triplet:  mean([neg - pos + m]+)
* contrastive:    mean([m + neg]+ - pos)

Gradients are returned per item and can be scattered back to the descriptor
matrices through the similarity entries that were actually used.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .ops import ShapeMismatchError

COSINE = "cosine"
NEG_L2 = "neg-l2"
SIMILARITY_KINDS = (COSINE, NEG_L2)

ROBUST = "robust-angular"
HINGE = "hinge-triplet"
CONTRASTIVE = "contrastive"
LOSS_VARIANTS = (ROBUST, HINGE, CONTRASTIVE)

_UNIT_NORM_TOL = 1e-4


@dataclass
class SimilarityMatrix:
    values: np.ndarray          # (N,N), D(i,j) = s(a_i, p_j); larger = more similar
    kind: str
    anchors: np.ndarray         # (N,d)
    positives: np.ndarray       # (N,d)


@dataclass
class TripletSelection:
    pos: np.ndarray             # (N,) diagonal similarities
    neg: np.ndarray             # (N,) hardest negative similarity per anchor
    neg_rows: np.ndarray        # (N,) row index r_i of the chosen entry
    neg_cols: np.ndarray        # (N,) column index c_i


def similarity_matrix(anchors: np.ndarray, positives: np.ndarray,
                      kind: str = COSINE) -> SimilarityMatrix:
    """Pairwise similarities; neg-l2 negates distances so larger is closer."""
    if anchors.shape != positives.shape or anchors.ndim != 2:
        raise ShapeMismatchError(
            f"descriptor batches must share (N,d): {anchors.shape} vs {positives.shape}")
    if kind == COSINE:
        for name, m in (("anchors", anchors), ("positives", positives)):
            norms = np.sqrt((m * m).sum(axis=1))
            bad = np.abs(norms - 1.0) > _UNIT_NORM_TOL
            if np.any(bad):
                raise ValueError(
                    f"cosine similarity needs unit rows; {name} row {int(np.argmax(bad))} "
                    f"has norm {norms[np.argmax(bad)]:.6f}")
        values = anchors @ positives.T
    elif kind == NEG_L2:
        sq = ((anchors * anchors).sum(axis=1)[:, None]
              + (positives * positives).sum(axis=1)[None, :]
              - 2.0 * (anchors @ positives.T))
        values = -np.sqrt(np.maximum(sq, 0.0))
    else:
        raise ValueError(f"unknown similarity kind {kind!r}")
    return SimilarityMatrix(values, kind, anchors, positives)


def mine_hard_negatives(sim: SimilarityMatrix) -> TripletSelection:
    """Per anchor i, the largest entry of row i union column i off the diagonal.

    Ties resolve to the smallest (row, col) in row-major order, which makes the
    selection reproducible and lets an exhaustive scan reproduce it exactly.
    """
    d = sim.values
    n = d.shape[0]
    if n < 2:
        raise ValueError("mining needs at least 2 pairs in the batch")
    idx = np.arange(n)
    masked = d.copy()
    np.fill_diagonal(masked, -np.inf)
    row_l = masked.argmax(axis=1)               # smallest l on ties
    row_v = masked[idx, row_l]
    col_k = masked.argmax(axis=0)               # smallest k on ties
    col_v = masked[col_k, idx]
    # Row-major precedence: (k,i) with k<i sorts before (i,*), which sorts
    # before (k,i) with k>i.
    use_col = (col_v > row_v) | ((col_v == row_v) & (col_k < idx))
    return TripletSelection(
        pos=d[idx, idx].copy(),
        neg=np.where(use_col, col_v, row_v),
        neg_rows=np.where(use_col, col_k, idx),
        neg_cols=np.where(use_col, idx, row_l),
    )


# ---------------------------------------------------------------------------
# losses: each returns (loss, d_pos, d_neg) with per-item gradients that
# already include the 1/N batch averaging


def robust_angular_loss(sel: TripletSelection):
    """Smooth bounded loss mean(1 - tanh(pos - neg)); gradient peaks at pos=neg."""
    x = sel.pos - sel.neg
    t = np.tanh(x)
    n = len(x)
    loss = float(np.mean(1.0 - t))
    d_x = (t * t - 1.0) / n
    return loss, d_x, -d_x


def hinge_triplet_loss(sel: TripletSelection, margin: float):
    """Margin loss mean([neg - pos + m]+); zero gradient once the margin holds."""
    item = sel.neg - sel.pos + margin
    active = item > 0                     # subgradient 0 at the kink
    n = len(item)
    loss = float(np.mean(np.where(active, item, 0.0)))
    d_neg = active.astype(sel.pos.dtype) / n
    return loss, -d_neg, d_neg


def contrastive_loss(pos: np.ndarray, neg: np.ndarray, margin: float):
    """mean([m + neg]+ - pos): clamp the negative term, pull positives up."""
    clamp = margin + neg
    active = clamp > 0
    n = len(pos)
    loss = float(np.mean(np.where(active, clamp, 0.0) - pos))
    d_pos = np.full(n, -1.0 / n, dtype=pos.dtype)
    d_neg = active.astype(pos.dtype) / n
    return loss, d_pos, d_neg


def compute_loss(variant: str, sel: TripletSelection, margin: float):
    if variant == ROBUST:
        return robust_angular_loss(sel)
    if variant == HINGE:
        return hinge_triplet_loss(sel, margin)
    if variant == CONTRASTIVE:
        return contrastive_loss(sel.pos, sel.neg, margin)
    raise ValueError(f"unknown loss variant {variant!r}")


def loss_backward_to_descriptors(sim: SimilarityMatrix, sel: TripletSelection,
                                 d_pos: np.ndarray, d_neg: np.ndarray):
    """Chain per-item gradients through the similarity entries that were used."""
    n = sim.values.shape[0]
    g = np.zeros_like(sim.values)
    idx = np.arange(n)
    g[idx, idx] += d_pos
    np.add.at(g, (sel.neg_rows, sel.neg_cols), d_neg)
    a, p = sim.anchors, sim.positives
    if sim.kind == COSINE:
        return g @ p, g.T @ a
    # neg-l2: dD(i,j)/da_i = (p_j - a_i)/dist(i,j)
    dist = np.maximum(-sim.values, 1e-12)
    w = g / dist
    grad_a = w @ p - w.sum(axis=1)[:, None] * a
    grad_p = w.T @ a - w.sum(axis=0)[:, None] * p
    return grad_a, grad_p


# ---------------------------------------------------------------------------
# loss/derivative surfaces over the (pos, neg) plane


def loss_surface(variant: str, margin: float, grid_n: int):
    """Single-item loss and |d/dpos|, |d/dneg| over (pos, neg) in [-1,1]^2.

    Returns (pos_grid, neg_grid, loss, dpos_abs, dneg_abs), all (grid_n, grid_n),
    rows indexed by pos and columns by neg.
    """
    axis = np.linspace(-1.0, 1.0, grid_n)
    pos, neg = np.meshgrid(axis, axis, indexing="ij")
    if variant == ROBUST:
        t = np.tanh(pos - neg)
        loss = 1.0 - t
        dpos = 1.0 - t * t
        dneg = dpos.copy()
    elif variant == HINGE:
        item = neg - pos + margin
        active = item > 0
        loss = np.where(active, item, 0.0)
        dpos = active.astype(float)
        dneg = dpos.copy()
    elif variant == CONTRASTIVE:
        clamp = margin + neg
        active = clamp > 0
        loss = np.where(active, clamp, 0.0) - pos
        dpos = np.ones_like(pos)
        dneg = active.astype(float)
    else:
        raise ValueError(f"unknown loss variant {variant!r}")
    return pos, neg, loss, dpos, dneg


def write_loss_surface_csv(path: str, variant: str, margin: float, grid_n: int) -> None:
    pos, neg, loss, dpos, dneg = loss_surface(variant, margin, grid_n)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pos", "neg", "loss", "dpos_abs", "dneg_abs"])
        for i in range(grid_n):
            for j in range(grid_n):
                writer.writerow([f"{pos[i, j]:.8g}", f"{neg[i, j]:.8g}",
                                 f"{loss[i, j]:.8g}", f"{dpos[i, j]:.8g}",
                                 f"{dneg[i, j]:.8g}"])
