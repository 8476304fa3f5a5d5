"""Loss functions: per-label binary cross-entropy, projection-alignment,
contrastive embedding loss over classifier-layer inputs, and the per-task /
per-dataset aggregation.

The per-task batch loss is the sum of three normalized terms: mean BCE over
instances x classes, the alignment term summed over ordered instance pairs
divided by N(N-1), and the contrastive term summed over ordered pairs and
classes divided by N(N-1)C. The pair terms are symmetric, so they are
computed over unordered pairs and doubled. Batches of one instance have no
pairs and contribute zero to both auxiliary terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng

MLP_DEPTH = 2  # both classifier MLPs have two affine layers


def bce(p: ng.Tensor, y) -> ng.Tensor:
    """Elementwise negative log-likelihood of binary targets.

    ``p`` must already be clamped into [1e-7, 1-1e-7]; ``y`` is a 0/1 array.
    """
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("bce targets must be binary")
    p = ng.Tensor._coerce(p)
    yt = y.astype(p.data.dtype)
    return -(ng.Tensor(yt) * p.log() + ng.Tensor(1.0 - yt) * (1.0 - p).log())


def label_similarity(y_i, y_j) -> np.ndarray:
    """+1 for equal binary labels, -1 otherwise: (2y_i - 1)(2y_j - 1)."""
    y_i, y_j = np.asarray(y_i), np.asarray(y_j)
    if not (np.isin(y_i, (0, 1)).all() and np.isin(y_j, (0, 1)).all()):
        raise ValueError("labels must be binary")
    return (2.0 * y_i - 1.0) * (2.0 * y_j - 1.0)


def align_loss(raw_i: dict, raw_j: dict, proj_i: dict, proj_j: dict) -> ng.Tensor:
    """Pairwise alignment penalty: how much the projection distorts cosine
    similarity, averaged over the projected tracks.

    ``raw_*`` map track name -> masked-mean raw feature vector (constant);
    ``proj_*`` map track name -> masked-mean projected vector (Tensor).
    """
    if not raw_i:
        return ng.Tensor(0.0)
    terms = []
    for name in raw_i:
        raw_cos = float(
            ng.cosine_sim(ng.Tensor(raw_i[name]), ng.Tensor(raw_j[name])).item()
        )
        proj_cos = ng.cosine_sim(proj_i[name], proj_j[name])
        terms.append((proj_cos - raw_cos).abs())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def contrastive_loss(h_layers_i, h_layers_j, s_c: float) -> ng.Tensor:
    """Per-class embedding loss over the MLP's layer inputs:
    0.5 * sum_l (1 - s_c * cos(h_i^l, h_j^l)); value in [0, 2]."""
    if len(h_layers_i) != MLP_DEPTH or len(h_layers_j) != MLP_DEPTH:
        raise ValueError(f"expected {MLP_DEPTH} layer inputs per instance")
    total = None
    for hi, hj in zip(h_layers_i, h_layers_j):
        term = 1.0 - ng.cosine_sim(hi, hj) * float(s_c)
        total = term if total is None else total + term
    return total * 0.5


# -- batch-vectorized building blocks -------------------------------------------


def _pair_mask(n: int, dtype) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=dtype), k=1)


def _normalize_rows(t: ng.Tensor) -> ng.Tensor:
    norm = (t * t).sum(axis=-1, keepdims=True).clamp(lo=1e-16).sqrt()
    return t / norm


def _cosine_matrix_np(x: np.ndarray) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-8)
    xn = x / norms
    return xn @ xn.swapaxes(-1, -2)


def align_pair_sum(raw_means: dict, proj_means: dict) -> ng.Tensor:
    """Sum over unordered pairs (i < j) of the per-pair alignment penalty."""
    if not raw_means:
        return ng.Tensor(0.0)
    n = next(iter(raw_means.values())).shape[0]
    upper = ng.Tensor(_pair_mask(n, np.float64))
    total = None
    for name, raw in raw_means.items():
        raw_cos = ng.Tensor(_cosine_matrix_np(raw))
        pn = _normalize_rows(proj_means[name])
        proj_cos = ng.matmul(pn, pn.swapaxes(-1, -2))
        diff = ((proj_cos - raw_cos).abs() * upper).sum()
        total = diff if total is None else total + diff
    return total * (1.0 / len(raw_means))


def contrastive_pair_sum(h_layers, targets: np.ndarray) -> ng.Tensor:
    """Sum over unordered pairs and classes of the contrastive loss.

    ``h_layers`` holds the two MLP layer inputs, each (B, C, D) for the
    shared single-head classifier or (B, D) for the pooled multi-head one
    (identical across classes there). ``targets`` is (B, C) binary.
    """
    if len(h_layers) != MLP_DEPTH:
        raise ValueError(f"expected {MLP_DEPTH} layer inputs")
    bsz, n_classes = targets.shape
    sgn = 2.0 * targets.astype(np.float64) - 1.0
    s = sgn.T[:, :, None] * sgn.T[:, None, :]  # (C, B, B)
    upper = _pair_mask(bsz, np.float64)
    weight = ng.Tensor(s * upper)  # fold the pair mask into the sign matrix
    mask_t = ng.Tensor(np.broadcast_to(upper, (n_classes, bsz, bsz)).copy())
    total = None
    for h in h_layers:
        if h.ndim == 3:
            hn = _normalize_rows(h).transpose(1, 0, 2)  # (C, B, D)
            sim = ng.matmul(hn, hn.swapaxes(-1, -2))  # (C, B, B)
        else:
            hn = _normalize_rows(h)
            sim = ng.matmul(hn, hn.swapaxes(-1, -2))  # (B, B), broadcasts over C
        term = (mask_t - weight * sim).sum()
        total = term if total is None else total + term
    return total * 0.5


# -- per-task / per-dataset aggregation ----------------------------------------


@dataclass
class LossBreakdown:
    task: str
    main: float
    align: float
    contrastive: float
    task_total: float
    align_enabled: bool
    contrastive_enabled: bool
    total: ng.Tensor  # differentiable task loss


def task_loss(probs: ng.Tensor, targets: np.ndarray, h_layers, raw_means: dict,
              proj_means: dict, task_name: str = "task",
              align_enabled: bool = False, contrastive_enabled: bool = False) -> LossBreakdown:
    """The overall per-batch, per-task loss (three normalized terms)."""
    targets = np.asarray(targets)
    bsz, n_classes = targets.shape
    if n_classes == 0:
        raise ValueError(f"task {task_name}: zero classes")
    main_t = bce(probs, targets).mean()

    align_t = ng.Tensor(0.0)
    if align_enabled and bsz >= 2:
        align_t = align_pair_sum(raw_means, proj_means) * (2.0 / (bsz * (bsz - 1)))
    contr_t = ng.Tensor(0.0)
    if contrastive_enabled and bsz >= 2:
        contr_t = contrastive_pair_sum(h_layers, targets) * (
            2.0 / (bsz * (bsz - 1) * n_classes)
        )

    total = main_t + align_t + contr_t
    return LossBreakdown(
        task=task_name,
        main=main_t.item(),
        align=align_t.item(),
        contrastive=contr_t.item(),
        task_total=total.item(),
        align_enabled=align_enabled,
        contrastive_enabled=contrastive_enabled,
        total=total,
    )


def dataset_loss(breakdowns: list[LossBreakdown]) -> ng.Tensor:
    """The per-batch dataset loss: arithmetic mean of its task losses."""
    if not breakdowns:
        raise ValueError("dataset_loss needs at least one task")
    total = breakdowns[0].total
    for b in breakdowns[1:]:
        total = total + b.total
    return total * (1.0 / len(breakdowns))
