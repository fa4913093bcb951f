"""Sum of l1 and cosine-similarity losses over per-graph task vectors."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Index, Tensor

ZERO_NORM = 1e-12


def _unit(y: np.ndarray, segments: Index | None, axis: int) -> tuple[np.ndarray, np.ndarray]:
    if segments is None:
        norm = np.sqrt((y * y).sum(axis=axis, keepdims=True))
        norm_b = norm
    else:
        norm = np.sqrt(segments.scatter_matrix @ (y * y))
        norm_b = norm[segments.idx]
    unit = np.divide(y, norm_b, out=np.zeros_like(y), where=norm_b > ZERO_NORM)
    return unit, (norm > ZERO_NORM).astype(y.dtype)


def l1_cosine_terms(pred: Tensor, target: np.ndarray, segments: Index | None = None,
                    axis: int = 0) -> tuple[Tensor, int]:
    """Summed loss terms and their count.

    Each column is one task. Vectors run along ``axis`` (split into groups by
    ``segments`` when given); every vector contributes
    ``sum |y - y_hat| + (1 - <y/|y|, y_hat/|y_hat|>)``. The cosine part is
    dropped for all-zero targets, whose direction is undefined.
    """
    target = np.asarray(target, dtype=ad.DTYPE)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    l1 = ad.sum_(ad.abs_(pred - target))
    unit_y, mask = _unit(target, segments, axis)
    unit_p = ad.l2_normalize(pred, segments=segments, axis=axis, eps=ZERO_NORM)
    prod = unit_p * unit_y
    if segments is None:
        cos = ad.sum_(prod, axis=axis, keepdims=True)
    else:
        cos = ad.segment_sum(prod, segments)
    cos_term = ad.sum_((1.0 - cos) * mask)
    return l1 + cos_term, int(mask.size)


def l1_cosine_loss(node_pred: Tensor, node_target: np.ndarray, graph_pred: Tensor,
                   graph_target: np.ndarray, node_graph: Index,
                   graph_blocks: dict[str, slice]) -> Tensor:
    """Batch loss: mean over (graph, task) terms.

    Node-level tasks are the columns of ``node_pred`` (one vector per graph and
    column); graph-level tasks are the column blocks of ``graph_pred`` (one
    vector per graph and block).
    """
    total, count = l1_cosine_terms(node_pred, node_target, node_graph, axis=0)
    for block in graph_blocks.values():
        t, c = l1_cosine_terms(graph_pred[:, block], graph_target[:, block], axis=1)
        total = total + t
        count += c
    return total * (1.0 / count)
