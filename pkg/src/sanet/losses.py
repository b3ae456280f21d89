"""Joint identity-classification and batch-hard triplet objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, mean, note_branch, pairwise_sq_dist, relu, softmax_cross_entropy, sqrt_floor, take2d
from .model import BranchOutputs, assemble_embedding

DIST_FLOOR = 1e-12

TERMS = ("L_ID_g", "L_ID_td", "L_ID_lr", "L_tri_g", "L_tri_t", "L_tri_d", "L_tri_l", "L_tri_r", "L_tri_gs")


def id_loss(logits: Tensor, labels) -> Tensor:
    return softmax_cross_entropy(logits, labels)


def distance_matrix(embeddings: Tensor) -> Tensor:
    """Euclidean distances between all rows, floored at sqrt(1e-12)."""
    return sqrt_floor(pairwise_sq_dist(embeddings), DIST_FLOOR)


def _check_labels(labels: np.ndarray) -> None:
    ids, counts = np.unique(labels, return_counts=True)
    if (counts < 2).any():
        lonely = ids[counts < 2].tolist()
        raise ValueError(f"identities with a single sample cannot form positives: {lonely}")
    if len(ids) < 2:
        raise ValueError("batch needs at least two identities to form negatives")


def hardest_indices(dist: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per anchor, column of the farthest positive and of the nearest negative."""
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    pos_idx = np.argmax(np.where(pos, dist, -np.inf), axis=1)
    neg_idx = np.argmin(np.where(same, np.inf, dist), axis=1)
    note_branch(pos_idx)
    note_branch(neg_idx)
    return pos_idx, neg_idx


def mine_batch_hard(embeddings: Tensor, labels) -> tuple[Tensor, Tensor]:
    """Hardest positive and hardest negative distance for every anchor."""
    labels = np.asarray(labels)
    _check_labels(labels)
    d = distance_matrix(embeddings)
    pos_idx, neg_idx = hardest_indices(d.data, labels)
    rows = np.arange(len(labels))
    return take2d(d, rows, pos_idx), take2d(d, rows, neg_idx)


def triplet_loss(embeddings: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Mean over anchors of max(d_ap - d_an + margin, 0) with batch-hard mining."""
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    d_ap, d_an = mine_batch_hard(embeddings, labels)
    return mean(relu(d_ap - d_an + margin))


@dataclass
class LossBreakdown:
    L_ID_g: float
    L_ID_td: float
    L_ID_lr: float
    L_tri_g: float
    L_tri_t: float
    L_tri_d: float
    L_tri_l: float
    L_tri_r: float
    L_tri_gs: float
    total: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def total_loss(b: BranchOutputs, labels, margin: float = 0.3) -> tuple[Tensor, LossBreakdown]:
    """Unweighted sum of the three ID and six triplet terms.

    With more than two strips per axis, the top/down (left/right) triplet
    terms average over the strips of the first and second half of the axis.
    """
    labels = np.asarray(labels)
    m = len(b.parts_td)

    def tri(x):
        return triplet_loss(x, labels, margin)

    def half_tri(parts, first):
        half = parts[: m // 2] if first else parts[m // 2 :]
        out = tri(half[0])
        for p in half[1:]:
            out = out + tri(p)
        return out * (1.0 / len(half)) if len(half) > 1 else out

    terms = {
        "L_ID_g": id_loss(b.logits_g, labels),
        "L_ID_td": id_loss(b.logits_td, labels),
        "L_ID_lr": id_loss(b.logits_lr, labels),
        "L_tri_g": tri(b.f_g),
        "L_tri_t": half_tri(b.parts_td, True),
        "L_tri_d": half_tri(b.parts_td, False),
        "L_tri_l": half_tri(b.parts_lr, True),
        "L_tri_r": half_tri(b.parts_lr, False),
        "L_tri_gs": tri(assemble_embedding(b)),
    }
    total = terms["L_ID_g"]
    for k in TERMS[1:]:
        total = total + terms[k]
    values = {k: float(v.data) for k, v in terms.items()}
    return total, LossBreakdown(**values, total=float(sum(values[k] for k in TERMS)))
