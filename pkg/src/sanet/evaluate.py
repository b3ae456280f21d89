"""Retrieval evaluation: embeddings, distances, CMC curves and result exports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .data import write_ppm
from .model import SANet, load_checkpoint
from .stn import localize, warp


@dataclass
class EmbeddingMatrix:
    values: np.ndarray  # [n, dim]
    labels: np.ndarray
    names: list[str]

    def __post_init__(self):
        if self.values.ndim != 2 or len(self.values) != len(self.labels):
            raise ValueError("embedding rows and labels disagree")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embeddings contain non-finite values")


def _model(model_or_ckpt) -> SANet:
    return model_or_ckpt if isinstance(model_or_ckpt, SANet) else load_checkpoint(model_or_ckpt)


def embed_set(model_or_ckpt, images: np.ndarray, labels=None, names=None, batch_size: int = 32) -> EmbeddingMatrix:
    """Embed ``images`` [n,3,S,S] without augmentation, one sample-independent batch at a time."""
    model = _model(model_or_ckpt).eval()
    rows = [model.embed(Tensor(images[i:i + batch_size])).data
            for i in range(0, len(images), batch_size)]
    values = np.concatenate(rows) if rows else np.zeros((0, model.config.embedding_dim), np.float32)
    if values.shape[1] != model.config.embedding_dim:
        raise ValueError(f"embedding dim {values.shape[1]} != config {model.config.embedding_dim}")
    labels = np.arange(len(images)) if labels is None else np.asarray(labels)
    names = names if names is not None else [str(i) for i in range(len(images))]
    return EmbeddingMatrix(values, labels, list(names))


def distance_matrix(q, g) -> np.ndarray:
    """Euclidean distances between query rows and gallery rows, computed in float64."""
    qv = np.asarray(getattr(q, "values", q), dtype=np.float64)
    gv = np.asarray(getattr(g, "values", g), dtype=np.float64)
    if qv.shape[1] != gv.shape[1]:
        raise ValueError(f"dimension mismatch: query {qv.shape[1]}, gallery {gv.shape[1]}")
    diff = qv[:, None, :] - gv[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def rank_gallery(dist: np.ndarray) -> np.ndarray:
    """Gallery indices per query by ascending distance; ties go to the lower index."""
    return np.argsort(dist, axis=1, kind="stable")


def cmc(dist: np.ndarray, q_labels, g_labels, k_max: int) -> np.ndarray:
    """Acc_k for k = 1..k_max: share of queries whose identity is in the top k."""
    q_labels = np.asarray(q_labels)
    g_labels = np.asarray(g_labels)
    if dist.shape != (len(q_labels), len(g_labels)):
        raise ValueError(f"distance matrix {dist.shape} does not match labels")
    missing = sorted(set(q_labels.tolist()) - set(g_labels.tolist()))
    if missing:
        raise ValueError(f"query identities absent from gallery: {missing}")
    if k_max < 1:
        raise ValueError("k_max must be positive")
    hits = g_labels[rank_gallery(dist)] == q_labels[:, None]
    first = hits.argmax(axis=1)  # 0-based rank of the first true match
    ks = np.arange(1, k_max + 1)
    return (first[:, None] < ks[None, :]).mean(axis=0)


def export_results(curve, dist: np.ndarray, q: EmbeddingMatrix, g: EmbeddingMatrix, out_dir, top: int = 10) -> None:
    """Write ``cmc.csv`` (k, acc) and ``ranks.csv`` (query, top gallery ids, correctness flags)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cmc.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "acc"])
        for k, acc in enumerate(curve, start=1):
            w.writerow([k, repr(float(acc))])
    order = rank_gallery(dist)[:, :top]
    with open(out / "ranks.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        n = order.shape[1]
        w.writerow(["query", "query_identity"] + [f"id_{r + 1}" for r in range(n)]
                   + [f"correct_{r + 1}" for r in range(n)])
        for i in range(len(order)):
            ids = g.labels[order[i]]
            w.writerow([q.names[i], int(q.labels[i]), *map(int, ids),
                        *(int(x == q.labels[i]) for x in ids)])


def read_cmc(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["acc"]) for r in rows])


# ------------------------------------------------------------- alignment

def regress_theta(model: SANet, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    model.eval()
    if not model.config.stn_enabled:
        raise ValueError("model has no alignment module")
    out = []
    for i in range(0, len(images), batch_size):
        feats = model.trunk_forward(Tensor(images[i:i + batch_size]))
        out.append(localize(feats, model.params).data)
    return np.concatenate(out).astype(np.float32)


def apply_theta(images: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Warp raw images [n,3,S,S] by their per-image affine parameters."""
    return warp(Tensor(images), Tensor(theta)).data


def export_alignment_pairs(model_or_ckpt, images: np.ndarray, names: list[str], out_dir) -> np.ndarray:
    """Write ``<stem>_before.ppm``/``<stem>_after.ppm`` pairs and ``theta.csv``; returns theta."""
    model = _model(model_or_ckpt)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    theta = regress_theta(model, images)
    after = apply_theta(images, theta)
    with open(out / "theta.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "t11", "t12", "t13", "t21", "t22", "t23"])
        for name, t in zip(names, theta):
            w.writerow([name, *(repr(float(x)) for x in t)])
    for name, before, aft in zip(names, images, after):
        write_ppm(out / f"{name}_before.ppm", before)
        write_ppm(out / f"{name}_after.ppm", aft)
    return theta


def read_theta(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    keys = ["t11", "t12", "t13", "t21", "t22", "t23"]
    return [r["image"] for r in rows], np.array([[float(r[k]) for k in keys] for r in rows], dtype=np.float32)


def principal_axis_angle(img: np.ndarray, threshold: float = 0.1, background=None, valid=None) -> float:
    """Axis angle in [0, pi) of the foreground blob (x right, y down).

    Foreground is every pixel whose largest channel deviation from the
    background colour exceeds ``threshold``.  The background defaults to the
    per-channel median of the border; ``valid`` restricts the pixels taken
    into account (e.g. to the part of a warped image that has source data).
    """
    if background is None:
        border = np.concatenate([img[:, 0, :], img[:, -1, :], img[:, :, 0], img[:, :, -1]], axis=1)
        background = np.median(border, axis=1)
    mask = np.abs(img - np.asarray(background)[:, None, None]).max(axis=0) > threshold
    if valid is not None:
        mask &= valid
    ys, xs = np.nonzero(mask)
    if len(xs) < 3:
        return float("nan")
    x = xs - xs.mean()
    y = ys - ys.mean()
    cov = np.array([[np.mean(x * x), np.mean(x * y)], [np.mean(x * y), np.mean(y * y)]])
    _, evecs = np.linalg.eigh(cov)
    vx, vy = evecs[:, -1]
    return float(math.atan2(vy, vx) % math.pi)


def orientation_spread(images: np.ndarray, theta: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Axial circular std of principal-axis angles, optionally after warping by ``theta``.

    The background colour of each image is read off its unwarped border, and
    warped images only count pixels whose source lies fully inside the frame.
    """
    angles = []
    after = None if theta is None else apply_theta(images, theta)
    cover = None
    if theta is not None:
        ones = np.ones((len(images), 1, *images.shape[2:]), dtype=np.float32)
        cover = apply_theta(ones, theta)[:, 0] >= 1.0 - 1e-4
    for i, img in enumerate(images):
        border = np.concatenate([img[:, 0, :], img[:, -1, :], img[:, :, 0], img[:, :, -1]], axis=1)
        bg = np.median(border, axis=1)
        if theta is None:
            angles.append(principal_axis_angle(img, background=bg))
        else:
            angles.append(principal_axis_angle(after[i], background=bg, valid=cover[i]))
    angles = np.array(angles)
    return axial_circular_std(angles), angles


def axial_circular_std(angles) -> float:
    """Circular standard deviation of axial angles (period pi), in radians."""
    a = np.asarray(angles, dtype=np.float64)
    a = a[np.isfinite(a)]
    r = np.abs(np.mean(np.exp(2j * a)))
    if r <= 0:
        return float("inf")
    return float(np.sqrt(-2.0 * np.log(r)) / 2.0)
