"""Reproducible experiment drivers shared by the scripts and the acceptance suite."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, SyntheticSpec, generate_dataset
from .evaluate import cmc, distance_matrix, embed_set, export_results, orientation_spread, regress_theta
from .model import SANet, SANetConfig
from .trainer import TrainConfig, fit

logger = logging.getLogger(__name__)


@dataclass
class RunSummary:
    tag: str
    cmc: list[float]
    embedding_dim: int
    checkpoint_sha256: str
    cmc_sha256: str
    train_seconds: float
    spread_before: float | None = None
    spread_after: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def rank1(self) -> float:
        return self.cmc[0]


def file_sha256(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def train_and_evaluate(tag: str, dataset: Dataset, model_cfg: SANetConfig, train_cfg: TrainConfig,
                       out_dir, k_max: int = 25, progress: bool = False) -> RunSummary:
    """Train one model, evaluate CMC on query/gallery and, with alignment, the orientation spread."""
    out = Path(out_dir)
    start = time.perf_counter()
    model = SANet(model_cfg)
    result = fit(model, dataset, train_cfg, out, progress=progress)
    seconds = time.perf_counter() - start
    q = embed_set(model, dataset.query.images, dataset.query.identities, dataset.query.names)
    g = embed_set(model, dataset.gallery.images, dataset.gallery.identities, dataset.gallery.names)
    dist = distance_matrix(q, g)
    curve = cmc(dist, q.labels, g.labels, min(k_max, len(g.labels)))
    export_results(curve, dist, q, g, out / "eval")
    summary = RunSummary(
        tag=tag,
        cmc=[float(x) for x in curve],
        embedding_dim=int(q.values.shape[1]),
        checkpoint_sha256=file_sha256(result.checkpoint, result.checkpoint.with_suffix(".bin")),
        cmc_sha256=file_sha256(out / "eval" / "cmc.csv"),
        train_seconds=seconds,
    )
    if model_cfg.stn_enabled:
        images = np.concatenate([dataset.query.images, dataset.gallery.images])
        theta = regress_theta(model, images)
        summary.spread_before = orientation_spread(images)[0]
        summary.spread_after = orientation_spread(images, theta)[0]
    (out / "summary.json").write_text(json.dumps(asdict(summary), indent=1, sort_keys=True) + "\n")
    logger.info("%s: CMC-1 %.4f in %.0fs", tag, summary.rank1, seconds)
    return summary


# Settings used by the ablation experiment and the acceptance suite (about 8 minutes per model
# on one core).
ABLATION_SPEC = SyntheticSpec()
ABLATION_TRAIN = TrainConfig(epochs=40, steps_per_epoch=40)
ABLATION_MODEL = SANetConfig()


def ablation_configs(stn_enabled: bool, parts_per_branch: int = 2, train: TrainConfig | None = None):
    train = train or ABLATION_TRAIN
    model = SANetConfig(**{**ABLATION_MODEL.to_dict(), "stn_enabled": stn_enabled,
                           "parts_per_branch": parts_per_branch,
                           "num_classes": ABLATION_SPEC.num_train_identities, "seed": train.seed})
    return model, train


def run_ablation(out_dir, train: TrainConfig | None = None, progress: bool = False) -> dict[str, RunSummary]:
    """SANet against the baseline without alignment, on the same data and seeds."""
    dataset = generate_dataset(ABLATION_SPEC)
    out = Path(out_dir)
    results = {}
    for tag, stn in (("sanet", True), ("baseline", False)):
        model_cfg, train_cfg = ablation_configs(stn, train=train)
        results[tag] = train_and_evaluate(tag, dataset, model_cfg, train_cfg, out / tag, progress=progress)
    return results
