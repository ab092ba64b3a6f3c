"""The optimization stage: perturb, extract both pyramids, step the apprentice.

Every training image is perturbed once per step; the unperturbed feature cells
of the same image supply the normal set. The expert never receives gradient
updates. Runs are fully deterministic given the config seed (data order,
perturbation, apprentice initialization).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import IMAGENET_MEAN, IMAGENET_STD, Sample, resize_mask
from .losses import LossMode, pool_discrepancies, training_loss
from .metrics import (
    AggregateStat,
    DEFAULT_FPR_LIMIT,
    MetricsReport,
    ScoredSet,
    aupro,
    auroc_pixel,
    dd_stats,
)
from .models import (
    ApprenticeModel,
    ExpertModel,
    discrepancy,
    normalize_features,
    state_hash,
)
from .perturbation import PerturbationConfig, partition_pixels, perturb_batch
from .scoring import anomaly_map_batch

CHECKPOINT_RETENTION = 5


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Everything a training run depends on; serializable to JSON."""

    backbone_id: str = "hr32"
    resolution: int = 256
    hierarchies: tuple[int, ...] = (1, 2, 3)
    gamma: float = 2.0
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 2e-4
    weight_decay: float = 1e-2
    seed: int = 0
    loss_mode: LossMode = LossMode.MOM_OOM
    perturbation: PerturbationConfig = dataclasses.field(default_factory=PerturbationConfig)
    squared_discrepancy: bool = True
    per_hierarchy_pooling: bool = False
    device: str = "cpu"

    def __post_init__(self):
        object.__setattr__(self, "hierarchies", tuple(int(h) for h in self.hierarchies))
        object.__setattr__(self, "loss_mode", LossMode(self.loss_mode))
        if self.resolution < 32 or self.resolution % 16 != 0:
            raise ValueError("resolution must be a multiple of 16, >= 32")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "backbone_id": self.backbone_id,
            "resolution": self.resolution,
            "hierarchies": list(self.hierarchies),
            "gamma": self.gamma,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "loss_mode": self.loss_mode.value,
            "perturbation": self.perturbation.to_dict(),
            "squared_discrepancy": self.squared_discrepancy,
            "per_hierarchy_pooling": self.per_hierarchy_pooling,
            "device": self.device,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown run-config field(s): {sorted(unknown)}")
        kwargs = dict(d)
        if "perturbation" in kwargs:
            if not isinstance(kwargs["perturbation"], dict):
                raise ValueError("field 'perturbation' must be an object")
            kwargs["perturbation"] = PerturbationConfig.from_dict(kwargs["perturbation"])
        if "hierarchies" in kwargs:
            kwargs["hierarchies"] = tuple(kwargs["hierarchies"])
        for name, typ in (
            ("resolution", int),
            ("epochs", int),
            ("batch_size", int),
            ("seed", int),
            ("gamma", (int, float)),
            ("learning_rate", (int, float)),
            ("weight_decay", (int, float)),
        ):
            if name in kwargs and not isinstance(kwargs[name], typ):
                expected = typ.__name__ if isinstance(typ, type) else "number"
                raise ValueError(f"field {name!r} must be {expected}")
        return cls(**kwargs)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclasses.dataclass
class EpochLog:
    """Batch-averaged discrepancy means and loss for one epoch."""

    epoch: int
    mu_n: float
    mu_s: float
    loss: float
    wall_time: float


@dataclasses.dataclass
class TrainResult:
    final_state: dict
    epoch_states: list[tuple[int, dict]]
    logs: list[EpochLog]
    config: RunConfig
    expert_hash: str


def _preprocess_image(
    image: np.ndarray, resolution: int, mean: Sequence[float], std: Sequence[float]
) -> torch.Tensor:
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()
    t = F.interpolate(
        t[None], size=(resolution, resolution), mode="bilinear",
        align_corners=False, antialias=False,
    )[0]
    m = torch.tensor(mean).view(3, 1, 1)
    s = torch.tensor(std).view(3, 1, 1)
    return (t - m) / s


def _snapshot(model: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}


def train(
    dataset: list[Sample],
    cfg: RunConfig,
    normalization: tuple[Sequence[float], Sequence[float]] = (IMAGENET_MEAN, IMAGENET_STD),
    log_fn=None,
) -> TrainResult:
    """Run the training stage and keep the last five per-epoch checkpoints.

    ``dataset`` must contain only normal samples. Raises on a non-finite loss,
    naming the offending epoch/batch.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    for s in dataset:
        if s.label != "normal":
            raise ValueError(f"training dataset must be normal-only, got {s.id}")

    torch.manual_seed(cfg.seed)
    device = torch.device(cfg.device)
    expert = ExpertModel(cfg.backbone_id, cfg.hierarchies).to(device)
    apprentice = ApprenticeModel(cfg.backbone_id, cfg.hierarchies, init_seed=cfg.seed).to(device)
    expert_hash = state_hash(expert)

    mean, std = normalization
    clean = torch.stack(
        [_preprocess_image(s.image, cfg.resolution, mean, std) for s in dataset]
    )
    n = clean.shape[0]
    rng = np.random.default_rng([cfg.seed, 1])
    optimizer = torch.optim.AdamW(
        apprentice.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )

    logs: list[EpochLog] = []
    epoch_states: list[tuple[int, dict]] = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        apprentice.train()
        perm = rng.permutation(n)
        mus_n: list[float] = []
        mus_s: list[float] = []
        losses: list[float] = []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            x, masks = perturb_batch(clean[idx], cfg.perturbation, rng)
            x, masks = x.to(device), masks.to(device)
            e_hat = normalize_features(expert(x))
            a_hat = normalize_features(apprentice(x))
            field = discrepancy(e_hat, a_hat, squared=cfg.squared_discrepancy)
            partitions = [
                partition_pixels(masks, lvl.shape[-2:]) for lvl in field.levels
            ]
            pooled = pool_discrepancies(field.levels, partitions)
            if cfg.per_hierarchy_pooling:
                per_level = []
                for d, p in zip(field.levels, partitions):
                    level_batch = pool_discrepancies([d], [p])
                    per_level.append(
                        training_loss(level_batch.d_n, level_batch.d_s, cfg.loss_mode, cfg.gamma)
                    )
                loss = torch.stack(per_level).mean()
            else:
                loss = training_loss(pooled.d_n, pooled.d_s, cfg.loss_mode, cfg.gamma)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, batch {bi}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            mus_n.append(float(pooled.d_n.detach().mean()))
            if pooled.d_s.numel():
                mus_s.append(float(pooled.d_s.detach().mean()))
            losses.append(float(loss.detach()))
        log = EpochLog(
            epoch=epoch,
            mu_n=float(np.mean(mus_n)),
            mu_s=float(np.mean(mus_s)) if mus_s else 0.0,
            loss=float(np.mean(losses)),
            wall_time=time.perf_counter() - t0,
        )
        logs.append(log)
        if log_fn is not None:
            log_fn(log)
        epoch_states.append((epoch, _snapshot(apprentice)))
        if len(epoch_states) > CHECKPOINT_RETENTION:
            epoch_states.pop(0)

    return TrainResult(
        final_state=_snapshot(apprentice),
        epoch_states=epoch_states,
        logs=logs,
        config=cfg,
        expert_hash=expert_hash,
    )


def score_test_set(
    test_samples: list[Sample],
    expert: ExpertModel,
    apprentice: ApprenticeModel,
    resolution: int,
    normalization: tuple[Sequence[float], Sequence[float]] = (IMAGENET_MEAN, IMAGENET_STD),
    squared: bool = True,
    batch_size: int = 8,
) -> ScoredSet:
    """Score every test sample and pair maps with resolution-matched masks."""
    mean, std = normalization
    apprentice.eval()
    device = next(apprentice.parameters()).device
    pairs: list[tuple[np.ndarray, np.ndarray]] = []
    for start in range(0, len(test_samples), batch_size):
        chunk = test_samples[start : start + batch_size]
        x = torch.stack(
            [_preprocess_image(s.image, resolution, mean, std) for s in chunk]
        ).to(device)
        maps = anomaly_map_batch(x, expert, apprentice, squared=squared).numpy()
        for s, m in zip(chunk, maps):
            if s.mask is not None:
                gt = resize_mask(s.mask, resolution)
            else:
                gt = np.zeros((resolution, resolution), dtype=np.uint8)
            pairs.append((m, gt))
    return ScoredSet(pairs)


def evaluate_last_k(
    epoch_states: Sequence[tuple[int, dict]],
    test_samples: list[Sample],
    cfg: RunConfig,
    k: int = CHECKPOINT_RETENTION,
    fpr_limit: float = DEFAULT_FPR_LIMIT,
    normalization: tuple[Sequence[float], Sequence[float]] = (IMAGENET_MEAN, IMAGENET_STD),
) -> MetricsReport:
    """Score the test set under each of the last k checkpoints; report mean +/- std.

    With fewer than k checkpoints available, all are used and the report is
    flagged.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not epoch_states:
        raise ValueError("no checkpoints to evaluate")
    used = list(epoch_states[-k:])
    flagged = len(used) < k

    expert = ExpertModel(cfg.backbone_id, cfg.hierarchies)
    apprentice = ApprenticeModel(cfg.backbone_id, cfg.hierarchies, init_seed=cfg.seed)
    aurocs, aupros, margins, overlaps = [], [], [], []
    for _epoch, state in used:
        apprentice.load_state_dict(state)
        scored = score_test_set(
            test_samples,
            expert,
            apprentice,
            cfg.resolution,
            normalization,
            squared=cfg.squared_discrepancy,
            batch_size=cfg.batch_size,
        )
        aurocs.append(auroc_pixel(scored))
        aupros.append(aupro(scored, fpr_limit=fpr_limit))
        pooled_scores, pooled_masks = scored.pooled()
        stats = dd_stats(
            pooled_scores[pooled_masks == 0], pooled_scores[pooled_masks == 1]
        )
        margins.append(stats.margin)
        overlaps.append(stats.overlap)

    return MetricsReport(
        auroc=AggregateStat(aurocs),
        aupro=AggregateStat(aupros),
        margin=AggregateStat(margins),
        overlap=AggregateStat(overlaps),
        fpr_limit=fpr_limit,
        k_requested=k,
        k_used=len(used),
        flagged=flagged,
        config_hash=cfg.config_hash(),
    )


EPOCH_LOG_FIELDS = ("epoch", "mu_n", "mu_s", "loss", "wall_time")


def write_epoch_log_csv(logs: Sequence[EpochLog], path: Path | str) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(EPOCH_LOG_FIELDS)
        for log in logs:
            writer.writerow(
                [log.epoch, repr(log.mu_n), repr(log.mu_s), repr(log.loss), f"{log.wall_time:.6f}"]
            )
    return path


def read_epoch_log_csv(path: Path | str) -> list[EpochLog]:
    logs = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            logs.append(
                EpochLog(
                    epoch=int(row["epoch"]),
                    mu_n=float(row["mu_n"]),
                    mu_s=float(row["mu_s"]),
                    loss=float(row["loss"]),
                    wall_time=float(row["wall_time"]),
                )
            )
    return logs
