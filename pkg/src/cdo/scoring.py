"""Inference-time anomaly scoring: multi-hierarchy discrepancy summation.

Each hierarchy's normalized-feature discrepancy field is upsampled bilinearly
to input resolution and the fields are summed. No smoothing by default; an
optional Gaussian blur exists for parity with methods that post-process.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .models import ApprenticeModel, ExpertModel, discrepancy, normalize_features

HEATMAP_DTYPE_MAX = 65535


@dataclasses.dataclass
class AnomalyMap:
    """Input-resolution anomaly scores for one image."""

    scores: np.ndarray
    source_id: str

    def __post_init__(self):
        if self.scores.ndim != 2:
            raise ValueError("scores must be a 2-D map")
        if not np.isfinite(self.scores).all():
            raise ValueError(f"{self.source_id}: non-finite anomaly scores")


def anomaly_map_batch(
    images: torch.Tensor,
    expert: ExpertModel,
    apprentice: ApprenticeModel,
    squared: bool = True,
    gaussian_sigma: float = 0.0,
) -> torch.Tensor:
    """Score a preprocessed B x 3 x R x R batch; returns B x R x R maps.

    Per hierarchy: discrepancy at native resolution, bilinear upsample to R x R,
    then sum across hierarchies.
    """
    if tuple(expert.hierarchies) != tuple(apprentice.hierarchies):
        raise ValueError(
            f"hierarchy mismatch: expert {expert.hierarchies} vs "
            f"apprentice {apprentice.hierarchies}"
        )
    size = images.shape[-2:]
    with torch.no_grad():
        e_hat = normalize_features(expert(images))
        a_hat = normalize_features(apprentice(images))
        field = discrepancy(e_hat, a_hat, squared=squared)
        total = torch.zeros(images.shape[0], *size, device=images.device)
        for level in field.levels:
            up = F.interpolate(
                level[:, None], size=size, mode="bilinear", align_corners=False
            )[:, 0]
            total += up
        total = total.cpu()
    if gaussian_sigma > 0:
        blurred = np.stack(
            [gaussian_filter(m, sigma=gaussian_sigma) for m in total.numpy()]
        )
        total = torch.from_numpy(blurred)
    return total


def anomaly_map(
    image: torch.Tensor,
    expert: ExpertModel,
    apprentice: ApprenticeModel,
    source_id: str = "",
    squared: bool = True,
    gaussian_sigma: float = 0.0,
) -> AnomalyMap:
    """Score one preprocessed 3 x R x R image."""
    scores = anomaly_map_batch(
        image[None], expert, apprentice, squared=squared, gaussian_sigma=gaussian_sigma
    )[0]
    return AnomalyMap(scores=scores.numpy(), source_id=source_id)


def image_score(amap: AnomalyMap) -> float:
    """Image-level score: the maximum of the map."""
    return float(amap.scores.max())


def write_heatmap_png(amap: AnomalyMap, path: Path | str) -> Path:
    """Export as 16-bit single-channel PNG plus a JSON sidecar for lossless rescaling."""
    path = Path(path)
    lo = float(amap.scores.min())
    hi = float(amap.scores.max())
    span = hi - lo if hi > lo else 1.0
    quantized = np.round((amap.scores - lo) / span * HEATMAP_DTYPE_MAX).astype(np.uint16)
    Image.fromarray(quantized).save(path)  # uint16 maps to single-channel I;16
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(
        json.dumps({"min": lo, "max": hi, "source_id": amap.source_id}, sort_keys=True)
    )
    return path


def read_heatmap_png(path: Path | str) -> AnomalyMap:
    """Rebuild an AnomalyMap from a heatmap PNG and its sidecar."""
    path = Path(path)
    with Image.open(path) as im:
        quantized = np.asarray(im, dtype=np.float64)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    scores = quantized / HEATMAP_DTYPE_MAX * (meta["max"] - meta["min"]) + meta["min"]
    return AnomalyMap(scores=scores.astype(np.float32), source_id=meta["source_id"])


def write_map_csv(amap: AnomalyMap, path: Path | str) -> Path:
    """Raw map dump for oracle-style comparisons."""
    path = Path(path)
    np.savetxt(path, amap.scores, delimiter=",", fmt="%.9g")
    return path
