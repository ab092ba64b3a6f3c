"""Pixel-level evaluation: AU-ROC, AU-PRO with an FPR limit, and DD statistics.

AU-ROC is computed from rank statistics (exactly the tie-grouped trapezoidal
area under TPR vs FPR with pixels pooled across the test set). AU-PRO labels
each ground-truth mask into 8-connected regions, averages per-region overlap
across regions at every threshold, pools negatives for the FPR axis, and
integrates the curve up to ``fpr_limit`` (normalized by the limit). Margin and
overlap summarize how separable the normal and abnormal discrepancy
distributions are.
"""

from __future__ import annotations

import dataclasses
import json
from importlib import resources

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

DEFAULT_FPR_LIMIT = 0.3
# Above this many pooled pixels, AU-PRO switches from exact threshold
# enumeration to a 1000-point grid (endpoints included).
EXACT_THRESHOLD_PIXEL_CAP = 300_000
GRID_POINTS = 1000

EIGHT_CONNECTIVITY = np.ones((3, 3), dtype=int)


@dataclasses.dataclass
class ScoredSet:
    """Shape-matched (anomaly map, ground-truth mask) pairs for one test set."""

    pairs: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("empty ScoredSet")
        total_pos = total_neg = 0
        for i, (scores, mask) in enumerate(self.pairs):
            if scores.shape != mask.shape:
                raise ValueError(
                    f"pair {i}: scores {scores.shape} vs mask {mask.shape}"
                )
            if not np.isfinite(scores).all():
                raise ValueError(f"pair {i}: non-finite scores")
            if not np.isin(mask, (0, 1)).all():
                raise ValueError(f"pair {i}: mask must be binary")
            total_pos += int(mask.sum())
            total_neg += int(mask.size - mask.sum())
        if total_pos == 0 or total_neg == 0:
            raise ValueError("need at least one positive and one negative pixel overall")

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        scores = np.concatenate([s.ravel() for s, _ in self.pairs])
        masks = np.concatenate([m.ravel() for _, m in self.pairs])
        return scores.astype(np.float64), masks.astype(np.uint8)


def auroc_pixel(scored: ScoredSet) -> float:
    """Area under the pixel-pooled ROC curve, ties split evenly."""
    scores, masks = scored.pooled()
    n_pos = int(masks.sum())
    n_neg = masks.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AU-ROC needs both classes present")
    ranks = rankdata(scores)
    rank_sum_pos = ranks[masks == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _count_ge(sorted_values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    return sorted_values.size - np.searchsorted(sorted_values, thresholds, side="left")


def _integrate_to_limit(fprs: np.ndarray, pros: np.ndarray, limit: float) -> float:
    """Trapezoidal area of the (FPR, PRO) curve over FPR in [0, limit], / limit."""
    inside = fprs <= limit
    x = fprs[inside]
    y = pros[inside]
    area = float(np.trapezoid(y, x)) if x.size > 1 else 0.0
    idx = int(inside.sum())
    if idx < fprs.size and x.size and fprs[idx] > x[-1]:
        # partial segment crossing the limit, linearly interpolated
        t = (limit - x[-1]) / (fprs[idx] - x[-1])
        y_lim = y[-1] + t * (pros[idx] - y[-1])
        area += (limit - x[-1]) * (y[-1] + y_lim) / 2.0
    return area / limit


def aupro(scored: ScoredSet, fpr_limit: float = DEFAULT_FPR_LIMIT) -> float:
    """Normalized area under the per-region-overlap curve up to ``fpr_limit``.

    Regions are 8-connected components of each mask; PRO at a threshold is the
    mean over regions of the fraction of the region scoring at or above it;
    FPR is pooled over every negative pixel in the set.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    region_scores: list[np.ndarray] = []
    negatives: list[np.ndarray] = []
    for scores, mask in scored.pairs:
        negatives.append(scores[mask == 0].ravel())
        labeled, n_regions = ndimage.label(mask, structure=EIGHT_CONNECTIVITY)
        for r in range(1, n_regions + 1):
            region_scores.append(np.sort(scores[labeled == r].ravel()))
    if not region_scores:
        raise ValueError("AU-PRO needs at least one ground-truth region")
    neg = np.sort(np.concatenate(negatives))
    if neg.size == 0:
        raise ValueError("AU-PRO needs negative pixels for the FPR axis")

    pooled, _ = scored.pooled()
    if pooled.size <= EXACT_THRESHOLD_PIXEL_CAP:
        thresholds = np.unique(pooled)[::-1]
    else:
        thresholds = np.linspace(pooled.max(), pooled.min(), GRID_POINTS)

    pro = np.zeros(thresholds.size)
    for rs in region_scores:
        pro += _count_ge(rs, thresholds) / rs.size
    pro /= len(region_scores)
    fpr = _count_ge(neg, thresholds) / neg.size

    # descending thresholds give non-decreasing (FPR, PRO); start at (0, 0)
    fprs = np.concatenate(([0.0], fpr))
    pros = np.concatenate(([0.0], pro))
    return _integrate_to_limit(fprs, pros, fpr_limit)


@dataclasses.dataclass
class DDStats:
    """Separation statistics between normal and abnormal discrepancy sets."""

    mu_n: float
    mu_a: float
    margin: float
    overlap: float
    hist_n: np.ndarray
    hist_a: np.ndarray
    bin_edges: np.ndarray


def dd_stats(
    d_normal: np.ndarray, d_abnormal: np.ndarray, n_bins: int = 100
) -> DDStats:
    """Margin (|mean difference|) and histogram-intersection overlap on shared bins."""
    d_normal = np.asarray(d_normal, dtype=np.float64).ravel()
    d_abnormal = np.asarray(d_abnormal, dtype=np.float64).ravel()
    if d_normal.size == 0 or d_abnormal.size == 0:
        raise ValueError("dd_stats needs two nonempty vectors")
    lo = min(d_normal.min(), d_abnormal.min())
    hi = max(d_normal.max(), d_abnormal.max())
    if hi == lo:  # degenerate constant data still shares one bin fully
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, n_bins + 1)
    hist_n, _ = np.histogram(d_normal, bins=edges, density=True)
    hist_a, _ = np.histogram(d_abnormal, bins=edges, density=True)
    bin_width = edges[1] - edges[0]
    overlap = float(np.minimum(hist_n, hist_a).sum() * bin_width)
    mu_n = float(d_normal.mean())
    mu_a = float(d_abnormal.mean())
    return DDStats(
        mu_n=mu_n,
        mu_a=mu_a,
        margin=abs(mu_a - mu_n),
        overlap=overlap,
        hist_n=hist_n,
        hist_a=hist_a,
        bin_edges=edges,
    )


@dataclasses.dataclass
class AggregateStat:
    """A metric aggregated over checkpoints: per-checkpoint values plus mean/std."""

    values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        if len(set(self.values)) <= 1:
            return 0.0
        return float(np.std(self.values))

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "per_checkpoint": [float(v) for v in self.values],
        }


@dataclasses.dataclass
class MetricsReport:
    """Evaluation summary over the last-k checkpoints of a run."""

    auroc: AggregateStat
    aupro: AggregateStat
    margin: AggregateStat
    overlap: AggregateStat
    fpr_limit: float
    k_requested: int
    k_used: int
    flagged: bool
    config_hash: str

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc.to_dict(),
            "aupro": self.aupro.to_dict(),
            "margin": self.margin.to_dict(),
            "overlap": self.overlap.to_dict(),
            "fpr_limit": self.fpr_limit,
            "k_requested": self.k_requested,
            "k_used": self.k_used,
            "flagged": self.flagged,
            "config_hash": self.config_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report_schema() -> dict:
    with resources.files("cdo.schemas").joinpath("metrics_report.schema.json").open() as f:
        return json.load(f)


def validate_report(report: dict) -> None:
    """Validate a serialized MetricsReport against the shipped JSON schema."""
    import jsonschema

    jsonschema.validate(report, report_schema())
