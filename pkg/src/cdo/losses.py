"""Training losses over partitioned discrepancy batches.

Four modes, matching the ablation cases:

  baseline       mean of the normal discrepancies only
  baseline_oom   tail-weighted normal mean (weights from the ratio-to-mean rule)
  mom            margin loss: (sum d_n - sum d_s) / (N_n + N_s)
  mom_oom        the combined loss: weighted margin normalized by the weight mass

Weights are treated as constants for gradient purposes (stop-gradient, the
focal-loss convention): for gamma > 0 they enhance normal cells above their
mean and synthetic-abnormal cells below theirs, which are exactly the tails
that keep the two discrepancy distributions overlapping.
"""

from __future__ import annotations

import dataclasses
import enum
import warnings

import torch

WEIGHT_EPS = 1e-6


class EmptySyntheticSetWarning(UserWarning):
    """Raised (as a warning) when a step produced no synthetic-abnormal cells."""


class LossMode(str, enum.Enum):
    BASELINE = "baseline"
    BASELINE_OOM = "baseline_oom"
    MOM = "mom"
    MOM_OOM = "mom_oom"

    @property
    def uses_margin(self) -> bool:
        return self in (LossMode.MOM, LossMode.MOM_OOM)

    @property
    def uses_weights(self) -> bool:
        return self in (LossMode.BASELINE_OOM, LossMode.MOM_OOM)


@dataclasses.dataclass
class DDBatch:
    """Pooled normal / synthetic-abnormal discrepancies for one optimization step."""

    d_n: torch.Tensor
    d_s: torch.Tensor

    def __post_init__(self):
        for name, v in (("d_n", self.d_n), ("d_s", self.d_s)):
            if v.ndim != 1:
                raise ValueError(f"{name} must be a flat vector")
            if v.numel() and (not torch.isfinite(v).all() or v.min() < 0):
                raise ValueError(f"{name} must be finite and >= 0")
        if self.d_n.numel() < 1:
            raise ValueError("need at least one normal discrepancy")


@dataclasses.dataclass
class WeightBatch:
    w_n: torch.Tensor
    w_s: torch.Tensor
    gamma: float


def baseline_loss(d_n: torch.Tensor) -> torch.Tensor:
    """Mean normal discrepancy; the distillation-only objective."""
    if d_n.numel() == 0:
        raise ValueError("baseline_loss needs a nonempty normal set")
    return d_n.mean()


def _warn_empty_synthetic() -> None:
    warnings.warn(
        "no synthetic-abnormal cells in this step; falling back to the normal-only loss",
        EmptySyntheticSetWarning,
        stacklevel=3,
    )


def mom_loss(d_n: torch.Tensor, d_s: torch.Tensor) -> torch.Tensor:
    """Margin objective: minimize normal and maximize synthetic-abnormal discrepancies."""
    if d_n.numel() == 0:
        raise ValueError("mom_loss needs a nonempty normal set")
    if d_s.numel() == 0:
        _warn_empty_synthetic()
        return baseline_loss(d_n)
    return (d_n.sum() - d_s.sum()) / (d_n.numel() + d_s.numel())


def oom_weights(
    d_n: torch.Tensor,
    d_s: torch.Tensor,
    gamma: float,
    eps: float = WEIGHT_EPS,
) -> WeightBatch:
    """Ratio-to-mean power weights, computed without gradient flow.

    w_n = (d_n / mu_n)^gamma, w_s = (d_s / mu_s)^(-gamma), with epsilon guards on
    the means, on d_s before the negative power, and below each weight.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    with torch.no_grad():
        mu_n = torch.clamp(d_n.mean(), min=eps) if d_n.numel() else torch.tensor(eps)
        w_n = torch.clamp((d_n / mu_n) ** gamma, min=eps)
        if d_s.numel():
            mu_s = torch.clamp(d_s.mean(), min=eps)
            w_s = torch.clamp(d_s, min=eps) / mu_s
            w_s = w_s ** (-gamma)
        else:
            w_s = d_s.clone()
    return WeightBatch(w_n=w_n.detach(), w_s=w_s.detach(), gamma=float(gamma))


def cdo_loss(
    d_n: torch.Tensor,
    d_s: torch.Tensor,
    gamma: float,
    eps: float = WEIGHT_EPS,
) -> torch.Tensor:
    """Combined weighted-margin loss, Eq.-literal:

    (sum w_n d_n - sum w_s d_s) / (sum w_n + sum w_s), weights held constant.
    At gamma = 0 every weight is exactly 1 and this reduces to mom_loss.
    """
    if d_n.numel() == 0:
        raise ValueError("cdo_loss needs a nonempty normal set")
    w = oom_weights(d_n, d_s, gamma, eps)
    if d_s.numel() == 0:
        _warn_empty_synthetic()
        return (w.w_n * d_n).sum() / w.w_n.sum()
    num = (w.w_n * d_n).sum() - (w.w_s * d_s).sum()
    return num / (w.w_n.sum() + w.w_s.sum())


def training_loss(
    d_n: torch.Tensor,
    d_s: torch.Tensor,
    mode: LossMode,
    gamma: float,
) -> torch.Tensor:
    """Dispatch the configured ablation case onto one pooled batch."""
    mode = LossMode(mode)
    if mode is LossMode.BASELINE:
        return baseline_loss(d_n)
    if mode is LossMode.BASELINE_OOM:
        w = oom_weights(d_n, d_s, gamma)
        return (w.w_n * d_n).sum() / w.w_n.sum()
    if mode is LossMode.MOM:
        return mom_loss(d_n, d_s)
    return cdo_loss(d_n, d_s, gamma)


def pool_discrepancies(
    levels: list[torch.Tensor],
    partitions: list[torch.Tensor],
) -> DDBatch:
    """Flatten per-level fields into one (d_n, d_s) batch using the cell partition."""
    if len(levels) != len(partitions):
        raise ValueError("levels and partitions must align")
    d_n_parts, d_s_parts = [], []
    for d, part in zip(levels, partitions):
        if d.shape != part.shape:
            raise ValueError(
                f"field {tuple(d.shape)} and partition {tuple(part.shape)} differ"
            )
        d_n_parts.append(d[~part])
        d_s_parts.append(d[part])
    return DDBatch(d_n=torch.cat(d_n_parts), d_s=torch.cat(d_s_parts))
