"""Synthetic anomaly injection by random square perturbation.

Squares are placed uniformly, filled with per-pixel-per-channel standard
normal draws (the input is already normalized, so sigma = 1 noise is equally
out-of-distribution in every channel), and the exact square union is returned
as the synthetic-anomaly mask. A max-pooling rule maps that input-resolution
mask down to each feature grid: a feature cell counts as synthetic-abnormal
iff any input pixel it covers was perturbed.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
import torch.nn.functional as F


@dataclasses.dataclass(frozen=True)
class PerturbationConfig:
    """Square count/size ranges; fill is fixed to Gaussian(0, 1)."""

    num_squares_range: tuple[int, int] = (1, 4)
    side_fraction_range: tuple[float, float] = (1.0 / 16.0, 1.0 / 4.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.num_squares_range
        if not (0 <= lo <= hi):
            raise ValueError(f"bad num_squares_range {self.num_squares_range}")
        flo, fhi = self.side_fraction_range
        if not (0.0 < flo <= fhi <= 1.0):
            raise ValueError(f"bad side_fraction_range {self.side_fraction_range}")

    def to_dict(self) -> dict:
        return {
            "num_squares_range": list(self.num_squares_range),
            "side_fraction_range": list(self.side_fraction_range),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationConfig":
        return cls(
            num_squares_range=tuple(d.get("num_squares_range", (1, 4))),
            side_fraction_range=tuple(d.get("side_fraction_range", (1 / 16, 1 / 4))),
            seed=int(d.get("seed", 0)),
        )


@dataclasses.dataclass
class PerturbationOutcome:
    perturbed_image: torch.Tensor  # 3 x R x R
    mask: torch.Tensor  # R x R bool, True = synthetically perturbed


def perturb(
    image: torch.Tensor,
    cfg: PerturbationConfig,
    rng: np.random.Generator | None = None,
) -> PerturbationOutcome:
    """Plant k ~ U(num_squares_range) noise squares into a normalized 3 x R x R image.

    Square sides are uniform in side_fraction_range x R, top-left corners uniform
    over the image, squares clipped at the boundary. Deterministic given rng state;
    pixels outside the mask are returned bit-exactly.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected 3xRxR image, got {tuple(image.shape)}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    r = image.shape[-1]
    mask = torch.zeros(image.shape[-2:], dtype=torch.bool)
    perturbed = image.clone()

    lo, hi = cfg.num_squares_range
    k = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    for _ in range(k):
        frac = rng.uniform(*cfg.side_fraction_range)
        side = max(1, int(round(frac * r)))
        top = int(rng.integers(0, image.shape[-2]))
        left = int(rng.integers(0, image.shape[-1]))
        bottom = min(top + side, image.shape[-2])
        right = min(left + side, image.shape[-1])
        noise = rng.standard_normal((3, bottom - top, right - left)).astype(np.float32)
        perturbed[:, top:bottom, left:right] = torch.from_numpy(noise)
        mask[top:bottom, left:right] = True
    return PerturbationOutcome(perturbed_image=perturbed, mask=mask)


def perturb_batch(
    images: torch.Tensor,
    cfg: PerturbationConfig,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Perturb every image in a B x 3 x R x R batch; returns (images, B x R x R bool masks)."""
    outs = [perturb(img, cfg, rng) for img in images]
    return (
        torch.stack([o.perturbed_image for o in outs]),
        torch.stack([o.mask for o in outs]),
    )


def partition_pixels(mask: torch.Tensor, feature_shape: tuple[int, int]) -> torch.Tensor:
    """Downsample an input-resolution binary mask to a feature grid by max-pooling.

    Cell (i, j) of the Hf x Wf output covers input rows
    [floor(i*R/Hf), ceil((i+1)*R/Hf)) (adaptive-pooling coverage) and is True iff
    any covered pixel is set. Accepts R x R or B x R x R masks; the normal set is
    the complement, so the two sets always partition the Hf x Wf grid.
    """
    hf, wf = feature_shape
    squeeze = mask.ndim == 2
    m = mask[None] if squeeze else mask
    if m.ndim != 3:
        raise ValueError(f"expected RxR or BxRxR mask, got {tuple(mask.shape)}")
    pooled = F.adaptive_max_pool2d(m[:, None].float(), (hf, wf))[:, 0] > 0.5
    return pooled[0] if squeeze else pooled
