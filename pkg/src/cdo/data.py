"""MVTec-format dataset ingestion, preprocessing, and a procedural toy dataset.

Images are float32 H x W x 3 rasters in [0, 1]; ground-truth masks are uint8
H x W rasters with 1 marking anomalous pixels. Loading is deterministic
(lexicographic by path) and samples are immutable after load.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

IMAGE_SUFFIX = ".png"


@dataclasses.dataclass(frozen=True)
class Sample:
    """One image with optional ground-truth anomaly mask and metadata."""

    id: str
    image: np.ndarray
    mask: np.ndarray | None
    label: str  # "normal" | "abnormal"
    split: str  # "train" | "test"

    def __post_init__(self):
        if self.label not in ("normal", "abnormal"):
            raise ValueError(f"bad label {self.label!r}")
        if self.split not in ("train", "test"):
            raise ValueError(f"bad split {self.split!r}")
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.mask is not None:
            if self.mask.shape != self.image.shape[:2]:
                raise ValueError(
                    f"{self.id}: mask shape {self.mask.shape} != image {self.image.shape[:2]}"
                )
            if not np.isin(self.mask, (0, 1)).all():
                raise ValueError(f"{self.id}: mask must be binary")
        if self.label == "abnormal":
            if self.mask is None or self.mask.sum() == 0:
                raise ValueError(f"{self.id}: abnormal sample needs a nonempty mask")
        elif self.mask is not None and self.mask.any():
            raise ValueError(f"{self.id}: normal sample has positive mask pixels")
        if self.split == "train" and self.label != "normal":
            raise ValueError(f"{self.id}: train split must be normal-only")


@dataclasses.dataclass(frozen=True)
class DatasetSpec:
    """Where a dataset lives and how its images are brought to model space."""

    root: Path
    category: str
    resolution: int = 256
    normalization_mean: tuple[float, float, float] = IMAGENET_MEAN
    normalization_std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        if self.resolution < 32:
            raise ValueError("resolution must be >= 32")


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise OSError(f"unreadable image: {path}") from exc
    return arr


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except Exception as exc:
        raise OSError(f"unreadable mask: {path}") from exc
    return (arr > 0).astype(np.uint8)


def _mask_path_for(image_path: Path, gt_dir: Path) -> Path:
    candidates = [
        gt_dir / image_path.parent.name / f"{image_path.stem}_mask{IMAGE_SUFFIX}",
        gt_dir / image_path.parent.name / f"{image_path.stem}{IMAGE_SUFFIX}",
    ]
    for cand in candidates:
        if cand.exists():
            return cand
    raise FileNotFoundError(
        f"no ground-truth mask for abnormal test image {image_path} "
        f"(looked for {candidates[0]} and {candidates[1]})"
    )


def load_mvtec_category(spec: DatasetSpec, split: str) -> list[Sample]:
    """Load one MVTec-layout category: train/good, test/<defect>, ground_truth/<defect>.

    Ordering is lexicographic by path. Masks are binarized at value > 0.
    Missing masks for abnormal test images are a hard error.
    """
    if split not in ("train", "test"):
        raise ValueError(f"bad split {split!r}")
    cat_dir = spec.root / spec.category
    split_dir = cat_dir / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"dataset split directory not found: {split_dir}")

    samples: list[Sample] = []
    if split == "train":
        for path in sorted((split_dir / "good").glob(f"*{IMAGE_SUFFIX}")):
            samples.append(
                Sample(
                    id=f"{spec.category}/train/good/{path.stem}",
                    image=_read_image(path),
                    mask=None,
                    label="normal",
                    split="train",
                )
            )
        return samples

    gt_dir = cat_dir / "ground_truth"
    for defect_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        defect = defect_dir.name
        for path in sorted(defect_dir.glob(f"*{IMAGE_SUFFIX}")):
            image = _read_image(path)
            if defect == "good":
                mask, label = None, "normal"
            else:
                mask = _read_mask(_mask_path_for(path, gt_dir))
                label = "abnormal"
            samples.append(
                Sample(
                    id=f"{spec.category}/test/{defect}/{path.stem}",
                    image=image,
                    mask=mask,
                    label=label,
                    split="test",
                )
            )
    return samples


def preprocess(sample: Sample, spec: DatasetSpec) -> torch.Tensor:
    """Resize bilinearly to R x R and apply per-channel (x - mean) / std.

    Returns a float32 tensor of shape 3 x R x R.
    """
    img = sample.image
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"{sample.id}: image channels must lie in [0, 1]")
    t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))
    t = F.interpolate(
        t[None],
        size=(spec.resolution, spec.resolution),
        mode="bilinear",
        align_corners=False,
        antialias=False,
    )[0]
    mean = torch.tensor(spec.normalization_mean).view(3, 1, 1)
    std = torch.tensor(spec.normalization_std).view(3, 1, 1)
    return (t - mean) / std


def denormalize(tensor: torch.Tensor, spec: DatasetSpec) -> torch.Tensor:
    """Invert the normalization applied by :func:`preprocess`."""
    mean = torch.tensor(spec.normalization_mean).view(3, 1, 1)
    std = torch.tensor(spec.normalization_std).view(3, 1, 1)
    return tensor * std + mean


def resize_mask(mask: np.ndarray, resolution: int) -> np.ndarray:
    """Nearest-neighbor resize for binary masks; preserves binarity."""
    t = torch.from_numpy(mask.astype(np.float32))[None, None]
    t = F.interpolate(t, size=(resolution, resolution), mode="nearest")[0, 0]
    return (t.numpy() > 0.5).astype(np.uint8)


def _toy_strokes(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Thin random strokes, part of the normal appearance (hard normal structure)."""
    r = resolution
    canvas = np.zeros((r, r), dtype=np.float32)
    for _ in range(int(rng.integers(2, 5))):
        y0, x0, y1, x1 = rng.uniform(0, r, size=4)
        n_pts = int(2 * max(abs(y1 - y0), abs(x1 - x0))) + 2
        ts = np.linspace(0.0, 1.0, n_pts)
        ys = np.clip((y0 + ts * (y1 - y0)).astype(int), 0, r - 1)
        xs = np.clip((x0 + ts * (x1 - x0)).astype(int), 0, r - 1)
        canvas[ys, xs] = 1.0
        canvas[np.clip(ys + 1, 0, r - 1), xs] = 1.0
    return canvas


def _toy_normal_image(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """One sample of the toy normal texture.

    A fixed periodic pattern plus smoothed noise, overlaid with a few random
    dark strokes so the normal distribution has genuinely hard structure.
    """
    r = resolution
    y, x = np.mgrid[0:r, 0:r].astype(np.float32) / r
    phase = rng.uniform(0, 2 * np.pi, size=3).astype(np.float32)
    freqs = ((5.0, 0.0), (0.0, 5.0), (3.0, 3.0))
    chans = []
    for c, (fx, fy) in enumerate(freqs):
        wave = 0.5 + 0.22 * np.sin(2 * np.pi * (fx * x + fy * y) + phase[c])
        noise = gaussian_filter(rng.normal(0.0, 1.0, size=(r, r)), sigma=r / 16.0)
        noise = 0.10 * noise / max(np.abs(noise).max(), 1e-8)
        chans.append(wave + noise)
    img = np.stack(chans, axis=-1).astype(np.float32)
    strokes = _toy_strokes(rng, r)
    img = img * (1.0 - 0.65 * strokes[:, :, None])
    return np.clip(img, 0.0, 1.0)


def _toy_blob_mask(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Union of 1-3 random ellipses; the exact anomaly support."""
    r = resolution
    mask = np.zeros((r, r), dtype=np.uint8)
    n_blobs = int(rng.integers(1, 4))
    y, x = np.mgrid[0:r, 0:r].astype(np.float32)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.2 * r, 0.8 * r, size=2)
        ry, rx = rng.uniform(r / 12.0, r / 5.0, size=2)
        mask |= (((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0).astype(np.uint8)
    return mask


def _toy_anomaly_fill(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Out-of-distribution texture used inside planted blobs."""
    r = resolution
    tint = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    speckle = gaussian_filter(rng.normal(0.0, 1.0, size=(r, r, 3)), sigma=(1.0, 1.0, 0.0))
    speckle = 0.5 * speckle / max(np.abs(speckle).max(), 1e-8)
    fill = tint[None, None, :] + speckle
    return np.clip(fill, 0.0, 1.0).astype(np.float32)


def generate_toy_dataset(
    seed: int,
    n_train: int = 16,
    n_test_normal: int = 8,
    n_test_abnormal: int = 8,
    resolution: int = 64,
) -> list[Sample]:
    """Deterministic desk-scale dataset: procedural textures plus planted blob anomalies.

    Same seed twice gives bitwise-identical samples. Abnormal test samples carry
    exact masks (the planted blob support).
    """
    if min(n_train, n_test_normal, n_test_abnormal) < 0:
        raise ValueError("counts must be >= 0")
    rng = np.random.default_rng(seed)
    samples: list[Sample] = []
    for i in range(n_train):
        samples.append(
            Sample(
                id=f"toy/train/good/{i:03d}",
                image=_toy_normal_image(rng, resolution),
                mask=None,
                label="normal",
                split="train",
            )
        )
    for i in range(n_test_normal):
        samples.append(
            Sample(
                id=f"toy/test/good/{i:03d}",
                image=_toy_normal_image(rng, resolution),
                mask=None,
                label="normal",
                split="test",
            )
        )
    for i in range(n_test_abnormal):
        image = _toy_normal_image(rng, resolution)
        mask = _toy_blob_mask(rng, resolution)
        while mask.sum() == 0:  # ellipse radii guarantee area, but stay safe
            mask = _toy_blob_mask(rng, resolution)
        fill = _toy_anomaly_fill(rng, resolution)
        image = np.where(mask[:, :, None] > 0, fill, image)
        samples.append(
            Sample(
                id=f"toy/test/blob/{i:03d}",
                image=image,
                mask=mask,
                label="abnormal",
                split="test",
            )
        )
    return samples


def split_samples(samples: list[Sample], split: str) -> list[Sample]:
    return [s for s in samples if s.split == split]
