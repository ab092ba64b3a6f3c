"""Expert and apprentice map functions, feature normalization, and discrepancies.

The expert is a frozen reference network; the apprentice mirrors its tapped
hierarchies with trainable, randomly initialized weights. Discrepancies are
computed between channel-unit-normalized feature vectors at every spatial
location, so they are invariant to positive rescaling of the raw features and
bounded by 4 in the default squared mode (2 in norm mode).
"""

from __future__ import annotations

import dataclasses
import hashlib
import pickle

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import build_backbone, canonical_backbone_id, stage_count

NORMALIZE_EPS = 1e-12

CHECKPOINT_FORMAT_VERSION = 1


@dataclasses.dataclass
class FeaturePyramid:
    """Ordered per-hierarchy feature tensors, each B x C_i x H_i x W_i."""

    levels: list[torch.Tensor]

    def __post_init__(self):
        for i, lvl in enumerate(self.levels):
            if lvl.ndim != 4:
                raise ValueError(f"level {i} must be BxCxHxW, got {tuple(lvl.shape)}")

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(lvl.shape) for lvl in self.levels]


@dataclasses.dataclass
class DiscrepancyField:
    """Per-hierarchy, per-pixel discrepancies d(p) >= 0, each level B x H_i x W_i.

    ``partitions`` (optional, same shapes, bool) marks the synthetic-abnormal
    cells; its complement is the normal set, so the two cover each grid exactly.
    """

    levels: list[torch.Tensor]
    partitions: list[torch.Tensor] | None = None


def _tap_indices(hierarchies: tuple[int, ...], available: int) -> tuple[int, ...]:
    if len(hierarchies) == 0:
        raise ValueError("need at least one hierarchy")
    if len(set(hierarchies)) != len(hierarchies):
        raise ValueError(f"duplicate hierarchy in {hierarchies}")
    for h in hierarchies:
        if not 1 <= h <= available:
            raise ValueError(f"hierarchy {h} out of range 1..{available}")
    return tuple(int(h) for h in hierarchies)


class _TappedNet(nn.Module):
    """Shared plumbing: run the backbone, keep the configured hierarchy taps."""

    def __init__(self, backbone_id: str, hierarchies: tuple[int, ...], pretrained: bool):
        super().__init__()
        self.backbone_id = canonical_backbone_id(backbone_id)
        self.hierarchies = _tap_indices(hierarchies, stage_count(self.backbone_id))
        n_stages = max(self.hierarchies)
        self.backbone = build_backbone(self.backbone_id, pretrained, n_stages=n_stages)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected Bx3xRxR batch, got {tuple(x.shape)}")
        feats = self.backbone(x)
        return FeaturePyramid([feats[h - 1] for h in self.hierarchies])


class ExpertModel(_TappedNet):
    """Frozen reference network; forward is deterministic and gradient-free."""

    def __init__(self, backbone_id: str, hierarchies: tuple[int, ...] = (1, 2, 3)):
        super().__init__(backbone_id, hierarchies, pretrained=True)
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True):  # noqa: ARG002 - frozen experts stay in eval mode
        return super().train(False)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        with torch.no_grad():
            return super().forward(x)


class ApprenticeModel(_TappedNet):
    """Trainable network mirroring the expert's tapped hierarchies."""

    def __init__(
        self,
        backbone_id: str,
        hierarchies: tuple[int, ...] = (1, 2, 3),
        init_seed: int | None = None,
    ):
        if init_seed is None:
            super().__init__(backbone_id, hierarchies, pretrained=False)
        else:
            with torch.random.fork_rng():
                torch.manual_seed(init_seed)
                super().__init__(backbone_id, hierarchies, pretrained=False)


def normalize_features(pyramid: FeaturePyramid) -> FeaturePyramid:
    """Unit-normalize the channel vector at every spatial location of every level.

    Zero vectors stay zero via the epsilon guard on the norm.
    """
    return FeaturePyramid(
        [F.normalize(lvl, p=2.0, dim=1, eps=NORMALIZE_EPS) for lvl in pyramid]
    )


def discrepancy(
    expert_hat: FeaturePyramid,
    apprentice_hat: FeaturePyramid,
    squared: bool = True,
) -> DiscrepancyField:
    """Pixel-wise distance between normalized pyramids, level by level.

    Default is the squared Euclidean distance (= 2 - 2 cos similarity for unit
    vectors, bounded by [0, 4]); ``squared=False`` selects the plain norm.
    """
    if len(expert_hat) != len(apprentice_hat):
        raise ValueError(
            f"pyramid level count mismatch: {len(expert_hat)} vs {len(apprentice_hat)}"
        )
    levels = []
    for i, (e, a) in enumerate(zip(expert_hat, apprentice_hat)):
        if e.shape != a.shape:
            raise ValueError(
                f"shape mismatch at level {i}: {tuple(e.shape)} vs {tuple(a.shape)}"
            )
        d = ((e - a) ** 2).sum(dim=1)
        if not squared:
            d = torch.sqrt(torch.clamp(d, min=0.0))
        levels.append(d)
    return DiscrepancyField(levels)


def state_hash(module_or_state: nn.Module | dict) -> str:
    """SHA-256 over a state dict's keys and raw tensor bytes (frozenness checks)."""
    state = (
        module_or_state.state_dict()
        if isinstance(module_or_state, nn.Module)
        else module_or_state
    )
    h = hashlib.sha256()
    for key in sorted(state):
        h.update(key.encode())
        t = state[key]
        h.update(str(t.dtype).encode() + str(tuple(t.shape)).encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _numpy_dtype_for(name: str) -> "np.dtype":
    return torch.empty(0, dtype=getattr(torch, name)).numpy().dtype


def _encode_state(state: dict) -> dict:
    encoded = {}
    for key, t in state.items():
        t = t.detach().cpu().contiguous()
        encoded[key] = {
            "dtype": str(t.dtype).removeprefix("torch."),
            "shape": list(t.shape),
            "data": t.numpy().tobytes(),
        }
    return encoded


def _decode_state(encoded: dict) -> dict:
    state = {}
    for key, entry in encoded.items():
        arr = np.frombuffer(entry["data"], dtype=_numpy_dtype_for(entry["dtype"]))
        state[key] = torch.from_numpy(arr.copy()).reshape(entry["shape"])
    return state


def save_checkpoint(path, apprentice: ApprenticeModel | dict, run_config: dict) -> None:
    """Archive the apprentice weights plus everything needed to rebuild it.

    The expert is never stored; it is re-derived from the named reference
    source. Tensors are stored as raw dtype/shape/bytes so same-seed runs
    produce byte-identical files (torch's own containers embed
    address-derived storage keys).
    """
    state = (
        apprentice.state_dict() if isinstance(apprentice, nn.Module) else apprentice
    )
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "apprentice_state": _encode_state(state),
        "backbone_id": run_config["backbone_id"],
        "hierarchies": list(run_config["hierarchies"]),
        "resolution": run_config["resolution"],
        "run_config": run_config,
    }
    with open(path, "wb") as f:
        pickle.dump(payload, f, protocol=4)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        payload = pickle.load(f)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format in {path}")
    payload["apprentice_state"] = _decode_state(payload["apprentice_state"])
    return payload


def apprentice_from_checkpoint(
    payload: dict, hierarchies: tuple[int, ...] | None = None
) -> ApprenticeModel:
    """Rebuild the trained apprentice; an explicit hierarchy list must match."""
    stored = tuple(payload["hierarchies"])
    if hierarchies is not None and tuple(hierarchies) != stored:
        raise ValueError(
            f"hierarchy list {tuple(hierarchies)} does not match checkpoint {stored}"
        )
    model = ApprenticeModel(payload["backbone_id"], stored)
    model.load_state_dict(payload["apprentice_state"])
    model.eval()
    return model
