"""Adapter, slot-conditioned dense head, joint loss, and the composed model."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .slots import (
    PositionGrid,
    SlotAttention,
    SlotConfig,
    SlotDecodeResult,
    SlotDecoder,
    SlotState,
    check_finite,
    reconstruction_loss,
)

DEFAULT_LAMBDA = 0.1
HEAD_HIDDEN = 128


class LabelRangeError(ValueError):
    pass


class Adapter(nn.Module):
    """Per-position 2-layer MLP ``g``: C_r -> C_a."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = HEAD_HIDDEN):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_finite("adapter input", x)
        return self.fc2(F.gelu(self.fc1(x)))


class Classifier(nn.Module):
    """Per-position 2-layer MLP producing class logits at grid resolution."""

    def __init__(self, in_dim: int, num_classes: int, hidden: int = HEAD_HIDDEN):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(z)))


def combine(adapted: torch.Tensor, decode: SlotDecodeResult) -> torch.Tensor:
    """Concatenate ``[adapted | reconstruction | m_1..m_K]`` along channels."""
    recon = decode.reconstruction
    masks = decode.masks.permute(0, 2, 3, 1)
    if adapted.shape[:3] != recon.shape[:3] or adapted.shape[:3] != masks.shape[:3]:
        raise ValueError(
            f"grid mismatch: adapted {tuple(adapted.shape)}, reconstruction {tuple(recon.shape)}, "
            f"masks {tuple(masks.shape)}"
        )
    return torch.cat([adapted, recon, masks], dim=-1)


def upsample_logits(logits: torch.Tensor, out_shape: tuple[int, int]) -> torch.Tensor:
    """Bilinear (align_corners=False) resize of (B, h, w, C) logits to (B, Hi, Wi, C)."""
    _, h, w, _ = logits.shape
    hi, wi = out_shape
    if hi % h or wi % w:
        raise ValueError(f"output shape {out_shape} is not an integer multiple of grid {h}x{w}")
    if (hi, wi) == (h, w):
        return logits
    x = logits.permute(0, 3, 1, 2)
    x = F.interpolate(x, size=(hi, wi), mode="bilinear", align_corners=False)
    return x.permute(0, 2, 3, 1)


def classify(classifier: Classifier, combined: torch.Tensor, out_shape: tuple[int, int]) -> torch.Tensor:
    return upsample_logits(classifier(combined), out_shape)


@dataclass
class LossBreakdown:
    bce: torch.Tensor
    recon: torch.Tensor | None
    lam: float

    @property
    def total(self) -> torch.Tensor:
        if self.recon is None:
            return self.bce
        return self.bce + self.lam * self.recon

    def as_floats(self) -> dict:
        return {
            "loss_bce": self.bce.detach().item(),
            "loss_recon": None if self.recon is None else self.recon.detach().item(),
            "loss_total": self.total.detach().item(),
            "lambda": self.lam,
        }


def bce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if logits.shape != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    if ((labels != 0) & (labels != 1)).any():
        raise LabelRangeError("labels must be binary (0 or 1)")
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def joint_loss(logits: torch.Tensor, labels: torch.Tensor, target: torch.Tensor | None = None,
               decode: SlotDecodeResult | None = None, lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    """BCE plus ``lam`` times the reconstruction MSE; recon is omitted when no target is given."""
    bce = bce_loss(logits, labels)
    if target is None or decode is None:
        return LossBreakdown(bce=bce, recon=None, lam=lam)
    return LossBreakdown(bce=bce, recon=reconstruction_loss(target, decode), lam=lam)


@dataclass
class ModelOutput:
    adapted: torch.Tensor
    state: SlotState
    decode: SlotDecodeResult
    logits: torch.Tensor | None = None


class DenseTRF(nn.Module):
    """Adapter -> Slot Attention -> slot decoder, with a dense head on top.

    Only ``adapter``, ``slot_attention`` and ``decoder`` take part in branch
    merging; ``classifier`` is trained during the supervised phases.
    """

    MERGEABLE = ("adapter", "slot_attention", "decoder")

    def __init__(self, feature_dim: int, num_classes: int, slot_config: SlotConfig = SlotConfig(),
                 use_concat: bool = True, head_hidden: int = HEAD_HIDDEN):
        super().__init__()
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.slot_config = slot_config
        self.use_concat = use_concat
        self.adapter = Adapter(feature_dim, slot_config.adapted_dim, head_hidden)
        self.slot_attention = SlotAttention(slot_config)
        self.decoder = SlotDecoder(slot_config, feature_dim)
        self.classifier = Classifier(self.classifier_in_dim, num_classes, head_hidden)

    @property
    def classifier_in_dim(self) -> int:
        cfg = self.slot_config
        if not self.use_concat:
            return cfg.adapted_dim
        return cfg.adapted_dim + self.feature_dim + cfg.num_slots

    def encode(self, features: torch.Tensor, positions: PositionGrid | None = None,
               generator: torch.Generator | None = None) -> ModelOutput:
        b, h, w, _ = features.shape
        if positions is None:
            positions = PositionGrid.identity(h, w, self.slot_config.pos_dim)
        adapted = self.adapter(features)
        slots = self.slot_attention.init_slots(b, generator)
        state = self.slot_attention(adapted.reshape(b, h * w, -1), slots)
        decode = self.decoder(state.slots, positions)
        return ModelOutput(adapted=adapted, state=state, decode=decode)

    def forward(self, features: torch.Tensor, out_shape: tuple[int, int],
                positions: PositionGrid | None = None,
                generator: torch.Generator | None = None) -> ModelOutput:
        out = self.encode(features, positions, generator)
        z = combine(out.adapted, out.decode) if self.use_concat else out.adapted
        out.logits = classify(self.classifier, z, out_shape)
        return out
