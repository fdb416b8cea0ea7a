"""Slot Attention encoder, spatial-broadcast MLP decoder and patch-order permutation.

Tensors are channel-last with a leading batch axis: feature grids are
``(B, H, W, C)``, slots ``(B, K, D)``, attention ``(B, K, N)`` with
``N = H * W`` flattened row-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


class NonFiniteError(FloatingPointError):
    pass


def check_finite(name: str, tensor: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"non-finite values in {name}")
    return tensor


@dataclass(frozen=True)
class SlotConfig:
    num_slots: int = 6
    slot_dim: int = 64
    num_iterations: int = 3
    adapted_dim: int = 64
    mlp_hidden: int = 128
    pos_dim: int = 16
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.num_slots < 1:
            raise ValueError("num_slots must be >= 1")
        if self.num_iterations < 1:
            raise ValueError("num_iterations must be >= 1")
        if self.slot_dim < 8:
            raise ValueError("slot_dim must be >= 8")
        if self.pos_dim % 4:
            raise ValueError("pos_dim must be a multiple of 4")


@dataclass
class SlotState:
    slots: torch.Tensor  # (B, K, D)
    attention: torch.Tensor | None = None  # (B, K, N), softmax over K


@dataclass
class SlotDecodeResult:
    per_slot_features: torch.Tensor  # (B, K, H, W, C_r)
    alpha_logits: torch.Tensor  # (B, K, H, W)
    masks: torch.Tensor  # (B, K, H, W)
    reconstruction: torch.Tensor  # (B, H, W, C_r)


def sinusoidal_2d(height: int, width: int, dim: int = 16) -> torch.Tensor:
    """Fixed 2D sin/cos encodings, shape (H*W, dim); half the channels per axis."""
    n_freq = dim // 4
    freqs = math.pi * 2.0 ** torch.arange(n_freq, dtype=torch.float64)
    ys = (torch.arange(height, dtype=torch.float64) + 0.5) / height
    xs = (torch.arange(width, dtype=torch.float64) + 0.5) / width

    def encode(coords):
        angles = coords[:, None] * freqs[None, :]
        return torch.cat([angles.sin(), angles.cos()], dim=-1)

    ey = encode(ys)[:, None, :].expand(height, width, -1)
    ex = encode(xs)[None, :, :].expand(height, width, -1)
    return torch.cat([ey, ex], dim=-1).reshape(height * width, dim).float()


@dataclass
class PositionGrid:
    """Positional encodings plus the permutation that assigns them to patches.

    Location ``i`` receives ``embeddings[permutation[i]]`` as decoder input.
    """

    embeddings: torch.Tensor
    height: int
    width: int
    permutation: torch.Tensor = field(default=None)

    def __post_init__(self):
        n = self.height * self.width
        if self.embeddings.shape[0] != n:
            raise ValueError(f"{self.embeddings.shape[0]} embeddings for a {self.height}x{self.width} grid")
        if self.permutation is None:
            self.permutation = torch.arange(n)
        elif not torch.equal(torch.sort(self.permutation).values, torch.arange(n)):
            raise ValueError("permutation is not a bijection on the grid")

    @classmethod
    def identity(cls, height: int, width: int, dim: int = 16) -> "PositionGrid":
        return cls(sinusoidal_2d(height, width, dim), height, width)

    @property
    def num_positions(self) -> int:
        return self.height * self.width

    def decoder_inputs(self) -> torch.Tensor:
        return self.embeddings[self.permutation]

    def with_permutation(self, permutation: torch.Tensor) -> "PositionGrid":
        return PositionGrid(self.embeddings, self.height, self.width, permutation)

    def inverse(self) -> "PositionGrid":
        return self.with_permutation(torch.argsort(self.permutation))

    def compose(self, other: "PositionGrid") -> "PositionGrid":
        """Grid whose permutation applies ``other`` first, then ``self``."""
        return self.with_permutation(self.permutation[other.permutation])

    def is_identity(self) -> bool:
        return torch.equal(self.permutation, torch.arange(self.num_positions))


def permute_patch_order(positions: PositionGrid, seed: int) -> PositionGrid:
    """Uniformly random reassignment of positional encodings to patch locations."""
    rng = np.random.default_rng(seed)
    perm = torch.from_numpy(rng.permutation(positions.num_positions))
    return positions.with_permutation(perm)


class SlotAttention(nn.Module):
    """Iterative competitive attention over K slots (softmax across the slot axis)."""

    def __init__(self, config: SlotConfig):
        super().__init__()
        self.config = config
        d, c = config.slot_dim, config.adapted_dim
        self.slot_mu = nn.Parameter(torch.empty(1, 1, d))
        self.slot_log_sigma = nn.Parameter(torch.empty(1, 1, d))
        nn.init.xavier_uniform_(self.slot_mu)
        nn.init.xavier_uniform_(self.slot_log_sigma)

        self.norm_inputs = nn.LayerNorm(c)
        self.norm_slots = nn.LayerNorm(d)
        self.norm_mlp = nn.LayerNorm(d)
        self.to_q = nn.Linear(d, d, bias=False)
        self.to_k = nn.Linear(c, d, bias=False)
        self.to_v = nn.Linear(c, d, bias=False)
        self.gru = nn.GRUCell(d, d)
        self.mlp = nn.Sequential(
            nn.Linear(d, config.mlp_hidden), nn.GELU(), nn.Linear(config.mlp_hidden, d)
        )

    def init_slots(self, batch: int, generator: torch.Generator | None = None) -> torch.Tensor:
        k, d = self.config.num_slots, self.config.slot_dim
        noise = torch.randn((batch, k, d), generator=generator, dtype=self.slot_mu.dtype)
        return self.slot_mu + self.slot_log_sigma.exp() * noise

    def forward(self, inputs: torch.Tensor, slots: torch.Tensor) -> SlotState:
        """``inputs`` (B, N, C_a), ``slots`` (B, K, D)."""
        cfg = self.config
        b, k, d = slots.shape
        inputs = self.norm_inputs(inputs)
        keys = self.to_k(inputs) * d**-0.5
        values = self.to_v(inputs)
        attn = None
        for _ in range(cfg.num_iterations):
            prev = slots
            q = self.to_q(self.norm_slots(slots))
            logits = torch.einsum("bkd,bnd->bkn", q, keys)
            attn = logits.softmax(dim=1)
            weights = attn + cfg.epsilon
            weights = weights / weights.sum(dim=-1, keepdim=True)
            updates = torch.einsum("bkn,bnd->bkd", weights, values)
            slots = self.gru(updates.reshape(-1, d), prev.reshape(-1, d)).reshape(b, k, d)
            slots = slots + self.mlp(self.norm_mlp(slots))
            check_finite("slots", slots)
        return SlotState(slots=slots, attention=attn)


class SlotDecoder(nn.Module):
    """Shared per-position MLP producing C_r features and one alpha logit per slot."""

    def __init__(self, config: SlotConfig, feature_dim: int):
        super().__init__()
        self.config = config
        self.feature_dim = feature_dim
        h = config.mlp_hidden
        self.mlp = nn.Sequential(
            nn.Linear(config.slot_dim + config.pos_dim, h), nn.GELU(),
            nn.Linear(h, h), nn.GELU(),
            nn.Linear(h, feature_dim + 1),
        )

    def forward(self, slots: torch.Tensor, positions: PositionGrid) -> SlotDecodeResult:
        b, k, d = slots.shape
        pos = positions.decoder_inputs().to(slots.dtype)
        n = pos.shape[0]
        x = torch.cat([
            slots[:, :, None, :].expand(b, k, n, d),
            pos[None, None].expand(b, k, n, pos.shape[-1]),
        ], dim=-1)
        out = self.mlp(x)
        hgt, wid = positions.height, positions.width
        feats = out[..., :-1].reshape(b, k, hgt, wid, self.feature_dim)
        alpha = out[..., -1].reshape(b, k, hgt, wid)
        masks = alpha.softmax(dim=1)
        recon = (feats * masks[..., None]).sum(dim=1)
        check_finite("reconstruction", recon)
        return SlotDecodeResult(feats, alpha, masks, recon)


def init_slots(module: SlotAttention, seed: int, batch: int = 1) -> SlotState:
    gen = torch.Generator().manual_seed(seed)
    return SlotState(slots=module.init_slots(batch, gen))


def slot_attention_iterate(module: SlotAttention, state: SlotState,
                           features_adapted: torch.Tensor) -> SlotState:
    """Refine ``state`` against an adapted grid of shape (B, H, W, C_a)."""
    check_finite("adapted features", features_adapted)
    cfg = module.config
    if state.slots.shape[1:] != (cfg.num_slots, cfg.slot_dim):
        raise ValueError(f"slot shape {tuple(state.slots.shape)} does not match config")
    b, h, w, c = features_adapted.shape
    return module(features_adapted.reshape(b, h * w, c), state.slots)


def decode_slots(decoder: SlotDecoder, state: SlotState, positions: PositionGrid) -> SlotDecodeResult:
    return decoder(state.slots, positions)


def reconstruction_loss(target, result: SlotDecodeResult | torch.Tensor) -> torch.Tensor:
    """Mean squared error between the target grid and the slot reconstruction."""
    recon = result.reconstruction if isinstance(result, SlotDecodeResult) else result
    if not isinstance(target, torch.Tensor):
        target = torch.as_tensor(getattr(target, "data", target), dtype=recon.dtype)
        if target.dim() == recon.dim() - 1:
            target = target.unsqueeze(0)
    if target.shape != recon.shape:
        raise ValueError(f"target shape {tuple(target.shape)} != reconstruction {tuple(recon.shape)}")
    return F.mse_loss(recon, target.to(recon.dtype))


def export_slot_masks(masks, out_dir, sample_id: str) -> list[Path]:
    """Write one 8-bit grayscale PNG per slot; pixel value = round(255 * mask)."""
    from PIL import Image

    masks = masks.detach().cpu().numpy() if isinstance(masks, torch.Tensor) else np.asarray(masks)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, mask in enumerate(masks):
        path = out_dir / f"{sample_id}_slot_{k:02d}.png"
        Image.fromarray(np.rint(255 * np.clip(mask, 0, 1)).astype(np.uint8), mode="L").save(path)
        paths.append(path)
    return paths
