"""Descriptor-conditioned semantic maps.

Builds one spatial attention map per descriptor from two sources: a prior map
decoded from the descriptor probability vector alone, and a visual map read
off the feature grid.  The two are combined by one of five fusion variants and
min-max normalized per channel so every map lives in [0, 1].
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigurationError

SDM_VARIANTS = (
    "descriptor_only",
    "feature_only",
    "hybrid_add",
    "hybrid_mul",
    "hybrid_gated",
)

NORMALIZE_EPS = 1e-6


def normalize_channels(maps: torch.Tensor, eps: float = NORMALIZE_EPS) -> torch.Tensor:
    """Min-max normalize each (sample, channel) plane to [0, 1].

    A constant plane maps to all zeros (its range is clamped to ``eps``).
    """
    flat = maps.flatten(2)
    lo = flat.min(dim=-1).values[..., None, None]
    hi = flat.max(dim=-1).values[..., None, None]
    return (maps - lo) / (hi - lo).clamp_min(eps)


class SemanticMapper(nn.Module):
    """Per-descriptor spatial map builder with five fusion variants.

    Args:
        n_descriptors: number of map channels (one per descriptor).
        feat_channels: channels of the incoming feature grid.
        grid_size: (height, width) of the feature grid.
        hidden_dim: width of the prior decoder's hidden layer.
        variant: one of SDM_VARIANTS.
    """

    def __init__(
        self,
        n_descriptors: int,
        feat_channels: int,
        grid_size: tuple[int, int],
        hidden_dim: int = 64,
        variant: str = "hybrid_gated",
    ):
        super().__init__()
        if variant not in SDM_VARIANTS:
            raise ConfigurationError(
                f"unknown fusion variant {variant!r}; expected one of {SDM_VARIANTS}"
            )
        self.n_descriptors = n_descriptors
        self.grid_size = tuple(grid_size)
        self.variant = variant
        h, w = self.grid_size
        k = n_descriptors

        # Prior branch: probabilities -> coarse per-descriptor grid -> conv refine.
        self.prior_decoder = nn.Sequential(
            nn.Linear(k, hidden_dim), nn.SiLU(), nn.Linear(hidden_dim, k * h * w)
        )
        self.prior_refine = nn.Sequential(
            nn.Conv2d(k, k, 3, padding=1), nn.SiLU(), nn.Conv2d(k, k, 3, padding=1)
        )
        # Per-descriptor channel gate on the prior branch.
        self.prior_gate = nn.Linear(k, k, bias=False)

        # Visual branch: features -> per-descriptor grid, gated by probabilities.
        self.visual_refine = nn.Sequential(
            nn.Conv2d(feat_channels, k, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(k, k, 3, padding=1),
        )
        self.visual_gate = nn.Linear(k, k, bias=False)

        # Fusion gate (used by hybrid_gated): per-descriptor convex weights.
        self.fuse_gate = nn.Sequential(
            nn.Linear(k, k), nn.SiLU(), nn.Linear(k, k)
        )

    def _check_probs(self, probs: torch.Tensor) -> None:
        if probs.dim() != 2 or probs.shape[1] != self.n_descriptors:
            raise ConfigurationError(
                f"expected probabilities of shape (B, {self.n_descriptors}), "
                f"got {tuple(probs.shape)}"
            )

    def descriptor_map(self, probs: torch.Tensor) -> torch.Tensor:
        """Prior maps decoded from probabilities alone; (B, K, H, W), unnormalized."""
        self._check_probs(probs)
        b = probs.shape[0]
        h, w = self.grid_size
        grid = self.prior_decoder(probs).view(b, self.n_descriptors, h, w)
        grid = self.prior_refine(grid)
        gate = torch.sigmoid(self.prior_gate(probs))[..., None, None]
        return grid * gate

    def feature_map(self, feats: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
        """Visual maps read from the feature grid, probability-gated; unnormalized."""
        self._check_probs(probs)
        if feats.dim() != 4 or feats.shape[0] != probs.shape[0]:
            raise ConfigurationError(
                f"expected features of shape (B, C, H, W) matching batch, "
                f"got {tuple(feats.shape)}"
            )
        if tuple(feats.shape[2:]) != self.grid_size:
            raise ConfigurationError(
                f"feature grid {tuple(feats.shape[2:])} != configured {self.grid_size}"
            )
        grid = self.visual_refine(feats)
        gate = torch.sigmoid(self.visual_gate(probs))[..., None, None]
        return grid * gate

    def fuse(
        self,
        prior_maps: torch.Tensor | None,
        visual_maps: torch.Tensor | None,
        probs: torch.Tensor,
    ) -> torch.Tensor:
        """Combine branch maps per the configured variant and normalize to [0, 1]."""
        v = self.variant
        if v == "descriptor_only":
            if prior_maps is None:
                raise ConfigurationError("descriptor_only fusion needs prior maps")
            fused = prior_maps
        elif v == "feature_only":
            if visual_maps is None:
                raise ConfigurationError("feature_only fusion needs visual maps")
            fused = visual_maps
        else:
            if prior_maps is None or visual_maps is None:
                raise ConfigurationError(f"{v} fusion needs both branch maps")
            if prior_maps.shape != visual_maps.shape:
                raise ConfigurationError(
                    f"branch shape mismatch: {tuple(prior_maps.shape)} vs "
                    f"{tuple(visual_maps.shape)}"
                )
            if v == "hybrid_add":
                fused = prior_maps + visual_maps
            elif v == "hybrid_mul":
                fused = prior_maps * visual_maps
            else:  # hybrid_gated
                gate = torch.sigmoid(self.fuse_gate(probs))[..., None, None]
                fused = gate * visual_maps + (1.0 - gate) * prior_maps
        return normalize_channels(fused)

    def forward(self, probs: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        """Normalized (B, K, H, W) maps for the configured variant."""
        prior = None
        visual = None
        if self.variant != "feature_only":
            prior = self.descriptor_map(probs)
        if self.variant != "descriptor_only":
            visual = self.feature_map(feats, probs)
        return self.fuse(prior, visual, probs)
