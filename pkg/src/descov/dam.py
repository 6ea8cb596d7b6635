"""Descriptor-driven feature modulation.

Features are first normalized and re-scaled channel-wise by a FiLM head fed
with the descriptor token, then re-weighted spatially by a gate distilled from
the semantic maps.  The strength of the spatial gate is adapted to descriptor
confidence: when probabilities sit near 0.5 (maximum uncertainty) the gate is
attenuated, so unreliable maps modulate less.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigurationError


def descriptor_uncertainty(probs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-descriptor uncertainty ``4 p (1 - p)`` and its mean over descriptors.

    The per-descriptor value peaks at 1 when p = 0.5 and vanishes at 0 and 1.
    Returns ``(per_descriptor, mean)`` with shapes (B, K) and (B,).
    """
    if probs.dim() != 2:
        raise ConfigurationError(f"expected (B, K) probabilities, got {tuple(probs.shape)}")
    u = 4.0 * probs * (1.0 - probs)
    return u, u.mean(dim=-1)


class ChannelNorm(nn.Module):
    """Per-channel normalization with running statistics and affine terms.

    In training mode statistics come from the current batch over (batch, H, W);
    with batch size 1 this coincides with per-instance statistics, so a lone
    sample still normalizes sensibly.  Eval mode uses the running estimates.
    """

    def __init__(self, num_channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.register_buffer("running_mean", torch.zeros(num_channels))
        self.register_buffer("running_var", torch.ones(num_channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise ConfigurationError(f"expected (B, C, H, W), got {tuple(x.shape)}")
        if self.training:
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            with torch.no_grad():
                m = self.momentum
                self.running_mean.mul_(1 - m).add_(m * mean.detach())
                self.running_var.mul_(1 - m).add_(m * var.detach())
        else:
            mean = self.running_mean
            var = self.running_var
        x = (x - mean[None, :, None, None]) / torch.sqrt(
            var[None, :, None, None] + self.eps
        )
        return x * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class DescriptorModulator(nn.Module):
    """FiLM-style channel conditioning followed by uncertainty-scaled spatial gating.

    Args:
        feat_channels: channels of the feature grid being modulated.
        token_dim: width of the conditioning descriptor token.
        n_descriptors: channels of the incoming semantic maps.
        gate_per_channel: emit a C-channel spatial gate instead of a shared one.
        gate_scale_init / gate_bias_init: initial slope/offset of the
            confidence-to-gate-strength response.
    """

    def __init__(
        self,
        feat_channels: int,
        token_dim: int,
        n_descriptors: int,
        gate_per_channel: bool = False,
        gate_scale_init: float = 4.0,
        gate_bias_init: float = 0.0,
    ):
        super().__init__()
        self.norm = ChannelNorm(feat_channels)
        self.scale_head = nn.Sequential(
            nn.Linear(token_dim, token_dim), nn.SiLU(), nn.Linear(token_dim, feat_channels)
        )
        self.bias_head = nn.Sequential(
            nn.Linear(token_dim, token_dim), nn.SiLU(), nn.Linear(token_dim, feat_channels)
        )
        gate_out = feat_channels if gate_per_channel else 1
        self.gate_conv = nn.Conv2d(n_descriptors, gate_out, kernel_size=1)
        self.gate_scale = nn.Parameter(torch.tensor(float(gate_scale_init)))
        self.gate_bias = nn.Parameter(torch.tensor(float(gate_bias_init)))
        self.refine = nn.Sequential(
            nn.Conv2d(feat_channels, feat_channels, 3, padding=1), nn.SiLU()
        )

    def channel_film(self, feats: torch.Tensor, token: torch.Tensor) -> torch.Tensor:
        """Normalize features, then scale/shift channels from the token.

        The multiplicative factor is ``1 + tanh(scale)`` so a zeroed head
        leaves normalized features untouched.
        """
        if token.dim() != 2 or token.shape[0] != feats.shape[0]:
            raise ConfigurationError(
                f"token shape {tuple(token.shape)} incompatible with features"
            )
        scale = torch.tanh(self.scale_head(token))[..., None, None]
        shift = self.bias_head(token)[..., None, None]
        return self.norm(feats) * (1.0 + scale) + shift

    def gate_strength(self, mean_uncertainty: torch.Tensor) -> torch.Tensor:
        """Map mean descriptor uncertainty to a (0, 1) gate strength.

        Confident batches (low uncertainty) push the sigmoid input up, letting
        the spatial gate act at full strength.
        """
        return torch.sigmoid(
            self.gate_scale * (1.0 - mean_uncertainty) + self.gate_bias
        )

    def spatial_modulate(
        self,
        feats: torch.Tensor,
        maps: torch.Tensor,
        mean_uncertainty: torch.Tensor,
    ) -> torch.Tensor:
        """Re-weight features by a map-derived gate, attenuated by uncertainty.

        ``maps`` must already be normalized to [0, 1].  The modulation factor
        ``0.5 + strength * gate`` stays within (0.5, 1.5), so features are
        damped or boosted but never zeroed.
        """
        if maps.dim() != 4 or maps.shape[0] != feats.shape[0]:
            raise ConfigurationError(f"bad semantic map shape {tuple(maps.shape)}")
        if maps.shape[2:] != feats.shape[2:]:
            raise ConfigurationError(
                f"map grid {tuple(maps.shape[2:])} != feature grid {tuple(feats.shape[2:])}"
            )
        if maps.detach().min() < -1e-6 or maps.detach().max() > 1.0 + 1e-6:
            raise ConfigurationError("semantic maps must be normalized to [0, 1]")
        gate = torch.sigmoid(self.gate_conv(maps))
        strength = self.gate_strength(mean_uncertainty)[:, None, None, None]
        return self.refine(feats * (0.5 + strength * gate))

    def forward(
        self, feats: torch.Tensor, token: torch.Tensor, maps: torch.Tensor,
        probs: torch.Tensor,
    ) -> torch.Tensor:
        _, mean_u = descriptor_uncertainty(probs)
        conditioned = self.channel_film(feats, token)
        return self.spatial_modulate(conditioned, maps, mean_u)
