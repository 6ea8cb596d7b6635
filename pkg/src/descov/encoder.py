"""Descriptor-conditioned encoder.

A small convolutional backbone produces a feature grid; a stack of layers then
interleaves three ingredients: a semantic-map builder, a single-query cross
attention that refreshes a descriptor token against the patch tokens, and a
feature modulator conditioned on that token and the maps.  Five layer
orderings control whether attention runs before or after modulation (globally,
split by depth, or blended by a learned gate).  An optional feedback head
re-estimates descriptor probabilities from the token between layers.
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dam import DescriptorModulator, descriptor_uncertainty
from .data import zip_read_array, zip_write_array, _zip_write, ARCHIVE_FORMAT_VERSION
from .errors import ConfigurationError
from .sdm import SemanticMapper, SDM_VARIANTS

ORDERINGS = (
    "attn_then_dam",
    "dam_then_attn",
    "mixture_attn_first",
    "mixture_dam_first",
    "mixture_gated",
)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters of the encoder."""

    n_descriptors: int = 7
    n_classes: int = 2
    feat_channels: int = 32
    grid_size: tuple[int, int] = (8, 8)
    token_dim: int = 32
    n_heads: int = 4
    n_layers: int = 3
    ordering: str = "attn_then_dam"
    sdm_variant: str = "hybrid_gated"
    feedback: bool = True
    # When set, refined descriptor probabilities are averaged with the previous
    # layer's instead of replacing them outright.
    feedback_average: bool = False
    use_descriptors: bool = True
    gate_per_channel: bool = False
    image_shape: tuple[int, int, int] = (3, 32, 32)

    def validate(self) -> None:
        if self.ordering not in ORDERINGS:
            raise ConfigurationError(
                f"unknown ordering {self.ordering!r}; expected one of {ORDERINGS}"
            )
        if self.sdm_variant not in SDM_VARIANTS:
            raise ConfigurationError(f"unknown fusion variant {self.sdm_variant!r}")
        if not 1 <= self.n_layers <= 6:
            raise ConfigurationError("n_layers must lie in 1..6")
        if self.token_dim % self.n_heads != 0:
            raise ConfigurationError(
                f"token_dim {self.token_dim} not divisible by n_heads {self.n_heads}"
            )
        c, h, w = self.image_shape
        gh, gw = self.grid_size
        if (h, w) != (4 * gh, 4 * gw):
            raise ConfigurationError(
                f"image {h}x{w} must be 4x the feature grid {gh}x{gw}"
            )
        if self.n_classes < 2 or self.n_descriptors < 1:
            raise ConfigurationError("need n_classes >= 2 and n_descriptors >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_size"] = list(self.grid_size)
        d["image_shape"] = list(self.image_shape)
        return d

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        d = dict(d)
        d["grid_size"] = tuple(d["grid_size"])
        d["image_shape"] = tuple(d["image_shape"])
        return EncoderConfig(**d)


class Backbone(nn.Module):
    """Three conv blocks with strides 2, 2, 1: image -> (C_f, H/4, W/4) grid."""

    def __init__(self, in_channels: int, feat_channels: int):
        super().__init__()
        mid1 = max(feat_channels // 2, 8)
        mid2 = max(3 * feat_channels // 4, 8)
        self.blocks = nn.Sequential(
            nn.Conv2d(in_channels, mid1, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(mid1, mid2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(mid2, feat_channels, 3, stride=1, padding=1),
            nn.SiLU(),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.blocks(images)


class CrossAttention(nn.Module):
    """Single-query multi-head attention: token attends over patch tokens.

    Pre-norm residual block: the attended value is added to the raw query
    token, then a feed-forward block (also pre-normalized) is added.  With the
    value path zeroed the token passes through unchanged before the FFN.
    """

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ConfigurationError(f"dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.ffn = nn.Sequential(nn.Linear(dim, 2 * dim), nn.SiLU(), nn.Linear(2 * dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(
        self,
        query_token: torch.Tensor,
        patch_tokens: torch.Tensor,
        score_bias: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns the updated token (B, D) and attention weights (B, heads, N).

        ``score_bias`` (shape (N,)), when given, is added to the pre-softmax
        attention logits of every head — a probe for forcing attention onto
        chosen patches.
        """
        if query_token.dim() != 2 or patch_tokens.dim() != 3:
            raise ConfigurationError("expected (B, D) query and (B, N, D) patches")
        b, n, _ = patch_tokens.shape
        q = self.q_proj(self.norm1(query_token)).view(b, self.n_heads, 1, self.head_dim)
        k = self.k_proj(patch_tokens).view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(patch_tokens).view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)  # (B, h, 1, N)
        if score_bias is not None:
            scores = scores + score_bias.view(1, 1, 1, n)
        weights = torch.softmax(scores, dim=-1)
        attended = (weights @ v).reshape(b, -1)
        token = query_token + self.out_proj(attended)
        token = token + self.ffn(self.norm2(token))
        return token, weights.squeeze(2)


@dataclass
class ForwardOutput:
    """Everything the encoder produces for one batch."""

    class_logits: torch.Tensor  # (B, T)
    descriptor_logits: torch.Tensor  # (B, K)
    pooled: torch.Tensor  # (B, C_f)
    per_layer_maps: list[torch.Tensor] | None = None  # each (B, K, H, W)
    refined_probs: list[torch.Tensor] | None = None  # each (B, K)
    call_counts: dict = field(default_factory=dict)


class SemanticEncoder(nn.Module):
    """Backbone + descriptor-conditioned layer stack + linear heads."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        c_in = config.image_shape[0]
        k = config.n_descriptors
        d = config.token_dim
        cf = config.feat_channels

        self.backbone = Backbone(c_in, cf)
        self.patch_proj = nn.Linear(cf, d)
        # Descriptor token head, independent of the map builder's prior decoder.
        self.token_head = nn.Sequential(nn.Linear(k, d), nn.SiLU(), nn.Linear(d, d))
        self.attention = CrossAttention(d, config.n_heads)
        self.mappers = nn.ModuleList(
            SemanticMapper(
                n_descriptors=k,
                feat_channels=cf,
                grid_size=config.grid_size,
                hidden_dim=d,
                variant=config.sdm_variant,
            )
            for _ in range(config.n_layers)
        )
        self.modulators = nn.ModuleList(
            DescriptorModulator(
                feat_channels=cf,
                token_dim=d,
                n_descriptors=k,
                gate_per_channel=config.gate_per_channel,
            )
            for _ in range(config.n_layers)
        )
        self.feedback_head = nn.Linear(d, k)
        # Per-layer blend for the gated ordering: sigmoid(gate) weights the
        # attention-first branch.
        self.mixture_gate = nn.Parameter(torch.zeros(config.n_layers))
        self.class_head = nn.Linear(cf, config.n_classes)
        self.descriptor_head = nn.Linear(cf, k)

    # -- pieces ----------------------------------------------------------

    def patch_tokens(self, feats: torch.Tensor) -> torch.Tensor:
        """Flatten the grid row-major and project channels to token width."""
        b, c, h, w = feats.shape
        seq = feats.flatten(2).transpose(1, 2)  # (B, H*W, C), row-major
        return self.patch_proj(seq)

    def _mode_for_layer(self, layer: int) -> str:
        o = self.config.ordering
        if o == "attn_then_dam":
            return "attn_first"
        if o == "dam_then_attn":
            return "dam_first"
        split = math.ceil(self.config.n_layers / 2)
        if o == "mixture_attn_first":
            return "attn_first" if layer < split else "dam_first"
        if o == "mixture_dam_first":
            return "dam_first" if layer < split else "attn_first"
        return "gated"

    def _run_branch(
        self,
        mode: str,
        layer: int,
        feats: torch.Tensor,
        maps: torch.Tensor,
        token_in: torch.Tensor,
        mean_u: torch.Tensor,
        counts: dict,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        mod = self.modulators[layer]
        if mode == "attn_first":
            token, _ = self.attention(token_in, self.patch_tokens(feats))
            counts["attention"] += 1
            conditioned = mod.channel_film(feats, token)
            out = mod.spatial_modulate(conditioned, maps, mean_u)
            counts["modulator"] += 1
            return out, token
        conditioned = mod.channel_film(feats, token_in)
        out = mod.spatial_modulate(conditioned, maps, mean_u)
        counts["modulator"] += 1
        token, _ = self.attention(token_in, self.patch_tokens(out))
        counts["attention"] += 1
        return out, token

    # -- forward ---------------------------------------------------------

    def forward(
        self,
        images: torch.Tensor,
        probs: torch.Tensor | None = None,
        capture: bool = False,
    ) -> ForwardOutput:
        """Run the full stack.

        ``probs`` are the input descriptor probabilities; when the encoder is
        configured as visual-only (or probs is None) a constant 0.5 vector is
        substituted, which carries zero information and maximal uncertainty.
        """
        if images.dim() != 4:
            raise ConfigurationError(f"expected (B, C, H, W) images, got {tuple(images.shape)}")
        b = images.shape[0]
        k = self.config.n_descriptors
        if not self.config.use_descriptors or probs is None:
            probs = torch.full((b, k), 0.5, dtype=images.dtype, device=images.device)
        if probs.shape != (b, k):
            raise ConfigurationError(
                f"probabilities shape {tuple(probs.shape)} != ({b}, {k})"
            )
        if probs.detach().min() < 0.0 or probs.detach().max() > 1.0:
            raise ConfigurationError("descriptor probabilities must lie in [0, 1]")

        counts = {"mapper": 0, "modulator": 0, "attention": 0}
        feats = self.backbone(images)
        cur_probs = probs
        maps_out: list[torch.Tensor] = []
        refined_out: list[torch.Tensor] = []

        for layer in range(self.config.n_layers):
            maps = self.mappers[layer](cur_probs, feats)
            counts["mapper"] += 1
            _, mean_u = descriptor_uncertainty(cur_probs)
            token_in = self.token_head(cur_probs)
            mode = self._mode_for_layer(layer)
            if mode == "gated":
                feats_a, token_a = self._run_branch(
                    "attn_first", layer, feats, maps, token_in, mean_u, counts
                )
                feats_d, token_d = self._run_branch(
                    "dam_first", layer, feats, maps, token_in, mean_u, counts
                )
                g = torch.sigmoid(self.mixture_gate[layer])
                feats = g * feats_a + (1.0 - g) * feats_d
                token = g * token_a + (1.0 - g) * token_d
            else:
                feats, token = self._run_branch(
                    mode, layer, feats, maps, token_in, mean_u, counts
                )
            if capture:
                maps_out.append(maps)
            if self.config.feedback and self.config.use_descriptors:
                refined = torch.sigmoid(self.feedback_head(token))
                if self.config.feedback_average:
                    cur_probs = 0.5 * (refined + cur_probs)
                else:
                    cur_probs = refined
                if capture:
                    refined_out.append(cur_probs)

        pooled = feats.mean(dim=(2, 3))
        return ForwardOutput(
            class_logits=self.class_head(pooled),
            descriptor_logits=self.descriptor_head(pooled),
            pooled=pooled,
            per_layer_maps=maps_out if capture else None,
            refined_probs=refined_out if capture else None,
            call_counts=counts,
        )


def neutralize_modulation(model: SemanticEncoder) -> None:
    """Zero every pathway through which descriptors can influence the features.

    After this, FiLM reduces to plain normalization, the spatial gate is flat
    0.5 with a constant strength, and the gated blend is balanced — so class
    logits depend on the image alone.
    """
    with torch.no_grad():
        for mod in model.modulators:
            for head in (mod.scale_head, mod.bias_head):
                last = head[-1]
                last.weight.zero_()
                last.bias.zero_()
            mod.gate_conv.weight.zero_()
            mod.gate_conv.bias.zero_()
            mod.gate_scale.zero_()  # strength becomes sigmoid(bias), constant
        model.mixture_gate.zero_()


# ---------------------------------------------------------------------------
# Checkpoint IO
# ---------------------------------------------------------------------------


def save_model_archive(
    path: str | Path,
    encoder: SemanticEncoder,
    extra_modules: dict[str, nn.Module] | None = None,
    train_config: dict | None = None,
) -> None:
    """Write a self-describing archive: config JSON + float64 parameter arrays.

    Arrays are stored little-endian under ``params/<module>/<name>.npy``; the
    same inputs always produce identical bytes.
    """
    modules: dict[str, nn.Module] = {"encoder": encoder}
    if extra_modules:
        modules.update(extra_modules)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "model",
        "encoder_config": encoder.config.to_dict(),
        "train_config": train_config,
        "modules": sorted(modules),
        "params": {},
    }
    arrays: list[tuple[str, np.ndarray]] = []
    for mod_name in sorted(modules):
        state = modules[mod_name].state_dict()
        for key in sorted(state):
            arr = state[key].detach().cpu().numpy().astype("<f8")
            entry = f"params/{mod_name}/{key}.npy"
            meta["params"][f"{mod_name}/{key}"] = {
                "entry": entry,
                "shape": list(arr.shape),
            }
            arrays.append((entry, arr))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True).encode())
        for entry, arr in arrays:
            zip_write_array(zf, entry, arr)


def load_model_archive(
    path: str | Path,
) -> tuple[EncoderConfig, dict[str, dict[str, np.ndarray]], dict | None]:
    """Read an archive back: (encoder config, per-module state arrays, train config)."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("kind") != "model":
            raise ConfigurationError(f"{path}: not a model archive")
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigurationError(
                f"{path}: unsupported checkpoint version {meta.get('format_version')}"
            )
        config = EncoderConfig.from_dict(meta["encoder_config"])
        states: dict[str, dict[str, np.ndarray]] = {m: {} for m in meta["modules"]}
        for full_key, info in meta["params"].items():
            mod_name, key = full_key.split("/", 1)
            arr = zip_read_array(zf, info["entry"])
            if list(arr.shape) != info["shape"]:
                # npy round trips can promote 0-d scalars to shape (1,);
                # the recorded shape is authoritative.
                if arr.size != int(np.prod(info["shape"], dtype=np.int64)):
                    raise ConfigurationError(f"{path}: corrupt entry {full_key}")
                arr = arr.reshape(info["shape"])
            states[mod_name][key] = arr
    return config, states, meta.get("train_config")


def load_state_into(module: nn.Module, state: dict[str, np.ndarray]) -> None:
    """Load float64 arrays into a module, casting to its parameter dtype."""
    tensors = {}
    for key, arr in state.items():
        tensors[key] = torch.from_numpy(np.ascontiguousarray(arr))
    current = module.state_dict()
    if set(tensors) != set(current):
        missing = sorted(set(current) - set(tensors))
        extra = sorted(set(tensors) - set(current))
        raise ConfigurationError(
            f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
        )
    cast = {k: v.to(current[k].dtype) for k, v in tensors.items()}
    module.load_state_dict(cast)
