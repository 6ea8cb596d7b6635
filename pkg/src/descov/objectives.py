"""Training objectives and the finite-difference gradient checker.

Four terms: cross-entropy classification, BCE descriptor supervision against
soft targets, an InfoNCE image-to-descriptor alignment loss with a learned
clamped temperature, and a batch-level decorrelation penalty that discourages
correlation between per-cell annotation coverage (a constant of the training
split) and per-cell soft miss rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .coverage import CoverageTable
from .data import DataDims
from .errors import ConfigurationError, DiagnosticError

TEMPERATURE_MIN = 0.01
TEMPERATURE_MAX = 1.0


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights of the auxiliary loss terms."""

    descriptor: float = 0.05
    alignment: float = 0.1
    decorrelation: float = 0.1


class AlignmentHead(nn.Module):
    """Projects pooled features and descriptor vectors into a shared space.

    Similarities are scaled by a learned temperature, parameterized on the log
    scale and clamped to [0.01, 1].
    """

    def __init__(self, feat_channels: int, n_descriptors: int, embed_dim: int = 32,
                 init_temperature: float = 0.07):
        super().__init__()
        self.visual_proj = nn.Linear(feat_channels, embed_dim)
        self.descriptor_proj = nn.Linear(n_descriptors, embed_dim)
        self.log_temperature = nn.Parameter(
            torch.tensor(math.log(init_temperature))
        )

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp().clamp(TEMPERATURE_MIN, TEMPERATURE_MAX)

    def embed_visual(self, pooled: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.visual_proj(pooled), dim=-1, eps=1e-8)

    def embed_descriptors(self, probs: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.descriptor_proj(probs), dim=-1, eps=1e-8)


def classification_loss(class_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy."""
    if class_logits.shape[0] != labels.shape[0]:
        raise ConfigurationError("logit/label batch mismatch")
    if labels.numel() and (
        int(labels.min()) < 0 or int(labels.max()) >= class_logits.shape[1]
    ):
        raise ValueError("class label out of range")
    return F.cross_entropy(class_logits, labels)


def descriptor_loss(desc_logits: torch.Tensor, soft_targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of descriptor logits against soft targets."""
    if desc_logits.shape != soft_targets.shape:
        raise ConfigurationError("descriptor logit/target shape mismatch")
    t = soft_targets.detach()
    if t.numel() and (float(t.min()) < 0.0 or float(t.max()) > 1.0):
        raise ValueError("descriptor targets must lie in [0, 1]")
    return F.binary_cross_entropy_with_logits(desc_logits, soft_targets)


def alignment_loss(
    pooled: torch.Tensor,
    probs: torch.Tensor,
    head: AlignmentHead,
    symmetric: bool = False,
) -> torch.Tensor:
    """InfoNCE over in-batch pairs: each image should match its own descriptors.

    Rows of the similarity matrix are image-to-descriptor; the diagonal holds
    the positive pairs.  ``symmetric=True`` averages in the transposed
    (descriptor-to-image) direction as well.
    """
    if pooled.shape[0] != probs.shape[0]:
        raise ConfigurationError("batch mismatch between pooled features and descriptors")
    if pooled.shape[0] < 2:
        return pooled.sum() * 0.0
    vis = head.embed_visual(pooled)
    desc = head.embed_descriptors(probs)
    sims = vis @ desc.T / head.temperature
    targets = torch.arange(pooled.shape[0], device=pooled.device)
    loss = F.cross_entropy(sims, targets)
    if symmetric:
        loss = 0.5 * (loss + F.cross_entropy(sims.T, targets))
    return loss


@dataclass
class BatchContext:
    """Everything the per-batch losses need, in one place."""

    labels: torch.Tensor  # (B,)
    subgroups: torch.Tensor  # (B,)
    descriptors: torch.Tensor  # (B, K) soft probabilities
    class_logits: torch.Tensor  # (B, T)
    descriptor_logits: torch.Tensor  # (B, K)
    pooled: torch.Tensor  # (B, C_f)
    dims: DataDims


def soft_group_tpr(ctx: BatchContext, class_id: int, descriptor_id: int,
                   subgroup_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Soft recall of one cell: descriptor-weighted true-class probability.

    Members are the batch samples of the cell's class and subgroup, weighted by
    their soft probability for the cell's descriptor.  Returns ``(tpr, total
    weight)``; an empty or zero-weight cell yields tpr 1 (nothing to miss).
    """
    mask = (ctx.labels == class_id) & (ctx.subgroups == subgroup_id)
    weight = ctx.descriptors[mask, descriptor_id].to(ctx.class_logits.dtype).sum()
    if float(weight) == 0.0:
        one = torch.ones((), dtype=ctx.class_logits.dtype, device=ctx.class_logits.device)
        return one, weight
    probs = torch.softmax(ctx.class_logits[mask], dim=-1)
    true_prob = probs[:, class_id]
    w = ctx.descriptors[mask, descriptor_id].to(probs.dtype)
    return (w * true_prob).sum() / weight, weight


def batch_group_stats(ctx: BatchContext) -> tuple[torch.Tensor, torch.Tensor]:
    """Vectorized soft recall and weight for every cell.

    Returns ``(tpr, weight)`` of shape (T, K, S).  Cells with zero weight get
    tpr 1.
    """
    dims = ctx.dims
    t, k, s = dims.n_classes, dims.n_descriptors, dims.n_subgroups
    cell = (ctx.labels * s + ctx.subgroups).long()  # (B,)
    probs = torch.softmax(ctx.class_logits, dim=-1)
    true_prob = probs.gather(1, ctx.labels[:, None].long()).squeeze(1)  # (B,)
    w = ctx.descriptors.to(probs.dtype)
    zeros = torch.zeros(t * s, k, dtype=probs.dtype, device=probs.device)
    weight = zeros.index_add(0, cell, w)
    weighted_hit = zeros.index_add(0, cell, w * true_prob[:, None])
    tpr = torch.where(
        weight > 0, weighted_hit / weight.clamp_min(1e-12), torch.ones_like(weight)
    )
    # (T*S, K) -> (T, K, S)
    return (
        tpr.view(t, s, k).permute(0, 2, 1),
        weight.view(t, s, k).permute(0, 2, 1),
    )


def coverage_constants(
    cov: CoverageTable, dims: DataDims, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Coverage as a constant (T, K, S) tensor; never part of the graph."""
    arr = cov.as_array()
    expected = (dims.n_classes, dims.n_descriptors, dims.n_subgroups)
    if arr.shape != expected:
        raise ConfigurationError(
            f"coverage table shape {arr.shape} != dataset cells {expected}"
        )
    return torch.from_numpy(arr).to(dtype)


def _pearson_torch(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = torch.sqrt((xc * xc).sum() * (yc * yc).sum())
    return (xc * yc).sum() / denom


def decorrelation_loss(
    ctx: BatchContext,
    coverage: torch.Tensor,
    min_weight: float = 0.5,
) -> torch.Tensor:
    """|Pearson| between constant coverage and batch soft miss rate.

    Only cells whose batch descriptor weight reaches ``min_weight`` enter the
    correlation; with fewer than two eligible cells, or zero variance on
    either side, the penalty is 0.
    """
    tpr, weight = batch_group_stats(ctx)
    if coverage.shape != tpr.shape:
        raise ConfigurationError(
            f"coverage tensor shape {tuple(coverage.shape)} != {tuple(tpr.shape)}"
        )
    mask = weight >= min_weight
    if int(mask.sum()) < 2:
        return tpr.sum() * 0.0
    cov_sel = coverage.detach()[mask]
    err_sel = 1.0 - tpr[mask]
    if float(cov_sel.var()) == 0.0 or float(err_sel.detach().var()) < 1e-20:
        return tpr.sum() * 0.0
    return _pearson_torch(cov_sel, err_sel).abs().clamp(max=1.0)


def total_loss(
    ctx: BatchContext,
    coverage: torch.Tensor,
    align_head: AlignmentHead,
    weights: LossWeights = LossWeights(),
    min_weight: float = 0.5,
    symmetric_alignment: bool = False,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the four terms plus a detached breakdown.

    The breakdown stores each unweighted term and the total; the weighted
    recombination matches the returned tensor exactly.
    """
    l_cls = classification_loss(ctx.class_logits, ctx.labels)
    l_desc = descriptor_loss(ctx.descriptor_logits, ctx.descriptors.to(ctx.descriptor_logits.dtype))
    l_align = alignment_loss(ctx.pooled, ctx.descriptors.to(ctx.pooled.dtype), align_head,
                             symmetric=symmetric_alignment)
    l_decor = decorrelation_loss(ctx, coverage, min_weight=min_weight)
    total = (
        l_cls
        + weights.descriptor * l_desc
        + weights.alignment * l_align
        + weights.decorrelation * l_decor
    )
    breakdown = {
        "classification": float(l_cls.detach()),
        "descriptor": float(l_desc.detach()),
        "alignment": float(l_align.detach()),
        "decorrelation": float(l_decor.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown


def gradient_check(
    loss_fn,
    named_params: dict[str, torch.Tensor],
    epsilon: float = 1e-5,
    coords_per_group: int = 200,
    seed: int = 0,
) -> dict[str, float]:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must recompute the scalar loss from the current parameter
    values on every call.  For each named parameter a random subset of
    coordinates (at most ``coords_per_group``) is perturbed by ±epsilon.
    Returns the max relative error per parameter plus an ``"overall"`` entry.
    """
    if epsilon <= 0:
        raise ConfigurationError("epsilon must be positive")
    if not named_params:
        raise ConfigurationError("no parameters to check")

    for p in named_params.values():
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise DiagnosticError("loss is not finite at the evaluation point")
    loss.backward()

    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    overall = 0.0
    for name, p in named_params.items():
        if p.grad is None:
            raise DiagnosticError(f"parameter {name!r} received no gradient")
        grad = p.grad.detach().reshape(-1)
        flat = p.data.view(-1)
        n = flat.numel()
        count = min(coords_per_group, n)
        coords = rng.choice(n, size=count, replace=False) if count < n else np.arange(n)
        worst = 0.0
        with torch.no_grad():
            for c in coords:
                c = int(c)
                orig = flat[c].item()
                flat[c] = orig + epsilon
                f_plus = float(loss_fn())
                flat[c] = orig - epsilon
                f_minus = float(loss_fn())
                flat[c] = orig
                fd = (f_plus - f_minus) / (2.0 * epsilon)
                a = float(grad[c])
                rel = abs(fd - a) / max(abs(a), abs(fd), 1e-8)
                worst = max(worst, rel)
        report[name] = worst
        overall = max(overall, worst)
    report["overall"] = overall
    return report
