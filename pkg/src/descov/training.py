"""Training loop, prediction, and checkpoint-driven evaluation.

Optimization uses Adam with a flat warm-up at a tenth of the base learning
rate followed by per-step cosine decay.  After every epoch the validation
AUROC and the validation disparity index (against training-split coverage) are
recorded; training stops early when AUROC has not improved beyond a small
tolerance for a configurable number of epochs, and the best-AUROC parameters
are what ends up in the checkpoint.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .coverage import CoverageTable, coverage_table, cdi
from .data import Dataset, SynthConfig
from .encoder import (
    EncoderConfig,
    SemanticEncoder,
    load_model_archive,
    load_state_into,
    save_model_archive,
)
from .errors import ConfigurationError, DiagnosticError, TrainingError
from .evaluation import (
    MetricReport,
    PredictionSet,
    auroc,
    build_report,
    scg_error_table,
)
from .objectives import AlignmentHead, BatchContext, LossWeights, coverage_constants, total_loss

STEP_LOG_COLUMNS = ("epoch", "step", "L_cls", "L_desc", "L_DVA", "L_CDI", "total", "lr")
EPOCH_LOG_COLUMNS = ("epoch", "val_auroc", "val_cdi")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 2e-4
    warmup_epochs: int = 1
    patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0
    embed_dim: int = 32
    dtype: str = "float32"
    cdi_min_weight: float = 0.5
    eval_min_count: int = 1
    symmetric_alignment: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigurationError("base_lr must be positive")
        if self.warmup_epochs < 0:
            raise ConfigurationError("warmup_epochs must be >= 0")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"unsupported dtype {self.dtype!r}")
        self.encoder.validate()

    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "warmup_epochs": self.warmup_epochs,
            "patience": self.patience,
            "min_delta": self.min_delta,
            "seed": self.seed,
            "embed_dim": self.embed_dim,
            "dtype": self.dtype,
            "cdi_min_weight": self.cdi_min_weight,
            "eval_min_count": self.eval_min_count,
            "symmetric_alignment": self.symmetric_alignment,
            "loss_weights": {
                "descriptor": self.loss_weights.descriptor,
                "alignment": self.loss_weights.alignment,
                "decorrelation": self.loss_weights.decorrelation,
            },
            "encoder": self.encoder.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if "encoder" in d:
            d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        return TrainConfig(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "TrainConfig":
        return TrainConfig.from_dict(json.loads(text))


# Desk-scale split of the default 5500-sample synthetic set: 4000/500/1000.
DESK_SPLIT_RATIOS = (8 / 11, 1 / 11, 2 / 11)


def desk_preset(seed: int = 0) -> tuple[SynthConfig, TrainConfig]:
    """The default desk-scale experiment: data config and training config.

    The data knobs flatten the coverage tail (every descriptor appears often
    enough to measure per-cell recall on a 500-sample validation split) while
    keeping a wide coverage spread, and keep label-flip noise small so that
    most remaining errors are ones a better-allocated model could fix.
    """
    synth = SynthConfig(
        n_samples=5500,
        rng_seed=seed,
        tail_exponent=0.25,
        rate_floor=0.30,
        noise_level=0.02,
    )
    cfg = TrainConfig(seed=seed)
    return synth, cfg


def learning_rate_at(
    step: int, total_steps: int, warmup_steps: int, base_lr: float
) -> float:
    """Flat warm-up at base_lr/10, then cosine decay from base_lr toward 0."""
    if step < warmup_steps:
        return base_lr / 10.0
    remaining = max(total_steps - warmup_steps, 1)
    t = step - warmup_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / remaining))


@dataclass
class TrainResult:
    """Artifacts of one run."""

    encoder: SemanticEncoder
    align_head: AlignmentHead
    config: TrainConfig
    train_coverage: CoverageTable
    step_log: list[dict]
    epoch_log: list[dict]
    best_epoch: int
    best_val_auroc: float
    stopped_epoch: int

    def save(self, path: str | Path) -> None:
        save_model_archive(
            path,
            self.encoder,
            extra_modules={"align": self.align_head},
            train_config={
                "config": self.config.to_dict(),
                "train_coverage_csv": _coverage_csv(self.train_coverage),
                "best_epoch": self.best_epoch,
                "best_val_auroc": self.best_val_auroc,
                "stopped_epoch": self.stopped_epoch,
            },
        )


def _coverage_csv(cov: CoverageTable) -> str:
    from .coverage import coverage_table_to_csv

    return coverage_table_to_csv(cov)


def load_checkpoint(path: str | Path) -> tuple[SemanticEncoder, AlignmentHead, TrainConfig, CoverageTable]:
    """Rebuild encoder, alignment head, config, and training coverage from disk."""
    from .coverage import coverage_table_from_csv

    enc_cfg, states, train_meta = load_model_archive(path)
    if not train_meta or "config" not in train_meta:
        raise ConfigurationError(f"{path}: archive lacks a training config")
    cfg = TrainConfig.from_dict(train_meta["config"])
    dtype = cfg.torch_dtype()
    encoder = SemanticEncoder(enc_cfg).to(dtype)
    align = AlignmentHead(
        enc_cfg.feat_channels, enc_cfg.n_descriptors, embed_dim=cfg.embed_dim
    ).to(dtype)
    load_state_into(encoder, states["encoder"])
    load_state_into(align, states["align"])
    encoder.eval()
    align.eval()
    cov = coverage_table_from_csv(train_meta["train_coverage_csv"])
    return encoder, align, cfg, cov


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def predict(
    encoder: SemanticEncoder,
    align_head: AlignmentHead,
    ds: Dataset,
    batch_size: int = 256,
    dtype: torch.dtype = torch.float32,
) -> PredictionSet:
    """Run the model over a dataset in eval mode and collect outputs."""
    encoder.eval()
    align_head.eval()
    probs_out = []
    vis_out = []
    desc_out = []
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            sl = slice(start, start + batch_size)
            images = torch.from_numpy(ds.images[sl]).to(dtype)
            probs = torch.from_numpy(ds.descriptors[sl]).to(dtype)
            out = encoder(images, probs)
            probs_out.append(torch.softmax(out.class_logits, dim=-1).double().numpy())
            vis_out.append(align_head.embed_visual(out.pooled).double().numpy())
            desc_out.append(align_head.embed_descriptors(probs).double().numpy())
    n = len(ds)
    t = encoder.config.n_classes
    e = align_head.visual_proj.out_features
    return PredictionSet(
        probabilities=np.concatenate(probs_out) if n else np.zeros((0, t)),
        labels=ds.labels.copy(),
        subgroups=ds.subgroups.copy(),
        descriptors=ds.descriptors.copy(),
        visual_embeddings=np.concatenate(vis_out) if n else np.zeros((0, e)),
        descriptor_embeddings=np.concatenate(desc_out) if n else np.zeros((0, e)),
    )


def _validation_row(
    epoch: int,
    encoder: SemanticEncoder,
    align_head: AlignmentHead,
    ds_val: Dataset,
    train_cov: CoverageTable,
    cfg: TrainConfig,
) -> tuple[dict, float]:
    preds = predict(encoder, align_head, ds_val, dtype=cfg.torch_dtype())
    scores = preds.probabilities[:, 1] if preds.probabilities.shape[1] == 2 else None
    pos = preds.labels == 1
    if scores is None or pos.all() or (~pos).all():
        val_auroc = 0.5
    else:
        val_auroc = auroc(scores, pos)
    err = scg_error_table(preds, ds_val.dims)
    try:
        val_cdi = cdi(train_cov, err, min_count=cfg.eval_min_count).value
    except DiagnosticError:
        val_cdi = float("nan")
    return {"epoch": epoch, "val_auroc": val_auroc, "val_cdi": val_cdi}, val_auroc


def train(
    ds_train: Dataset,
    ds_val: Dataset,
    cfg: TrainConfig,
    step_callback: Callable[[dict], None] | None = None,
    epoch_callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train on one split pair and return the best-validation-AUROC model."""
    cfg.validate()
    ds_train.validate()
    ds_val.validate()
    if ds_train.dims != ds_val.dims:
        raise ConfigurationError("train/val dims differ")
    if len(ds_train) == 0 or len(ds_val) == 0:
        raise ConfigurationError("cannot train on empty splits")

    dtype = cfg.torch_dtype()
    torch.manual_seed(cfg.seed)
    encoder = SemanticEncoder(cfg.encoder).to(dtype)
    align_head = AlignmentHead(
        cfg.encoder.feat_channels,
        cfg.encoder.n_descriptors,
        embed_dim=cfg.embed_dim,
    ).to(dtype)

    train_cov = coverage_table(ds_train, mode="soft")
    cov_const = coverage_constants(train_cov, ds_train.dims, dtype=dtype)

    params = list(encoder.parameters()) + list(align_head.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.base_lr)

    steps_per_epoch = math.ceil(len(ds_train) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = steps_per_epoch * min(cfg.warmup_epochs, cfg.epochs)

    step_log: list[dict] = []
    epoch_log: list[dict] = []
    best_auroc = -float("inf")
    best_epoch = -1
    best_state: tuple[dict, dict] | None = None
    bad_epochs = 0
    global_step = 0
    stopped_epoch = cfg.epochs - 1

    labels_t = torch.from_numpy(ds_train.labels)
    subgroups_t = torch.from_numpy(ds_train.subgroups)

    for epoch in range(cfg.epochs):
        encoder.train()
        align_head.train()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        for batch_idx in _batches(len(ds_train), cfg.batch_size, rng):
            lr = learning_rate_at(global_step, total_steps, warmup_steps, cfg.base_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = torch.from_numpy(batch_idx)
            images = torch.from_numpy(ds_train.images[batch_idx]).to(dtype)
            probs = torch.from_numpy(ds_train.descriptors[batch_idx]).to(dtype)
            out = encoder(images, probs)
            ctx = BatchContext(
                labels=labels_t[idx],
                subgroups=subgroups_t[idx],
                descriptors=probs,
                class_logits=out.class_logits,
                descriptor_logits=out.descriptor_logits,
                pooled=out.pooled,
                dims=ds_train.dims,
            )
            loss, breakdown = total_loss(
                ctx,
                cov_const,
                align_head,
                weights=cfg.loss_weights,
                min_weight=cfg.cdi_min_weight,
                symmetric_alignment=cfg.symmetric_alignment,
            )
            if not math.isfinite(breakdown["total"]):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {global_step}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            row = {
                "epoch": epoch,
                "step": global_step,
                "L_cls": breakdown["classification"],
                "L_desc": breakdown["descriptor"],
                "L_DVA": breakdown["alignment"],
                "L_CDI": breakdown["decorrelation"],
                "total": breakdown["total"],
                "lr": lr,
            }
            step_log.append(row)
            if step_callback:
                step_callback(row)
            global_step += 1

        erow, val_auroc = _validation_row(
            epoch, encoder, align_head, ds_val, train_cov, cfg
        )
        epoch_log.append(erow)
        if epoch_callback:
            epoch_callback(erow)

        if val_auroc > best_auroc + cfg.min_delta:
            best_auroc = val_auroc
            best_epoch = epoch
            best_state = (
                copy.deepcopy(encoder.state_dict()),
                copy.deepcopy(align_head.state_dict()),
            )
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                stopped_epoch = epoch
                break
        stopped_epoch = epoch

    if best_state is None:
        best_state = (
            copy.deepcopy(encoder.state_dict()),
            copy.deepcopy(align_head.state_dict()),
        )
        best_epoch = stopped_epoch
        best_auroc = epoch_log[-1]["val_auroc"] if epoch_log else 0.5
    encoder.load_state_dict(best_state[0])
    align_head.load_state_dict(best_state[1])
    encoder.eval()
    align_head.eval()

    return TrainResult(
        encoder=encoder,
        align_head=align_head,
        config=cfg,
        train_coverage=train_cov,
        step_log=step_log,
        epoch_log=epoch_log,
        best_epoch=best_epoch,
        best_val_auroc=best_auroc,
        stopped_epoch=stopped_epoch,
    )


def evaluate(
    encoder: SemanticEncoder,
    align_head: AlignmentHead,
    ds: Dataset,
    coverage: CoverageTable | None = None,
    min_count: int = 1,
    batch_size: int = 256,
    dtype: torch.dtype | None = None,
) -> MetricReport:
    """Full metric report for a dataset; coverage defaults to the set itself."""
    if dtype is None:
        dtype = next(encoder.parameters()).dtype
    if coverage is None:
        coverage = coverage_table(ds, mode="soft")
    preds = predict(encoder, align_head, ds, batch_size=batch_size, dtype=dtype)
    return build_report(preds, ds.dims, coverage, min_count=min_count)


def evaluate_checkpoint(
    path: str | Path,
    ds: Dataset,
    use_train_coverage: bool = True,
    min_count: int = 1,
) -> MetricReport:
    encoder, align, cfg, train_cov = load_checkpoint(path)
    cov = train_cov if use_train_coverage else None
    return evaluate(
        encoder, align, ds, coverage=cov, min_count=min_count, dtype=cfg.torch_dtype()
    )


def step_log_csv_header() -> str:
    return ",".join(STEP_LOG_COLUMNS)


def step_log_row_csv(row: dict) -> str:
    return ",".join(
        str(row[c]) if c in ("epoch", "step") else repr(float(row[c]))
        for c in STEP_LOG_COLUMNS
    )


def epoch_log_csv_header() -> str:
    return ",".join(EPOCH_LOG_COLUMNS)


def epoch_log_row_csv(row: dict) -> str:
    return ",".join(
        str(row[c]) if c == "epoch" else repr(float(row[c]))
        for c in EPOCH_LOG_COLUMNS
    )
