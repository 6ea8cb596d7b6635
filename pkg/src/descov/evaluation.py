"""Evaluation metrics and the serializable metric report.

Classification metrics use explicit rank/threshold definitions: AUROC via
average ranks (ties averaged), average precision over unique thresholds,
sensitivity at the highest threshold keeping specificity at or above 95%.
Fairness metrics reuse the coverage/error cell machinery; grounding metrics
score the learned joint embedding by cosine alignment and top-1 retrieval.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .coverage import (
    CdiResult,
    CoverageTable,
    ErrorEntry,
    ErrorTable,
    SCGKey,
    cdi,
    eligible_keys,
)
from .data import DataDims
from .errors import ConfigurationError, DiagnosticError

REPORT_SCHEMA_VERSION = 1


@dataclass
class PredictionSet:
    """Model outputs aligned with ground truth for one evaluation split."""

    probabilities: np.ndarray  # (N, T) rows summing to 1
    labels: np.ndarray  # (N,)
    subgroups: np.ndarray  # (N,)
    descriptors: np.ndarray  # (N, K) soft ground-truth probabilities
    visual_embeddings: np.ndarray | None = None  # (N, E)
    descriptor_embeddings: np.ndarray | None = None  # (N, E)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def validate(self) -> None:
        n = len(self)
        if self.probabilities.ndim != 2 or self.probabilities.shape[0] != n:
            raise ConfigurationError("probabilities must be (N, T)")
        if n and not np.allclose(self.probabilities.sum(axis=1), 1.0, atol=1e-5):
            raise ConfigurationError("probability rows must sum to 1")
        if n and (self.probabilities.min() < -1e-9):
            raise ConfigurationError("probabilities must be non-negative")
        if self.labels.shape != (n,) or self.subgroups.shape != (n,):
            raise ConfigurationError("labels/subgroups must be (N,)")
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != n:
            raise ConfigurationError("descriptors must be (N, K)")
        for emb in (self.visual_embeddings, self.descriptor_embeddings):
            if emb is not None and (emb.ndim != 2 or emb.shape[0] != n):
                raise ConfigurationError("embeddings must be (N, E)")


def auroc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Area under the ROC curve via the rank statistic; ties share average rank."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DiagnosticError("AUROC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Step-wise average precision over the unique decision thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise DiagnosticError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = pos[order].astype(np.float64)
    tp = np.cumsum(sorted_pos)
    fp = np.cumsum(1.0 - sorted_pos)
    # Keep only the last index of each tied score block.
    last_of_block = np.append(sorted_scores[1:] != sorted_scores[:-1], True)
    tp = tp[last_of_block]
    fp = fp[last_of_block]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def sensitivity_at_specificity(
    scores: np.ndarray, positives: np.ndarray, min_specificity: float = 0.95
) -> tuple[float, bool]:
    """Best sensitivity among thresholds with specificity >= the floor.

    Returns ``(sensitivity, unattainable)``; when no threshold keeps enough
    specificity while catching any positive, the value is 0 and the flag set.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DiagnosticError("need both classes for sensitivity at fixed specificity")
    best = 0.0
    for thr in np.unique(scores):
        pred = scores >= thr
        spec = float((~pred & ~pos).sum()) / n_neg
        if spec >= min_specificity:
            best = max(best, float((pred & pos).sum()) / n_pos)
    return best, best == 0.0


def balanced_accuracy(pred_labels: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Mean per-class recall over classes that appear in the ground truth."""
    recalls = []
    for c in range(n_classes):
        mask = labels == c
        if mask.sum() == 0:
            continue
        recalls.append(float((pred_labels[mask] == c).mean()))
    if not recalls:
        raise DiagnosticError("no classes present")
    return float(np.mean(recalls))


def macro_f1(pred_labels: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Unweighted mean F1; a class absent from truth and predictions scores 0."""
    f1s = []
    for c in range(n_classes):
        tp = float(((pred_labels == c) & (labels == c)).sum())
        fp = float(((pred_labels == c) & (labels != c)).sum())
        fn = float(((pred_labels != c) & (labels == c)).sum())
        if tp == 0.0:
            f1s.append(0.0)
        else:
            prec = tp / (tp + fp)
            rec = tp / (tp + fn)
            f1s.append(2.0 * prec * rec / (prec + rec))
    return float(np.mean(f1s))


def expected_calibration_error(preds: PredictionSet, n_bins: int = 10) -> float:
    """ECE with equal-width bins over the max-probability confidence.

    Empty bins are skipped; occupied bins contribute |accuracy - confidence|
    weighted by their sample share.
    """
    if n_bins < 1:
        raise ConfigurationError("n_bins must be >= 1")
    if len(preds) == 0:
        raise DiagnosticError("cannot compute calibration of an empty set")
    conf = preds.probabilities.max(axis=1)
    pred_labels = preds.probabilities.argmax(axis=1)
    correct = (pred_labels == preds.labels).astype(np.float64)
    bins = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    n = len(preds)
    ece = 0.0
    for b in range(n_bins):
        mask = bins == b
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        ece += (cnt / n) * abs(float(correct[mask].mean()) - float(conf[mask].mean()))
    return float(ece)


def classification_metrics(
    preds: PredictionSet, positive_class: int = 1
) -> dict[str, float | bool]:
    """Threshold-free and argmax metrics for one split.

    AUROC / PR-AUC / sensitivity@95%-specificity use the positive-class score
    column and require a binary task; the argmax metrics handle any number of
    classes.
    """
    preds.validate()
    if len(preds) == 0:
        raise DiagnosticError("cannot evaluate an empty prediction set")
    n_classes = preds.probabilities.shape[1]
    pred_labels = preds.probabilities.argmax(axis=1)
    out: dict[str, float | bool] = {
        "balanced_accuracy": balanced_accuracy(pred_labels, preds.labels, n_classes),
        "macro_f1": macro_f1(pred_labels, preds.labels, n_classes),
    }
    if n_classes != 2:
        out.update(
            auroc=0.0, pr_auc=0.0, sens_at_95_spec=0.0,
            binary_degenerate=True, sens_unattainable=True,
        )
        return out
    if not 0 <= positive_class < n_classes:
        raise ConfigurationError(f"positive_class {positive_class} out of range")
    scores = preds.probabilities[:, positive_class]
    pos = preds.labels == positive_class
    if pos.all() or (~pos).all():
        out.update(
            auroc=0.0, pr_auc=0.0, sens_at_95_spec=0.0,
            binary_degenerate=True, sens_unattainable=True,
        )
        return out
    sens, unattainable = sensitivity_at_specificity(scores, pos)
    out.update(
        auroc=auroc(scores, pos),
        pr_auc=average_precision(scores, pos),
        sens_at_95_spec=sens,
        binary_degenerate=False,
        sens_unattainable=unattainable,
    )
    return out


def scg_error_table(
    preds: PredictionSet,
    dims: DataDims,
    soft_membership: bool = True,
    tau: float = 0.5,
) -> ErrorTable:
    """Per-cell recall of hard argmax decisions, descriptor-weighted.

    Membership weights are the soft descriptor probabilities (default) or hard
    indicators at ``tau``.  A cell with zero weight gets recall 1 (no member to
    miss) and weight 0.
    """
    preds.validate()
    pred_labels = preds.probabilities.argmax(axis=1)
    hit = (pred_labels == preds.labels).astype(np.float64)
    k = preds.descriptors.shape[1]
    if k != dims.n_descriptors:
        raise ConfigurationError("descriptor count mismatch with dims")
    entries: dict[SCGKey, ErrorEntry] = {}
    for c in range(dims.n_classes):
        for s in range(dims.n_subgroups):
            mask = (preds.labels == c) & (preds.subgroups == s)
            w_block = preds.descriptors[mask]
            if not soft_membership:
                w_block = (w_block >= tau).astype(np.float64)
            hits = hit[mask]
            for d in range(dims.n_descriptors):
                w = w_block[:, d] if mask.sum() else np.zeros(0)
                total = float(w.sum())
                tpr = float((w * hits).sum() / total) if total > 0 else 1.0
                entries[SCGKey(c, d, s)] = ErrorEntry(
                    tpr=tpr, error=1.0 - tpr, effective_weight=total
                )
    return ErrorTable(entries=entries)


def fairness_metrics(
    err: ErrorTable, cov: CoverageTable, min_count: int = 1
) -> dict[str, float | bool | int]:
    """Disparity index plus worst-case and spread of per-cell recall.

    All three statistics aggregate over the same eligible cells: present in
    both tables with at least ``min_count`` members and effective weight.
    ``tpr_std`` is the population standard deviation.
    """
    keys = eligible_keys(cov, err, min_count=min_count)
    if not keys:
        raise DiagnosticError("no eligible cells for fairness metrics")
    res: CdiResult = cdi(cov, err, min_count=min_count)
    tprs = np.array([err.entries[k].tpr for k in keys], dtype=np.float64)
    return {
        "cdi": res.value,
        "cdi_degenerate": res.degenerate,
        "cdi_groups": res.n_groups,
        "tpr_worst": float(tprs.min()),
        "tpr_std": float(tprs.std()),
    }


def grounding_metrics(
    visual: np.ndarray, descriptor: np.ndarray
) -> dict[str, float | int]:
    """Cosine alignment of paired embeddings and top-1 retrieval accuracy.

    Retrieval ranks every descriptor embedding as a candidate for each visual
    query (full-gallery); ties resolve to the lowest index.  Zero vectors are
    treated as orthogonal to everything and counted.
    """
    v = np.asarray(visual, dtype=np.float64)
    d = np.asarray(descriptor, dtype=np.float64)
    if v.shape != d.shape or v.ndim != 2:
        raise ConfigurationError("embeddings must share shape (N, E)")
    n = v.shape[0]
    if n == 0:
        raise DiagnosticError("cannot ground an empty embedding set")
    zero_count = 0

    def _unit(x: np.ndarray) -> np.ndarray:
        nonlocal zero_count
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        zero = norms[:, 0] < 1e-12
        zero_count += int(zero.sum())
        safe = np.where(norms < 1e-12, 1.0, norms)
        out = x / safe
        out[zero] = 0.0
        return out

    vu = _unit(v)
    du = _unit(d)
    align = float((vu * du).sum(axis=1).mean())
    sims = vu @ du.T
    # Lowest index wins ties: argmax returns the first maximal entry.
    nearest = sims.argmax(axis=1)
    r1 = float((nearest == np.arange(n)).mean())
    return {"align_cos": align, "r_at_1": r1, "zero_vectors": zero_count}


@dataclass
class MetricReport:
    """One split's metrics, serializable to stable JSON and CSV."""

    classification: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    fairness: dict = field(default_factory=dict)
    grounding: dict | None = None
    per_scg: list[dict] = field(default_factory=list)
    n_samples: int = 0
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_json(self) -> str:
        payload = {
            "schema_version": self.schema_version,
            "n_samples": self.n_samples,
            "classification": _plain(self.classification),
            "calibration": _plain(self.calibration),
            "fairness": _plain(self.fairness),
            "grounding": _plain(self.grounding) if self.grounding is not None else None,
            "per_scg": [_plain(row) for row in self.per_scg],
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        d = json.loads(text)
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ConfigurationError(
                f"unsupported report schema {d.get('schema_version')}"
            )
        return MetricReport(
            classification=d["classification"],
            calibration=d["calibration"],
            fairness=d["fairness"],
            grounding=d.get("grounding"),
            per_scg=d.get("per_scg", []),
            n_samples=d.get("n_samples", 0),
        )

    def flat_metrics(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for prefix, block in (
            ("classification", self.classification),
            ("calibration", self.calibration),
            ("fairness", self.fairness),
            ("grounding", self.grounding or {}),
        ):
            for key, val in block.items():
                if isinstance(val, bool):
                    val = float(val)
                if isinstance(val, (int, float)):
                    out[f"{prefix}.{key}"] = float(val)
        return out

    def to_csv(self) -> str:
        lines = ["metric,value"]
        flat = self.flat_metrics()
        for key in sorted(flat):
            lines.append(f"{key},{flat[key]!r}")
        return "\n".join(lines) + "\n"

    def per_scg_csv(self) -> str:
        lines = ["class,descriptor,subgroup,coverage,tpr,error,weight"]
        for row in self.per_scg:
            lines.append(
                f"{row['class']},{row['descriptor']},{row['subgroup']},"
                f"{row['coverage']!r},{row['tpr']!r},{row['error']!r},{row['weight']!r}"
            )
        return "\n".join(lines) + "\n"


def _plain(obj):
    """Convert numpy scalars to plain Python types for stable JSON."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def build_report(
    preds: PredictionSet,
    dims: DataDims,
    coverage: CoverageTable,
    min_count: int = 1,
    n_bins: int = 10,
) -> MetricReport:
    """Assemble the full report for one split against a coverage reference."""
    preds.validate()
    err = scg_error_table(preds, dims)
    fair = fairness_metrics(err, coverage, min_count=min_count)
    grounding = None
    if preds.visual_embeddings is not None and preds.descriptor_embeddings is not None:
        grounding = grounding_metrics(
            preds.visual_embeddings, preds.descriptor_embeddings
        )
    per_scg = []
    for key in sorted(err.entries):
        cov_e = coverage.entries.get(key)
        err_e = err.entries[key]
        if cov_e is None or cov_e.member_count < min_count:
            continue
        if err_e.effective_weight < min_count:
            continue
        per_scg.append(
            {
                "class": key.class_id,
                "descriptor": key.descriptor_id,
                "subgroup": key.subgroup_id,
                "coverage": cov_e.coverage,
                "tpr": err_e.tpr,
                "error": err_e.error,
                "weight": err_e.effective_weight,
            }
        )
    return MetricReport(
        classification=classification_metrics(preds),
        calibration={"ece": expected_calibration_error(preds, n_bins=n_bins)},
        fairness=fair,
        grounding=grounding,
        per_scg=per_scg,
        n_samples=len(preds),
    )
