"""Metric definitions checked against exhaustive brute-force oracles."""

import numpy as np
import pytest

from descov import (
    CoverageEntry,
    CoverageTable,
    DataDims,
    DiagnosticError,
    ErrorEntry,
    ErrorTable,
    MetricReport,
    PredictionSet,
    SCGKey,
    auroc,
    average_precision,
    balanced_accuracy,
    build_report,
    classification_metrics,
    eligible_keys,
    expected_calibration_error,
    fairness_metrics,
    grounding_metrics,
    macro_f1,
    scg_error_table,
    sensitivity_at_specificity,
)

FIX_SCORES = np.linspace(0.1, 0.9, 8)
FIX_LABELS = np.array([0, 0, 1, 0, 1, 1, 0, 1])


def _binary_preds(scores, labels, subgroups=None, descriptors=None):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(scores)
    if subgroups is None:
        subgroups = np.zeros(n, dtype=np.int64)
    if descriptors is None:
        descriptors = np.ones((n, 1), dtype=np.float64)
    return PredictionSet(
        probabilities=np.stack([1.0 - scores, scores], axis=1),
        labels=labels,
        subgroups=np.asarray(subgroups),
        descriptors=np.asarray(descriptors, dtype=np.float64),
    )


# -- brute-force oracles ---------------------------------------------------


def _roc_points(scores, pos):
    pts = {(0.0, 0.0), (1.0, 1.0)}
    for thr in np.unique(scores):
        pred = scores >= thr
        fpr = float((pred & ~pos).sum()) / max(int((~pos).sum()), 1)
        tpr = float((pred & pos).sum()) / max(int(pos.sum()), 1)
        pts.add((fpr, tpr))
    return sorted(pts)


def _auroc_trapezoid(scores, pos):
    pts = _roc_points(np.asarray(scores, float), np.asarray(pos, bool))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def _ap_threshold_loop(scores, pos):
    scores = np.asarray(scores, float)
    pos = np.asarray(pos, bool)
    n_pos = int(pos.sum())
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(np.unique(scores), reverse=True):
        pred = scores >= thr
        tp = int((pred & pos).sum())
        precision = tp / int(pred.sum())
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def _sens_at_spec_loop(scores, pos, floor=0.95):
    scores = np.asarray(scores, float)
    pos = np.asarray(pos, bool)
    best = 0.0
    for thr in np.concatenate([np.unique(scores), [np.inf]]):
        pred = scores >= thr
        spec = int((~pred & ~pos).sum()) / int((~pos).sum())
        if spec >= floor:
            best = max(best, int((pred & pos).sum()) / int(pos.sum()))
    return best


def _confusion_metrics(pred_labels, labels, n_classes):
    recalls, f1s = [], []
    for c in range(n_classes):
        tp = int(((pred_labels == c) & (labels == c)).sum())
        fp = int(((pred_labels == c) & (labels != c)).sum())
        fn = int(((pred_labels != c) & (labels == c)).sum())
        if tp + fn > 0:
            recalls.append(tp / (tp + fn))
        if tp == 0:
            f1s.append(0.0)
        else:
            p, r = tp / (tp + fp), tp / (tp + fn)
            f1s.append(2 * p * r / (p + r))
    return float(np.mean(recalls)), float(np.mean(f1s))


# -- ranking metrics -------------------------------------------------------


def test_perfect_separation():
    scores = np.array([0.1, 0.2, 0.3, 0.8, 0.9])
    pos = np.array([False, False, False, True, True])
    assert auroc(scores, pos) == 1.0
    assert average_precision(scores, pos) == 1.0
    sens, flag = sensitivity_at_specificity(scores, pos)
    assert sens == 1.0 and not flag


def test_eight_sample_fixture_matches_sweep_oracles():
    pos = FIX_LABELS == 1
    assert auroc(FIX_SCORES, pos) == pytest.approx(
        _auroc_trapezoid(FIX_SCORES, pos), abs=1e-9
    )
    assert average_precision(FIX_SCORES, pos) == pytest.approx(
        _ap_threshold_loop(FIX_SCORES, pos), abs=1e-9
    )
    sens, _ = sensitivity_at_specificity(FIX_SCORES, pos)
    assert sens == pytest.approx(_sens_at_spec_loop(FIX_SCORES, pos), abs=1e-9)
    preds = _binary_preds(FIX_SCORES, FIX_LABELS)
    out = classification_metrics(preds)
    want_bacc, want_f1 = _confusion_metrics(
        preds.probabilities.argmax(axis=1), FIX_LABELS, 2
    )
    assert out["auroc"] == pytest.approx(_auroc_trapezoid(FIX_SCORES, pos), abs=1e-9)
    assert out["pr_auc"] == pytest.approx(_ap_threshold_loop(FIX_SCORES, pos), abs=1e-9)
    assert out["sens_at_95_spec"] == pytest.approx(
        _sens_at_spec_loop(FIX_SCORES, pos), abs=1e-9
    )
    assert out["balanced_accuracy"] == pytest.approx(want_bacc, abs=1e-9)
    assert out["macro_f1"] == pytest.approx(want_f1, abs=1e-9)


def test_rank_auroc_equals_trapezoid_with_ties():
    rng = np.random.default_rng(0)
    for trial in range(20):
        scores = rng.choice([0.1, 0.3, 0.3, 0.6, 0.6, 0.9], size=12)
        pos = rng.random(12) < 0.5
        if pos.all() or not pos.any():
            continue
        assert auroc(scores, pos) == pytest.approx(
            _auroc_trapezoid(scores, pos), abs=1e-9
        )


def test_auroc_monotone_transform_invariant():
    pos = FIX_LABELS == 1
    base = auroc(FIX_SCORES, pos)
    assert auroc(np.exp(3.0 * FIX_SCORES), pos) == pytest.approx(base, abs=1e-12)
    assert auroc(FIX_SCORES**3 + 7.0, pos) == pytest.approx(base, abs=1e-12)


def test_random_scores_auroc_near_half():
    rng = np.random.default_rng(7)
    scores = rng.random(4000)
    pos = rng.random(4000) < 0.5
    assert abs(auroc(scores, pos) - 0.5) < 0.05


def test_single_class_degenerate_flag():
    preds = _binary_preds([0.2, 0.8], [1, 1])
    out = classification_metrics(preds)
    assert out["binary_degenerate"] is True
    assert out["auroc"] == 0.0
    with pytest.raises(DiagnosticError):
        auroc(np.array([0.2, 0.8]), np.array([True, True]))


def test_multiclass_skips_binary_metrics():
    probs = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7]])
    preds = PredictionSet(
        probabilities=probs,
        labels=np.array([0, 1, 2]),
        subgroups=np.zeros(3, dtype=np.int64),
        descriptors=np.ones((3, 1)),
    )
    out = classification_metrics(preds)
    assert out["binary_degenerate"] is True
    assert out["balanced_accuracy"] == pytest.approx(1.0)


def test_sensitivity_unattainable_flag():
    # every positive scores below every negative: catching one costs specificity
    scores = np.array([0.9, 0.8, 0.1, 0.2])
    pos = np.array([False, False, True, True])
    sens, flag = sensitivity_at_specificity(scores, pos)
    assert sens == 0.0 and flag


def test_metrics_order_independent():
    rng = np.random.default_rng(3)
    scores = rng.random(50)
    labels = rng.integers(0, 2, 50)
    base = classification_metrics(_binary_preds(scores, labels))
    perm = rng.permutation(50)
    shuffled = classification_metrics(_binary_preds(scores[perm], labels[perm]))
    for key, val in base.items():
        assert shuffled[key] == pytest.approx(val, abs=1e-12), key


def test_balanced_accuracy_and_f1_zero_support():
    pred = np.array([0, 0, 0])
    labels = np.array([0, 0, 0])
    assert balanced_accuracy(pred, labels, n_classes=2) == 1.0
    assert macro_f1(pred, labels, n_classes=2) == pytest.approx(0.5)


# -- calibration -----------------------------------------------------------


def test_ece_confident_correct_is_zero():
    preds = _binary_preds([0.0, 1.0], [0, 1])
    assert expected_calibration_error(preds) == 0.0


def test_ece_confident_wrong_is_one():
    preds = _binary_preds([1.0, 0.0], [0, 1])
    assert expected_calibration_error(preds) == 1.0


def test_ece_two_bin_hand_fixture():
    preds = _binary_preds([0.1, 0.4, 0.45, 0.7], [0, 1, 0, 1])
    # confidences 0.9, 0.6, 0.55, 0.7 all land in the upper of 2 bins
    acc, conf = 3 / 4, (0.9 + 0.6 + 0.55 + 0.7) / 4
    assert expected_calibration_error(preds, n_bins=2) == pytest.approx(
        abs(acc - conf), abs=1e-12
    )


def test_ece_split_bins_hand_fixture():
    probs = np.array(
        [
            [0.40, 0.35, 0.25],  # conf 0.40, wrong (label 1)
            [0.30, 0.45, 0.25],  # conf 0.45, correct
            [0.10, 0.10, 0.80],  # conf 0.80, correct
            [0.95, 0.04, 0.01],  # conf 0.95, wrong (label 2)
        ]
    )
    preds = PredictionSet(
        probabilities=probs,
        labels=np.array([1, 1, 2, 2]),
        subgroups=np.zeros(4, dtype=np.int64),
        descriptors=np.ones((4, 1)),
    )
    # two bins: low {0.40, 0.45} acc 1/2; high {0.80, 0.95} acc 1/2
    want = 0.5 * abs(0.5 - 0.425) + 0.5 * abs(0.5 - 0.875)
    assert expected_calibration_error(preds, n_bins=2) == pytest.approx(want, abs=1e-12)


def test_ece_one_bin_identity():
    rng = np.random.default_rng(4)
    preds = _binary_preds(rng.random(30), rng.integers(0, 2, 30))
    conf = preds.probabilities.max(axis=1)
    acc = (preds.probabilities.argmax(axis=1) == preds.labels).mean()
    assert expected_calibration_error(preds, n_bins=1) == pytest.approx(
        abs(acc - conf.mean()), abs=1e-12
    )


def test_ece_rejects_zero_bins():
    with pytest.raises(Exception):
        expected_calibration_error(_binary_preds([0.5], [0]), n_bins=0)


# -- fairness --------------------------------------------------------------


def _tables(tprs, coverages, counts=None):
    counts = counts or [10] * len(tprs)
    cov_entries, err_entries = {}, {}
    for i, (tpr, cov, cnt) in enumerate(zip(tprs, coverages, counts)):
        key = SCGKey(0, i, 0)
        cov_entries[key] = CoverageEntry(cov, cnt)
        err_entries[key] = ErrorEntry(tpr=tpr, error=1.0 - tpr, effective_weight=float(cnt))
    return ErrorTable(entries=err_entries), CoverageTable(entries=cov_entries, mode="soft")


def test_fairness_constant_tpr():
    err, cov = _tables([0.8] * 4, [0.2, 0.4, 0.6, 0.8])
    out = fairness_metrics(err, cov)
    assert out["tpr_worst"] == pytest.approx(0.8)
    assert out["tpr_std"] == 0.0
    assert out["cdi"] == 0.0 and out["cdi_degenerate"]


def test_fairness_two_point_fixture():
    err, cov = _tables([1.0, 0.0], [0.9, 0.1])
    out = fairness_metrics(err, cov)
    assert out["tpr_worst"] == 0.0
    assert out["tpr_std"] == pytest.approx(0.5)


def test_fairness_six_cell_fixture():
    tprs = [0.9, 0.4, 0.7, 1.0, 0.55, 0.8]
    covs = [0.8, 0.15, 0.5, 0.95, 0.3, 0.6]
    err, cov = _tables(tprs, covs)
    out = fairness_metrics(err, cov)
    assert out["tpr_worst"] == pytest.approx(min(tprs), abs=1e-12)
    assert out["tpr_std"] == pytest.approx(float(np.std(tprs)), abs=1e-12)
    want_cdi = abs(np.corrcoef(covs, [1 - t for t in tprs])[0, 1])
    assert out["cdi"] == pytest.approx(want_cdi, abs=1e-12)
    assert out["cdi_groups"] == 6


def test_fairness_min_count_excludes():
    err, cov = _tables([0.9, 0.1, 0.5], [0.8, 0.2, 0.5], counts=[10, 10, 1])
    out = fairness_metrics(err, cov, min_count=5)
    assert out["cdi_groups"] == 2
    assert out["tpr_worst"] == pytest.approx(0.1)


def test_fairness_no_eligible_cells():
    err, cov = _tables([0.9], [0.8], counts=[0])
    with pytest.raises(DiagnosticError):
        fairness_metrics(err, cov, min_count=1)


# -- grounding -------------------------------------------------------------


def test_grounding_identical_pairs():
    v = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 3.0]])
    out = grounding_metrics(v, v.copy())
    assert out["align_cos"] == pytest.approx(1.0)
    assert out["r_at_1"] == 1.0
    assert out["zero_vectors"] == 0


def test_grounding_negated_pairs():
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = grounding_metrics(v, -v)
    assert out["align_cos"] == pytest.approx(-1.0)


def test_grounding_three_sample_brute_force():
    v = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
    d = np.array([[0.8, 0.6], [1.0, 0.0], [0.0, 2.0]])

    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    want_align = np.mean([cos(v[i], d[i]) for i in range(3)])
    hits = 0
    for i in range(3):
        sims = [cos(v[i], d[j]) for j in range(3)]
        if int(np.argmax(sims)) == i:
            hits += 1
    out = grounding_metrics(v, d)
    assert out["align_cos"] == pytest.approx(want_align, abs=1e-12)
    assert out["r_at_1"] == pytest.approx(hits / 3, abs=1e-12)


def test_grounding_permutation_invariant_r1():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(10, 4))
    d = rng.normal(size=(10, 4))
    base = grounding_metrics(v, d)
    perm = rng.permutation(10)
    shuffled = grounding_metrics(v[perm], d[perm])
    assert shuffled["r_at_1"] == pytest.approx(base["r_at_1"], abs=1e-12)
    assert shuffled["align_cos"] == pytest.approx(base["align_cos"], abs=1e-12)


def test_grounding_zero_vector_counted():
    v = np.array([[0.0, 0.0], [1.0, 0.0]])
    d = np.array([[1.0, 0.0], [1.0, 0.0]])
    out = grounding_metrics(v, d)
    assert out["zero_vectors"] == 1
    assert out["align_cos"] == pytest.approx(0.5)  # cosines 0 and 1


def test_grounding_shape_mismatch():
    with pytest.raises(Exception):
        grounding_metrics(np.zeros((2, 3)), np.zeros((3, 3)))


# -- per-cell error table --------------------------------------------------


def _mixed_preds():
    rng = np.random.default_rng(6)
    n, k, t, s = 20, 2, 2, 2
    scores = rng.random(n)
    labels = rng.integers(0, t, n)
    subgroups = rng.integers(0, s, n)
    desc = rng.random((n, k))
    return _binary_preds(scores, labels, subgroups, desc), DataDims(k, t, s, (3, 8, 8))


def test_scg_error_table_matches_loop_oracle():
    preds, dims = _mixed_preds()
    table = scg_error_table(preds, dims)
    pred_labels = preds.probabilities.argmax(axis=1)
    for c in range(2):
        for d in range(2):
            for s in range(2):
                num = den = 0.0
                for i in range(len(preds)):
                    if preds.labels[i] == c and preds.subgroups[i] == s:
                        w = preds.descriptors[i, d]
                        den += w
                        num += w * float(pred_labels[i] == preds.labels[i])
                entry = table.entries[SCGKey(c, d, s)]
                want = num / den if den > 0 else 1.0
                assert entry.tpr == pytest.approx(want, abs=1e-12)
                assert entry.effective_weight == pytest.approx(den, abs=1e-12)
                assert entry.error == pytest.approx(1.0 - want, abs=1e-12)


def test_scg_error_table_hard_membership():
    preds, dims = _mixed_preds()
    table = scg_error_table(preds, dims, soft_membership=False, tau=0.5)
    hard = preds.descriptors >= 0.5
    pred_labels = preds.probabilities.argmax(axis=1)
    key = SCGKey(0, 1, 0)
    mask = (preds.labels == 0) & (preds.subgroups == 0) & hard[:, 1]
    want = (
        float((pred_labels[mask] == 0).mean()) if mask.sum() else 1.0
    )
    assert table.entries[key].tpr == pytest.approx(want, abs=1e-12)
    assert table.entries[key].effective_weight == pytest.approx(float(mask.sum()))


def test_empty_cell_unit_recall_zero_weight():
    preds = _binary_preds([0.2], [0], [0], [[1.0]])
    table = scg_error_table(preds, DataDims(1, 2, 2, (3, 8, 8)))
    entry = table.entries[SCGKey(1, 0, 1)]
    assert entry.tpr == 1.0 and entry.effective_weight == 0.0


# -- report ----------------------------------------------------------------


def _report_fixture():
    preds, dims = _mixed_preds()
    rng = np.random.default_rng(8)
    cov_entries = {}
    for c in range(2):
        for d in range(2):
            for s in range(2):
                cov_entries[SCGKey(c, d, s)] = CoverageEntry(
                    float(rng.uniform(0.1, 0.9)), int(rng.integers(2, 30))
                )
    cov = CoverageTable(entries=cov_entries, mode="soft")
    preds.visual_embeddings = rng.normal(size=(len(preds), 4))
    preds.descriptor_embeddings = rng.normal(size=(len(preds), 4))
    return preds, dims, cov


def test_build_report_row_count_matches_eligibility():
    preds, dims, cov = _report_fixture()
    report = build_report(preds, dims, cov, min_count=1)
    err = scg_error_table(preds, dims)
    assert len(report.per_scg) == len(eligible_keys(cov, err, min_count=1))
    assert report.n_samples == len(preds)
    assert report.grounding is not None


def test_report_json_round_trip_byte_stable():
    preds, dims, cov = _report_fixture()
    report = build_report(preds, dims, cov)
    text = report.to_json()
    again = MetricReport.from_json(text)
    assert again.to_json() == text
    assert text.endswith("\n")


def test_report_schema_version_enforced():
    with pytest.raises(Exception):
        MetricReport.from_json('{"schema_version": 99}')


def test_report_csv_shapes():
    preds, dims, cov = _report_fixture()
    report = build_report(preds, dims, cov)
    csv = report.to_csv()
    lines = csv.strip().split("\n")
    assert lines[0] == "metric,value"
    assert len(lines) == 1 + len(report.flat_metrics())
    scg_lines = report.per_scg_csv().strip().split("\n")
    assert scg_lines[0] == "class,descriptor,subgroup,coverage,tpr,error,weight"
    assert len(scg_lines) == 1 + len(report.per_scg)
    # repr round trip: parse a float cell back exactly
    first = report.per_scg[0]
    cells = scg_lines[1].split(",")
    assert float(cells[3]) == first["coverage"]


def test_report_no_grounding_without_embeddings():
    preds, dims, cov = _report_fixture()
    preds.visual_embeddings = None
    report = build_report(preds, dims, cov)
    assert report.grounding is None
    assert "grounding" not in {k.split(".")[0] for k in report.flat_metrics()} or not any(
        k.startswith("grounding.") for k in report.flat_metrics()
    )


def test_prediction_set_validation():
    bad = PredictionSet(
        probabilities=np.array([[0.7, 0.7]]),
        labels=np.array([0]),
        subgroups=np.array([0]),
        descriptors=np.ones((1, 1)),
    )
    with pytest.raises(Exception):
        bad.validate()
    with pytest.raises(DiagnosticError):
        classification_metrics(
            PredictionSet(
                probabilities=np.zeros((0, 2)),
                labels=np.zeros(0, dtype=int),
                subgroups=np.zeros(0, dtype=int),
                descriptors=np.zeros((0, 1)),
            )
        )
