"""Command-line surface: data generation, auditing, training, evaluation, plots.

Every subcommand prints its effective configuration as JSON before doing any
work, writes machine-readable artifacts (CSV/JSON/SVG/archives), and exits 0
on success, 2 on usage errors, 1 on runtime failures (with a one-line
``error: ...`` message on stderr).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .coverage import (
    coverage_report,
    coverage_table,
    coverage_table_to_csv,
)
from .data import (
    Dataset,
    SynthConfig,
    generate_synthetic_dataset,
    load_dataset,
    load_manifest,
    save_dataset,
    split_dataset,
    write_manifest,
)
from .encoder import ORDERINGS, EncoderConfig
from .errors import DescovError
from .evaluation import MetricReport
from .objectives import LossWeights
from .plots import svg_bar_profile, svg_heatmap, svg_line_chart, write_svg
from .sdm import SDM_VARIANTS
from .training import (
    DESK_SPLIT_RATIOS,
    TrainConfig,
    TrainResult,
    desk_preset,
    epoch_log_csv_header,
    epoch_log_row_csv,
    evaluate,
    load_checkpoint,
    step_log_csv_header,
    step_log_row_csv,
    train,
)

# The fixed combination used for the depth/feedback study.
ABLATE_DEPTH_VARIANT = "hybrid_gated"
ABLATE_DEPTH_ORDERING = "mixture_dam_first"


def _print_config(name: str, cfg: dict) -> None:
    print(f"[{name}] effective configuration:")
    print(json.dumps(cfg, sort_keys=True, indent=2))


def _load_any_dataset(path: str) -> Dataset:
    if path.endswith(".csv"):
        return load_manifest(path)
    return load_dataset(path)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def _cmd_gen_data(args: argparse.Namespace) -> int:
    if args.preset == "desk":
        synth, _ = desk_preset(seed=args.seed)
    else:
        synth = SynthConfig(n_samples=args.n_samples, rng_seed=args.seed)
    overrides = {}
    for name, field in (
        ("n_samples", "n_samples"),
        ("descriptors", "n_descriptors"),
        ("classes", "n_classes"),
        ("subgroups", "n_subgroups"),
        ("tail_exponent", "tail_exponent"),
        ("noise_level", "noise_level"),
        ("label_rule_seed", "label_rule_seed"),
    ):
        val = getattr(args, name)
        if val is not None:
            overrides[field] = val
    synth = dataclasses.replace(synth, rng_seed=args.seed, **overrides)
    _print_config("gen-data", dataclasses.asdict(synth))
    ds = generate_synthetic_dataset(synth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out / "dataset.zip")
    write_manifest(ds, out / "manifest.csv")
    (out / "synth_config.json").write_text(
        json.dumps(dataclasses.asdict(synth), sort_keys=True, indent=2) + "\n"
    )
    print(f"wrote {out / 'dataset.zip'} ({len(ds)} samples) and {out / 'manifest.csv'}")
    return 0


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------


def _cmd_audit(args: argparse.Namespace) -> int:
    cfg = {
        "data": args.data,
        "mode": args.mode,
        "tau": args.tau,
        "out": args.out,
    }
    _print_config("audit", cfg)
    ds = _load_any_dataset(args.data)
    tau = args.tau if args.mode == "hard" else None
    table = coverage_table(ds, mode=args.mode, tau=tau)
    report = coverage_report(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "coverage.csv").write_text(coverage_table_to_csv(table))
    ranked_lines = ["rank,coverage"] + [
        f"{i},{float(v)!r}" for i, v in enumerate(report.ranked_coverage)
    ]
    (out / "ranked_coverage.csv").write_text("\n".join(ranked_lines) + "\n")
    write_svg(
        svg_heatmap(
            report.heatmap,
            report.row_labels,
            report.col_labels,
            title="Descriptor coverage by class/subgroup",
        ),
        out / "coverage_heatmap.svg",
    )
    write_svg(
        svg_bar_profile(
            report.ranked_coverage,
            title="Ranked coverage profile",
            y_label="coverage",
        ),
        out / "coverage_profile.svg",
    )
    print(
        "coverage quantiles: "
        + json.dumps(report.quantiles, sort_keys=True)
        + f"; cells={len(table)}"
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _apply_train_overrides(cfg: TrainConfig, args: argparse.Namespace) -> TrainConfig:
    weights = cfg.loss_weights
    if args.lambda_desc is not None:
        weights = dataclasses.replace(weights, descriptor=args.lambda_desc)
    if args.lambda_dva is not None:
        weights = dataclasses.replace(weights, alignment=args.lambda_dva)
    if args.lambda_cdi is not None:
        weights = dataclasses.replace(weights, decorrelation=args.lambda_cdi)
    encoder = cfg.encoder
    enc_over = {}
    if args.variant is not None:
        enc_over["sdm_variant"] = args.variant
    if args.ordering is not None:
        enc_over["ordering"] = args.ordering
    if args.layers is not None:
        enc_over["n_layers"] = args.layers
    if args.feedback is not None:
        enc_over["feedback"] = args.feedback
    if args.visual_only:
        enc_over["use_descriptors"] = False
    if enc_over:
        encoder = dataclasses.replace(encoder, **enc_over)
    over = {"loss_weights": weights, "encoder": encoder}
    if args.epochs is not None:
        over["epochs"] = args.epochs
    if args.seed is not None:
        over["seed"] = args.seed
    if args.batch_size is not None:
        over["batch_size"] = args.batch_size
    if args.base_lr is not None:
        over["base_lr"] = args.base_lr
    return dataclasses.replace(cfg, **over)


def _split_for_training(
    ds: Dataset, ratios: tuple[float, float, float], seed: int
) -> tuple[Dataset, Dataset, Dataset]:
    return split_dataset(ds, ratios, seed=seed)


def _adapt_encoder_to_data(cfg: TrainConfig, ds: Dataset) -> TrainConfig:
    """Resolve the data-dependent encoder fields from the dataset's dims."""
    c, h, w = ds.dims.image_shape
    encoder = dataclasses.replace(
        cfg.encoder,
        n_descriptors=ds.dims.n_descriptors,
        n_classes=ds.dims.n_classes,
        image_shape=(c, h, w),
        grid_size=(h // 4, w // 4),
    )
    return dataclasses.replace(cfg, encoder=encoder)


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated ratios")
    return tuple(parts)  # type: ignore[return-value]


def _run_training(
    ds: Dataset, cfg: TrainConfig, ratios: tuple[float, float, float], out: Path
) -> tuple[TrainResult, Dataset]:
    ds_train, ds_val, ds_test = _split_for_training(ds, ratios, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    step_fh = open(out / "training_log.csv", "w", encoding="utf-8")
    epoch_fh = open(out / "training_epochs.csv", "w", encoding="utf-8")
    step_fh.write(step_log_csv_header() + "\n")
    epoch_fh.write(epoch_log_csv_header() + "\n")
    try:
        result = train(
            ds_train,
            ds_val,
            cfg,
            step_callback=lambda row: step_fh.write(step_log_row_csv(row) + "\n"),
            epoch_callback=lambda row: epoch_fh.write(epoch_log_row_csv(row) + "\n"),
        )
    finally:
        step_fh.close()
        epoch_fh.close()
    return result, ds_test


def _cmd_train(args: argparse.Namespace) -> int:
    if args.config:
        cfg = TrainConfig.from_json(Path(args.config).read_text())
    else:
        cfg = TrainConfig()
    cfg = _apply_train_overrides(cfg, args)
    ratios = args.split if args.split else DESK_SPLIT_RATIOS
    ds = _load_any_dataset(args.data)
    if not args.config:
        cfg = _adapt_encoder_to_data(cfg, ds)
    _print_config(
        "train",
        {"config": cfg.to_dict(), "data": args.data, "split_ratios": list(ratios)},
    )
    out = Path(args.out)
    result, ds_test = _run_training(ds, cfg, ratios, out)
    result.save(out / "model.ckpt")
    save_dataset(ds_test, out / "test.zip")
    (out / "resolved_config.json").write_text(cfg.to_json())
    print(
        f"best epoch {result.best_epoch} (val AUROC {result.best_val_auroc:.4f}); "
        f"stopped after epoch {result.stopped_epoch}; "
        f"checkpoint at {out / 'model.ckpt'}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = {
        "checkpoint": args.checkpoint,
        "data": args.data,
        "coverage": "self" if args.self_coverage else "training-split",
        "min_count": args.min_count,
        "out": args.out,
    }
    _print_config("eval", cfg)
    encoder, align, tcfg, train_cov = load_checkpoint(args.checkpoint)
    ds = _load_any_dataset(args.data)
    coverage = None if args.self_coverage else train_cov
    report = evaluate(
        encoder,
        align,
        ds,
        coverage=coverage,
        min_count=args.min_count,
        dtype=tcfg.torch_dtype(),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    (out / "per_scg.csv").write_text(report.per_scg_csv())
    flat = report.flat_metrics()
    summary = {
        k: round(flat[k], 4)
        for k in (
            "classification.auroc",
            "classification.balanced_accuracy",
            "calibration.ece",
            "fairness.cdi",
        )
        if k in flat
    }
    print("eval summary: " + json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------


def _cmd_plot(args: argparse.Namespace) -> int:
    cfg = {"epoch_log": args.epoch_log, "coverage": args.coverage, "out": args.out}
    _print_config("plot", cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wrote = []
    if args.epoch_log:
        rows = [
            ln.split(",")
            for ln in Path(args.epoch_log).read_text().strip().splitlines()[1:]
        ]
        epochs = np.array([float(r[0]) for r in rows])
        aurocs = np.array([float(r[1]) for r in rows])
        cdis = np.array([float(r[2]) for r in rows])
        write_svg(
            svg_line_chart(
                {"val CDI": (epochs, cdis)},
                title="Validation disparity index by epoch",
                x_label="epoch",
                y_label="CDI",
            ),
            out / "cdi_trajectory.svg",
        )
        write_svg(
            svg_line_chart(
                {"val AUROC": (epochs, aurocs)},
                title="Validation AUROC by epoch",
                x_label="epoch",
                y_label="AUROC",
            ),
            out / "auroc_trajectory.svg",
        )
        wrote += ["cdi_trajectory.svg", "auroc_trajectory.svg"]
    if args.coverage:
        from .coverage import coverage_table_from_csv

        table = coverage_table_from_csv(Path(args.coverage).read_text())
        report = coverage_report(table)
        write_svg(
            svg_heatmap(
                report.heatmap,
                report.row_labels,
                report.col_labels,
                title="Descriptor coverage by class/subgroup",
            ),
            out / "coverage_heatmap.svg",
        )
        wrote.append("coverage_heatmap.svg")
    if not wrote:
        raise DescovError("plot: provide --epoch-log and/or --coverage")
    print(f"wrote {', '.join(wrote)} in {out}")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = (
    "variant",
    "ordering",
    "depth",
    "feedback",
    "auroc",
    "balanced_accuracy",
    "macro_f1",
    "ece",
    "cdi",
    "tpr_worst",
    "tpr_std",
    "align_cos",
    "r_at_1",
    "best_epoch",
    "final_val_cdi",
)


def ablation_grid() -> list[dict]:
    """The comparison grid: 5x5 variants/orderings at depth 3 (feedback on),
    plus a depth 1-6 x feedback on/off study for one fixed combination.

    Exact duplicates are emitted once.
    """
    runs: list[dict] = []
    seen = set()

    def add(variant: str, ordering: str, depth: int, feedback: bool) -> None:
        key = (variant, ordering, depth, feedback)
        if key in seen:
            return
        seen.add(key)
        runs.append(
            {"variant": variant, "ordering": ordering, "depth": depth, "feedback": feedback}
        )

    for variant in SDM_VARIANTS:
        for ordering in ORDERINGS:
            add(variant, ordering, 3, True)
    for depth in range(1, 7):
        for feedback in (True, False):
            add(ABLATE_DEPTH_VARIANT, ABLATE_DEPTH_ORDERING, depth, feedback)
    return runs


def _cmd_ablate(args: argparse.Namespace) -> int:
    base = TrainConfig()
    if args.config:
        base = TrainConfig.from_json(Path(args.config).read_text())
    base = dataclasses.replace(
        base,
        epochs=args.epochs,
        seed=args.seed,
    )
    runs = ablation_grid()
    ds = _load_any_dataset(args.data)
    if not args.config:
        base = _adapt_encoder_to_data(base, ds)
    _print_config(
        "ablate",
        {
            "config": base.to_dict(),
            "data": args.data,
            "n_runs": len(runs),
            "out": args.out,
        },
    )
    ds_train, ds_val, ds_test = _split_for_training(ds, DESK_SPLIT_RATIOS, base.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [",".join(ABLATION_COLUMNS)]
    for i, run in enumerate(runs):
        enc = dataclasses.replace(
            base.encoder,
            sdm_variant=run["variant"],
            ordering=run["ordering"],
            n_layers=run["depth"],
            feedback=run["feedback"],
        )
        cfg = dataclasses.replace(base, encoder=enc)
        result = train(ds_train, ds_val, cfg)
        report = evaluate(
            result.encoder,
            result.align_head,
            ds_test,
            coverage=result.train_coverage,
            dtype=cfg.torch_dtype(),
        )
        flat = report.flat_metrics()
        row = [
            run["variant"],
            run["ordering"],
            str(run["depth"]),
            "on" if run["feedback"] else "off",
            repr(flat["classification.auroc"]),
            repr(flat["classification.balanced_accuracy"]),
            repr(flat["classification.macro_f1"]),
            repr(flat["calibration.ece"]),
            repr(flat["fairness.cdi"]),
            repr(flat["fairness.tpr_worst"]),
            repr(flat["fairness.tpr_std"]),
            repr(flat["grounding.align_cos"]),
            repr(flat["grounding.r_at_1"]),
            str(result.best_epoch),
            repr(float(result.epoch_log[-1]["val_cdi"])),
        ]
        lines.append(",".join(row))
        print(
            f"[{i + 1}/{len(runs)}] {run['variant']}/{run['ordering']}"
            f"/d{run['depth']}/fb={'on' if run['feedback'] else 'off'}: "
            f"auroc={flat['classification.auroc']:.4f} cdi={flat['fairness.cdi']:.4f}"
        )
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'ablation.csv'} with {len(runs)} runs")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="descov",
        description="Descriptor-coverage toolkit: generate, audit, train, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset archive")
    g.add_argument("--preset", choices=["desk", "custom"], default="desk")
    g.add_argument("--n-samples", type=int, default=None)
    g.add_argument("--descriptors", type=int, default=None)
    g.add_argument("--classes", type=int, default=None)
    g.add_argument("--subgroups", type=int, default=None)
    g.add_argument("--tail-exponent", type=float, default=None)
    g.add_argument("--noise-level", type=float, default=None)
    g.add_argument("--label-rule-seed", type=int, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)

    a = sub.add_parser("audit", help="coverage audit of a manifest or archive")
    a.add_argument("--data", required=True, help="manifest CSV or dataset archive")
    a.add_argument("--mode", choices=["soft", "hard"], default="soft")
    a.add_argument("--tau", type=float, default=0.5)
    a.add_argument("--out", required=True)
    a.set_defaults(func=_cmd_audit)

    t = sub.add_parser("train", help="train a model on a dataset archive")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="TrainConfig JSON file")
    t.add_argument("--out", required=True)
    t.add_argument("--split", type=_parse_ratios, default=None,
                   help="train,val,test ratios (default desk 8:1:2 of 11)")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--base-lr", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--lambda-desc", type=float, default=None)
    t.add_argument("--lambda-dva", type=float, default=None)
    t.add_argument("--lambda-cdi", type=float, default=None)
    t.add_argument("--variant", choices=list(SDM_VARIANTS), default=None)
    t.add_argument("--ordering", choices=list(ORDERINGS), default=None)
    t.add_argument("--layers", type=int, default=None)
    t.add_argument("--feedback", dest="feedback", action="store_true", default=None)
    t.add_argument("--no-feedback", dest="feedback", action="store_false")
    t.add_argument("--visual-only", action="store_true",
                   help="ignore descriptor inputs (capacity-matched baseline)")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--min-count", type=int, default=1)
    e.add_argument("--self-coverage", action="store_true",
                   help="use the evaluated split's own coverage instead of training coverage")
    e.set_defaults(func=_cmd_eval)

    p = sub.add_parser("plot", help="render SVG charts from logs/tables")
    p.add_argument("--epoch-log", default=None, help="training_epochs.csv")
    p.add_argument("--coverage", default=None, help="coverage.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)

    b = sub.add_parser("ablate", help="run the variant/ordering/depth grid")
    b.add_argument("--data", required=True)
    b.add_argument("--config", default=None)
    b.add_argument("--out", required=True)
    b.add_argument("--epochs", type=int, default=6)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=_cmd_ablate)

    return parser


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DescovError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())
