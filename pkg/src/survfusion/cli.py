"""Command-line surface.

Subcommands: synth, train-stage1, train-stage2, eval, km, coxph, gradcheck.
Exit codes: 0 success, 1 validation error, 2 numeric failure.  All
randomness is governed by a single --seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .cox import fit_coxph, hazard_table, format_p
from .data import (
    SyntheticSpec,
    binarize_clinical,
    folds_from_json,
    folds_to_json,
    load_clinical_csv,
    load_cohort,
    make_folds,
    synthesize_cohort,
    write_cohort,
)
from .errors import NumericError, ValidationError
from .fusion import FusionConfig, load_checkpoint, save_checkpoint
from .metrics import kaplan_meier, log_rank, risk_groups
from .training import (
    TrainConfig,
    aggregate_fold_metrics,
    evaluate,
    gradcheck_suite,
    median_threshold,
    predict_risks,
    train_stage1,
    train_stage2,
)

GRADCHECK_TOLERANCE = 1e-4
COVARIATE_COLUMNS = {"grade": 0, "size": 1, "age": 2, "ln": 3}


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from None


def _load_configs(path, seed_override=None) -> tuple[FusionConfig, TrainConfig]:
    payload = _load_json(path)
    fusion_config = FusionConfig.from_dict(payload.get("model", {}))
    train_config = TrainConfig.from_dict(payload.get("train", {}))
    if seed_override is not None:
        train_config = dataclasses.replace(train_config, seed=seed_override)
    return fusion_config, train_config


def _split_for_training(bundles, folds_path, fold_number, seed):
    records = [b.record for b in bundles]
    if folds_path:
        ids = [b.id for b in bundles]
        folds = folds_from_json(Path(folds_path).read_text(encoding="utf-8"), ids)
    else:
        folds = make_folds(records, k=5, seed=seed)
    chosen = next((f for f in folds if f.fold == fold_number), None)
    if chosen is None:
        raise ValidationError(f"fold {fold_number} not present")
    train = [bundles[i] for i in chosen.train_idx]
    val = [bundles[i] for i in chosen.val_idx]
    return train, val


# -- subcommands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    payload = _load_json(args.spec)
    if args.seed is not None:
        payload["seed"] = args.seed
    spec = SyntheticSpec(**payload)
    bundles = synthesize_cohort(spec)
    out = Path(args.out)
    write_cohort(out, bundles)
    folds = make_folds([b.record for b in bundles], k=args.folds, seed=spec.seed)
    (out / "folds.json").write_text(folds_to_json(folds, [b.id for b in bundles]))
    events = sum(b.record.event for b in bundles)
    print(f"wrote {len(bundles)} patients ({events} events) to {out}")
    return 0


def cmd_train_stage1(args) -> int:
    fusion_config, train_config = _load_configs(args.config, args.seed)
    bundles = load_cohort(args.data)
    train, val = _split_for_training(bundles, args.folds, args.fold, train_config.seed)
    result = train_stage1(train, val, fusion_config, train_config)
    save_checkpoint(args.out, result.arrays, {"model": fusion_config.to_dict(),
                                              "train": train_config.to_dict()})
    best = result.history[result.best_epoch - 1]
    print(f"stage 1 done: best epoch {result.best_epoch}, "
          f"validation loss {best['val_loss']:.6f}, checkpoint {args.out}")
    return 0


def cmd_train_stage2(args) -> int:
    fusion_config, train_config = _load_configs(args.config, args.seed)
    bundles = load_cohort(args.data)
    train, val = _split_for_training(bundles, args.folds, args.fold, train_config.seed)
    _, vae_arrays = load_checkpoint(args.vae)
    result = train_stage2(train, val, vae_arrays, fusion_config, train_config)
    named = {f"vae.{k}": v for k, v in vae_arrays.items()}
    named.update(result.arrays)
    if result.gene_scaler is not None:
        named["gene_scale_mean"] = result.gene_scaler[0]
        named["gene_scale_std"] = result.gene_scaler[1]
    save_checkpoint(args.out, named, {"model": fusion_config.to_dict(),
                                      "train": train_config.to_dict()})
    best = result.history[result.best_epoch - 1]
    print(f"stage 2 done: best epoch {result.best_epoch} "
          f"(stopped after {result.stopped_epoch}), "
          f"validation loss {best['val_loss']:.6f}, checkpoint {args.out}")
    return 0


def _unpack_model_checkpoint(path):
    config_echo, arrays = load_checkpoint(path)
    fusion_config = FusionConfig.from_dict(config_echo["model"])
    train_config = TrainConfig.from_dict(config_echo["train"])
    vae_arrays = {k[len("vae."):]: v for k, v in arrays.items() if k.startswith("vae.")}
    if not vae_arrays:
        raise ValidationError(f"{path}: checkpoint lacks the frozen VAE tensors")
    scaler = None
    if "gene_scale_mean" in arrays:
        scaler = (arrays["gene_scale_mean"], arrays["gene_scale_std"])
    model_arrays = {k: v for k, v in arrays.items()
                    if not k.startswith("vae.") and not k.startswith("gene_scale_")}
    return fusion_config, train_config, vae_arrays, model_arrays, scaler


def cmd_eval(args) -> int:
    from .fusion import forward, model_params_from_arrays, parameter_count, vae_params_from_arrays
    from .tensor import FlopCounter

    fusion_config, train_config, vae_arrays, model_arrays, scaler = (
        _unpack_model_checkpoint(args.model)
    )
    bundles = load_cohort(args.data)
    ids = [b.id for b in bundles]
    folds = folds_from_json(Path(args.folds).read_text(encoding="utf-8"), ids)
    out_dir = Path(args.report).parent
    fold_metrics = []
    for fold in folds:
        train_b = [bundles[i] for i in fold.train_idx]
        val_b = [bundles[i] for i in fold.val_idx]
        train_risks = predict_risks(train_b, vae_arrays, model_arrays,
                                    fusion_config, train_config, scaler)
        val_risks = predict_risks(val_b, vae_arrays, model_arrays,
                                  fusion_config, train_config, scaler,
                                  seed_offset=7919)
        fold_metrics.append(
            evaluate(fold.fold, train_risks, val_risks,
                     [b.record for b in val_b], out_dir=out_dir)
        )
    vae = vae_params_from_arrays(vae_arrays)
    model = model_params_from_arrays(model_arrays)
    with FlopCounter() as counter:
        forward(bundles[0], vae, model, fusion_config, gene_scaler=scaler)
    report = aggregate_fold_metrics(fold_metrics,
                        parameter_count(vae) + parameter_count(model),
                        Path(args.model).stat().st_size, counter.total)
    Path(args.report).write_text(report.to_json())
    print(f"C-index {report.c_index_mean:.4f} ± {report.c_index_std:.4f}, "
          f"mean AUC {report.mean_auc_mean:.4f} ± {report.mean_auc_std:.4f} "
          f"over {len(fold_metrics)} folds; report {args.report}")
    return 0


def _read_risks_csv(path):
    required = ["patient_id", "risk", "time_months", "event"]
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{path}: missing columns: {', '.join(missing)}")
        for row in reader:
            rows.append((row["patient_id"], float(row["risk"]),
                         float(row["time_months"]), int(row["event"])))
    if not rows:
        raise ValidationError(f"{path}: no rows")
    return rows


def _km_out_path(pattern: str, group: str) -> Path:
    if "{group}" in pattern:
        return Path(pattern.replace("{group}", group))
    if "{high,low}" in pattern:
        return Path(pattern.replace("{high,low}", group))
    stem = Path(pattern)
    return stem.with_name(f"{stem.stem}_{group}{stem.suffix}")


def cmd_km(args) -> int:
    rows = _read_risks_csv(args.risks)
    risks = np.array([r[1] for r in rows])
    times = np.array([r[2] for r in rows])
    events = np.array([r[3] for r in rows])
    theta = median_threshold(risks) if args.theta == "auto" else float(args.theta)
    groups = risk_groups(risks, theta)
    summary = {"theta": theta}
    for group in ("high", "low"):
        mask = groups == group
        summary[f"n_{group}"] = int(mask.sum())
        if mask.any():
            curve = kaplan_meier(times[mask], events[mask])
            path = _km_out_path(args.out, group)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(curve.to_csv())
            print(f"wrote {path}")
    high = groups == "high"
    if high.any() and (~high).any() and events.sum() > 0:
        res = log_rank((times[high], events[high]), (times[~high], events[~high]))
        summary["logrank_chi2"] = res.chi2
        summary["logrank_p"] = res.p
        print(f"log-rank chi2 {res.chi2:.4f}, p {res.p:.3g}")
    else:
        summary["logrank_chi2"] = None
        summary["logrank_p"] = None
        print("log-rank skipped: need both groups and at least one event")
    summary_path = _km_out_path(args.out, "summary").with_suffix(".json")
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=2))
    print(f"wrote {summary_path}")
    return 0


def cmd_coxph(args) -> int:
    rows = load_clinical_csv(args.clinical)
    requested = [c.strip() for c in args.covariates.split(",") if c.strip()]
    unknown = [c for c in requested if c not in COVARIATE_COLUMNS]
    if unknown:
        raise ValidationError(
            f"unknown covariates: {', '.join(unknown)} "
            f"(choose from {', '.join(COVARIATE_COLUMNS)})"
        )
    design = []
    times, events = [], []
    for row in rows:
        clin = binarize_clinical(row["grade"], row["size_mm"], row["age_years"],
                                 row["ln_status"])
        design.append(clin.coxph_values)
        times.append(row["time_months"])
        events.append(row["event"])
    design = np.array(design)
    times = np.array(times)
    events = np.array(events, dtype=np.int64)
    cols = [COVARIATE_COLUMNS[c] for c in requested]

    multi = fit_coxph(design[:, cols], times=times, events=events, labels=requested)
    multi_rows = {r.name: r for r in hazard_table(multi, requested)}
    uni_rows = {}
    for name, col in zip(requested, cols):
        uni = fit_coxph(design[:, [col]], times=times, events=events, labels=[name])
        uni_rows[name] = hazard_table(uni, [name])[0]

    header = (f"{'Parameter':<12}{'#Patients/Group':<18}"
              f"{'HR':>6} {'95% CI':<13}{'p':>8}   "
              f"{'HR':>6} {'95% CI':<13}{'p':>8}")
    print(f"{'':<30}{'Multivariate':^28}   {'Univariate':^28}")
    print(header)
    print("-" * len(header))
    lines = ["parameter,n_per_group,hr_multivariate,ci_low_multivariate,"
             "ci_high_multivariate,p_multivariate,hr_univariate,"
             "ci_low_univariate,ci_high_univariate,p_univariate"]
    for name in requested:
        m, u = multi_rows[name], uni_rows[name]
        group = f"{u.n_per_group[0]} vs {u.n_per_group[1]}" if u.n_per_group else "-"
        print(f"{name:<12}{group:<18}"
              f"{m.hr:>6.2f} {f'{m.ci_low:.2f}-{m.ci_high:.2f}':<13}{format_p(m.p):>8}   "
              f"{u.hr:>6.2f} {f'{u.ci_low:.2f}-{u.ci_high:.2f}':<13}{format_p(u.p):>8}")
        lines.append(
            f"{name},{group},{m.hr!r},{m.ci_low!r},{m.ci_high!r},{m.p!r},"
            f"{u.hr!r},{u.ci_low!r},{u.ci_high!r},{u.p!r}"
        )
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite(seed=args.seed if args.seed is not None else 0)
    worst = 0.0
    for name, err in results.items():
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:<40} max rel err {err:.3e}  [{status}]")
        worst = max(worst, err)
    if worst >= GRADCHECK_TOLERANCE:
        print(f"gradient check FAILED: {worst:.3e} >= {GRADCHECK_TOLERANCE}")
        return 2
    print(f"all gradients within {GRADCHECK_TOLERANCE}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="survfusion",
        description="Multimodal survival-risk modeling toolkit",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multimodal cohort")
    p.add_argument("--spec", required=True, help="SyntheticSpec JSON file")
    p.add_argument("--out", required=True, help="output cohort directory")
    p.add_argument("--folds", type=int, default=5, help="number of folds to write")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-stage1", help="train the patch VAE")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="JSON with 'model' and 'train' sections")
    p.add_argument("--out", required=True, help="VAE checkpoint path")
    p.add_argument("--folds", default=None, help="folds JSON (default: internal split)")
    p.add_argument("--fold", type=int, default=1, help="fold used for validation")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the fusion network on the Cox loss")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True, help="stage-1 checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="model checkpoint path")
    p.add_argument("--folds", default=None)
    p.add_argument("--fold", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("eval", help="fold-wise evaluation of a trained model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--report", required=True, help="output report JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("km", help="risk-grouped Kaplan-Meier curves and log-rank")
    p.add_argument("--risks", required=True,
                   help="CSV: patient_id, risk, time_months, event")
    p.add_argument("--theta", default="auto", help="'auto' (median) or a number")
    p.add_argument("--out", default="km_{group}.csv",
                   help="output pattern; '{group}' becomes high/low")
    p.set_defaults(func=cmd_km)

    p = sub.add_parser("coxph", help="univariate and multivariate hazard tables")
    p.add_argument("--clinical", required=True)
    p.add_argument("--covariates", default="grade,size,age,ln")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_coxph)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
    )
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
