"""Command-line pipeline: synth -> fit -> calibrate -> evaluate.

Every stage reads and writes explicit files (dataset containers, a model
bundle JSON, report JSON/CSV), so stages can be re-run and diffed
independently.  All randomness flows from --seed; re-running a subcommand on
identical inputs produces byte-identical outputs.  Exit codes: 0 success,
2 usage/configuration, 3 data validation, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import assignment, calibration, metrics, scoring, synthgen
from ._util import canonical_json, parallel_map, sha256_of_files
from .density import DensityEvaluator, FitConfig, fit_gmm_em, fit_single_gaussian
from .errors import (
    ConfigurationError,
    DataError,
    FitError,
    OsgateError,
    ValidationError,
)
from .interchange import (
    CalibrationProfile,
    Dataset,
    ModelBundle,
    MODES,
    ValidationReference,
    load_models,
    read_dataset,
    save_models,
    write_dataset,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

_DATASET_FILES = ("manifest.json", "detections.bin", "groundtruth.bin")


def _dataset_checksum(path: Path) -> str:
    return sha256_of_files(path / name for name in _DATASET_FILES)


def _collect_class_samples(dataset: Dataset, match_floor: float):
    labeled = assignment.collect_labeled_embeddings(dataset, match_floor)
    by_class: dict[int, list[np.ndarray]] = {
        c: [] for c in range(dataset.manifest.num_classes)
    }
    for item in labeled:
        by_class[item.class_id].append(item.embedding.astype(np.float64))
    return by_class, len(labeled)


def cmd_fit(args) -> int:
    dataset = read_dataset(args.train)
    config = FitConfig(k=args.k, jitter=args.jitter, seed=args.seed)
    by_class, total = _collect_class_samples(dataset, args.match_floor)

    for class_id, samples in by_class.items():
        if len(samples) < 2:
            raise FitError(
                f"class {class_id} ({dataset.manifest.class_names[class_id]}) has "
                f"{len(samples)} matched embeddings; need at least 2"
            )

    def fit_class(class_id: int):
        samples = np.stack(by_class[class_id])
        single = fit_single_gaussian(samples, total, jitter=config.jitter,
                                     class_id=class_id)
        multi = fit_gmm_em(samples, config, total_count=total, class_id=class_id)
        return single, multi

    fitted = parallel_map(fit_class, list(range(dataset.manifest.num_classes)))
    singles = tuple(s for s, _ in fitted)
    multis = tuple(m for _, m in fitted)

    summary = {
        "train_checksum": _dataset_checksum(Path(args.train)),
        "match_floor": args.match_floor,
        "total_matched": total,
        "seed": args.seed,
        "k": args.k,
        "jitter": args.jitter,
        "classes": {
            str(c): {
                "name": dataset.manifest.class_names[c],
                "n_samples": len(by_class[c]),
                "em_iterations": multis[c].metadata.get("em_iterations"),
                "converged": multis[c].metadata.get("converged"),
                "collapse_events": multis[c].metadata.get("collapse_events", []),
                "k_fitted": multis[c].k,
            }
            for c in range(dataset.manifest.num_classes)
        },
    }
    bundle = ModelBundle(
        num_classes=dataset.manifest.num_classes,
        embedding_dim=dataset.manifest.embedding_dim,
        single=singles,
        multi=multis,
        fit_summary=summary,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_models(bundle, out / "models.json")
    for c in range(dataset.manifest.num_classes):
        info = summary["classes"][str(c)]
        print(f"class {c} ({info['name']}): {info['n_samples']} embeddings, "
              f"k={info['k_fitted']}, em_iterations={info['em_iterations']}")
    print(f"wrote {out / 'models.json'}")
    return EXIT_OK


def _mode_validation_view(dataset, matched_indices, mode, profile, single_eval, multi_eval):
    """Validation score table for one mode: ID-matched detections, pruned if the
    mode asks for it, scored at the mode's temperatures."""
    dets = [dataset.detections[i] for i in matched_indices]
    logits = np.stack([d.logits for d in dets]).astype(np.float64)
    embeddings = np.stack([d.embedding for d in dets]).astype(np.float64)
    if mode.prune:
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        raw_conf = shifted.max(axis=1) / shifted.sum(axis=1)
        keep = calibration.prune_mask(raw_conf, profile.prune_threshold)
        if not keep.any():
            raise ConfigurationError(
                f"pruning at {profile.prune_threshold} removed every matched "
                "validation detection"
            )
        logits, embeddings = logits[keep], embeddings[keep]
    return scoring.compute_scores(
        logits, embeddings, single_eval, multi_eval,
        t_model=mode.t_model, t_gmm=mode.t_gmm,
    )


def cmd_calibrate(args) -> int:
    dataset = read_dataset(args.val)
    bundle = load_models(Path(args.models))

    train_checksum = bundle.fit_summary.get("train_checksum")
    if train_checksum and train_checksum == _dataset_checksum(Path(args.val)):
        print("warning: validation split is identical to the training split; "
              "temperatures and thresholds will be optimistic (leakage)",
              file=sys.stderr)

    pairs = assignment.matched_label_pairs(dataset, args.match_floor)
    if not pairs:
        raise ValidationError("validation split produced no matched detections")
    det_indices = [i for i, _ in pairs]
    labels = np.array([c for _, c in pairs])
    logits = np.stack([dataset.detections[i].logits for i in det_indices]).astype(np.float64)
    embeddings = np.stack(
        [dataset.detections[i].embedding for i in det_indices]
    ).astype(np.float64)

    single_eval = DensityEvaluator(bundle.single)
    multi_eval = DensityEvaluator(bundle.multi)

    t_model = calibration.learn_temperature(logits, labels)
    nll_model_before = calibration.nll_for_temperature(logits, labels, 1.0)
    nll_model_after = calibration.nll_for_temperature(logits, labels, t_model)

    gmm_vectors = single_eval.per_class_loglik(embeddings) + single_eval.log_priors
    t_gmm = calibration.learn_temperature(gmm_vectors, labels)
    nll_gmm_before = calibration.nll_for_temperature(gmm_vectors, labels, 1.0)
    nll_gmm_after = calibration.nll_for_temperature(gmm_vectors, labels, t_gmm)

    print(f"t_model = {t_model:.6g}  (NLL {nll_model_before:.6f} -> {nll_model_after:.6f})")
    print(f"t_gmm   = {t_gmm:.6g}  (NLL {nll_gmm_before:.6f} -> {nll_gmm_after:.6f})")

    profile = CalibrationProfile(
        t_model=t_model,
        t_gmm=t_gmm,
        prune_threshold=args.prune_threshold,
    )
    matrix = calibration.build_mode_matrix(t_model, t_gmm, args.prune_threshold)
    thresholds = {}
    references = {}
    for mode in matrix:
        table = _mode_validation_view(
            dataset, det_indices, mode, profile, single_eval, multi_eval
        )
        thresholds[mode.name] = calibration.select_joint_thresholds(
            table, args.soft_quantile, args.gmm_quantile
        )
        references[mode.name] = ValidationReference(
            soft_scores=table.softmax_conf,
            entropies=table.gmm_posterior_entropy,
        )
        thr = thresholds[mode.name]
        print(f"mode {mode.name}: tau_soft={thr.tau_soft:.6g} tau_gmm={thr.tau_gmm:.6g} "
              f"({len(table)} validation detections)")

    bundle.profile = profile
    bundle.thresholds = thresholds
    bundle.references = references
    bundle.fit_summary = dict(bundle.fit_summary)
    bundle.fit_summary["calibration"] = {
        "val_checksum": _dataset_checksum(Path(args.val)),
        "match_floor": args.match_floor,
        "soft_quantile": args.soft_quantile,
        "gmm_quantile": args.gmm_quantile,
        "nll_model": {"before": nll_model_before, "after": nll_model_after},
        "nll_gmm": {"before": nll_gmm_before, "after": nll_gmm_after},
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_models(bundle, out / "models_calibrated.json")
    print(f"wrote {out / 'models_calibrated.json'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    closed_test = read_dataset(args.closed_test)
    open_test = read_dataset(args.open_test)
    bundle = load_models(Path(args.models))

    modes = args.modes.split(",") if isinstance(args.modes, str) else list(args.modes)
    scores = args.scores.split(",") if isinstance(args.scores, str) else list(args.scores)
    for mode in modes:
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    for score in scores:
        if score not in scoring.ALL_SCORES:
            raise ConfigurationError(
                f"unknown score {score!r}; expected one of {scoring.ALL_SCORES}"
            )

    profile = bundle.profile
    if profile is None:
        if any(m in ("temp", "pruned_temp") for m in modes):
            raise ConfigurationError(
                "model bundle has no calibration profile; run calibrate first or "
                "restrict --modes to raw,pruned"
            )
        profile = CalibrationProfile(prune_threshold=args.prune_threshold)

    matrix = calibration.build_mode_matrix(
        profile.t_model, profile.t_gmm, profile.prune_threshold
    )
    single_eval = DensityEvaluator(bundle.single)
    multi_eval = DensityEvaluator(bundle.multi)

    reports = []
    for mode_name in modes:
        mode = matrix[mode_name]
        thresholds = (bundle.thresholds or {}).get(mode_name)
        reference = (bundle.references or {}).get(mode_name)
        reports.extend(metrics.evaluate_mode(
            closed_test, open_test, single_eval, multi_eval, mode, scores,
            thresholds=thresholds, reference=reference,
            prune_threshold=profile.prune_threshold,
            match_floor=args.match_floor,
            map_confidence=args.map_confidence,
            include_roc=args.roc_points,
        ))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "reports": [r.to_json_dict() for r in reports],
        "inputs": {
            "closed_test": str(args.closed_test),
            "open_test": str(args.open_test),
            "models": str(args.models),
            "modes": modes,
            "scores": scores,
            "match_floor": args.match_floor,
            "map_confidence": args.map_confidence,
        },
    }
    (out / "reports.json").write_text(canonical_json(payload), encoding="utf-8")
    (out / "reports.csv").write_text(metrics.reports_to_csv(reports), encoding="utf-8")
    for r in reports:
        auroc_txt = "absent" if r.auroc is None else f"{r.auroc:.4f}"
        bd_txt = "absent" if r.auroc_bd is None else f"{r.auroc_bd:.4f}"
        print(f"{r.mode:12s} {r.score:22s} auroc={auroc_txt} auroc_bd={bd_txt}")
    print(f"wrote {out / 'reports.json'} and {out / 'reports.csv'}")
    return EXIT_OK


_SYNTH_FLAG_FIELDS = {
    "classes": "num_id_classes",
    "train_per_class": "train_per_class",
    "val_per_class": "val_per_class",
    "test_per_class": "test_per_class",
    "dim": "embedding_dim",
    "separation": "separation",
    "ood_offset": "ood_offset",
    "ood_spread": "ood_spread",
    "ood_count": "ood_count",
    "closed_background": "closed_background_count",
    "open_background": "open_background_count",
    "junk_fraction": "junk_fraction",
    "logit_scale": "logit_scale",
    "logit_noise": "logit_noise",
    "ood_logit_scale": "ood_logit_scale",
    "seed": "seed",
}


def cmd_synth(args) -> int:
    fields = {}
    if args.spec is not None:
        try:
            raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"spec file unreadable: {exc}") from exc
        known = {f.name for f in dataclasses.fields(synthgen.SynthSpec)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"spec file has unknown fields: {unknown}")
        fields.update(raw)
    for flag, field_name in _SYNTH_FLAG_FIELDS.items():
        value = getattr(args, flag)
        if value is not None:
            fields[field_name] = value
    spec = synthgen.SynthSpec(**fields)
    datasets = synthgen.generate(spec)
    out = Path(args.out)
    for split, dataset in datasets.items():
        write_dataset(dataset.manifest, dataset.detections, dataset.ground_truth,
                      out / split)
        print(f"{split}: {len(dataset.detections)} detections, "
              f"{len(dataset.ground_truth)} ground-truth boxes -> {out / split}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osgate",
        description="Calibrated open-set gating over serialized detector outputs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a seeded synthetic benchmark")
    synth.add_argument("--out", required=True)
    synth.add_argument("--spec", default=None,
                       help="JSON file of generator fields; flags override it")
    synth.add_argument("--seed", type=int, default=None)
    synth.add_argument("--classes", type=int, default=None)
    synth.add_argument("--train-per-class", type=int, default=None)
    synth.add_argument("--val-per-class", type=int, default=None)
    synth.add_argument("--test-per-class", type=int, default=None)
    synth.add_argument("--dim", type=int, default=None)
    synth.add_argument("--separation", type=float, default=None)
    synth.add_argument("--ood-offset", type=float, default=None)
    synth.add_argument("--ood-spread", type=float, default=None)
    synth.add_argument("--ood-count", type=int, default=None)
    synth.add_argument("--closed-background", type=int, default=None)
    synth.add_argument("--open-background", type=int, default=None)
    synth.add_argument("--junk-fraction", type=float, default=None)
    synth.add_argument("--logit-scale", type=float, default=None)
    synth.add_argument("--logit-noise", type=float, default=None)
    synth.add_argument("--ood-logit-scale", type=float, default=None)
    synth.set_defaults(func=cmd_synth)

    fit = sub.add_parser("fit", help="fit per-class density models on a train split")
    fit.add_argument("--train", required=True)
    fit.add_argument("--out", required=True)
    fit.add_argument("--k", type=int, choices=(1, 2, 3, 4), default=3)
    fit.add_argument("--jitter", type=float, default=1e-6)
    fit.add_argument("--match-floor", type=float, default=0.5)
    fit.add_argument("--seed", type=int, default=0)
    fit.set_defaults(func=cmd_fit)

    cal = sub.add_parser("calibrate", help="learn temperatures and joint thresholds")
    cal.add_argument("--val", required=True)
    cal.add_argument("--models", required=True)
    cal.add_argument("--out", required=True)
    cal.add_argument("--prune-threshold", type=float, default=0.2)
    cal.add_argument("--soft-quantile", type=float, default=0.05)
    cal.add_argument("--gmm-quantile", type=float, default=0.95)
    cal.add_argument("--match-floor", type=float, default=0.5)
    cal.set_defaults(func=cmd_calibrate)

    ev = sub.add_parser("evaluate", help="per-mode open-set metrics and reports")
    ev.add_argument("--closed-test", required=True)
    ev.add_argument("--open-test", required=True)
    ev.add_argument("--models", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--modes", default=",".join(MODES))
    ev.add_argument("--scores", default=",".join(scoring.ALL_SCORES))
    ev.add_argument("--match-floor", type=float, default=0.5)
    ev.add_argument("--prune-threshold", type=float, default=0.2,
                    help="used only when the bundle carries no profile")
    ev.add_argument("--map-confidence", choices=("detector", "softmax"),
                    default="detector")
    ev.add_argument("--roc-points", action="store_true",
                    help="embed ROC curve points in reports.json")
    ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, OsgateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
