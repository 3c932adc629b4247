"""Command line entry point: ``mortnet <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from mortnet import report as rep
from mortnet.attribution import attribute, group_sums
from mortnet.ingest import FEATURE_NAMES, build_cohort, load_cohort, read_records, standardize_apply, \
    write_records
from mortnet.layers import sigmoid
from mortnet.metrics import operating_point, roc_auc
from mortnet.model import ModelConfig, load_checkpoint
from mortnet.shapley import exact_shapley, model_game, organ_groups, per_channel_groups
from mortnet.synthetic import DEFAULT_SIGNAL, generate_synthetic_cohort, generate_synthetic_records
from mortnet.trainer import TrainConfig, cross_validate

log = logging.getLogger("mortnet")

TARGET_ALIASES = {"logit": "logit", "prob": "probability", "probability": "probability"}


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def _standardized(ckpt, grids):
    if ckpt.standardization is None:
        return np.asarray(grids, dtype=np.float64)
    return standardize_apply(grids, ckpt.standardization)


def cmd_ingest(args) -> int:
    records = read_records(args.patients, args.observations)
    cohort = build_cohort(records)
    cohort.save(args.out)
    print(f"{len(cohort)} patients ({int(cohort.labels.sum())} deaths) -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    if args.raw_dir:
        raw = Path(args.raw_dir)
        raw.mkdir(parents=True, exist_ok=True)
        records = generate_synthetic_records(args.n, args.seed, args.signal)
        write_records(records, raw / "patients.csv", raw / "observations.csv")
    cohort = generate_synthetic_cohort(args.n, args.seed, args.signal)
    cohort.save(args.out)
    print(f"{len(cohort)} synthetic patients, prevalence {cohort.labels.mean():.4f} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cohort = load_cohort(args.cohort)
    tc = TrainConfig(epochs=args.epochs, folds=args.folds, seed=args.seed, lr=args.lr,
                     batch_size=args.batch_size, patience=args.patience if args.patience > 0 else None)
    mc = ModelConfig(seed=args.seed)
    t0 = time.perf_counter()
    reports = cross_validate(cohort, mc, tc, args.out)
    aucs = np.array([r.val_auc for r in reports])
    for r in reports:
        print(f"fold {r.fold_index}: val AUC {r.val_auc:.4f}  sens {r.sensitivity:.4f}  "
              f"spec {r.specificity:.4f}")
    print(f"mean val AUC {aucs.mean():.4f} (std {aucs.std():.4f}) in {time.perf_counter() - t0:.1f}s")
    summary = {"val_auc": aucs.tolist(), "mean_val_auc": float(aucs.mean()),
               "std_val_auc": float(aucs.std()), "train_config": tc.__dict__, "model_config": mc.to_dict()}
    _write_json(Path(args.out) / "summary.json", summary)
    return 0


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cohort = load_cohort(args.cohort)
    x = _standardized(ckpt, cohort.grids)
    p = np.concatenate([sigmoid(ckpt.network.forward(x[i:i + 512], logits=True))
                        for i in range(0, len(x), 512)])
    sens, spec = operating_point(p, cohort.labels, args.threshold)
    out = {"auc": roc_auc(p, cohort.labels), "sensitivity": sens, "specificity": spec,
           "threshold": args.threshold, "n": len(cohort)}
    print(json.dumps(out, sort_keys=True))
    return 0


def _patient_input(args):
    ckpt = load_checkpoint(args.checkpoint)
    cohort = load_cohort(args.cohort)
    idx = cohort.index_of(args.patient)
    x = _standardized(ckpt, cohort.grids[idx:idx + 1])[0]
    return ckpt, cohort, idx, x


def cmd_attribute(args) -> int:
    ckpt, cohort, idx, x = _patient_input(args)
    amap = attribute(ckpt.network, x, target=TARGET_ALIASES[args.target])
    amap.patient_id = cohort.patient_ids[idx]
    _write_json(args.out, rep.map_to_dict(amap, FEATURE_NAMES, int(cohort.labels[idx])))
    print(f"patient {amap.patient_id}: delta {amap.delta_t:+.6f}, residual {amap.residual:.2e}",
          file=sys.stderr)
    return 0


def cmd_verify_shapley(args) -> int:
    ckpt, cohort, idx, x = _patient_input(args)
    target = TARGET_ALIASES[args.target]
    if args.groups == "per-channel":
        groups = per_channel_groups(x.shape)
        names = list(FEATURE_NAMES)
    else:
        names, groups = organ_groups(x.shape)
    game = model_game(ckpt.network, x, np.zeros_like(x), groups, target, precompute=True)
    t0 = time.perf_counter()
    exact = exact_shapley(game, max_players=args.max_players)
    amap = attribute(ckpt.network, x, target=target)
    deeplift = group_sums(amap.contributions, groups)
    diff = deeplift - exact.values
    corr = float(np.corrcoef(deeplift, exact.values)[0, 1]) \
        if np.std(deeplift) > 0 and np.std(exact.values) > 0 else float("nan")
    big = np.abs(exact.values) > np.percentile(np.abs(exact.values), 25)
    out = {"patient_id": cohort.patient_ids[idx], "target": target, "groups": names,
           "exact_shapley": exact.values.tolist(), "deeplift": deeplift.tolist(),
           "efficiency_residual": exact.efficiency_residual, "grand_worth": exact.grand_worth,
           "deeplift_delta_t": amap.delta_t,
           "disagreement": {"max_abs": float(np.max(np.abs(diff))), "mean_abs": float(np.mean(np.abs(diff))),
                            "pearson": corr,
                            "sign_agreement": float(np.mean(np.sign(deeplift[big]) == np.sign(exact.values[big])))
                            if big.any() else float("nan")},
           "seconds": time.perf_counter() - t0}
    _write_json(args.out, out)
    return 0


def _load_maps(directory):
    maps = []
    for path in sorted(Path(directory).glob("*.json")):
        d = json.loads(path.read_text(encoding="utf-8"))
        if "contributions" in d:
            maps.append(rep.map_from_dict(d))
    if not maps:
        raise SystemExit(f"no attribution maps found in {directory}")
    return maps


def _read_labels(path) -> dict[str, int]:
    """CSV or JSON mapping patient id to the true label."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return {str(k): int(v) for k, v in json.loads(text).items()}
    labels = {}
    for line in text.splitlines():
        parts = [p.strip() for p in line.split(",")]
        if len(parts) >= 2 and parts[1] in ("0", "1"):
            labels[parts[0]] = int(parts[1])
    return labels


def cmd_report(args) -> int:
    maps = _load_maps(args.maps)
    if args.kind == "dataset":
        lookup = _read_labels(args.labels) if args.labels else {}
        labels = []
        for amap, embedded in maps:
            label = lookup.get(str(amap.patient_id), embedded)
            if label is None:
                raise SystemExit(f"no label for patient {amap.patient_id}")
            labels.append(label)
        obj = rep.dataset_importance([m for m, _ in maps], labels)
    else:
        if len(maps) != 1 and args.patient is None:
            raise SystemExit(f"{len(maps)} maps found; pick one with --patient")
        chosen = [m for m, _ in maps if args.patient is None or str(m.patient_id) == args.patient]
        if not chosen:
            raise SystemExit(f"no map for patient {args.patient}")
        amap = chosen[0]
        obj = {"marginal": rep.marginal_importance, "hourly": rep.hourly_importance,
               "posneg": rep.pos_neg_split}[args.kind](amap)
    rep.render(obj, args.format, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mortnet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="build a cohort container from raw CSV records")
    s.add_argument("--patients", required=True)
    s.add_argument("--observations", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--signal", type=float, default=DEFAULT_SIGNAL)
    s.add_argument("--raw-dir", help="also write patients.csv/observations.csv here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="k-fold cross-validated training")
    s.add_argument("--cohort", required=True)
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--patience", type=int, default=5, help="0 disables early stopping")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="AUC and operating point of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_evaluate)

    for name, fn in (("attribute", cmd_attribute), ("verify-shapley", cmd_verify_shapley)):
        s = sub.add_parser(name)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--cohort", required=True)
        s.add_argument("--patient", required=True)
        s.add_argument("--target", choices=sorted(TARGET_ALIASES), default="logit")
        s.add_argument("--out", default="-")
        s.set_defaults(func=fn)
        if name == "verify-shapley":
            s.add_argument("--groups", choices=("per-channel", "organ"), default="per-channel")
            s.add_argument("--max-players", type=int, default=22)

    s = sub.add_parser("report", help="render explanation artifacts from attribution maps")
    s.add_argument("--maps", required=True, help="directory of map JSON files")
    s.add_argument("--labels", help="CSV (patient_id,label) or JSON object of true labels")
    s.add_argument("--kind", choices=("marginal", "hourly", "posneg", "dataset"), required=True)
    s.add_argument("--format", choices=rep.FORMATS, default="json")
    s.add_argument("--patient", help="map to use for single-patient kinds")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
