"""Command-line interface for lcgap.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Diagnostics go to stderr; stdout gets a one-line summary.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import config as C
from .data import DataError, parse_dataset
from .descriptors import auto_max_occupancy
from .evaluation import (
    export_contributions,
    run_cross_validation,
    run_multi_property,
    run_transferability,
    write_contributions_csv,
    write_predictions_csv,
    write_report,
    MoleculeResult,
    ContributionRecord,
)
from .hyperopt import grid_search, optimize_kernel_params, write_trace_csv
from .modelfile import ModelFormatError, load_model, save_model
from .regression import NumericalError, predict_dataset, train

log = logging.getLogger("lcgap")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _load_dataset(cfg):
    path = cfg["dataset"]["path"]
    if path is None:
        raise C.ConfigError("dataset.path: no dataset given (config file or --dataset)")
    return parse_dataset(path, cfg["dataset"]["format"])


def _sized_descriptor(cfg, *datasets):
    desc = C.descriptor_config(cfg)
    if cfg["descriptor"]["max_occupancy"] is None:
        desc = desc.with_occupancy(
            auto_max_occupancy(list(datasets), desc, cfg["descriptor"]["headroom"])
        )
    return desc


def _out_dir(cfg) -> Path:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def cmd_train(cfg, args) -> str:
    d = _load_dataset(cfg)
    target = cfg["target"]
    missing = [m.id for m in d if target not in m.properties]
    if missing:
        raise DataError(f"property {target!r} missing on molecule {missing[0]!r}")
    start = time.perf_counter()
    desc = _sized_descriptor(cfg, d)
    kp, noise = C.kernel_params(cfg), C.noise_model(cfg)
    if cfg["kernel"]["optimize"] != "none":
        kp, noise, _ = optimize_kernel_params(
            d, target, desc, kp, noise, optimize_noise=cfg["noise"]["optimize"], return_noise=True
        )
    model = train(d, target, desc, kp, noise)
    out = _out_dir(cfg)
    model_path = Path(cfg["output"]["model"] or out / "model.json")
    checksum = save_model(model, model_path)
    summary = {
        "n_train": model.n_train,
        "max_occupancy": desc.max_occupancy,
        "applied_jitter": model.applied_jitter,
        "nll": model.nll,
        "kernel": {"sigma": kp.sigma, "length_scale": kp.length_scale},
        "noise": {"sigma_n": noise.sigma_n},
        "checksum": checksum,
        "config": cfg,
    }
    _write_json(out / "train_summary.json", summary)
    log.info("training took %.2f s", time.perf_counter() - start)
    return (f"trained {model.n_train} molecules, m={desc.max_occupancy}, "
            f"jitter={model.applied_jitter:.3g}, nll={model.nll:.6g} -> {model_path}")


def cmd_predict(cfg, args) -> str:
    try:
        model = load_model(args.model)
    except (OSError, ModelFormatError) as exc:
        raise DataError(str(exc)) from None
    d = parse_dataset(args.data, cfg["dataset"]["format"])
    preds = predict_dataset(model, d)
    target = model.target_name
    have_target = all(target in m.properties for m in d)
    out = Path(args.out) if args.out else _out_dir(cfg) / "predictions.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    if have_target:
        rows = [MoleculeResult(m.id, m.properties[target], p.total, abs(m.properties[target] - p.total))
                for m, p in zip(d, preds)]
        write_predictions_csv(rows, out)
    else:
        with open(out, "w") as fh:
            fh.write("id,predicted\n")
            for m, p in zip(d, preds):
                fh.write(f"{m.id},{format(p.total, '.17g')}\n")
    if args.contributions:
        records = [
            ContributionRecord(m.id, i, int(z), c)
            for m, p in zip(d, preds)
            for i, (z, c) in enumerate(zip(m.atomic_numbers.tolist(), p.atomic_contributions.tolist()))
        ]
        write_contributions_csv(records, args.contributions)
    return f"predicted {len(d)} molecules -> {out}"


def cmd_cv(cfg, args) -> str:
    d = _load_dataset(cfg)
    desc = _sized_descriptor(cfg, d)
    kp, noise = C.kernel_params(cfg), C.noise_model(cfg)
    out = _out_dir(cfg)
    if cfg["targets"]:
        reports = run_multi_property(
            d, cfg["targets"], desc, kp, noise, k=cfg["cv"]["k"], seed=cfg["cv"]["seed"],
            workers=cfg["workers"],
        )
    else:
        reports = [run_cross_validation(
            d, cfg["target"], desc, kp, noise, k=cfg["cv"]["k"], seed=cfg["cv"]["seed"],
            optimize=cfg["kernel"]["optimize"], optimize_noise=cfg["noise"]["optimize"],
            workers=cfg["workers"],
        )]
    for r in reports:
        r.config_echo["run"] = cfg
        write_report(r, out)
    return "; ".join(
        f"cv {r.target_name}: mean MAE {r.mae:.6g} (+/- {r.fold_mae_std:.3g}) over {len(r.per_fold_maes)} folds"
        for r in reports
    )


def cmd_transfer(cfg, args) -> str:
    d = _load_dataset(cfg)
    desc = C.descriptor_config(cfg)
    auto = cfg["descriptor"]["max_occupancy"] is None
    report = run_transferability(
        d, cfg["target"], cfg["transfer"]["heavy_atoms"], desc,
        C.kernel_params(cfg), C.noise_model(cfg),
        optimize=cfg["kernel"]["optimize"] != "none",
        optimize_noise=cfg["noise"]["optimize"],
        auto_occupancy=auto, headroom=cfg["descriptor"]["headroom"],
        allow_degenerate=True,
    )
    report.config_echo["run"] = cfg
    write_report(report, _out_dir(cfg))
    if report.degenerate:
        return f"transfer: degenerate split ({report.train_size} train / 0 test), empty report written"
    return f"transfer: train {report.train_size} / test {report.test_size}, MAE {report.mae:.6g}"


def cmd_grid(cfg, args) -> str:
    d = _load_dataset(cfg)
    protocol = cfg["grid"]["protocol"]
    if protocol == "cv":
        pargs = {"k": cfg["cv"]["k"], "seed": cfg["cv"]["seed"], "optimize": cfg["kernel"]["optimize"],
                 "optimize_noise": cfg["noise"]["optimize"]}
    else:
        pargs = {"n": cfg["transfer"]["heavy_atoms"], "optimize_noise": cfg["noise"]["optimize"]}
    pargs["headroom"] = cfg["descriptor"]["headroom"]
    result = grid_search(
        d, cfg["target"], cfg["descriptor"]["kind"], C.hyper_grid(cfg), protocol, pargs,
        C.kernel_params(cfg), C.noise_model(cfg),
        max_occupancy=cfg["descriptor"]["max_occupancy"], workers=cfg["workers"],
    )
    out = _out_dir(cfg)
    write_trace_csv(result, out / "grid_trace.csv")
    doc = result.to_dict()
    doc["config"] = cfg
    _write_json(out / "grid_result.json", doc)
    return (f"grid ({len(result.trace)} points): best alpha={result.best_alpha:g} "
            f"r_cut={result.best_r_cut:g} score={result.score:.6g}")


def cmd_contrib(cfg, args) -> str:
    out = _out_dir(cfg)
    bw = float(cfg["contrib"]["bin_width"])
    if args.model:
        try:
            model = load_model(args.model)
        except (OSError, ModelFormatError) as exc:
            raise DataError(str(exc)) from None
        d = _load_dataset(cfg)
        preds = predict_dataset(model, d)
        records = [
            ContributionRecord(m.id, i, int(z), c)
            for m, p in zip(d, preds)
            for i, (z, c) in enumerate(zip(m.atomic_numbers.tolist(), p.atomic_contributions.tolist()))
        ]
    else:
        d = _load_dataset(cfg)
        report = run_cross_validation(
            d, cfg["target"], _sized_descriptor(cfg, d), C.kernel_params(cfg), C.noise_model(cfg),
            k=cfg["cv"]["k"], seed=cfg["cv"]["seed"], optimize=cfg["kernel"]["optimize"],
            optimize_noise=cfg["noise"]["optimize"], workers=cfg["workers"],
        )
        report.config_echo["run"] = cfg
        write_report(report, out)
        records = report.contributions
    write_contributions_csv(records, out / "contributions.csv")
    summary = export_contributions(records, bw)
    summary["config"] = cfg
    _write_json(out / "contributions_summary.json", summary)
    mode = summary["elements"].get("H", {}).get("histogram", {}).get("mode_bin")
    return f"contrib: {len(records)} atomic contributions, H modal bin {mode}"


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "cv": cmd_cv,
    "transfer": cmd_transfer,
    "grid": cmd_grid,
    "contrib": cmd_contrib,
}


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML configuration file")
    common.add_argument("--dataset", help="dataset file (dataset.path)")
    common.add_argument("--format", choices=["extxyz", "csv_xyz"], help="dataset.format")
    common.add_argument("--target", help="property to learn")
    common.add_argument("--targets", help="comma-separated properties (cv: multi-property run)")
    common.add_argument("--kind", choices=["localized", "decaying", "reduced"], help="descriptor.kind")
    common.add_argument("--alpha", type=float, help="descriptor.alpha")
    common.add_argument("--r-cut", type=float, help="descriptor.r_cut")
    common.add_argument("--m", type=int, help="descriptor.max_occupancy (default: sized from data)")
    common.add_argument("--sigma", type=float, help="kernel.sigma (initial value when optimizing)")
    common.add_argument("--length-scale", type=float, help="kernel.length_scale")
    common.add_argument("--optimize", choices=["per_fold", "shared", "none"], help="kernel.optimize")
    common.add_argument("--noise", type=float, help="noise.sigma_n")
    common.add_argument("--k", type=int, help="cv.k")
    common.add_argument("--seed", type=int, help="cv.seed")
    common.add_argument("--heavy-atoms", type=int, help="transfer.heavy_atoms")
    common.add_argument("--alphas", type=_floats, help="grid.alphas, comma-separated")
    common.add_argument("--r-cuts", type=_floats, help="grid.r_cuts, comma-separated")
    common.add_argument("--protocol", choices=["cv", "transfer"], help="grid.protocol")
    common.add_argument("--bin-width", type=float, help="contrib.bin_width")
    common.add_argument("-o", "--out-dir", help="output.dir")
    common.add_argument("--workers", type=int, help="parallel workers (1 = serial)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lcgap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="train a model and write the model file")
    p.add_argument("--model-out", help="model file path (default <out-dir>/model.json)")
    p = sub.add_parser("predict", parents=[common], help="predict a dataset with a trained model")
    p.add_argument("model", help="model file")
    p.add_argument("data", help="dataset file")
    p.add_argument("--out", help="predictions CSV (default <out-dir>/predictions.csv)")
    p.add_argument("--contributions", help="also write per-atom contributions CSV here")
    sub.add_parser("cv", parents=[common], help="k-fold cross-validation")
    sub.add_parser("transfer", parents=[common], help="upward transferability")
    sub.add_parser("grid", parents=[common], help="grid search over (alpha, r_cut)")
    p = sub.add_parser("contrib", parents=[common], help="export per-atom contributions")
    p.add_argument("--model", help="use this model instead of running cross-validation")
    return parser


def _overrides(args) -> dict:
    targets = args.targets.split(",") if args.targets else None
    return {
        "dataset.path": args.dataset,
        "dataset.format": args.format,
        "target": args.target,
        "targets": targets,
        "descriptor.kind": args.kind,
        "descriptor.alpha": args.alpha,
        "descriptor.r_cut": args.r_cut,
        "descriptor.max_occupancy": args.m,
        "kernel.sigma": args.sigma,
        "kernel.length_scale": args.length_scale,
        "kernel.optimize": args.optimize,
        "noise.sigma_n": args.noise,
        "cv.k": args.k,
        "cv.seed": args.seed,
        "transfer.heavy_atoms": args.heavy_atoms,
        "grid.alphas": args.alphas,
        "grid.r_cuts": args.r_cuts,
        "grid.protocol": args.protocol,
        "contrib.bin_width": args.bin_width,
        "output.dir": args.out_dir,
        "output.model": getattr(args, "model_out", None),
        "workers": args.workers,
    }


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = C.load_config(args.config, _overrides(args))
        summary = COMMANDS[args.command](cfg, args)
    except C.ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (NumericalError, ArithmeticError, ValueError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
