"""Experiment protocols: cross-validation, upward transferability,
multi-property runs, and export of per-atom contributions."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, DataError, element_symbol, make_folds, transferability_split
from .descriptors import DEFAULT_HEADROOM, DescriptorCache, DescriptorConfig, auto_max_occupancy
from .hyperopt import optimize_kernel_params
from .regression import KernelParams, NoiseModel, predict_dataset, sum_contributions, train

log = logging.getLogger(__name__)

OPTIMIZE_MODES = ("per_fold", "shared", "none")


class DegenerateSplitError(DataError):
    pass


@dataclass(frozen=True)
class MoleculeResult:
    id: str
    actual: float
    predicted: float
    absolute_error: float
    fold: int | None = None


@dataclass(frozen=True)
class ContributionRecord:
    molecule_id: str
    atom_index: int
    atomic_number: int
    contribution: float

    @property
    def element(self) -> str:
        return element_symbol(self.atomic_number)


@dataclass
class EvaluationReport:
    protocol: str
    target_name: str
    per_molecule: list[MoleculeResult]
    mae: float
    per_fold_maes: list[float] | None = None
    config_echo: dict = field(default_factory=dict)
    contributions: list[ContributionRecord] = field(default_factory=list)
    kernels: list[KernelParams] = field(default_factory=list)
    noise: NoiseModel | None = None
    train_size: int | None = None
    test_size: int | None = None
    degenerate: bool = False

    @property
    def pooled_mae(self) -> float:
        if not self.per_molecule:
            return float("nan")
        return mae([r.actual for r in self.per_molecule], [r.predicted for r in self.per_molecule])

    @property
    def fold_mae_std(self) -> float | None:
        if not self.per_fold_maes:
            return None
        return float(np.std(self.per_fold_maes, ddof=1)) if len(self.per_fold_maes) > 1 else 0.0

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "target_name": self.target_name,
            "mae": _num(self.mae),
            "pooled_mae": _num(self.pooled_mae),
            "per_fold_maes": None if self.per_fold_maes is None else [_num(v) for v in self.per_fold_maes],
            "fold_mae_std": _num(self.fold_mae_std),
            "train_size": self.train_size,
            "test_size": self.test_size,
            "degenerate": self.degenerate,
            "config_echo": self.config_echo,
            "per_molecule": [
                {
                    "id": r.id,
                    "actual": r.actual,
                    "predicted": r.predicted,
                    "abs_error": r.absolute_error,
                    "fold": r.fold,
                }
                for r in self.per_molecule
            ],
        }


def _num(x):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return None
    return float(x)


def mae(actual: Sequence[float], predicted: Sequence[float]) -> float:
    actual = np.asarray(actual, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if actual.shape != predicted.shape:
        raise ValueError(f"length mismatch: {actual.shape} vs {predicted.shape}")
    if actual.size == 0:
        raise ValueError("MAE of an empty sequence")
    return float(np.mean(np.abs(actual - predicted)))


def _echo(cfg, kp, noise, target, **extra) -> dict:
    echo = {
        "descriptor": cfg.to_dict(),
        "kernel_init": {"sigma": kp.sigma, "length_scale": kp.length_scale},
        "noise": {"sigma_n": noise.sigma_n},
        "target_name": target,
    }
    echo.update(extra)
    return echo


def _fit_and_predict(train_set, test_set, target, cfg, kp, noise, optimize, optimize_noise, cache):
    if optimize:
        kp, noise, _ = optimize_kernel_params(
            train_set, target, cfg, kp, noise,
            optimize_noise=optimize_noise, cache=cache, return_noise=True,
        )
    model = train(train_set, target, cfg, kp, noise, cache=cache)
    preds = predict_dataset(model, test_set, cache=cache) if len(test_set) else []
    return model, preds


def _records(test_set, target, preds, fold=None):
    rows, contribs = [], []
    for mol, p in zip(test_set, preds):
        actual = mol.target(target)
        rows.append(MoleculeResult(mol.id, actual, p.total, abs(actual - p.total), fold))
        for i, (z, c) in enumerate(zip(mol.atomic_numbers.tolist(), p.atomic_contributions.tolist())):
            contribs.append(ContributionRecord(mol.id, i, int(z), c))
    return rows, contribs


def _run_fold(args):
    fold, d, folds, target, cfg, kp, noise, optimize, optimize_noise, cache = args
    train_set = d.select(folds.train_indices(fold))
    test_set = d.select(folds.test_indices(fold))
    try:
        model, preds = _fit_and_predict(
            train_set, test_set, target, cfg, kp, noise, optimize, optimize_noise,
            cache if cache is not None else DescriptorCache(),
        )
    except Exception as exc:
        exc.args = (f"fold {fold}: {exc}",) + exc.args[1:]
        raise
    rows, contribs = _records(test_set, target, preds, fold)
    return model.kernel, model.noise, model.applied_jitter, rows, contribs


def run_cross_validation(
    d: Dataset,
    target: str,
    cfg: DescriptorConfig,
    kp_init: KernelParams,
    noise: NoiseModel,
    k: int = 5,
    seed: int = 0,
    optimize: str = "per_fold",
    optimize_noise: bool = False,
    auto_occupancy: bool = False,
    headroom: int = DEFAULT_HEADROOM,
    workers: int = 1,
) -> EvaluationReport:
    """k-fold cross-validation; the reported MAE is the mean of fold MAEs.

    ``optimize`` selects where kernel parameters are fitted: on every
    fold's training split (``"per_fold"``, the reference protocol), once on
    the whole dataset (``"shared"``, cheaper, labelled non-canonical in the
    report) or not at all (``"none"``, use ``kp_init`` as given).
    """
    if optimize not in OPTIMIZE_MODES:
        raise ValueError(f"optimize must be one of {OPTIMIZE_MODES}")
    missing = [m.id for m in d if target not in m.properties]
    if missing:
        raise DataError(f"property {target!r} missing on {len(missing)} molecules, e.g. {missing[0]!r}")
    if auto_occupancy:
        cfg = cfg.with_occupancy(auto_max_occupancy(d, cfg, headroom))
    folds = make_folds(d, k, seed)
    kp, nm = kp_init, noise
    cache = DescriptorCache()
    if optimize == "shared":
        kp, nm, _ = optimize_kernel_params(
            d, target, cfg, kp_init, noise, optimize_noise=optimize_noise,
            cache=cache, return_noise=True,
        )
    per_fold = optimize == "per_fold"
    if workers > 1:
        jobs = [(f, d, folds, target, cfg, kp, nm, per_fold, optimize_noise, None) for f in range(k)]
        with ProcessPoolExecutor(max_workers=min(workers, k)) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [
            _run_fold((f, d, folds, target, cfg, kp, nm, per_fold, optimize_noise, cache))
            for f in range(k)
        ]

    rows, contribs, fold_maes, kernels, jitters = [], [], [], [], []
    for kernel, fold_noise, jitter, fold_rows, fold_contribs in results:
        rows += fold_rows
        contribs += fold_contribs
        kernels.append(kernel)
        jitters.append(jitter)
        fold_maes.append(mae([r.actual for r in fold_rows], [r.predicted for r in fold_rows]))
    echo = _echo(
        cfg, kp_init, noise, target,
        protocol="cv", k=k, seed=seed, optimize=optimize,
        canonical=optimize == "per_fold",
        optimize_noise=optimize_noise,
        length_unit=d.length_unit,
        fold_kernels=[{"sigma": kp.sigma, "length_scale": kp.length_scale} for kp in kernels],
        fold_noise=[r[1].sigma_n for r in results],
        applied_jitter=jitters,
    )
    return EvaluationReport(
        "cv", target, rows, float(np.mean(fold_maes)), fold_maes, echo, contribs,
        kernels, results[0][1], len(d), len(d),
    )


def run_transferability(
    d: Dataset,
    target: str,
    n: int,
    cfg: DescriptorConfig,
    kp_init: KernelParams,
    noise: NoiseModel,
    optimize: bool = True,
    optimize_noise: bool = False,
    auto_occupancy: bool = False,
    headroom: int = DEFAULT_HEADROOM,
    allow_degenerate: bool = False,
) -> EvaluationReport:
    """Train on molecules with at most ``n`` heavy atoms, predict the rest.

    With ``auto_occupancy`` the maximum occupancy is sized over both sides of
    the split, since every predicted system must fit the descriptor.
    """
    train_set, test_set = transferability_split(d, n)
    degenerate = len(train_set) == 0 or len(test_set) == 0
    if auto_occupancy:
        cfg = cfg.with_occupancy(auto_max_occupancy([train_set, test_set], cfg, headroom))
    echo_extra = dict(protocol="transfer", heavy_atom_bound=n, optimize=optimize,
                      optimize_noise=optimize_noise, length_unit=d.length_unit)
    if degenerate:
        msg = f"degenerate split at n={n}: {len(train_set)} train / {len(test_set)} test"
        if not allow_degenerate or len(train_set) == 0:
            raise DegenerateSplitError(msg)
        log.warning(msg)
        return EvaluationReport(
            "transfer", target, [], float("nan"), None,
            _echo(cfg, kp_init, noise, target, **echo_extra, degenerate=msg),
            train_size=len(train_set), test_size=0, degenerate=True, noise=noise,
        )
    cache = DescriptorCache()
    model, preds = _fit_and_predict(
        train_set, test_set, target, cfg, kp_init, noise, optimize, optimize_noise, cache
    )
    rows, contribs = _records(test_set, target, preds)
    echo = _echo(
        cfg, kp_init, noise, target, **echo_extra,
        kernel={"sigma": model.kernel.sigma, "length_scale": model.kernel.length_scale},
        fitted_noise=model.noise.sigma_n,
        applied_jitter=model.applied_jitter,
    )
    return EvaluationReport(
        "transfer", target, rows,
        mae([r.actual for r in rows], [r.predicted for r in rows]),
        None, echo, contribs, [model.kernel], model.noise, len(train_set), len(test_set),
    )


def run_multi_property(
    d: Dataset,
    targets: Sequence[str],
    cfg: DescriptorConfig,
    kp: KernelParams,
    noise: NoiseModel,
    k: int = 5,
    seed: int = 0,
    workers: int = 1,
) -> list[EvaluationReport]:
    """One CV report per target, all sharing one fixed configuration."""
    for t in targets:
        missing = [m.id for m in d if t not in m.properties]
        if missing:
            raise DataError(f"property {t!r} missing on {len(missing)} molecules, e.g. {missing[0]!r}")
    return [
        run_cross_validation(d, t, cfg, kp, noise, k=k, seed=seed, optimize="none", workers=workers)
        for t in targets
    ]


# ---------------------------------------------------------------------------
# contributions


def contributions_from_model(model, d: Dataset) -> list[ContributionRecord]:
    return [
        ContributionRecord(mol.id, i, int(z), c)
        for mol, p in zip(d, predict_dataset(model, d))
        for i, (z, c) in enumerate(zip(mol.atomic_numbers.tolist(), p.atomic_contributions.tolist()))
    ]


def histogram(values: Sequence[float], bin_width: float) -> dict:
    """Fixed-width histogram with edges on integer multiples of ``bin_width``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"edges": [], "counts": [], "mode_bin": None}
    lo = math.floor(v.min() / bin_width)
    hi = math.floor(v.max() / bin_width) + 1
    edges = np.arange(lo, hi + 1) * bin_width
    idx = np.clip(np.floor(v / bin_width).astype(np.int64) - lo, 0, hi - lo - 1)
    counts = np.bincount(idx, minlength=hi - lo)
    top = int(np.argmax(counts))
    return {
        "edges": edges.tolist(),
        "counts": counts.tolist(),
        "mode_bin": [float(edges[top]), float(edges[top + 1])],
    }


def export_contributions(records: Sequence[ContributionRecord], bin_width: float = 2.0) -> dict:
    """Histogram summary of per-atom contributions, overall and per element."""
    by_element = defaultdict(list)
    for r in sorted(records, key=lambda r: r.atomic_number):
        by_element[r.element].append(r.contribution)
    summary = {
        "bin_width": bin_width,
        "count": len(records),
        "overall": histogram([r.contribution for r in records], bin_width),
        "elements": {},
    }
    for el in by_element:
        vals = np.asarray(by_element[el])
        summary["elements"][el] = {
            "count": int(vals.size),
            "min": float(vals.min()),
            "max": float(vals.max()),
            "mean": float(vals.mean()),
            "histogram": histogram(vals, bin_width),
        }
    return summary


def molecule_sums(records: Sequence[ContributionRecord]) -> dict[str, float]:
    parts = defaultdict(list)
    for r in records:
        parts[r.molecule_id].append(r.contribution)
    return {k: sum_contributions(np.asarray(v)) for k, v in parts.items()}


# ---------------------------------------------------------------------------
# files


def _g(x) -> str:
    return format(float(x), ".17g")


def write_report(report: EvaluationReport, out_dir, stem: str | None = None) -> dict[str, Path]:
    """Write ``<stem>.json``, ``<stem>_predictions.csv`` and ``<stem>_contributions.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{report.protocol}_{report.target_name}"
    paths = {
        "json": out / f"{stem}.json",
        "predictions": out / f"{stem}_predictions.csv",
        "contributions": out / f"{stem}_contributions.csv",
    }
    paths["json"].write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    write_predictions_csv(report.per_molecule, paths["predictions"])
    write_contributions_csv(report.contributions, paths["contributions"])
    return paths


def write_predictions_csv(rows: Sequence[MoleculeResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "actual", "predicted", "abs_error"])
        for r in rows:
            w.writerow([r.id, _g(r.actual), _g(r.predicted), _g(r.absolute_error)])


def write_contributions_csv(records: Sequence[ContributionRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["molecule_id", "atom_index", "element", "contribution"])
        for r in records:
            w.writerow([r.molecule_id, r.atom_index, r.element, _g(r.contribution)])
