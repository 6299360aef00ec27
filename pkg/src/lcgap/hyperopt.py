"""Two-level hyperparameter selection.

Kernel parameters (sigma, l) are fitted by minimizing the marginal NLL with
a shrinking log-space lattice; descriptor parameters (alpha, r_cut) are
chosen by grid search on a held-out error protocol.
"""

from __future__ import annotations

import csv
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .descriptors import DescriptorCache, DescriptorConfig
from .regression import (
    KernelParams,
    NoiseModel,
    NumericalError,
    nll_from_gram,
    training_groups,
    unit_gram,
)

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (3.0, 4.0, 5.0, 6.0, 7.0)
DEFAULT_R_CUTS = tuple(3.0 + 0.5 * i for i in range(9))


@dataclass(frozen=True)
class HyperGrid:
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    r_cuts: tuple[float, ...] = DEFAULT_R_CUTS

    def __post_init__(self):
        for name in ("alphas", "r_cuts"):
            axis = tuple(float(v) for v in getattr(self, name))
            if not axis:
                raise ValueError(f"grid axis {name} is empty")
            if any(v <= 0 for v in axis):
                raise ValueError(f"grid axis {name} must be positive")
            if any(b <= a for a, b in zip(axis, axis[1:])):
                raise ValueError(f"grid axis {name} must be strictly increasing")
            object.__setattr__(self, name, axis)

    def points(self):
        return list(itertools.product(self.alphas, self.r_cuts))


@dataclass(frozen=True)
class TracePoint:
    alpha: float
    r_cut: float
    kernel: KernelParams | None
    noise: NoiseModel | None
    score: float
    status: str = "ok"
    max_occupancy: int | None = None


@dataclass(frozen=True)
class HyperResult:
    best_alpha: float
    best_r_cut: float
    best_kernel: KernelParams
    best_noise: NoiseModel
    score: float
    trace: tuple[TracePoint, ...] = field(default_factory=tuple)

    def to_dict(self):
        return {
            "best_alpha": self.best_alpha,
            "best_r_cut": self.best_r_cut,
            "best_kernel": {"sigma": self.best_kernel.sigma, "length_scale": self.best_kernel.length_scale},
            "best_noise": {"sigma_n": self.best_noise.sigma_n},
            "score": self.score,
            "trace": [_trace_row(t) for t in self.trace],
        }


def _trace_row(t: TracePoint) -> dict:
    return {
        "alpha": t.alpha,
        "r_cut": t.r_cut,
        "sigma": t.kernel.sigma if t.kernel else None,
        "length_scale": t.kernel.length_scale if t.kernel else None,
        "noise": t.noise.sigma_n if t.noise else None,
        "score": t.score,
        "status": t.status,
    }


def optimize_kernel_params(
    d: Dataset,
    target: str,
    cfg: DescriptorConfig,
    init: KernelParams,
    noise: NoiseModel,
    optimize_noise: bool = False,
    rounds: int = 4,
    points: int = 7,
    span_decades: float = 2.0,
    cache: DescriptorCache | None = None,
    return_noise: bool = False,
):
    """Minimize the training-set NLL over (log sigma, log l).

    Each round evaluates a ``points`` x ``points`` lattice, log-spaced over
    ``span_decades`` decades either side of the current best; the span is
    halved between rounds. The lattice always contains its centre, so the
    result never has a higher NLL than ``init``. With ``optimize_noise`` the
    noise level joins as a third lattice axis (requires ``sigma_n > 0``).
    """
    y = d.targets(target)
    groups = training_groups(d, cfg, cache)
    if optimize_noise and noise.sigma_n <= 0:
        raise ValueError("noise optimization needs a positive initial sigma_n")

    grams: dict[float, np.ndarray] = {}
    best = None  # (nll, log_sigma, log_l, log_noise)
    center = np.log10([init.sigma, init.length_scale, max(noise.sigma_n, 1e-300)])
    span = span_decades
    offsets = np.linspace(-1.0, 1.0, points)
    for r in range(rounds):
        ls_axis = center[1] + span * offsets
        sg_axis = center[0] + span * offsets
        nz_axis = center[2] + span * offsets if optimize_noise else [center[2]]
        for log_l in ls_axis:
            l = float(10.0**log_l)
            if l not in grams:
                grams[l] = unit_gram(groups, l)
            G = grams[l]
            for log_s, log_n in itertools.product(sg_axis, nz_axis):
                kp = KernelParams(float(10.0**log_s), l)
                nm = NoiseModel(float(10.0**log_n)) if optimize_noise else noise
                try:
                    value, _ = nll_from_gram(G, y, kp, nm)
                except NumericalError:
                    continue
                if not np.isfinite(value):
                    continue
                if best is None or value < best[0]:
                    best = (value, log_s, log_l, log_n)
        if best is None:
            raise NumericalError("NLL evaluation failed at every lattice point")
        center = np.array(best[1:])
        span /= 2.0
        log.debug("round %d: nll=%.6g sigma=%.4g l=%.4g", r, best[0], 10 ** best[1], 10 ** best[2])
        # release grams that cannot be revisited next round
        grams = {}
    kp = KernelParams(float(10.0 ** best[1]), float(10.0 ** best[2]))
    if return_noise:
        nm = NoiseModel(float(10.0 ** best[3])) if optimize_noise else noise
        return kp, nm, best[0]
    return kp


def _evaluate_point(args):
    (alpha, r_cut), d, target, kind, protocol, protocol_args, kp_init, noise, m_override = args
    from . import evaluation  # deferred: evaluation imports this module

    cfg = DescriptorConfig(kind, alpha, r_cut, m_override or 1)
    auto = m_override is None
    try:
        if protocol == "cv":
            report = evaluation.run_cross_validation(
                d, target, cfg, kp_init, noise,
                k=protocol_args.get("k", 5),
                seed=protocol_args.get("seed", 0),
                optimize=protocol_args.get("optimize", "per_fold"),
                optimize_noise=protocol_args.get("optimize_noise", False),
                auto_occupancy=auto,
                headroom=protocol_args.get("headroom", 2),
            )
        elif protocol == "transfer":
            report = evaluation.run_transferability(
                d, target, protocol_args["n"], cfg, kp_init, noise,
                optimize_noise=protocol_args.get("optimize_noise", False),
                auto_occupancy=auto,
                headroom=protocol_args.get("headroom", 2),
            )
        else:
            raise ValueError(f"unknown protocol {protocol!r}")
    except (NumericalError, ValueError) as exc:
        log.warning("grid point alpha=%g r_cut=%g failed: %s", alpha, r_cut, exc)
        return TracePoint(alpha, r_cut, None, None, float("nan"), f"failed: {exc}")
    # per-fold kernels are summarized by their geometric mean
    sigma = float(np.exp(np.mean([np.log(k.sigma) for k in report.kernels])))
    length = float(np.exp(np.mean([np.log(k.length_scale) for k in report.kernels])))
    return TracePoint(
        alpha, r_cut, KernelParams(sigma, length), report.noise, report.mae, "ok",
        report.config_echo["descriptor"]["max_occupancy"],
    )


def grid_search(
    d: Dataset,
    target: str,
    kind: str,
    grid: HyperGrid,
    protocol: str = "cv",
    protocol_args: dict | None = None,
    kp_init: KernelParams | None = None,
    noise: NoiseModel | None = None,
    max_occupancy: int | None = None,
    workers: int = 1,
) -> HyperResult:
    """Evaluate every (alpha, r_cut) pair and return the lowest-MAE point.

    ``protocol`` is ``"cv"`` (mean fold MAE; ``protocol_args`` may carry ``k``
    and ``seed``) or ``"transfer"`` (``protocol_args["n"]`` is the heavy-atom
    bound of the training subset). Failed points stay in the trace with NaN
    score. Ties go to the first point in alpha-major order.
    """
    protocol_args = dict(protocol_args or {})
    kp_init = kp_init or KernelParams()
    noise = noise or NoiseModel()
    jobs = [
        (pt, d, target, kind, protocol, protocol_args, kp_init, noise, max_occupancy)
        for pt in grid.points()
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trace = list(pool.map(_evaluate_point, jobs))
    else:
        trace = [_evaluate_point(j) for j in jobs]

    ok = [t for t in trace if t.status == "ok" and np.isfinite(t.score)]
    if not ok:
        raise NumericalError("every grid point failed")
    winner = ok[0]
    for t in ok[1:]:
        if t.score < winner.score:
            winner = t
    return HyperResult(
        winner.alpha, winner.r_cut, winner.kernel, winner.noise, winner.score, tuple(trace)
    )


def write_trace_csv(result: HyperResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "r_cut", "sigma", "length_scale", "noise", "score", "status"])
        for t in result.trace:
            row = _trace_row(t)
            w.writerow(
                ["" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k])
                 for k in ("alpha", "r_cut", "sigma", "length_scale", "noise", "score", "status")]
            )
