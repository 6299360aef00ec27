"""Gaussian process regression with a molecule-level sum kernel.

A molecule's energy is modelled as the sum of per-atom contributions, each
a GP over the atom's neighborhood descriptor. The covariance between two
molecules is therefore the sum of the atom-level Laplacian kernel over all
cross pairs of atoms, and the GP is solved at molecule level with one
weight per training molecule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .data import Dataset, Molecule
from .descriptors import DescriptorCache, DescriptorConfig, molecule_descriptors

log = logging.getLogger(__name__)

# jitter multipliers of trace(K)/M, tried in order
JITTER_LADDER = (0.0,) + tuple(10.0**e for e in range(-10, -3))
# cap on atom-pair block size held in memory at once (float64 elements)
BLOCK_ELEMENTS = 1 << 24


class NumericalError(RuntimeError):
    """Covariance factorization failed even at the largest jitter."""

    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


@dataclass(frozen=True)
class KernelParams:
    sigma: float = 100.0
    length_scale: float = 10.0

    def __post_init__(self):
        if not (self.sigma > 0 and self.length_scale > 0):
            raise ValueError("kernel sigma and length_scale must be positive")
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "length_scale", float(self.length_scale))


@dataclass(frozen=True)
class NoiseModel:
    sigma_n: float = 0.1

    def __post_init__(self):
        if not self.sigma_n >= 0:
            raise ValueError("noise sigma_n must be non-negative")
        object.__setattr__(self, "sigma_n", float(self.sigma_n))


@dataclass(frozen=True)
class Prediction:
    total: float
    atomic_contributions: np.ndarray


def sum_contributions(c: np.ndarray) -> float:
    """The one summation used for totals, so totals and parts always agree."""
    return math.fsum(c.tolist())


@dataclass(frozen=True, eq=False)
class GapModel:
    """A trained potential; immutable and independent of the training files."""

    descriptor_config: DescriptorConfig
    kernel: KernelParams
    noise: NoiseModel
    target_name: str
    group_ids: tuple[str, ...]
    group_sizes: np.ndarray
    descriptors: np.ndarray
    weights: np.ndarray
    applied_jitter: float = 0.0
    nll: float = float("nan")
    _atom_weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sizes = np.asarray(self.group_sizes, dtype=np.int64)
        X = np.asarray(self.descriptors, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if len(sizes) != len(w) or len(sizes) != len(self.group_ids):
            raise ValueError("weights, group sizes and ids must have equal length")
        if X.ndim != 2 or X.shape[0] != sizes.sum():
            raise ValueError("descriptor array does not match group sizes")
        if X.shape[1] != self.descriptor_config.length:
            raise ValueError(
                f"stored descriptor length {X.shape[1]} does not match "
                f"configuration ({self.descriptor_config.length})"
            )
        for arr in (sizes, X, w):
            arr.setflags(write=False)
        object.__setattr__(self, "group_ids", tuple(self.group_ids))
        object.__setattr__(self, "group_sizes", sizes)
        object.__setattr__(self, "descriptors", X)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "_atom_weights", np.repeat(w, sizes))

    @property
    def n_train(self) -> int:
        return len(self.weights)

    @property
    def groups(self) -> list[np.ndarray]:
        return np.split(self.descriptors, np.cumsum(self.group_sizes)[:-1])


# ---------------------------------------------------------------------------
# kernels


def laplacian_kernel(x, y, kp: KernelParams) -> float:
    """``sigma**2 * exp(-||x - y||_1 / l**2)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"descriptor length mismatch: {x.shape} vs {y.shape}")
    return kp.sigma**2 * math.exp(-np.abs(x - y).sum() / kp.length_scale**2)


def molecular_covariance(A, B, kp: KernelParams) -> float:
    """Sum of the atom-level kernel over all pairs (a in A, b in B)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError("descriptor length mismatch between groups")
    D = cdist(A, B, "cityblock")
    return kp.sigma**2 * float(np.exp(-D / kp.length_scale**2).sum())


def _stack(groups: Sequence[np.ndarray]):
    sizes = np.array([len(g) for g in groups], dtype=np.int64)
    X = np.concatenate([np.atleast_2d(g) for g in groups], axis=0).astype(np.float64, copy=False)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    return X, sizes, starts


def _row_blocks(starts: np.ndarray, sizes: np.ndarray, width: int):
    """Contiguous ranges of groups whose atom count times ``width`` fits a block."""
    budget = max(BLOCK_ELEMENTS // max(width, 1), 1)
    g0 = 0
    n = len(sizes)
    while g0 < n:
        g1, atoms = g0, 0
        while g1 < n and (g1 == g0 or atoms + sizes[g1] <= budget):
            atoms += sizes[g1]
            g1 += 1
        yield g0, g1
        g0 = g1


def unit_cross_gram(groups_a, groups_b, length_scale: float) -> np.ndarray:
    """Molecule-level sums of ``exp(-L1/l**2)`` between two lists of groups."""
    XA, sa, oa = _stack(groups_a)
    XB, sb, ob = _stack(groups_b)
    inv = 1.0 / length_scale**2
    out = np.empty((len(sa), len(sb)))
    for g0, g1 in _row_blocks(oa, sa, len(XB)):
        a0, a1 = oa[g0], oa[g1 - 1] + sa[g1 - 1]
        E = cdist(XA[a0:a1], XB, "cityblock")
        np.multiply(E, -inv, out=E)
        np.exp(E, out=E)
        cols = np.add.reduceat(E, ob, axis=1)
        out[g0:g1] = np.add.reduceat(cols, oa[g0:g1] - a0, axis=0)
    return out


def unit_gram(groups, length_scale: float) -> np.ndarray:
    """Symmetric molecule-level Gram matrix at unit amplitude.

    Only blocks on or above the diagonal are evaluated; the lower triangle
    is a mirror, so the result is exactly symmetric.
    """
    X, sizes, starts = _stack(groups)
    inv = 1.0 / length_scale**2
    M = len(sizes)
    out = np.zeros((M, M))
    for g0, g1 in _row_blocks(starts, sizes, len(X)):
        a0, a1 = starts[g0], starts[g1 - 1] + sizes[g1 - 1]
        E = cdist(X[a0:a1], X[a0:], "cityblock")
        np.multiply(E, -inv, out=E)
        np.exp(E, out=E)
        cols = np.add.reduceat(E, starts[g0:] - a0, axis=1)
        out[g0:g1, g0:] = np.add.reduceat(cols, starts[g0:g1] - a0, axis=0)
    upper = np.triu(out)
    return upper + np.triu(out, 1).T


def build_covariance_matrix(groups, kp: KernelParams, noise: NoiseModel) -> np.ndarray:
    K = kp.sigma**2 * unit_gram(groups, kp.length_scale)
    K[np.diag_indices_from(K)] += noise.sigma_n**2
    return K


# ---------------------------------------------------------------------------
# factorization, training, likelihood


def factorize(C: np.ndarray):
    """Cholesky factor of ``C`` with jitter escalation.

    Returns ``(factor, jitter)`` where ``jitter`` is the absolute amount added
    to the diagonal.
    """
    M = len(C)
    scale = float(np.trace(C)) / M
    jitter = 0.0
    for mult in JITTER_LADDER:
        jitter = mult * scale
        A = C + jitter * np.eye(M) if jitter else C
        try:
            factor = cho_factor(A, lower=True, check_finite=True)
        except (LinAlgError, ValueError):
            continue
        # pivots at rounding level mean the matrix is numerically singular
        floor = M * np.finfo(float).eps * np.abs(np.diag(A)).max()
        if np.all(np.diag(factor[0]) ** 2 > floor):
            if jitter:
                log.info("covariance needed jitter %.3g (x%g of mean diagonal)", jitter, mult)
            return factor, jitter
    raise NumericalError(
        f"covariance factorization failed even with jitter {jitter:.3g}", jitter
    )


def nll_from_factor(factor, y: np.ndarray) -> float:
    L = factor[0]
    a = cho_solve(factor, y)
    M = len(y)
    return float(0.5 * y @ a + np.log(np.diag(L)).sum() + 0.5 * M * math.log(2 * math.pi))


def nll_from_gram(G: np.ndarray, y: np.ndarray, kp: KernelParams, noise: NoiseModel):
    """NLL for a precomputed unit-amplitude Gram matrix; returns (nll, jitter)."""
    C = kp.sigma**2 * G
    C[np.diag_indices_from(C)] += noise.sigma_n**2
    factor, jitter = factorize(C)
    return nll_from_factor(factor, y), jitter


def training_groups(d: Dataset, cfg: DescriptorConfig, cache: DescriptorCache | None = None):
    if cache is not None:
        return cache.groups(d, cfg)
    return [molecule_descriptors(mol, cfg) for mol in d]


def train(
    d: Dataset,
    target: str,
    cfg: DescriptorConfig,
    kp: KernelParams,
    noise: NoiseModel,
    cache: DescriptorCache | None = None,
) -> GapModel:
    """Fit the per-molecule weights by solving ``(K + sigma_n**2 I) w = y``."""
    if len(d) == 0:
        raise ValueError("cannot train on an empty dataset")
    y = d.targets(target)
    groups = training_groups(d, cfg, cache)
    C = build_covariance_matrix(groups, kp, noise)
    factor, jitter = factorize(C)
    w = cho_solve(factor, y)
    return GapModel(
        descriptor_config=cfg,
        kernel=kp,
        noise=noise,
        target_name=target,
        group_ids=tuple(d.ids),
        group_sizes=np.array([len(g) for g in groups]),
        descriptors=np.concatenate(groups, axis=0),
        weights=w,
        applied_jitter=jitter,
        nll=nll_from_factor(factor, y),
    )


def negative_log_likelihood(
    d: Dataset,
    target: str,
    cfg: DescriptorConfig,
    kp: KernelParams,
    noise: NoiseModel,
    cache: DescriptorCache | None = None,
) -> float:
    y = d.targets(target)
    G = unit_gram(training_groups(d, cfg, cache), kp.length_scale)
    return nll_from_gram(G, y, kp, noise)[0]


# ---------------------------------------------------------------------------
# prediction


def atomic_contributions(model: GapModel, descriptors: np.ndarray) -> np.ndarray:
    """Per-atom predictions for a stack of query descriptors."""
    Q = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    if Q.shape[1] != model.descriptors.shape[1]:
        raise ValueError("query descriptor length does not match the model")
    inv = 1.0 / model.kernel.length_scale**2
    out = np.empty(len(Q))
    step = max(BLOCK_ELEMENTS // max(len(model.descriptors), 1), 1)
    for q0 in range(0, len(Q), step):
        E = cdist(Q[q0 : q0 + step], model.descriptors, "cityblock")
        np.multiply(E, -inv, out=E)
        np.exp(E, out=E)
        out[q0 : q0 + step] = E @ model._atom_weights
    return model.kernel.sigma**2 * out


def predict(model: GapModel, mol: Molecule) -> Prediction:
    """Total and per-atom prediction; occupancy overflow raises OccupancyError."""
    contrib = atomic_contributions(model, molecule_descriptors(mol, model.descriptor_config))
    contrib.setflags(write=False)
    return Prediction(sum_contributions(contrib), contrib)


def predict_dataset(model: GapModel, d: Dataset, cache: DescriptorCache | None = None):
    """Predictions for every molecule, evaluated in batched blocks."""
    cfg = model.descriptor_config
    groups = training_groups(d, cfg, cache)
    if not groups:
        return []
    X, sizes, starts = _stack(groups)
    contrib = atomic_contributions(model, X)
    out = []
    for s, n in zip(starts, sizes):
        c = contrib[s : s + n].copy()
        c.setflags(write=False)
        out.append(Prediction(sum_contributions(c), c))
    return out
