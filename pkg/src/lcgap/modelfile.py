"""Model file container (schema version 1).

The file is a single UTF-8 JSON document. Scalar metadata is plain JSON;
the numeric arrays are little-endian binary blocks encoded as base64. A
SHA-256 checksum covers the concatenated raw bytes of all blocks in the
order ``group_sizes, descriptors, weights``. Layout details are in
``docs/formats.md``.
"""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np

from .descriptors import DescriptorConfig
from .regression import GapModel, KernelParams, NoiseModel

SCHEMA_VERSION = 1
FORMAT_TAG = "lcgap-model"


class ModelFormatError(ValueError):
    """The model file is unreadable, truncated, corrupted or of another version."""


def _encode(arr: np.ndarray, dtype: str) -> tuple[bytes, str]:
    raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    return raw, base64.b64encode(raw).decode("ascii")


def _decode(text: str, dtype: str, what: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, AttributeError) as exc:
        raise ModelFormatError(f"block {what!r} is not valid base64: {exc}") from None
    size = np.dtype(dtype).itemsize
    if len(raw) % size:
        raise ModelFormatError(f"block {what!r} is truncated")
    return np.frombuffer(raw, dtype=dtype).copy()


def model_payload(model: GapModel) -> dict:
    raw_sizes, sizes = _encode(model.group_sizes, "<i8")
    raw_desc, desc = _encode(model.descriptors, "<f8")
    raw_w, weights = _encode(model.weights, "<f8")
    digest = hashlib.sha256(raw_sizes + raw_desc + raw_w).hexdigest()
    return {
        "format": FORMAT_TAG,
        "schema_version": SCHEMA_VERSION,
        "descriptor_config": model.descriptor_config.to_dict(),
        "kernel": {"sigma": model.kernel.sigma, "length_scale": model.kernel.length_scale},
        "noise": {"sigma_n": model.noise.sigma_n},
        "target_name": model.target_name,
        "applied_jitter": model.applied_jitter,
        "nll": model.nll,
        "n_groups": model.n_train,
        "n_atoms": int(model.descriptors.shape[0]),
        "descriptor_length": int(model.descriptors.shape[1]),
        "group_ids": list(model.group_ids),
        "blocks": {
            "group_sizes": {"dtype": "<i8", "data": sizes},
            "descriptors": {"dtype": "<f8", "shape": list(model.descriptors.shape), "data": desc},
            "weights": {"dtype": "<f8", "data": weights},
        },
        "checksum": f"sha256:{digest}",
    }


def save_model(model: GapModel, path) -> str:
    """Write ``model`` to ``path``; returns the payload checksum."""
    doc = model_payload(model)
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=True) + "\n")
    return doc["checksum"]


def load_model(path) -> GapModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not a complete model file ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_TAG:
        raise ModelFormatError(f"{path}: not an lcgap model file")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported schema_version {version!r} (expected {SCHEMA_VERSION})"
        )
    try:
        blocks = doc["blocks"]
        sizes = _decode(blocks["group_sizes"]["data"], "<i8", "group_sizes")
        desc = _decode(blocks["descriptors"]["data"], "<f8", "descriptors")
        weights = _decode(blocks["weights"]["data"], "<f8", "weights")
        raw = sizes.astype("<i8").tobytes() + desc.astype("<f8").tobytes() + weights.astype("<f8").tobytes()
        if f"sha256:{hashlib.sha256(raw).hexdigest()}" != doc["checksum"]:
            raise ModelFormatError(f"{path}: checksum mismatch")
        cfg = DescriptorConfig(**doc["descriptor_config"])
        length = int(doc["descriptor_length"])
        if length != cfg.length:
            raise ModelFormatError(
                f"{path}: descriptor_length {length} inconsistent with "
                f"descriptor_config (expected {cfg.length})"
            )
        n_atoms = int(doc["n_atoms"])
        if desc.size != n_atoms * length or sizes.sum() != n_atoms:
            raise ModelFormatError(f"{path}: descriptor block does not match header sizes")
        if len(weights) != int(doc["n_groups"]) or len(sizes) != len(weights):
            raise ModelFormatError(f"{path}: weights block does not match n_groups")
        return GapModel(
            descriptor_config=cfg,
            kernel=KernelParams(**doc["kernel"]),
            noise=NoiseModel(**doc["noise"]),
            target_name=doc["target_name"],
            group_ids=tuple(doc["group_ids"]),
            group_sizes=sizes,
            descriptors=desc.reshape(n_atoms, length),
            weights=weights,
            applied_jitter=float(doc["applied_jitter"]),
            nll=float(doc.get("nll", float("nan"))),
        )
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: missing or malformed field {exc}") from None
