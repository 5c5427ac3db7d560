"""Deterministic JSON checkpoints.

One self-describing file holds the model config, the RNG seed, sensor names,
normalization statistics, an echo of the run configuration, and every
parameter tensor. Floats are serialized through Python's shortest-round-trip
repr, so save -> load -> save is byte-identical and loaded values are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import NormalizationStats
from .fileio import atomic_write_text
from .model import Detector, ModelConfig
from .numgrad import ParamStore

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    detector: Detector
    sensor_names: list[str]
    stats: NormalizationStats
    run_config: dict


def save(
    path: str,
    detector: Detector,
    sensor_names: list[str],
    stats: NormalizationStats,
    run_config: dict,
) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "model": detector.config.to_dict(),
        "seed": detector.store.rng_seed,
        "sensor_names": list(sensor_names),
        "normalization": {
            "vmin": [float(x) for x in stats.vmin],
            "vmax": [float(x) for x in stats.vmax],
        },
        "run_config": run_config,
        "params": {
            group: {
                name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in tensors.items()
            }
            for group, tensors in detector.store.groups.items()
        },
    }
    atomic_write_text(path, json.dumps(doc, sort_keys=True, separators=(",", ":")))


def load(path: str) -> Checkpoint:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version!r} (this build reads "
            f"{FORMAT_VERSION})"
        )
    try:
        config = ModelConfig(**doc["model"])
        groups = {
            group: {
                name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
                for name, entry in tensors.items()
            }
            for group, tensors in doc["params"].items()
        }
        store = ParamStore(groups, int(doc["seed"]))
        stats = NormalizationStats(
            np.array(doc["normalization"]["vmin"], dtype=np.float64),
            np.array(doc["normalization"]["vmax"], dtype=np.float64),
        )
        return Checkpoint(
            Detector(config, store),
            [str(s) for s in doc["sensor_names"]],
            stats,
            doc.get("run_config", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
