"""Plain-text model checkpoints.

Layout: a ``relgraph-checkpoint 1`` line, one ``config <json>`` line, one
``threshold <float>`` line, then for each tensor a header
``tensor <name> <dim,dim,...>`` followed by a single line of values written
with ``repr`` so that float64 values round-trip exactly.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .kg import DataError
from .model import config_dict, config_from_dict
from .optim import BatchNormStats
from .train import TrainedModel

MAGIC = "relgraph-checkpoint 1"


def _tensor_lines(name: str, arr: np.ndarray) -> list[str]:
    shape = ",".join(str(d) for d in arr.shape)
    values = " ".join(repr(float(x)) for x in np.asarray(arr, dtype=np.float64).ravel())
    return [f"tensor {name} {shape}", values]


def save_checkpoint(model: TrainedModel, path) -> None:
    lines = [MAGIC, "config " + json.dumps(config_dict(model.config), sort_keys=True),
             f"threshold {model.threshold!r}"]
    for name in sorted(model.params):
        lines += _tensor_lines(name, model.params[name])
    for layer, stats in enumerate(model.bn_stats):
        lines += _tensor_lines(f"bn_stats.{layer}.mean", stats.mean)
        lines += _tensor_lines(f"bn_stats.{layer}.var", stats.var)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> TrainedModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 3 or lines[0] != MAGIC:
        raise DataError(f"{path}: not a relgraph checkpoint")
    try:
        config = config_from_dict(json.loads(lines[1].removeprefix("config ")))
        threshold = float(lines[2].removeprefix("threshold "))
    except ValueError as exc:
        raise DataError(f"{path}: bad header: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    body = lines[3:]
    if len(body) % 2:
        raise DataError(f"{path}: truncated tensor block")
    for k in range(0, len(body), 2):
        parts = body[k].split(" ")
        if len(parts) != 3 or parts[0] != "tensor":
            raise DataError(f"{path} line {k + 4}: expected a tensor header")
        shape = tuple(int(d) for d in parts[2].split(",")) if parts[2] else ()
        values = np.array([float(v) for v in body[k + 1].split()], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise DataError(f"{path}: tensor {parts[1]} has {values.size} values for {shape}")
        tensors[parts[1]] = values.reshape(shape)
    stats = []
    for layer in range(config.layers):
        try:
            stats.append(BatchNormStats(tensors.pop(f"bn_stats.{layer}.mean"),
                                        tensors.pop(f"bn_stats.{layer}.var")))
        except KeyError:
            raise DataError(f"{path}: missing batch-norm statistics for layer {layer}") from None
    return TrainedModel(config, tensors, stats, threshold)


def check_compatible(model: TrainedModel, expected: dict[str, np.ndarray]) -> None:
    """Raise DataError when parameter names or shapes differ from ``expected``."""
    missing = sorted(set(expected) - set(model.params))
    extra = sorted(set(model.params) - set(expected))
    if missing or extra:
        raise DataError(f"checkpoint parameters differ: missing {missing}, unexpected {extra}")
    for name, arr in expected.items():
        if model.params[name].shape != arr.shape:
            raise DataError(f"checkpoint tensor {name} has shape {model.params[name].shape}, "
                            f"expected {arr.shape}")

