import json
import os
from typing import Any, Dict, Iterable, Tuple

import numpy as np
from dbt.adapters.events.logging import AdapterLogger

from nerp.nerp_exceptions import CheckpointMismatch, MissingCheckpoint
from nerp.neural.tensor import Param

logger = AdapterLogger("nerp")

CHECKPOINT_FORMAT = "nerp-params"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str, named_params: Iterable[Tuple[str, Param]], header: Dict[str, Any]
) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "header": header,
        "params": {
            name: {
                "shape": list(p.shape),
                "values": p.data.reshape(-1).tolist(),
                "accumulator": p.accumulator.reshape(-1).tolist(),
            }
            for name, p in named_params
        },
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)
    logger.debug(f"Wrote {len(payload['params'])} parameter arrays to {path}")


def read_checkpoint(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise MissingCheckpoint(f"No checkpoint at {path}")
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path} is not a parameter checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(
            f"{path} has checkpoint version {payload.get('version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    return payload


def restore_params(payload: Dict[str, Any], named_params: Iterable[Tuple[str, Param]]) -> None:
    """Copy values and accumulators from a checkpoint payload into live Params."""
    stored = payload["params"]
    own = dict(named_params)
    if set(own) != set(stored):
        diff = sorted(set(own) ^ set(stored))
        raise CheckpointMismatch(f"Checkpoint parameters differ from the model: {diff[:5]}")
    for name, p in own.items():
        record = stored[name]
        if tuple(record["shape"]) != p.shape:
            raise CheckpointMismatch(
                f"{name}: checkpoint shape {tuple(record['shape'])} vs model {p.shape}"
            )
        p.data[...] = np.asarray(record["values"], dtype=np.float64).reshape(p.shape)
        p.accumulator = np.asarray(record["accumulator"], dtype=np.float64).reshape(p.shape)
        p.zero_grad()
