"""Checkpoints: one ``.npz`` tensor archive plus a JSON sidecar.

The archive stores every model state entry under ``model/<name>`` and the
class statistics under ``stats/<field>``; the sidecar holds the class order,
task index, config hash, backbone spec and the torch RNG state location.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import IncrementalNet
from .statistics import ClassStatistics

ARCHIVE = "model.npz"
SIDECAR = "meta.json"


@dataclass
class Checkpoint:
    model: IncrementalNet
    class_order: list[int]
    stats: ClassStatistics | None
    config_hash: str
    task_index: int
    rng_state: torch.Tensor | None = None
    task_sizes: list[int] | None = None


def save_checkpoint(directory: str | Path, ckpt: Checkpoint) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    if ckpt.model.backbone_spec is None:
        raise ValueError("model has no backbone spec and cannot be rebuilt on load")
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in ckpt.model.state_dict().items()}
    if ckpt.stats is not None:
        arrays.update({f"stats/{k}": v for k, v in ckpt.stats.to_arrays().items()})
    rng = ckpt.rng_state if ckpt.rng_state is not None else torch.get_rng_state()
    arrays["rng/torch"] = rng.numpy()
    np.savez(out / ARCHIVE, **arrays)
    meta = {
        "class_order": [int(c) for c in ckpt.class_order],
        "task_index": ckpt.task_index,
        "config_hash": ckpt.config_hash,
        "backbone_spec": ckpt.model.backbone_spec,
        "input_shape": list(ckpt.model.input_shape),
        "num_classes": ckpt.model.num_classes,
        "task_sizes": ckpt.task_sizes,
        "has_stats": ckpt.stats is not None,
    }
    (out / SIDECAR).write_text(json.dumps(meta, indent=2))
    return out


def load_checkpoint(directory: str | Path) -> Checkpoint:
    src = Path(directory)
    meta = json.loads((src / SIDECAR).read_text())
    with np.load(src / ARCHIVE) as z:
        arrays = {k: z[k] for k in z.files}
    model = IncrementalNet.from_spec(meta["backbone_spec"], meta["input_shape"], meta["num_classes"])
    state = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items()
             if k.startswith("model/")}
    model.load_state_dict(state)
    model.eval()
    stats = None
    if meta["has_stats"]:
        stats = ClassStatistics.from_arrays({k[len("stats/"):]: v for k, v in arrays.items()
                                             if k.startswith("stats/")})
    return Checkpoint(model, meta["class_order"], stats, meta["config_hash"], meta["task_index"],
                      torch.from_numpy(arrays["rng/torch"].copy()), meta.get("task_sizes"))
