"""Checkpoint container: one .npz holding named parameter arrays plus a JSON header.

The header (array ``__meta__``) records the format version, stage tag,
encoder/GMVE/adapter configs, vocabulary with its median factors, task-head
metadata and the seed record. Parameter arrays keep their state-dict names.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .errors import StageOrderViolation
from .model import (
    STAGES,
    AdapterConfig,
    CellRefineModel,
    EncoderConfig,
    GMVEConfig,
    adapter_config_dict,
    attach_adapters,
)
from .tokenizer import GeneVocabulary

FORMAT_VERSION = 1
META_KEY = "__meta__"


def save_checkpoint(model: CellRefineModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "stage": model.stage,
        "cell_encoder": asdict(model.cell_cfg),
        "marker_encoder": asdict(model.marker_cfg),
        "gmve": asdict(model.gmve_cfg),
        "adapters": adapter_config_dict(model.adapter_cfg),
        "genes": list(model.vocab.genes),
        "medians": [float(v) for v in model.vocab.medians],
        "heads": {name: list(head.weight.shape) for name, head in model.heads.items()},
        "meta": model.meta,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
    }
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    arrays[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path, allowed_stages: Iterable[str] | None = None) -> CellRefineModel:
    """Rebuild a model; raises StageOrderViolation when its stage is not allowed."""
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z[META_KEY]))
        arrays = {k: z[k] for k in z.files if k != META_KEY}
    stage = meta["stage"]
    if stage not in STAGES:
        raise StageOrderViolation(f"checkpoint has unknown stage tag {stage!r}")
    if allowed_stages is not None and stage not in set(allowed_stages):
        raise StageOrderViolation(f"checkpoint stage {stage!r} not in {sorted(allowed_stages)}")

    vocab = GeneVocabulary(tuple(meta["genes"]), np.asarray(meta["medians"]))
    model = CellRefineModel(
        vocab,
        EncoderConfig(**meta["cell_encoder"]),
        EncoderConfig(**meta["marker_encoder"]),
        GMVEConfig(**meta["gmve"]),
    )
    model.to(getattr(torch, meta.get("dtype", "float32")))
    if meta["adapters"] is not None:
        cfg = dict(meta["adapters"])
        cfg["targets"] = tuple(cfg["targets"])
        attach_adapters(model, AdapterConfig(**cfg))
    for name, (out_dim, in_dim) in meta["heads"].items():
        model.heads[name] = torch.nn.Linear(in_dim, out_dim).to(getattr(torch, meta.get("dtype", "float32")))
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    model.stage = stage
    model.meta = meta["meta"]
    return model


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
