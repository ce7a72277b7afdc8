"""Downstream evaluations: cell identity, imputation, perturbation and out-of-domain transfer."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datagen import ExpressionDataset
from .errors import DegenerateCell, DegenerateGroup, IncompatibleTask, LabelSpaceMismatch
from .metrics import classification_scores, cosine, pearson, recall_at_k
from .model import CellRefineModel, pad_batch
from .tokenizer import DEFAULT_MASK_RATE, mask_tokens, tokenize

EVAL_BATCH = 256


@dataclass
class MetricsReport:
    task: str
    metrics: dict[str, float]
    split: str
    seed: int
    checkpoint_hash: str = ""
    per_class: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite")

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def format_table(rows: Sequence[tuple[str, MetricsReport]], metrics: Sequence[str] | None = None) -> str:
    """Aligned text table: one row per method, one column per metric."""
    if not rows:
        return ""
    metrics = list(metrics or rows[0][1].metrics)
    header = ["Method", *metrics]
    body = [[name, *(f"{rep.metrics.get(m, float('nan')):.4f}" for m in metrics)] for name, rep in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))  # noqa: E731
    rule = "-" * len(fmt(header))
    return "\n".join([rule, fmt(header), rule, *(fmt(r) for r in body), rule])


# --- forward helpers ------------------------------------------------------------


@torch.no_grad()
def embed(model: CellRefineModel, data: ExpressionDataset) -> np.ndarray:
    """Pooled cell embeddings [N, H] in eval mode."""
    model.eval()
    seqs = [tokenize(row, model.vocab, model.cell_cfg.max_len).tokens for row in data.matrix]
    out = []
    for s in range(0, len(seqs), EVAL_BATCH):
        tokens, pad = pad_batch(seqs[s : s + EVAL_BATCH], model.vocab.pad_id)
        h, _ = model.encode(tokens, pad)
        out.append(h.double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.cell_cfg.hidden_size))


@torch.no_grad()
def class_scores(model: CellRefineModel, data: ExpressionDataset) -> np.ndarray:
    if "classifier" not in model.heads:
        raise IncompatibleTask("checkpoint has no cell-identity classifier head")
    h = torch.as_tensor(embed(model, data), dtype=next(model.parameters()).dtype)
    return model.heads["classifier"](h).double().numpy()


def tail_types(counts: dict[str, int], fraction: float = 0.30) -> list[str]:
    """The rarest ``fraction`` of types (at least one), rarest first."""
    n = max(1, int(math.floor(fraction * len(counts) + 1e-9)))
    return sorted(counts, key=lambda t: (counts[t], t))[:n]


# --- cell identity ---------------------------------------------------------------


def identity_eval(
    model: CellRefineModel,
    data: ExpressionDataset,
    split: str = "test",
    ks: Sequence[int] = (),
    tail: Sequence[str] = (),
    seed: int = 0,
    checkpoint_hash: str = "",
) -> MetricsReport:
    target = data.split(split) if split else data
    labels = model.meta.get("labels")
    if not labels:
        raise IncompatibleTask("checkpoint has no cell-identity classifier head")
    unknown = set(target.cell_types) - set(labels)
    if unknown:
        raise LabelSpaceMismatch(f"labels not seen in training: {sorted(unknown)}")
    scores = class_scores(model, target)
    pred = [labels[i] for i in scores.argmax(axis=1)]
    res = classification_scores(target.cell_types, pred, labels)
    metrics = {k: res[k] for k in ("macro_f1", "weighted_f1", "accuracy")}
    y = [labels.index(t) for t in target.cell_types]
    for k in ks:
        metrics[f"recall@{k}"] = recall_at_k(y, scores, k)
    if tail:
        metrics["tail_macro_f1"] = float(np.mean([res["per_class_f1"][t] for t in tail]))
    return MetricsReport(
        task="identity", metrics=metrics, split=split, seed=seed, checkpoint_hash=checkpoint_hash,
        per_class=res["per_class_f1"], extra={"n_cells": len(target), "tail_types": list(tail)},
    )


def out_of_domain_eval(
    model: CellRefineModel,
    target: ExpressionDataset,
    ks: Sequence[int] = (1, 3),
    shift: dict | None = None,
    seed: int = 0,
    checkpoint_hash: str = "",
) -> MetricsReport:
    """Zero-shot transfer: no parameter updates on the target cells."""
    labels = model.meta.get("labels")
    if not labels:
        raise IncompatibleTask("checkpoint has no cell-identity classifier head")
    unknown = set(target.cell_types) - set(labels)
    if unknown:
        raise LabelSpaceMismatch(f"target labels outside the source label space: {sorted(unknown)}")
    scores = class_scores(model, target)
    y = [labels.index(t) for t in target.cell_types]
    metrics = {f"recall@{k}": recall_at_k(y, scores, k) for k in ks}
    descriptor = shift or {
        "target_batches": sorted(set(target.batches)),
        "target_splits": sorted(set(target.splits)),
        "n_target": len(target),
    }
    return MetricsReport(
        task="ood", metrics=metrics, split=",".join(sorted(set(target.splits))), seed=seed,
        checkpoint_hash=checkpoint_hash, extra={"shift": descriptor},
    )


# --- imputation --------------------------------------------------------------------


def decode_masked_expression(
    logits: np.ndarray,
    masked_positions: Sequence[int],
    masked_genes: Sequence[int],
    observed_positions: Sequence[int],
    observed_values: Sequence[float],
    medians: np.ndarray,
) -> np.ndarray:
    """Turn MLM-head outputs back into expression values for the masked genes.

    For every masked gene the head's probabilities over the masked positions
    (softmax restricted to the masked gene set) give an expected rank
    position. The cell's own rank -> normalized-value curve, interpolated
    from its observed positions, maps that position to a normalized value,
    which is rescaled by the gene's median factor.
    """
    genes = np.asarray(masked_genes)
    pos = np.asarray(masked_positions, dtype=np.float64)
    sub = logits[np.asarray(masked_positions)][:, genes]  # [positions, genes]
    sub = sub - sub.max(axis=1, keepdims=True)
    probs = np.exp(sub)
    probs /= probs.sum(axis=1, keepdims=True)
    expected_pos = (probs * pos[:, None]).sum(axis=0) / probs.sum(axis=0)
    norm_value = np.interp(expected_pos, np.asarray(observed_positions, dtype=np.float64), np.asarray(observed_values))
    return norm_value * medians[genes]


@torch.no_grad()
def imputation_eval(
    model: CellRefineModel,
    data: ExpressionDataset,
    mask_rate: float = DEFAULT_MASK_RATE,
    seed: int = 0,
    split: str = "test",
    checkpoint_hash: str = "",
) -> MetricsReport:
    """Per-cell Pearson and cosine over masked genes only, averaged over cells."""
    model.eval()
    target = data.split(split) if split else data
    vocab = model.vocab
    truths, preds = [], []
    skipped = 0
    for i, row in enumerate(target.matrix):
        seq = tokenize(row, vocab, model.cell_cfg.max_len)
        masked = mask_tokens(seq, mask_rate, seed * 1_000_003 + i, vocab)
        if len(masked.masked_positions) < 2 or len(masked.masked_positions) == len(seq):
            skipped += 1
            continue
        tokens, pad = pad_batch([masked.tokens], vocab.pad_id)
        _, logits = model.encode(tokens, pad)
        mset = set(masked.masked_positions)
        obs_pos = [p for p in range(len(seq)) if p not in mset]
        obs_genes = np.asarray([seq.tokens[p] for p in obs_pos])
        obs_vals = row[obs_genes] / vocab.medians[obs_genes]
        pred = decode_masked_expression(
            logits[0].double().numpy(), masked.masked_positions, masked.targets, obs_pos, obs_vals, vocab.medians
        )
        truths.append(row[np.asarray(masked.targets)])
        preds.append(pred)
    per_p, per_c = [], []
    for t, p in zip(truths, preds):
        try:
            r, c = pearson(t, p), cosine(t, p)
        except DegenerateCell:
            continue
        per_p.append(r)
        per_c.append(c)
    if not per_p:
        raise DegenerateCell("no evaluable cells")
    return MetricsReport(
        task="imputation",
        metrics={"pearson": float(np.mean(per_p)), "cosine": float(np.mean(per_c))},
        split=split, seed=seed, checkpoint_hash=checkpoint_hash,
        extra={"mask_rate": mask_rate, "n_cells": len(per_p), "excluded_cells": skipped + len(truths) - len(per_p)},
    )


# --- perturbation --------------------------------------------------------------------


def dge_pearson(true_delta, pred_delta) -> float:
    try:
        return pearson(true_delta, pred_delta)
    except DegenerateCell as exc:
        raise DegenerateGroup(str(exc)) from exc


def group_dge_pearson(groups: dict[str, tuple[np.ndarray, np.ndarray]]) -> tuple[float, dict[str, float]]:
    """Mean over groups of Pearson(mean true delta, mean predicted delta)."""
    per = {}
    for name, (true_d, pred_d) in sorted(groups.items()):
        true_d, pred_d = np.atleast_2d(true_d), np.atleast_2d(pred_d)
        per[name] = dge_pearson(true_d.mean(axis=0), pred_d.mean(axis=0))
    if not per:
        raise DegenerateGroup("no evaluation groups")
    return float(np.mean(list(per.values()))), per


@torch.no_grad()
def perturbation_eval(
    model: CellRefineModel, data: ExpressionDataset, seed: int = 0, checkpoint_hash: str = ""
) -> MetricsReport:
    if "perturbation" not in model.heads:
        raise IncompatibleTask("checkpoint has no perturbation head")
    if data.post_matrix is None:
        raise IncompatibleTask("dataset has no post-perturbation matrix")
    groups = {}
    for t in model.meta.get("held_out", []):
        idx = [i for i, ct in enumerate(data.cell_types) if ct == t]
        if not idx:
            continue
        sub = data.subset(idx)
        h = torch.as_tensor(embed(model, sub), dtype=next(model.parameters()).dtype)
        pred = model.heads["perturbation"](h).double().numpy()
        groups[t] = (sub.post_matrix - sub.matrix, pred)
    mean, per = group_dge_pearson(groups)
    return MetricsReport(
        task="perturbation", metrics={"dge_pearson": mean}, split="held_out", seed=seed,
        checkpoint_hash=checkpoint_hash, per_class=per, extra={"held_out": sorted(groups)},
    )


# --- embedding geometry ----------------------------------------------------------------


def centroids(emb: np.ndarray, labels: Sequence[str]) -> dict[str, np.ndarray]:
    labels = np.asarray(labels)
    return {t: emb[labels == t].mean(axis=0) for t in sorted(set(labels.tolist()))}


def tail_centroid_distance(emb: np.ndarray, labels: Sequence[str], tail: Sequence[str]) -> float:
    """Mean cosine distance between each tail type's centroid and every other type's centroid."""
    cents = centroids(emb, labels)
    pairs = {tuple(sorted((t, u))) for t in tail if t in cents for u in cents if u != t}
    if not pairs:
        raise ValueError("no centroid pairs involve the tail types")
    return float(np.mean([1.0 - cosine(cents[a], cents[b]) for a, b in sorted(pairs)]))


def export_embeddings(model: CellRefineModel, data: ExpressionDataset, path: str | Path) -> Path:
    emb = embed(model, data)
    lines = ["\t".join(["cell_id", "cell_type", *(f"h{j}" for j in range(emb.shape[1]))])]
    for cid, ct, row in zip(data.cell_ids, data.cell_types, emb):
        lines.append("\t".join([cid, ct, *(repr(float(v)) for v in row)]))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path
