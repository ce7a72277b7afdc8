"""Pretraining, CellRefine post-pretraining and downstream fine-tuning.

Every baseline (LP, LL, FF, LoRA and the MLM-post-trained variants) is a
composition of the three stage functions below with a particular
``TrainConfig``; there is no separate code path per baseline.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datagen import ExpressionDataset
from .errors import (
    EmptyDataset,
    IncompatibleTask,
    InsufficientMarkers,
    InvalidConfig,
    MissingPrototype,
    StageOrderViolation,
    UnknownCellType,
)
from .losses import LossWeights, gmve_kl, l2_regularizer, lineage_loss, prototype_loss, total_loss, type_means
from .model import (
    AdapterConfig,
    CellRefineModel,
    attach_adapters,
    build_model,
    encode_prototypes,
    init_marker_from_cell,
    pad_batch,
)
from .ontology import CellOntology, MarkerCatalog, build_prototypes, parent_lineage_pairs
from .tokenizer import GeneVocabulary, TokenSequence, mask_tokens, tokenize

log = logging.getLogger(__name__)

TRAIN_STAGES = ("pretrain", "post_pretrain", "fine_tune")
MODES = ("LP", "LL", "FF", "LoRA")
TASKS = ("cell_identity", "imputation", "perturbation")
STAGE_TAG = {"pretrain": "pt", "post_pretrain": "pp", "fine_tune": "ft"}


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    mode: str = "FF"
    task: str = "cell_identity"
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    alpha_reg: float = 0.0
    lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 1e-3
    batch_size: int = 12
    patience: int = 3
    max_epochs: int = 50
    mlm_loss_threshold: float | None = None
    mask_rate: float = 0.15
    seed: int = 0
    few_shot_n: int | None = None
    prototype_length: int = 16
    temperature: float = 1.0
    kl_samples: int = 8
    gmve_in_finetune: bool = False
    held_out_types: list[str] | None = None
    adapter_rank: int = 8
    adapter_alpha: float = 16.0
    adapter_dropout: float = 0.05
    # architecture, used only when pretraining starts from scratch
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    marker_layers: int = 2
    max_len: int = 256
    dropout: float = 0.02
    latent_dim: int = 16
    num_components: int = 8

    def __post_init__(self):
        if self.stage not in TRAIN_STAGES:
            raise InvalidConfig(f"stage must be one of {TRAIN_STAGES}")
        if self.mode not in MODES:
            raise InvalidConfig(f"mode must be one of {MODES}")
        if self.stage == "post_pretrain" and self.mode == "LP":
            raise InvalidConfig("post-pretraining needs trainable encoder parameters (LL, FF or LoRA)")
        if self.task not in TASKS:
            raise InvalidConfig(f"task must be one of {TASKS}")
        if self.warmup_steps < 0 or self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidConfig("need warmup_steps >= 0, patience >= 1, batch_size >= 1, max_epochs >= 1")
        if self.few_shot_n is not None and self.few_shot_n < 1:
            raise InvalidConfig("few_shot_n must be >= 1")
        try:
            self.weights
        except ValueError as exc:
            raise InvalidConfig(str(exc)) from exc

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.alpha_reg)

    @property
    def adapter(self) -> AdapterConfig:
        return AdapterConfig(self.adapter_rank, self.adapter_alpha, self.adapter_dropout)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, mapping: Mapping, **overrides) -> "TrainConfig":
        data = {**mapping, **overrides}
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfig(f"unknown train config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_mapping(self.to_dict(), **changes)


@dataclass
class RunRecord:
    stage: str
    seed: int
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    stopping_epoch: int = 0
    stop_reason: str = ""

    def to_json(self) -> dict:
        return asdict(self)


def lr_at(step: int, peak: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to ``peak`` then linear decay to zero at ``total_steps``."""
    if step < warmup_steps:
        return peak * step / max(1, warmup_steps)
    return peak * max(0.0, (total_steps - step) / max(1, total_steps - warmup_steps))


class EarlyStopping:
    """Signals a stop once validation loss fails to improve for ``patience`` epochs in a row."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# --- data preparation -------------------------------------------------------


@dataclass
class _Prepared:
    seqs: list[TokenSequence]
    labels: list[str]
    index: np.ndarray  # row indices into the source dataset

    def __len__(self) -> int:
        return len(self.seqs)


def _prepare(model: CellRefineModel, data: ExpressionDataset) -> _Prepared:
    if list(data.genes) != list(model.vocab.genes):
        raise IncompatibleTask("dataset genes do not match the model vocabulary")
    max_len = model.cell_cfg.max_len
    seqs = [tokenize(row, model.vocab, max_len) for row in data.matrix]
    return _Prepared(seqs, list(data.cell_types), np.arange(len(data)))


def few_shot_indices(labels: Sequence[str], n: int, seed: int) -> np.ndarray:
    """At most n cells per class, chosen by a seeded permutation."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    keep = []
    for t in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == t)
        keep.extend(rng.permutation(idx)[:n].tolist())
    return np.sort(np.asarray(keep, dtype=np.int64))


def _masked_batch(model, prep: _Prepared, rows: Sequence[int], rate: float, seed: int, tag: int):
    vocab = model.vocab
    masked = [mask_tokens(prep.seqs[i], rate, derive_seed(seed, tag, i), vocab) for i in rows]
    tokens, pad = pad_batch([m.tokens for m in masked], vocab.pad_id)
    pos_b = [b for b, m in enumerate(masked) for _ in m.masked_positions]
    pos_t = [p for m in masked for p in m.masked_positions]
    targets = torch.tensor([t for m in masked for t in m.targets], dtype=torch.long)
    return tokens, pad, (torch.tensor(pos_b, dtype=torch.long), torch.tensor(pos_t, dtype=torch.long)), targets


def _plain_batch(model, prep: _Prepared, rows: Sequence[int]):
    return pad_batch([prep.seqs[i].tokens for i in rows], model.vocab.pad_id)


# --- trainable-parameter selection -----------------------------------------


def _encoder_params(model: CellRefineModel, mode: str) -> list[torch.nn.Parameter]:
    if mode == "LP":
        return []
    if mode == "LL":
        return list(model.cell_encoder.layers[-1].parameters())
    if mode == "FF":
        return list(model.cell_encoder.parameters())
    return [p for _, p in model.adapter_parameters()]


def _select_trainable(model: CellRefineModel, groups: Sequence[Sequence[torch.nn.Parameter]]) -> list:
    for p in model.parameters():
        p.requires_grad_(False)
    chosen, seen = [], set()
    for group in groups:
        for p in group:
            if id(p) not in seen:
                seen.add(id(p))
                p.requires_grad_(True)
                chosen.append(p)
    return chosen


# --- generic loop ------------------------------------------------------------

StepFn = Callable[[Sequence[int], int, bool], dict]


def _train_loop(
    model: CellRefineModel,
    cfg: TrainConfig,
    n_train: int,
    n_val: int,
    params: list,
    step_fn: StepFn,
    val_rows_fn: Callable[[], Sequence[Sequence[int]]],
    stage: str,
    mlm_threshold: float | None = None,
) -> RunRecord:
    record = RunRecord(stage=stage, seed=cfg.seed, config_hash=cfg.hash())
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay) if params else None
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.max_epochs
    stopper = EarlyStopping(cfg.patience)
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n_train)
        sums: dict[str, float] = {}
        for start in range(0, n_train, cfg.batch_size):
            rows = order[start : start + cfg.batch_size].tolist()
            losses = step_fn(rows, epoch, True)
            if optimizer is not None:
                for group in optimizer.param_groups:
                    group["lr"] = lr_at(step, cfg.lr, cfg.warmup_steps, total_steps)
                optimizer.zero_grad(set_to_none=True)
                losses["objective"].backward()
                optimizer.step()
            step += 1
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach()) * len(rows)
        train_losses = {k: v / n_train for k, v in sums.items()}

        model.eval()
        with torch.no_grad():
            if n_val:
                vs = [(float(step_fn(r, 0, False)["objective"]), len(r)) for r in val_rows_fn()]
                val_loss = sum(v * n for v, n in vs) / n_val
            else:
                val_loss = train_losses["objective"]
        record.epochs.append({"epoch": epoch, "train": train_losses, "val_loss": val_loss})
        log.info("%s epoch %d train %.4f val %.4f", stage, epoch, train_losses["objective"], val_loss)
        record.stopping_epoch = epoch
        if mlm_threshold is not None and train_losses.get("mlm", math.inf) <= mlm_threshold:
            record.stop_reason = "mlm_threshold"
            break
        if stopper.step(val_loss):
            record.stop_reason = "early_stopping"
            break
    else:
        record.stop_reason = "epoch_cap"
    model.eval()
    return record


def _val_rows(n: int, batch_size: int) -> Callable[[], list[list[int]]]:
    return lambda: [list(range(s, min(n, s + batch_size))) for s in range(0, n, batch_size)]


def _mlm_term(model, cfg, logits, positions, targets, params) -> torch.Tensor:
    if targets.numel() == 0:
        return logits.sum() * 0.0
    picked = logits[positions[0], positions[1]]
    loss = F.cross_entropy(picked, targets, reduction="mean")
    if cfg.alpha_reg:
        loss = loss + cfg.alpha_reg * l2_regularizer(params)
    return loss


# --- stages -------------------------------------------------------------------


def _fresh_model(data: ExpressionDataset, cfg: TrainConfig) -> CellRefineModel:
    train = data.split("train")
    if len(train) == 0:
        raise EmptyDataset("no training cells")
    vocab = GeneVocabulary(tuple(data.genes)).with_medians(train.matrix)
    return build_model(
        vocab,
        hidden_size=cfg.hidden_size,
        num_layers=cfg.num_layers,
        num_heads=cfg.num_heads,
        marker_layers=cfg.marker_layers,
        max_len=cfg.max_len,
        dropout=cfg.dropout,
        latent_dim=cfg.latent_dim,
        num_components=cfg.num_components,
        seed=cfg.seed,
    )


def _splits(model, data: ExpressionDataset, exclude_types: Sequence[str] = ()) -> tuple[_Prepared, _Prepared]:
    keep = [i for i, t in enumerate(data.cell_types) if t not in set(exclude_types)]
    data = data.subset(keep)
    train, val = data.split("train"), data.split("val")
    if len(train) == 0:
        raise EmptyDataset("no training cells")
    return _prepare(model, train), _prepare(model, val)


def _mlm_objective(model, cfg, train, val, params_ref: list):
    def step(rows, epoch, training):
        prep = train if training else val
        tokens, pad, positions, targets = _masked_batch(model, prep, rows, cfg.mask_rate, cfg.seed, epoch)
        _, logits = model.encode(tokens, pad)
        mlm = _mlm_term(model, cfg, logits, positions, targets, params_ref)
        return {"objective": mlm, "mlm": mlm}

    return step


def pretrain(
    model: CellRefineModel | None, data: ExpressionDataset, cfg: TrainConfig
) -> tuple[CellRefineModel, RunRecord]:
    """MLM-only training; starts from scratch when ``model`` is None."""
    if len(data) == 0:
        raise EmptyDataset("dataset has no cells")
    if model is None:
        model = _fresh_model(data, cfg)
    else:
        if model.stage not in (None, "pt"):
            raise StageOrderViolation(f"pretraining needs an untrained or pt model, got {model.stage!r}")
        model = copy.deepcopy(model)
    train, val = _splits(model, data)
    params = _select_trainable(model, [list(model.cell_encoder.parameters()), list(model.mlm_head.parameters())])
    step = _mlm_objective(model, cfg, train, val, params)
    record = _train_loop(
        model, cfg, len(train), len(val), params, step, _val_rows(len(val), cfg.batch_size), "pretrain",
        mlm_threshold=cfg.mlm_loss_threshold,
    )
    model.stage = "pt"
    return model, record


def _prototypes_for(types: Sequence[str], ontology: CellOntology, catalog: MarkerCatalog, K: int):
    try:
        protos = build_prototypes(catalog, ontology, types, K)
    except (UnknownCellType, InsufficientMarkers) as exc:
        raise MissingPrototype(str(exc)) from exc
    return [protos[t] for t in types]


def post_pretrain(
    model: CellRefineModel,
    data: ExpressionDataset,
    ontology: CellOntology,
    catalog: MarkerCatalog,
    cfg: TrainConfig,
) -> tuple[CellRefineModel, RunRecord]:
    """Optimize MLM + lambda1 prototype + lambda2 lineage + lambda3 GMVE.

    Prototype embeddings are re-encoded from the current marker encoder at
    every step. Zero-weighted terms are neither computed nor given
    trainable parameters, so lambda = 0 is plain continued MLM training.
    """
    if model.stage != "pt":
        raise StageOrderViolation(f"post-pretraining needs a pt model, got {model.stage!r}")
    if len(data) == 0:
        raise EmptyDataset("dataset has no cells")
    model = copy.deepcopy(model)
    w = cfg.weights
    types = data.type_names
    type_index = {t: i for i, t in enumerate(types)}
    protos = _prototypes_for(types, ontology, catalog, cfg.prototype_length) if w.lambda1 > 0 else []
    pairs = parent_lineage_pairs(ontology)

    if w.lambda1 > 0 and not model.meta.get("marker_initialized"):
        init_marker_from_cell(model)
        model.meta["marker_initialized"] = True
    if cfg.mode == "LoRA" and model.adapter_cfg is None:
        attach_adapters(model, cfg.adapter)
    train, val = _splits(model, data)
    groups = [_encoder_params(model, cfg.mode), list(model.mlm_head.parameters())]
    if w.lambda1 > 0:
        groups.append(list(model.marker_encoder.parameters()))
    if w.lambda3 > 0:
        groups.append(list(model.gmve.parameters()))
    params = _select_trainable(model, groups)

    def step(rows, epoch, training):
        prep = train if training else val
        tokens, pad, positions, targets = _masked_batch(model, prep, rows, cfg.mask_rate, cfg.seed, epoch)
        h, logits = model.encode(tokens, pad)
        labels = [prep.labels[i] for i in rows]
        zero = h.sum() * 0.0
        mlm = _mlm_term(model, cfg, logits, positions, targets, params)
        proto = lineage = kl = zero
        if w.lambda1 > 0:
            z_m = encode_prototypes(model, protos)
            proto = prototype_loss(h, [type_index[t] for t in labels], z_m, cfg.temperature, reduction="mean")
        if w.lambda2 > 0:
            lineage = lineage_loss(type_means(h, labels), pairs)
        if w.lambda3 > 0:
            kl = gmve_kl(model.gmve, h, cfg.kl_samples, derive_seed(cfg.seed, epoch, rows[0], 7))
        total = total_loss(mlm, proto, lineage, kl, w) if (w.lambda1 or w.lambda2 or w.lambda3) else mlm
        return {"objective": total, "mlm": mlm, "prototype": proto, "lineage": lineage, "gmve": kl}

    record = _train_loop(
        model, cfg, len(train), len(val), params, step, _val_rows(len(val), cfg.batch_size), "post_pretrain"
    )
    model.stage = "pp"
    model.meta["post_pretrain_mode"] = cfg.mode
    return model, record


def _default_held_out(data: ExpressionDataset) -> list[str]:
    counts = data.type_counts()
    return [min(counts, key=lambda t: (counts[t], t))]


def fine_tune(
    model: CellRefineModel, task: str, data: ExpressionDataset, cfg: TrainConfig
) -> tuple[CellRefineModel, RunRecord]:
    """Attach/train a task head; the encoder's trainable set follows ``cfg.mode``.

    LP trains the head only, LL adds the last encoder layer, FF the whole
    encoder, LoRA the adapter factors (attached on demand).
    """
    if model.stage not in ("pt", "pp"):
        raise StageOrderViolation(f"fine-tuning needs a pt or pp model, got {model.stage!r}")
    if task not in TASKS:
        raise IncompatibleTask(f"unknown task {task!r}")
    if task == "perturbation" and data.post_matrix is None:
        raise IncompatibleTask("perturbation fine-tuning needs paired pre/post expression")
    if len(data) == 0:
        raise EmptyDataset("dataset has no cells")
    model = copy.deepcopy(model)
    if cfg.mode == "LoRA" and model.adapter_cfg is None:
        attach_adapters(model, cfg.adapter)

    held_out: list[str] = []
    if task == "perturbation":
        held_out = list(cfg.held_out_types or _default_held_out(data))
    data_ft = data
    if cfg.few_shot_n is not None:
        train_idx = [i for i, s in enumerate(data.splits) if s == "train"]
        picked = few_shot_indices([data.cell_types[i] for i in train_idx], cfg.few_shot_n, cfg.seed)
        keep = sorted({train_idx[i] for i in picked} | {i for i, s in enumerate(data.splits) if s != "train"})
        data_ft = data.subset(keep)
    train, val = _splits(model, data_ft, exclude_types=held_out)
    train_rows = _source_rows(data_ft, "train", held_out)
    val_rows = _source_rows(data_ft, "val", held_out)

    enc = _encoder_params(model, cfg.mode)
    extra = list(model.gmve.parameters()) if cfg.gmve_in_finetune and cfg.lambda3 > 0 else []

    if task == "cell_identity":
        labels = data.type_names
        model.add_classifier(labels)
        label_index = {t: i for i, t in enumerate(labels)}
        params = _select_trainable(model, [enc, list(model.heads["classifier"].parameters()), extra])

        # a frozen encoder yields fixed features: compute them once, in eval mode
        frozen = not enc and not extra
        cache = {"train": _features(model, train), "val": _features(model, val)} if frozen else None

        def step(rows, epoch, training):
            prep = train if training else val
            if cache is not None:
                h = cache["train" if training else "val"][rows]
            else:
                tokens, pad = _plain_batch(model, prep, rows)
                h, _ = model.encode(tokens, pad)
            y = torch.tensor([label_index[prep.labels[i]] for i in rows], dtype=torch.long)
            ce = F.cross_entropy(model.heads["classifier"](h), y)
            out = {"objective": ce, "task": ce}
            if extra:
                kl = gmve_kl(model.gmve, h, cfg.kl_samples, derive_seed(cfg.seed, epoch, rows[0], 7))
                out["objective"] = ce + cfg.lambda3 * kl
                out["gmve"] = kl
            return out

    elif task == "imputation":
        params = _select_trainable(model, [enc, list(model.mlm_head.parameters()), extra])
        step = _mlm_objective(model, cfg, train, val, params)

    else:
        model.add_perturbation_head(held_out)
        params = _select_trainable(model, [enc, list(model.heads["perturbation"].parameters()), extra])
        delta = torch.tensor(data_ft.post_matrix - data_ft.matrix, dtype=next(model.parameters()).dtype)
        src = {"train": train_rows, "val": val_rows}

        def step(rows, epoch, training):
            prep = train if training else val
            tokens, pad = _plain_batch(model, prep, rows)
            h, _ = model.encode(tokens, pad)
            target = delta[[src["train" if training else "val"][i] for i in rows]]
            mse = F.mse_loss(model.heads["perturbation"](h), target)
            return {"objective": mse, "task": mse}

    record = _train_loop(
        model, cfg, len(train), len(val), params, step, _val_rows(len(val), cfg.batch_size), "fine_tune"
    )
    model.stage = "ft"
    model.meta.update({"task": task, "fine_tune_mode": cfg.mode, "few_shot_n": cfg.few_shot_n})
    return model, record


@torch.no_grad()
def _features(model: CellRefineModel, prep: _Prepared, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    out = [torch.zeros(0, model.cell_cfg.hidden_size, dtype=next(model.parameters()).dtype)]
    for s in range(0, len(prep), batch_size):
        tokens, pad = _plain_batch(model, prep, range(s, min(len(prep), s + batch_size)))
        out.append(model.encode(tokens, pad)[0])
    return torch.cat(out)


def _source_rows(data: ExpressionDataset, split: str, exclude: Sequence[str]) -> list[int]:
    return [i for i, (s, t) in enumerate(zip(data.splits, data.cell_types)) if s == split and t not in set(exclude)]


def trainable_parameter_count(model: CellRefineModel) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
