"""Shared builders for small models and datasets used across the test suite."""

from __future__ import annotations

import numpy as np
import torch

from cellrefine.datagen import GeneratorConfig, generate
from cellrefine.model import build_model, encode_prototypes, pad_batch
from cellrefine.ontology import CellOntology, MarkerCatalog, Prototype, parent_lineage_pairs
from cellrefine.tokenizer import GeneVocabulary, TokenSequence, mask_tokens

TINY_GENES = tuple(f"G{i:02d}" for i in range(14))  # + MASK + PAD = vocab 16


def tiny_model(seed: int = 0, num_layers: int = 1, dtype=torch.float64, **kw):
    vocab = GeneVocabulary(TINY_GENES)
    params = dict(
        hidden_size=8, num_layers=num_layers, num_heads=2, marker_layers=1, max_len=8,
        dropout=0.0, latent_dim=3, num_components=2, seed=seed, dtype=dtype,
    )
    params.update(kw)
    model = build_model(vocab, **params)
    model.marker_cfg.dropout = 0.0
    model.eval()
    return model


def tiny_ontology():
    onto = CellOntology.from_edges(
        ["root", "L0", "T0", "T1", "T2"], [("root", "L0"), ("L0", "T0"), ("L0", "T1"), ("root", "T2")]
    )
    return onto, parent_lineage_pairs(onto)


TINY_PROTOS = [
    Prototype("T0", ("G00", "G01", "G02")),
    Prototype("T1", ("G03", "G04", "G05")),
    Prototype("T2", ("G06", "G07", "G08")),
]


def tiny_batch(model, seed: int = 0, batch: int = 4, length: int = 6):
    """Random gene sequences plus a masked copy for the MLM term."""
    rng = np.random.default_rng(seed)
    seqs = [TokenSequence(tuple(int(g) for g in rng.permutation(14)[:length])) for _ in range(batch)]
    masked = [mask_tokens(s, 0.34, seed + i, model.vocab) for i, s in enumerate(seqs)]
    tokens, pad = pad_batch([m.tokens for m in masked], model.vocab.pad_id)
    pos_b = torch.tensor([b for b, m in enumerate(masked) for _ in m.masked_positions])
    pos_t = torch.tensor([p for m in masked for p in m.masked_positions])
    targets = torch.tensor([t for m in masked for t in m.targets])
    return tokens, pad, (pos_b, pos_t), targets


def tiny_prototypes(model):
    return encode_prototypes(model, TINY_PROTOS)


def small_dataset(num_cells: int = 200, seed: int = 0, **kw):
    cfg = GeneratorConfig(
        num_genes=48, num_types=6, num_lineages=2, num_cells=num_cells, markers_per_type=2,
        markers_per_lineage=2, seed=seed, **kw,
    )
    return generate(cfg)


def tiny_train_config(**kw):
    from cellrefine.training import TrainConfig

    base = dict(
        hidden_size=16, num_layers=2, num_heads=2, marker_layers=1, max_len=16, batch_size=16,
        max_epochs=2, warmup_steps=2, prototype_length=4, latent_dim=4, num_components=2, kl_samples=2,
    )
    base.update(kw)
    return TrainConfig(**base)
