from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from cellrefine.checkpoint import file_sha256, load_checkpoint, save_checkpoint
from cellrefine.errors import AdaptersAlreadyAttached, SequenceTooLong, StageOrderViolation, UnknownGene
from cellrefine.model import (
    AdapterConfig,
    EncoderConfig,
    attach_adapters,
    encode_cell,
    encode_prototype,
    gmve_posterior,
    init_marker_from_cell,
    pad_batch,
)
from cellrefine.ontology import Prototype
from cellrefine.tokenizer import TokenSequence

from helpers import tiny_model


def seq(*tokens):
    return TokenSequence(tuple(tokens))


# --- encoders -------------------------------------------------------------------------------


def test_encode_cell_shapes():
    model = tiny_model()
    h, logits = encode_cell(model, seq(3, 1, 4, 1, 5))
    assert h.shape == (8,)
    assert logits.shape == (5, model.vocab.size)


def test_encode_cell_deterministic_in_eval_mode():
    model = tiny_model()
    a, _ = encode_cell(model, seq(2, 7, 1, 8))
    b, _ = encode_cell(model, seq(2, 7, 1, 8))
    assert torch.equal(a, b)


def test_padding_does_not_change_embedding():
    model = tiny_model()
    short = [2, 7, 1]
    tokens, pad = pad_batch([short, [0, 1, 2, 3, 4, 5, 6]], model.vocab.pad_id)
    h_padded, _ = model.encode(tokens, pad)
    h_alone, _ = encode_cell(model, seq(*short))
    assert torch.allclose(h_padded[0], h_alone, atol=1e-12)


def test_sequence_too_long():
    model = tiny_model()
    with pytest.raises(SequenceTooLong):
        encode_cell(model, seq(*range(9)))


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=16, hidden_size=10, num_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=0)


def test_prototype_embeddings():
    model = tiny_model()
    p = Prototype("T", ("G00", "G05", "G09"))
    z = encode_prototype(model, p)
    assert z.shape == (8,)
    assert torch.equal(z, encode_prototype(model, Prototype("T", ("G00", "G05", "G09"))))
    reordered = encode_prototype(model, Prototype("T", ("G09", "G05", "G00")))
    assert not torch.allclose(z, reordered)
    with pytest.raises(UnknownGene):
        encode_prototype(model, Prototype("T", ("nope",)))


def test_marker_encoder_initialized_from_cell_encoder():
    model = tiny_model(seed=3)
    assert init_marker_from_cell(model) > 0
    cell, marker = model.cell_encoder, model.marker_encoder
    assert torch.equal(cell.token_embedding.weight, marker.token_embedding.weight)
    assert torch.equal(cell.position_embedding.weight, marker.position_embedding.weight[: cell.cfg.max_len])
    assert torch.equal(cell.layers[0].ffn[0].weight, marker.layers[0].ffn[0].weight)


# --- GMVE head ------------------------------------------------------------------------------


def test_gmve_parameterization():
    model = tiny_model()
    head = model.gmve
    with torch.no_grad():
        for net in (head.weight_net, head.var_net):
            net.weight.zero_()
            net.bias.zero_()
    post = gmve_posterior(head, torch.randn(8, dtype=torch.float64))
    assert torch.allclose(post.variances, torch.full_like(post.variances, math.log(2)))
    assert torch.allclose(post.weights, torch.full_like(post.weights, 0.5))
    assert abs(math.log(2) - 0.6931) < 1e-4


def test_gmve_posterior_constraints_and_seeded_sampling():
    model = tiny_model(seed=4)
    h = torch.randn(5, 8, dtype=torch.float64) * 3
    post = gmve_posterior(model.gmve, h)
    assert torch.allclose(post.weights.sum(-1), torch.ones(5, dtype=torch.float64), atol=1e-6)
    assert bool((post.variances > 0).all())
    prior_w, _, prior_v = model.gmve.prior()
    assert abs(float(prior_w.sum()) - 1.0) < 1e-6 and bool((prior_v > 0).all())
    a, b = post.sample(16, seed=9), post.sample(16, seed=9)
    assert a.shape == (16, 5, 3) and torch.equal(a, b)
    assert not torch.equal(a, post.sample(16, seed=10))


# --- adapters -------------------------------------------------------------------------------------


def test_adapters_preserve_outputs_at_init():
    model = tiny_model(seed=5, num_layers=2, dtype=torch.float32)
    tokens, pad = pad_batch([[1, 2, 3, 4], [5, 6, 7]], model.vocab.pad_id)
    before_h, before_logits = model.encode(tokens, pad)
    attach_adapters(model, AdapterConfig(rank=8, alpha=16))
    model.eval()
    after_h, after_logits = model.encode(tokens, pad)
    assert float((before_h - after_h).abs().max()) <= 1e-6
    assert float((before_logits - after_logits).abs().max()) <= 1e-6


def test_adapter_parameter_count_oracle():
    model = tiny_model(num_layers=2)
    attach_adapters(model, AdapterConfig(rank=4, alpha=8))
    expected = 0
    for layer in model.cell_encoder.layers:
        for name in ("query", "key", "value"):
            base = getattr(layer.attention, name).base
            expected += 4 * (base.in_features + base.out_features)
    assert sum(p.numel() for _, p in model.adapter_parameters()) == expected
    assert all(not p.requires_grad for _, p in model.base_parameters())
    assert all(p.requires_grad for _, p in model.adapter_parameters())


def test_adapters_attach_once():
    model = tiny_model()
    attach_adapters(model)
    assert (model.adapter_cfg.rank, model.adapter_cfg.alpha) == (8, 16)
    with pytest.raises(AdaptersAlreadyAttached):
        attach_adapters(model)


def test_adapters_only_target_attention():
    with pytest.raises(ValueError):
        AdapterConfig(targets=("ffn",))


# --- checkpoints ----------------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = tiny_model(seed=6)
    attach_adapters(model)
    model.add_classifier(["a", "b", "c"])
    model.stage = "pp"
    path = save_checkpoint(model, tmp_path / "m.npz")
    again = load_checkpoint(path)
    again.eval()
    model.eval()
    tokens, pad = pad_batch([[1, 2, 3]], model.vocab.pad_id)
    assert torch.equal(model.encode(tokens, pad)[0], again.encode(tokens, pad)[0])
    assert again.stage == "pp" and again.meta["labels"] == ["a", "b", "c"]
    assert again.adapter_cfg == model.adapter_cfg
    np.testing.assert_array_equal(again.vocab.medians, model.vocab.medians)


def test_checkpoint_bytes_are_reproducible(tmp_path):
    model = tiny_model(seed=7)
    model.stage = "pt"
    a = save_checkpoint(model, tmp_path / "a.npz")
    b = save_checkpoint(load_checkpoint(a), tmp_path / "b.npz")
    assert file_sha256(a) == file_sha256(b)


def test_checkpoint_stage_gate(tmp_path):
    model = tiny_model()
    model.stage = "ft"
    path = save_checkpoint(model, tmp_path / "ft.npz")
    with pytest.raises(StageOrderViolation):
        load_checkpoint(path, allowed_stages=("pt",))
