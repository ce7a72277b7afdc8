"""Cell encoder, marker encoder, GMVE head, MLM head and low-rank adapters."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import AdaptersAlreadyAttached, SequenceTooLong
from .ontology import Prototype
from .tokenizer import GeneVocabulary, TokenSequence, tokenize_genes

STAGES = ("pt", "pp", "ft")


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_len: int = 256
    dropout: float = 0.02
    intermediate_size: int | None = None
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        for name in ("vocab_size", "hidden_size", "num_layers", "num_heads", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        if self.intermediate_size is None:
            self.intermediate_size = 4 * self.hidden_size


@dataclass
class GMVEConfig:
    hidden_size: int
    latent_dim: int = 16
    num_components: int = 8


@dataclass
class AdapterConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    targets: tuple[str, ...] = ("query", "key", "value")

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("adapter rank must be >= 1")
        bad = set(self.targets) - {"query", "key", "value"}
        if bad:
            raise ValueError(f"adapters attach only to attention projections, got {sorted(bad)}")
        self.targets = tuple(self.targets)


class LoRALinear(nn.Module):
    """A frozen linear layer plus a trainable rank-r update scaled by alpha/r."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.scaling = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (self.dropout(x) @ self.lora_A.t() @ self.lora_B.t()) * self.scaling


class SelfAttention(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.hidden_size // cfg.num_heads
        self.query = nn.Linear(cfg.hidden_size, cfg.hidden_size)
        self.key = nn.Linear(cfg.hidden_size, cfg.hidden_size)
        self.value = nn.Linear(cfg.hidden_size, cfg.hidden_size)
        self.out = nn.Linear(cfg.hidden_size, cfg.hidden_size)
        self.dropout = nn.Dropout(cfg.dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(x.shape)
        return self.out(ctx)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attention = SelfAttention(cfg)
        self.attn_norm = nn.LayerNorm(cfg.hidden_size, eps=cfg.layer_norm_eps)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.hidden_size, cfg.intermediate_size),
            nn.ReLU(),
            nn.Linear(cfg.intermediate_size, cfg.hidden_size),
        )
        self.ffn_norm = nn.LayerNorm(cfg.hidden_size, eps=cfg.layer_norm_eps)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        x = self.attn_norm(x + self.dropout(self.attention(x, pad_mask)))
        return self.ffn_norm(x + self.dropout(self.ffn(x)))


class Encoder(nn.Module):
    """Post-LN transformer over gene tokens with learned rank-position embeddings."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.hidden_size)
        self.position_embedding = nn.Embedding(cfg.max_len, cfg.hidden_size)
        self.embedding_norm = nn.LayerNorm(cfg.hidden_size, eps=cfg.layer_norm_eps)
        self.dropout = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))

    def forward(self, tokens: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        if tokens.shape[1] > self.cfg.max_len:
            raise SequenceTooLong(f"length {tokens.shape[1]} exceeds max_len {self.cfg.max_len}")
        pos = torch.arange(tokens.shape[1], device=tokens.device)
        x = self.token_embedding(tokens) + self.position_embedding(pos)[None]
        x = self.dropout(self.embedding_norm(x))
        for layer in self.layers:
            x = layer(x, pad_mask)
        return x


def mean_pool(hidden: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
    keep = (~pad_mask).to(hidden.dtype)[..., None]
    return (hidden * keep).sum(dim=1) / keep.sum(dim=1)


@dataclass
class GMVEPosterior:
    """Per-cell mixture parameters: weights [B, L], means and variances [B, L, D]."""

    weights: torch.Tensor
    means: torch.Tensor
    variances: torch.Tensor

    def sample(self, num_samples: int, seed: int) -> torch.Tensor:
        """Draw [num_samples, B, D] latents; seeded component choice, then reparameterization."""
        gen = torch.Generator().manual_seed(seed)
        b, L, d = self.means.shape
        comp = torch.multinomial(self.weights.detach(), num_samples, replacement=True, generator=gen).t()
        eps = torch.randn(num_samples, b, d, generator=gen, dtype=self.means.dtype)
        rows = torch.arange(b)[None, :].expand(num_samples, b)
        mu = self.means[rows, comp]
        var = self.variances[rows, comp]
        return mu + var.sqrt() * eps


class GMVEHead(nn.Module):
    """Mixture-of-Gaussians posterior q(z|h) and a learned mixture prior.

    Mixture weights come from a softmax, diagonal variances from softplus.
    """

    def __init__(self, cfg: GMVEConfig):
        super().__init__()
        self.cfg = cfg
        L, d = cfg.num_components, cfg.latent_dim
        self.weight_net = nn.Linear(cfg.hidden_size, L)
        self.mean_net = nn.Linear(cfg.hidden_size, L * d)
        self.var_net = nn.Linear(cfg.hidden_size, L * d)
        self.prior_logits = nn.Parameter(torch.zeros(L))
        self.prior_means = nn.Parameter(torch.randn(L, d))
        self.prior_raw_var = nn.Parameter(torch.zeros(L, d))

    def posterior(self, h: torch.Tensor) -> GMVEPosterior:
        if h.dim() == 1:
            h = h[None]
        L, d = self.cfg.num_components, self.cfg.latent_dim
        return GMVEPosterior(
            weights=torch.softmax(self.weight_net(h), dim=-1),
            means=self.mean_net(h).view(-1, L, d),
            variances=F.softplus(self.var_net(h)).view(-1, L, d),
        )

    def prior(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return torch.softmax(self.prior_logits, dim=-1), self.prior_means, F.softplus(self.prior_raw_var)


class CellRefineModel(nn.Module):
    """All trainable state of one pipeline run, tagged with its training stage.

    ``heads`` holds task heads added during fine-tuning: ``classifier``
    (identity) and ``perturbation`` (expression-delta regression).
    """

    def __init__(
        self,
        vocab: GeneVocabulary,
        cell_cfg: EncoderConfig,
        marker_cfg: EncoderConfig,
        gmve_cfg: GMVEConfig,
    ):
        super().__init__()
        self.vocab = vocab
        self.cell_cfg = cell_cfg
        self.marker_cfg = marker_cfg
        self.gmve_cfg = gmve_cfg
        self.cell_encoder = Encoder(cell_cfg)
        self.marker_encoder = Encoder(marker_cfg)
        self.mlm_head = nn.Linear(cell_cfg.hidden_size, cell_cfg.vocab_size)
        self.gmve = GMVEHead(gmve_cfg)
        self.heads = nn.ModuleDict()
        self.adapter_cfg: AdapterConfig | None = None
        self.stage: str | None = None
        self.meta: dict = {}

    @property
    def hidden_size(self) -> int:
        return self.cell_cfg.hidden_size

    def encode(self, tokens: torch.Tensor, pad_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Batched forward: pooled cell embeddings [B, H] and token logits [B, T, V]."""
        hidden = self.cell_encoder(tokens, pad_mask)
        return mean_pool(hidden, pad_mask), self.mlm_head(hidden)

    def encode_markers(self, tokens: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        return mean_pool(self.marker_encoder(tokens, pad_mask), pad_mask)

    def add_classifier(self, labels: Sequence[str]) -> None:
        self.heads["classifier"] = nn.Linear(self.hidden_size, len(labels))
        self.meta["labels"] = list(labels)

    def add_perturbation_head(self, held_out: Sequence[str]) -> None:
        self.heads["perturbation"] = nn.Linear(self.hidden_size, len(self.vocab.genes))
        self.meta["held_out"] = list(held_out)

    def base_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        """Cell-encoder parameters excluding adapter factors."""
        for name, p in self.cell_encoder.named_parameters():
            if "lora_" not in name:
                yield name, p

    def adapter_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        for name, p in self.cell_encoder.named_parameters():
            if "lora_" in name:
                yield name, p


def build_model(
    vocab: GeneVocabulary,
    *,
    hidden_size: int = 64,
    num_layers: int = 2,
    num_heads: int = 4,
    marker_layers: int = 2,
    max_len: int = 256,
    marker_max_len: int = 200,
    dropout: float = 0.02,
    marker_dropout: float = 0.01,
    latent_dim: int = 16,
    num_components: int = 8,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> CellRefineModel:
    torch.manual_seed(seed)
    cell_cfg = EncoderConfig(vocab.size, hidden_size, num_layers, num_heads, max_len, dropout)
    marker_cfg = EncoderConfig(vocab.size, hidden_size, marker_layers, num_heads, marker_max_len, marker_dropout)
    model = CellRefineModel(vocab, cell_cfg, marker_cfg, GMVEConfig(hidden_size, latent_dim, num_components))
    model.meta["init_seed"] = seed
    return model.to(dtype)


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in seqs)
    tokens = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return tokens, tokens == pad_id


def encode_cell(model: CellRefineModel, seq: TokenSequence) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-cell forward: (h_c [H], token logits [t, V])."""
    if len(seq) > model.cell_cfg.max_len:
        raise SequenceTooLong(f"length {len(seq)} exceeds max_len {model.cell_cfg.max_len}")
    tokens, pad = pad_batch([seq.tokens], model.vocab.pad_id)
    h, logits = model.encode(tokens, pad)
    return h[0], logits[0]


def encode_prototype(model: CellRefineModel, proto: Prototype, vocab: GeneVocabulary | None = None) -> torch.Tensor:
    vocab = vocab or model.vocab
    seq = tokenize_genes(proto.genes, vocab)
    tokens, pad = pad_batch([seq.tokens], vocab.pad_id)
    return model.encode_markers(tokens, pad)[0]


def encode_prototypes(model: CellRefineModel, protos: Sequence[Prototype]) -> torch.Tensor:
    """Stacked prototype embeddings [l, H], in the given order."""
    seqs = [tokenize_genes(p.genes, model.vocab).tokens for p in protos]
    tokens, pad = pad_batch(seqs, model.vocab.pad_id)
    return model.encode_markers(tokens, pad)


def gmve_posterior(head: GMVEHead, h_c: torch.Tensor) -> GMVEPosterior:
    return head.posterior(h_c)


@torch.no_grad()
def init_marker_from_cell(model: CellRefineModel) -> int:
    """Copy cell-encoder weights into the marker encoder wherever shapes allow.

    Embedding tables copy their overlapping rows and the first
    ``marker_layers`` transformer layers copy layer by layer. Adapter factors
    are skipped. Returns the number of tensors copied.
    """
    source = {k: v for k, v in model.cell_encoder.state_dict().items() if "lora_" not in k}
    copied = 0
    for name, target in model.marker_encoder.state_dict().items():
        src = source.get(name)
        if src is None:
            src = source.get(name.replace(".weight", ".base.weight").replace(".bias", ".base.bias"))
        if src is None or src.dim() != target.dim() or src.shape[1:] != target.shape[1:]:
            continue
        rows = min(src.shape[0], target.shape[0])
        target[:rows].copy_(src[:rows])
        copied += 1
    return copied


def attach_adapters(model: CellRefineModel, cfg: AdapterConfig | None = None) -> CellRefineModel:
    """Wrap the cell encoder's attention projections with zero-initialized LoRA factors."""
    if model.adapter_cfg is not None:
        raise AdaptersAlreadyAttached("adapters are already attached")
    cfg = cfg or AdapterConfig()
    for layer in model.cell_encoder.layers:
        for target in cfg.targets:
            setattr(layer.attention, target, LoRALinear(getattr(layer.attention, target), cfg.rank, cfg.alpha, cfg.dropout))
    for _, p in model.base_parameters():
        p.requires_grad_(False)
    model.adapter_cfg = cfg
    return model


def adapter_config_dict(cfg: AdapterConfig | None) -> dict | None:
    return None if cfg is None else {**asdict(cfg), "targets": list(cfg.targets)}
