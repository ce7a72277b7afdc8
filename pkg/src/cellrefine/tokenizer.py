"""Rank-value tokenization of expression profiles and MLM masking."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AllZeroExpression, LengthMismatch, RateOutOfRange, UnknownGene

DEFAULT_MAX_LEN = 256
DEFAULT_MASK_RATE = 0.15


@dataclass(frozen=True)
class GeneVocabulary:
    """Gene tokens followed by the reserved MASK (k-2) and PAD (k-1) tokens.

    ``medians`` holds the per-gene normalization factors (non-zero medians of
    the training split); unit factors when none were fitted.
    """

    genes: tuple[str, ...]
    medians: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.genes)) != len(self.genes):
            raise ValueError("gene ids must be unique")
        med = np.ones(len(self.genes)) if self.medians is None else np.asarray(self.medians, dtype=np.float64)
        if med.shape != (len(self.genes),) or np.any(med <= 0):
            raise ValueError("medians must be positive, one per gene")
        object.__setattr__(self, "medians", med)
        object.__setattr__(self, "_index", {g: i for i, g in enumerate(self.genes)})
        # tie-break rank of each gene by ascending gene id
        order = sorted(range(len(self.genes)), key=lambda i: self.genes[i])
        id_rank = np.empty(len(self.genes), dtype=np.int64)
        id_rank[order] = np.arange(len(self.genes))
        object.__setattr__(self, "_id_rank", id_rank)

    @property
    def size(self) -> int:
        return len(self.genes) + 2

    @property
    def mask_id(self) -> int:
        return len(self.genes)

    @property
    def pad_id(self) -> int:
        return len(self.genes) + 1

    def index(self, gene: str) -> int:
        try:
            return self._index[gene]
        except KeyError:
            raise UnknownGene(gene) from None

    def with_medians(self, matrix: np.ndarray) -> "GeneVocabulary":
        """Fit per-gene non-zero medians on a cells x genes matrix."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape[1] != len(self.genes):
            raise LengthMismatch("matrix columns do not match the vocabulary")
        med = np.ones(len(self.genes))
        for j in range(matrix.shape[1]):
            col = matrix[:, j]
            col = col[col > 0]
            if col.size:
                med[j] = np.median(col)
        return GeneVocabulary(self.genes, med)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(list(self.genes)) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "GeneVocabulary":
        return cls(tuple(json.loads(Path(path).read_text())))


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    masked_positions: tuple[int, ...] = ()
    targets: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.tokens)

    def restored(self) -> tuple[int, ...]:
        out = list(self.tokens)
        for pos, tok in zip(self.masked_positions, self.targets):
            out[pos] = tok
        return tuple(out)


def rank_genes(expression: Sequence[float], vocab: GeneVocabulary) -> np.ndarray:
    """Indices of expressed genes, highest normalized value first."""
    x = np.asarray(expression, dtype=np.float64)
    if x.shape != (len(vocab.genes),):
        raise LengthMismatch(f"expression has {x.size} values, vocabulary has {len(vocab.genes)} genes")
    expressed = np.flatnonzero(x > 0)
    if expressed.size == 0:
        raise AllZeroExpression("cell expresses no genes")
    norm = x[expressed] / vocab.medians[expressed]
    order = np.lexsort((vocab._id_rank[expressed], -norm))
    return expressed[order]


def tokenize(expression: Sequence[float], vocab: GeneVocabulary, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    ranked = rank_genes(expression, vocab)[:max_len]
    return TokenSequence(tokens=tuple(int(i) for i in ranked))


def tokenize_genes(genes: Sequence[str], vocab: GeneVocabulary) -> TokenSequence:
    """Tokenize an already ordered gene list (prototypes keep their order)."""
    return TokenSequence(tokens=tuple(vocab.index(g) for g in genes))


def num_masked(rate: float, length: int) -> int:
    return int(math.floor(rate * length + 0.5))


def mask_tokens(seq: TokenSequence, rate: float, seed: int, vocab: GeneVocabulary) -> TokenSequence:
    """Replace round(rate * t) seeded positions with MASK and record the originals."""
    if not 0.0 <= rate <= 1.0:
        raise RateOutOfRange(rate)
    if seq.masked_positions:
        raise ValueError("sequence is already masked")
    t = len(seq)
    candidates = [i for i, tok in enumerate(seq.tokens) if tok != vocab.pad_id]
    n = min(num_masked(rate, t), len(candidates))
    rng = np.random.default_rng(seed)
    positions = np.sort(rng.choice(np.asarray(candidates, dtype=np.int64), size=n, replace=False)) if n else []
    tokens = list(seq.tokens)
    targets = []
    for pos in positions:
        targets.append(tokens[pos])
        tokens[pos] = vocab.mask_id
    return TokenSequence(tuple(tokens), tuple(int(p) for p in positions), tuple(targets))
