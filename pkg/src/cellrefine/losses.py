"""Objective terms of CellRefine post-pretraining and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping

import torch
import torch.nn.functional as F

from .errors import EmptyMaskSet, MissingPrototype, NonFiniteInput, ZeroVector
from .model import GMVEHead

LOG_2PI = math.log(2 * math.pi)


@dataclass
class LossWeights:
    lambda1: float = 1.0  # prototype
    lambda2: float = 1.0  # lineage
    lambda3: float = 1.0  # GMVE
    alpha_reg: float = 0.0  # L2 regularizer inside the MLM term

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def cosine_similarity(a, b) -> torch.Tensor:
    """Cosine along the last axis; raises on zero-norm inputs instead of clamping."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("vectors must have equal length")
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ZeroVector("cosine similarity of a zero vector")
    return (a * b).sum(-1) / (na * nb)


def pairwise_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """[m, D] x [l, D] -> [m, l] cosine matrix."""
    na, nb = a.norm(dim=-1, keepdim=True), b.norm(dim=-1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ZeroVector("cosine similarity of a zero vector")
    return (a / na) @ (b / nb).t()


def prototype_loss(
    cell_embeddings,
    labels,
    prototype_embeddings,
    temperature: float = 1.0,
    reduction: str = "sum",
) -> torch.Tensor:
    """Cross-entropy of each cell against its own type's prototype.

    The softmax runs over every prototype passed in, including types that are
    absent from the batch.
    """
    cells, protos = _as_tensor(cell_embeddings), _as_tensor(prototype_embeddings)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= protos.shape[0]):
        raise MissingPrototype("a cell's type has no prototype embedding")
    sims = pairwise_cosine(cells, protos) / temperature
    return F.cross_entropy(sims, labels, reduction=reduction)


def type_means(embeddings: torch.Tensor, labels: Iterable[Hashable]) -> dict[Hashable, torch.Tensor]:
    """Batch-mean embedding for every type present."""
    labels = list(labels)
    out = {}
    for t in dict.fromkeys(labels):
        idx = torch.tensor([i for i, lab in enumerate(labels) if lab == t])
        out[t] = embeddings[idx].mean(dim=0)
    return out


def lineage_loss(type_mean_embeddings: Mapping[Hashable, torch.Tensor], pairs: Iterable[frozenset]) -> torch.Tensor:
    """Mean cosine over sibling pairs whose both types appear in the batch; 0 if none do."""
    present = [tuple(sorted(p)) for p in pairs if all(t in type_mean_embeddings for t in p)]
    if not present:
        ref = next(iter(type_mean_embeddings.values()), None)
        return torch.zeros((), dtype=ref.dtype if isinstance(ref, torch.Tensor) else torch.float64)
    present.sort()
    a = torch.stack([_as_tensor(type_mean_embeddings[i]) for i, _ in present])
    b = torch.stack([_as_tensor(type_mean_embeddings[j]) for _, j in present])
    return cosine_similarity(a, b).mean()


def _component_log_probs(z: torch.Tensor, means: torch.Tensor, variances: torch.Tensor) -> torch.Tensor:
    # z [..., D] against means/variances [..., L, D] -> [..., L]
    diff = z[..., None, :] - means
    return -0.5 * (LOG_2PI + variances.log() + diff.pow(2) / variances).sum(-1)


def mixture_kl_mc(
    post_weights: torch.Tensor,
    post_means: torch.Tensor,
    post_variances: torch.Tensor,
    prior_weights: torch.Tensor,
    prior_means: torch.Tensor,
    prior_variances: torch.Tensor,
    num_samples: int,
    seed: int,
) -> torch.Tensor:
    """Monte Carlo KL(q || p) between diagonal Gaussian mixtures, one value per cell.

    Posterior tensors are [B, L, D] (weights [B, L]); prior tensors are
    [L', D] (weights [L']). Each posterior component is sampled with the
    reparameterization trick and the component expectation is taken exactly
    under the mixture weights, so the estimate is differentiable in every
    parameter. Fixed seed -> fixed noise.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    b, L, d = post_means.shape
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(num_samples, b, L, d, generator=gen, dtype=post_means.dtype)
    z = post_means + post_variances.sqrt() * eps  # [S, B, L, D]

    # log q(z): every sample against all posterior components of the same cell
    log_q = torch.logsumexp(
        post_weights.log()[None, :, None, :]
        + _component_log_probs(z, post_means[None, :, None], post_variances[None, :, None]),
        dim=-1,
    )
    log_p = torch.logsumexp(prior_weights.log() + _component_log_probs(z, prior_means, prior_variances), dim=-1)
    per_component = (log_q - log_p).mean(dim=0)  # [B, L]
    return (post_weights * per_component).sum(-1)


def gmve_kl(head: GMVEHead, h_c: torch.Tensor, num_samples: int = 8, seed: int = 0) -> torch.Tensor:
    """KL estimate for one embedding (scalar) or the batch mean for [B, H] inputs."""
    post = head.posterior(h_c)
    pw, pm, pv = head.prior()
    kl = mixture_kl_mc(post.weights, post.means, post.variances, pw, pm, pv, num_samples, seed)
    return kl.mean()


def l2_regularizer(params: Iterable[torch.Tensor]) -> torch.Tensor:
    return sum((p.pow(2).sum() for p in params), torch.zeros(()))


def mlm_loss(
    token_logits,
    targets,
    alpha_reg: float = 0.0,
    regularizer_value=0.0,
    reduction: str = "sum",
) -> torch.Tensor:
    """Negative log-likelihood of the original tokens at the masked positions.

    ``token_logits`` holds one row per masked position. ``reduction="mean"``
    averages over masked tokens instead of summing.
    """
    logits = _as_tensor(token_logits)
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.numel() == 0:
        raise EmptyMaskSet("no masked positions")
    nll = F.cross_entropy(logits, targets, reduction=reduction)
    if alpha_reg:
        nll = nll + alpha_reg * regularizer_value
    return nll


def total_loss(mlm, proto, lineage, gmve, w: LossWeights) -> torch.Tensor:
    parts = [_as_tensor(v) for v in (mlm, proto, lineage, gmve)]
    for v in parts:
        if not bool(torch.isfinite(v).all()):
            raise NonFiniteInput("loss component is not finite")
    mlm, proto, lineage, gmve = parts
    return mlm + w.lambda1 * proto + w.lambda2 * lineage + w.lambda3 * gmve
