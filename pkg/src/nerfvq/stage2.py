"""Causal token transformer with class-prefix conditioning and filtered sampling."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .diffcore import ContractViolation
from .nets import TransformerBlock


@dataclass
class SamplerConfig:
    top_k: int = 1000
    top_p: float = 1.0
    temperature: float = 1.0

    def validate(self, K: int) -> None:
        if not 1 <= self.top_k <= K:
            raise ContractViolation(f"top_k must be in [1, {K}], got {self.top_k}")
        if not 0 < self.top_p <= 1:
            raise ContractViolation(f"top_p must be in (0, 1], got {self.top_p}")
        if self.temperature < 0:
            raise ContractViolation("temperature must be non-negative")


@dataclass
class TokenSequence:
    tokens: Tensor  # [n] int64
    class_id: int | None = None


class TokenTransformer(nn.Module):
    """Next-token model over flattened token grids.

    Position 0 holds a prefix embedding: the class embedding for conditional
    models, or a single learned start embedding.  Logits at position ``t``
    predict token ``t``, so the prefix itself is never scored.
    """

    def __init__(self, vocab: int, seq_len: int, n_classes: int = 0, dim: int = 256, depth: int = 4, heads: int = 4):
        super().__init__()
        self.vocab = vocab
        self.seq_len = seq_len
        self.n_classes = n_classes
        self.tok = nn.Embedding(vocab, dim)
        self.prefix = nn.Embedding(max(n_classes, 1), dim)
        self.pos = nn.Parameter(torch.randn(1, seq_len, dim) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, vocab)

    def _prefix_ids(self, class_ids: Tensor | None, batch: int) -> Tensor:
        if self.n_classes == 0:
            return torch.zeros(batch, dtype=torch.long)
        if class_ids is None:
            raise ContractViolation("conditional model needs class ids")
        return torch.as_tensor(class_ids, dtype=torch.long).reshape(batch)

    def forward(self, tokens: Tensor, class_ids: Tensor | None = None) -> Tensor:
        """Logits ``[B, T, vocab]`` for a (possibly partial, ``T <= seq_len``) token prefix.

        ``tokens`` holds the first ``T - 1`` tokens; the output row ``t``
        is the distribution of token ``t``.
        """
        B, T1 = tokens.shape
        T = T1 + 1
        if T > self.seq_len:
            raise ContractViolation(f"sequence longer than {self.seq_len}")
        x = torch.cat([self.prefix(self._prefix_ids(class_ids, B)).unsqueeze(1), self.tok(tokens)], dim=1)
        x = x + self.pos[:, :T]
        for blk in self.blocks:
            x = blk(x, causal=True)
        return self.head(self.norm(x))


def nll(model: TokenTransformer, tokens: Tensor, class_ids: Tensor | None = None) -> Tensor:
    """Mean next-token negative log-likelihood (nats/token) of ``tokens[B, n]``."""
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    logits = model(tokens[:, :-1], class_ids)
    return F.cross_entropy(logits.reshape(-1, model.vocab), tokens.reshape(-1))


def filter_probs(probs: Tensor, top_k: int, top_p: float, tol: float = 1e-6) -> Tensor:
    """Top-k then top-p truncation of ``probs[..., K]``, renormalised.

    Top-p keeps the shortest descending prefix of the top-k survivors whose
    (renormalised) mass reaches ``top_p``; the token that crosses the
    threshold is included.
    """
    p = probs.to(torch.float64)
    sorted_p, order = torch.sort(p, dim=-1, descending=True, stable=True)
    rank = torch.arange(p.shape[-1])
    sorted_p = torch.where(rank < top_k, sorted_p, torch.zeros_like(sorted_p))
    sorted_p = sorted_p / sorted_p.sum(dim=-1, keepdim=True)
    mass_before = torch.cumsum(sorted_p, dim=-1) - sorted_p
    sorted_p = torch.where(mass_before < top_p - tol, sorted_p, torch.zeros_like(sorted_p))
    out = torch.zeros_like(p).scatter(-1, order, sorted_p)
    return out / out.sum(dim=-1, keepdim=True)


def filtered_sample(probs: Tensor, cfg: SamplerConfig, rng: torch.Generator | None = None, num_samples: int = 1) -> Tensor:
    """Draw indices from ``probs[K]`` after top-k / top-p filtering."""
    cfg.validate(probs.shape[-1])
    kept = filter_probs(probs, cfg.top_k, cfg.top_p)
    if cfg.top_k == 1:
        return kept.argmax(dim=-1, keepdim=True).expand(*kept.shape[:-1], num_samples)
    return torch.multinomial(kept, num_samples, replacement=True, generator=rng)


@torch.no_grad()
def generate(
    model: TokenTransformer, class_id: int | None, cfg: SamplerConfig, rng: torch.Generator | None = None
) -> TokenSequence:
    """Autoregressive rollout of a full token sequence.  ``temperature == 0`` is greedy."""
    cfg.validate(model.vocab)
    cls = None if class_id is None else torch.tensor([class_id])
    tokens = torch.zeros(1, 0, dtype=torch.long)
    for _ in range(model.seq_len):
        logits = model(tokens, cls)[0, -1].to(torch.float64)
        if cfg.temperature == 0:
            nxt = logits.argmax().reshape(1)
        else:
            nxt = filtered_sample(torch.softmax(logits / cfg.temperature, dim=-1), cfg, rng)
        tokens = torch.cat([tokens, nxt.reshape(1, 1)], dim=1)
    return TokenSequence(tokens[0], class_id)
