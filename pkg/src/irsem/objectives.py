"""Pretraining and fine-tuning losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .model import Batch, PretrainModel, mlm_logits, mlm_loss


@dataclass(frozen=True)
class PretrainLossWeights:
    lam: float = 1.0
    mu: float = 1000.0

    def __post_init__(self) -> None:
        if self.lam < 0 or self.mu < 0:
            raise ValueError("loss coefficients must be non-negative")


@dataclass(frozen=True)
class MocoConfig:
    queue_size: int = 1024
    momentum: float = 0.999
    temperature: float = 0.02

    def __post_init__(self) -> None:
        if self.queue_size <= 0:
            raise ValueError("queue_size must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


FULL_SCALE_MOCO = MocoConfig(queue_size=65536, momentum=0.999, temperature=0.02)
FULL_SCALE_MOCO_DIM = 256


class MocoQueue:
    """Fixed-capacity FIFO of unit-norm key vectors."""

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float64):
        self.capacity = capacity
        self.buf = torch.zeros(capacity, dim, dtype=dtype)
        self.cursor = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def entries(self) -> Tensor:
        """Stored keys, oldest first."""
        if self.count < self.capacity:
            return self.buf[:self.count]
        return torch.roll(self.buf, -self.cursor, dims=0)

    def enqueue(self, keys: Tensor) -> None:
        keys = keys.detach().to(self.buf.dtype)
        if keys.shape[0] > self.capacity:
            keys = keys[-self.capacity:]
        for row in keys:
            self.buf[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
        self.count = min(self.capacity, self.count + keys.shape[0])

    def state(self) -> dict:
        return {"buf": self.buf.clone(), "cursor": self.cursor, "count": self.count}

    def load(self, state: dict) -> None:
        if state["buf"].shape != self.buf.shape:
            raise ValueError("queue shape mismatch")
        self.buf = state["buf"].clone().to(self.buf.dtype)
        self.cursor = int(state["cursor"])
        self.count = int(state["count"])


def moco_loss(q: Tensor, k: Tensor, negatives: Tensor, temperature: float) -> Tensor:
    """InfoNCE with one positive per query and shared queue negatives.

    ``q`` and ``k`` are normalized here; queue entries are stored normalized.
    With no negatives the loss is zero.
    """
    q = F.normalize(q, dim=-1)
    k = F.normalize(k, dim=-1)
    pos = (q * k).sum(-1, keepdim=True)
    neg = q @ negatives.to(q.dtype).T
    logits = torch.cat([pos, neg], dim=1) / temperature
    target = torch.zeros(q.shape[0], dtype=torch.long)
    return F.cross_entropy(logits, target)


@torch.no_grad()
def momentum_update(pairs: Sequence[tuple[Tensor, Tensor]], m: float) -> None:
    for q, k in pairs:
        k.mul_(m).add_(q.detach(), alpha=1.0 - m)


@dataclass
class PretrainLosses:
    total: Tensor
    mlm: Tensor
    moco: Tensor
    keys: Tensor


@torch.no_grad()
def key_features(model: PretrainModel, key: Batch) -> Tensor:
    """Normalized momentum-path features; constant with respect to the query path."""
    return F.normalize(model.key_moco(model.key_encoder(key, run_post=False).cls), dim=-1)


def query_losses(model: PretrainModel, query: Batch, keys: Tensor, negatives: Tensor,
                 weights: PretrainLossWeights, temperature: float) -> PretrainLosses:
    out = model.encoder(query)
    logits, targets = mlm_logits(out, query, model.mlm)
    l_mlm = mlm_loss(logits, targets)
    l_moco = moco_loss(model.moco(out.cls), keys, negatives, temperature)
    total = weights.lam * l_mlm + weights.mu * l_moco
    return PretrainLosses(total, l_mlm, l_moco, keys)


def pretrain_losses(model: PretrainModel, query: Batch, key: Batch, queue: MocoQueue,
                    weights: PretrainLossWeights, temperature: float) -> PretrainLosses:
    k = key_features(model, key)
    return query_losses(model, query, k, queue.entries(), weights, temperature)


def diffing_batch_loss(v: Tensor, v_pos: Tensor, v_neg: Tensor, labels: Sequence, tau: float) -> Tensor:
    """Batch loss over (anchor, positive, negative) triplets.

    p_i = exp(v_i.v+_i/tau); n_i = exp(v_i.v-_i/tau) plus, for every j with a
    different label, exp(v_i.v_j/tau) + exp(v_i.v+_j/tau);
    L = -mean log(p_i / (p_i + n_i)). Computed in log space.
    """
    n = v.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    lab = list(labels)
    other = torch.tensor([[lab[i] != lab[j] for j in range(n)] for i in range(n)])
    pos = (v * v_pos).sum(-1) / tau
    neg = (v * v_neg).sum(-1) / tau
    vv = (v @ v.T) / tau
    vp = (v @ v_pos.T) / tau
    fill = torch.finfo(v.dtype).min
    terms = torch.cat([pos[:, None], neg[:, None],
                       vv.masked_fill(~other, fill), vp.masked_fill(~other, fill)], dim=1)
    return (torch.logsumexp(terms, dim=1) - pos).mean()


class ClassificationHead(nn.Module):
    """Dense layer, then a projection to class logits."""

    def __init__(self, d: int, num_classes: int = 104):
        super().__init__()
        self.dense = nn.Linear(d, d)
        self.proj = nn.Linear(d, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(torch.tanh(self.dense(x)))


def classification_forward(files: Sequence[Tensor], head: ClassificationHead,
                           labels: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
    """Sum each file's function vectors, score them, and optionally take CE."""
    pooled = torch.stack([f.sum(0) for f in files])
    logits = head(pooled)
    loss = F.cross_entropy(logits, labels) if labels is not None else None
    return logits, loss


def diffing_tau(d: int) -> float:
    return math.sqrt(d)
