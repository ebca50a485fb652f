"""Hierarchical encoder over IR and environment tokens.

Token-level encoders read each K-instruction group on their own, tokens
are mean-pooled per instruction, an instruction-level encoder relates the
instructions (its first attention layer also sees the positional condition
codes), and recovery encoders work on the up-sampled instruction states
plus a residual from the token level.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .pce import CLS_ROW, POSITION_OFFSET, SEP_ROW, UNKNOWN_ROW
from .text import CLS_ID, PAD_ID, SEP_ID, MaskPlan, TrainingSample, apply_mask

IGNORE = -100
DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d: int = 32
    heads: int = 2
    ff: int = 0  # 0 means 4*d
    pre_layers: int = 3
    inst_layers: int = 6
    post_layers: int = 3
    K: int = 4
    B_ir: int = 32
    B_env: int = 16
    max_instructions: int = 256
    # whether [CLS]/[SEP] take two of the 2*max_instructions positions
    specials_in_budget: bool = True
    moco_dim: int = 64
    dropout: float = 0.1
    init_std: float = 0.02
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        for name in ("vocab_size", "d", "heads", "K", "B_ir", "B_env", "max_instructions", "moco_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.inst_layers < 1:
            raise ValueError("at least one instruction-level layer is needed")

    @classmethod
    def full(cls, vocab_size: int, **kw) -> "ModelConfig":
        base = dict(d=768, heads=12, moco_dim=256, specials_in_budget=False, dtype="float32")
        base.update(kw)
        return cls(vocab_size, **base)

    @classmethod
    def desk(cls, vocab_size: int, **kw) -> "ModelConfig":
        return cls(vocab_size, **kw)

    @property
    def ff_dim(self) -> int:
        return self.ff or 4 * self.d

    @property
    def side_capacity(self) -> int:
        return self.max_instructions - (1 if self.specials_in_budget else 0)

    @property
    def seq_len(self) -> int:
        return 2 * self.side_capacity + 2

    @property
    def position_rows(self) -> int:
        return self.side_capacity + POSITION_OFFSET

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------- layers

def _masked_softmax(scores: Tensor, key_pad: Tensor | None) -> Tensor:
    if key_pad is not None:
        # rows with every key padded become uniform instead of NaN
        scores = scores.masked_fill(key_pad[:, None, None, :], torch.finfo(scores.dtype).min)
    return torch.softmax(scores, dim=-1)


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product attention with biases."""

    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.view(b, t, self.heads, d // self.heads).transpose(1, 2)

    def scores(self, h: Tensor) -> Tensor:
        q, k = self._split(self.q(h)), self._split(self.k(h))
        return q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])

    def forward(self, h: Tensor, key_pad: Tensor | None = None) -> tuple[Tensor, Tensor]:
        probs = _masked_softmax(self.scores(h), key_pad)
        z = self.drop(probs) @ self._split(self.v(h))
        b, _, t, _ = z.shape
        return self.out(z.transpose(1, 2).reshape(b, t, -1)), probs


class PceAttention(nn.Module):
    """Self-attention whose scores add three positional correlation terms.

    For one head,
        alpha_ij = (h_i Wq . h_j Wk + p_i Uq . p_j Uk + p1_i U1q . p1_j U1k
                    + p0_i U0q . p0_j U0k) / sqrt(4 d)
    with p, p1, p0 the current, true-target and false-target embeddings.
    With several heads every term is computed per head and ``d`` is the
    head width.
    """

    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.W_q = nn.Linear(d, d, bias=False)
        self.W_k = nn.Linear(d, d, bias=False)
        self.W_v = nn.Linear(d, d, bias=False)
        self.U_q = nn.Linear(d, d, bias=False)
        self.U_k = nn.Linear(d, d, bias=False)
        self.U1_q = nn.Linear(d, d, bias=False)
        self.U1_k = nn.Linear(d, d, bias=False)
        self.U0_q = nn.Linear(d, d, bias=False)
        self.U0_k = nn.Linear(d, d, bias=False)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.view(b, t, self.heads, d // self.heads).transpose(1, 2)

    def _term(self, x: Tensor, uq: nn.Linear, uk: nn.Linear) -> Tensor:
        return self._split(uq(x)) @ self._split(uk(x)).transpose(-1, -2)

    def scores(self, h: Tensor, p: Tensor, p1: Tensor, p0: Tensor) -> Tensor:
        d_head = h.shape[-1] // self.heads
        total = (self._term(h, self.W_q, self.W_k) + self._term(p, self.U_q, self.U_k)
                 + self._term(p1, self.U1_q, self.U1_k) + self._term(p0, self.U0_q, self.U0_k))
        return total / math.sqrt(4 * d_head)

    def attend(self, h: Tensor, p: Tensor, p1: Tensor, p0: Tensor,
               key_pad: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Per-position outputs z (heads concatenated) and attention weights."""
        probs = _masked_softmax(self.scores(h, p, p1, p0), key_pad)
        z = self.drop(probs) @ self._split(self.W_v(h))
        b, _, t, _ = z.shape
        return z.transpose(1, 2).reshape(b, t, -1), probs

    def forward(self, h: Tensor, p: Tensor, p1: Tensor, p0: Tensor,
                key_pad: Tensor | None = None) -> tuple[Tensor, Tensor]:
        z, probs = self.attend(h, p, p1, p0, key_pad)
        return self.out(z), probs


class EncoderLayer(nn.Module):
    """Post-LN Transformer layer with a GELU feed-forward block."""

    def __init__(self, cfg: ModelConfig, pce: bool = False):
        super().__init__()
        self.pce = pce
        att = PceAttention if pce else SelfAttention
        self.attn = att(cfg.d, cfg.heads, cfg.dropout)
        self.ln1 = nn.LayerNorm(cfg.d)
        self.ff1 = nn.Linear(cfg.d, cfg.ff_dim)
        self.ff2 = nn.Linear(cfg.ff_dim, cfg.d)
        self.ln2 = nn.LayerNorm(cfg.d)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor, key_pad: Tensor | None = None,
                pos: tuple[Tensor, Tensor, Tensor] | None = None) -> tuple[Tensor, Tensor]:
        if self.pce:
            assert pos is not None
            a, probs = self.attn(x, *pos, key_pad=key_pad)
        else:
            a, probs = self.attn(x, key_pad)
        x = self.ln1(x + self.drop(a))
        f = self.ff2(F.gelu(self.ff1(x)))
        return self.ln2(x + self.drop(f)), probs


class TokenEncoder(nn.Module):
    """Stack of layers over the token sequence of one group."""

    def __init__(self, cfg: ModelConfig, layers: int):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(layers))

    def forward(self, x: Tensor, key_pad: Tensor, keep_attn: bool = False) -> tuple[Tensor, list[Tensor]]:
        maps = []
        for layer in self.layers:
            x, probs = layer(x, key_pad)
            if keep_attn:
                maps.append(probs)
        return x, maps


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    """Tensors for a list of samples.

    Token tensors are ``(groups, length)``; ``*_slot`` maps every token to
    its row in the flattened ``(batch * seq_len)`` instruction grid, -1 for
    padding. ``side`` selects the IR (0) or environment (1) PCE tables.
    """

    ir_ids: Tensor
    ir_slot: Tensor
    ir_labels: Tensor
    env_ids: Tensor
    env_slot: Tensor
    env_labels: Tensor
    pce_cur: Tensor
    pce_true: Tensor
    pce_false: Tensor
    side: Tensor
    special: Tensor  # token id of [CLS]/[SEP] at those positions, else -1
    pad: Tensor
    lengths: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.pad.shape[0]

    @property
    def seq_len(self) -> int:
        return self.pad.shape[1]


def _pce_row(code: int, n: int) -> int:
    if code < 0 or code >= n:
        return UNKNOWN_ROW
    return code + POSITION_OFFSET


def build_batch(samples: Sequence[TrainingSample], cfg: ModelConfig,
                masks: Sequence[MaskPlan | None] | None = None) -> Batch:
    """Lay out ``[CLS] IR... [SEP] Env...`` per sample and collect the groups.

    Instructions past the per-side capacity are dropped; jump targets into
    the dropped part become unknown.
    """
    if not samples:
        raise ValueError("empty batch")
    for s in samples:
        if s.K != cfg.K:
            raise ValueError(f"sample {s.function_id} was grouped with K={s.K}, model expects K={cfg.K}")
    masks = masks if masks is not None else [None] * len(samples)
    ns = [min(len(s), cfg.side_capacity) for s in samples]
    T = 2 + 2 * max(ns)
    B = len(samples)
    cur = torch.full((B, T), 0, dtype=torch.long)
    tru = torch.full((B, T), 0, dtype=torch.long)
    fal = torch.full((B, T), 0, dtype=torch.long)
    side = torch.zeros((B, T), dtype=torch.long)
    special = torch.full((B, T), -1, dtype=torch.long)
    pad = torch.ones((B, T), dtype=torch.bool)

    sides: dict[str, list[tuple[list[int], list[int], list[int]]]] = {"ir": [], "env": []}
    for b, (s, n, plan) in enumerate(zip(samples, ns, masks)):
        sep = 1 + n
        pad[b, :2 + 2 * n] = False
        special[b, 0], special[b, sep] = CLS_ID, SEP_ID
        cur[b, 0] = tru[b, 0] = fal[b, 0] = CLS_ROW
        cur[b, sep] = tru[b, sep] = fal[b, sep] = SEP_ROW
        side[b, sep:] = 1
        for i in range(n):
            c, t, f = s.pce[i]
            for pos in (1 + i, sep + 1 + i):
                cur[b, pos] = _pce_row(c, n)
                tru[b, pos] = _pce_row(t, n)
                fal[b, pos] = _pce_row(f, n)
        for name, start, toks, budget in (("ir", 1, s.ir_tokens, cfg.B_ir),
                                          ("env", sep + 1, s.env_tokens, cfg.B_env)):
            toks = toks[:n]
            actions = {} if plan is None else (plan.ir if name == "ir" else plan.env)
            repl = {} if plan is None else (plan.ir_replacements if name == "ir" else plan.env_replacements)
            shown = apply_mask(toks, actions, repl)
            for g in range(0, n, cfg.K):
                ids: list[int] = []
                slots: list[int] = []
                labels: list[int] = []
                for i in range(g, min(g + cfg.K, n)):
                    row = b * T + start + i
                    ids += shown[i]
                    slots += [row] * len(shown[i])
                    labels += toks[i] if i in actions else [IGNORE] * len(toks[i])
                if len(ids) > budget:
                    raise ValueError(f"group of {len(ids)} tokens exceeds the budget of {budget}")
                sides[name].append((ids, slots, labels))

    def stack(groups):
        L = max([1] + [len(ids) for ids, _, _ in groups])
        ids_t = torch.full((len(groups), L), PAD_ID, dtype=torch.long)
        slot_t = torch.full((len(groups), L), -1, dtype=torch.long)
        lab_t = torch.full((len(groups), L), IGNORE, dtype=torch.long)
        for k, (ids, slots, labels) in enumerate(groups):
            ids_t[k, :len(ids)] = torch.tensor(ids, dtype=torch.long)
            slot_t[k, :len(ids)] = torch.tensor(slots, dtype=torch.long)
            lab_t[k, :len(ids)] = torch.tensor(labels, dtype=torch.long)
        return ids_t, slot_t, lab_t

    ir = stack(sides["ir"])
    env = stack(sides["env"])
    return Batch(*ir, *env, cur, tru, fal, side, special, pad, ns)


# ---------------------------------------------------------------- encoder

def pool_instructions(states: Tensor, slot: Tensor, rows: int) -> tuple[Tensor, Tensor]:
    """Mean of the token states of every instruction row.

    Returns ``(rows, d)`` vectors and a boolean flag for rows that received no
    token (their vector is zero).
    """
    valid = slot >= 0
    idx = slot[valid]
    vals = states[valid]
    total = torch.zeros(rows, states.shape[-1], dtype=states.dtype).index_add(0, idx, vals)
    count = torch.zeros(rows, dtype=states.dtype).index_add(0, idx, torch.ones_like(idx, dtype=states.dtype))
    empty = count == 0
    return total / count.clamp_min(1)[:, None], empty


def upsample_residual(inst: Tensor, states: Tensor, slot: Tensor) -> Tensor:
    """Add each instruction's vector to every token of that instruction."""
    if slot.shape != states.shape[:-1]:
        raise ValueError("token/slot shape mismatch")
    valid = (slot >= 0)[..., None]
    rep = inst[slot.clamp_min(0)]
    return states + torch.where(valid, rep, torch.zeros_like(rep))


@dataclass
class EncoderOutput:
    cls: Tensor
    inst: Tensor
    ir_tokens: Tensor | None = None
    env_tokens: Tensor | None = None
    empty: Tensor | None = None
    attn: dict[str, list[Tensor]] = field(default_factory=dict)


class HierarchicalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.ir_pos = nn.Embedding(cfg.B_ir, d)
        self.env_pos = nn.Embedding(cfg.B_env, d)
        self.ir_emb_ln = nn.LayerNorm(d)
        self.env_emb_ln = nn.LayerNorm(d)
        self.emb_drop = nn.Dropout(cfg.dropout)
        self.ir_pre = TokenEncoder(cfg, cfg.pre_layers)
        self.env_pre = TokenEncoder(cfg, cfg.pre_layers)
        # separate positional-condition tables for the two sides
        rows = cfg.position_rows
        self.ir_p, self.ir_p1, self.ir_p0 = (nn.Embedding(rows, d) for _ in range(3))
        self.env_p, self.env_p1, self.env_p0 = (nn.Embedding(rows, d) for _ in range(3))
        self.inst = nn.ModuleList(EncoderLayer(cfg, pce=(k == 0)) for k in range(cfg.inst_layers))
        self.ir_post = TokenEncoder(cfg, cfg.post_layers)
        self.env_post = TokenEncoder(cfg, cfg.post_layers)

    def _embed(self, ids: Tensor, pos: nn.Embedding, ln: nn.LayerNorm) -> Tensor:
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise IndexError("token id outside the vocabulary")
        positions = torch.arange(ids.shape[1])
        return self.emb_drop(ln(self.tok_emb(ids) + pos(positions)[None]))

    def pce_vectors(self, batch: Batch) -> tuple[Tensor, Tensor, Tensor]:
        rows = self.cfg.position_rows
        for t in (batch.pce_cur, batch.pce_true, batch.pce_false):
            if t.min() < 0 or t.max() >= rows:
                raise IndexError("PCE row outside the embedding table")
        env = (batch.side == 1)[..., None]
        out = []
        for idx, a, b in ((batch.pce_cur, self.ir_p, self.env_p),
                          (batch.pce_true, self.ir_p1, self.env_p1),
                          (batch.pce_false, self.ir_p0, self.env_p0)):
            out.append(torch.where(env, b(idx), a(idx)))
        return out[0], out[1], out[2]

    def forward(self, batch: Batch, run_post: bool = True, keep_attn: bool = False) -> EncoderOutput:
        cfg = self.cfg
        B, T = batch.size, batch.seq_len
        attn: dict[str, list[Tensor]] = {}

        ir_x = self._embed(batch.ir_ids, self.ir_pos, self.ir_emb_ln)
        env_x = self._embed(batch.env_ids, self.env_pos, self.env_emb_ln)
        ir_h, attn["ir_pre"] = self.ir_pre(ir_x, batch.ir_slot < 0, keep_attn)
        env_h, attn["env_pre"] = self.env_pre(env_x, batch.env_slot < 0, keep_attn)

        ir_v, ir_empty = pool_instructions(ir_h, batch.ir_slot, B * T)
        env_v, env_empty = pool_instructions(env_h, batch.env_slot, B * T)
        x = (ir_v + env_v).view(B, T, cfg.d)
        is_special = (batch.special >= 0)[..., None]
        special_emb = self.tok_emb(batch.special.clamp_min(0))
        x = torch.where(is_special, special_emb, x)

        pos = self.pce_vectors(batch)
        maps = []
        for layer in self.inst:
            x, probs = layer(x, batch.pad, pos if layer.pce else None)
            if keep_attn:
                maps.append(probs)
        attn["inst"] = maps

        empty = (ir_empty & env_empty).view(B, T) & ~batch.pad & ~is_special[..., 0]
        out = EncoderOutput(cls=x[:, 0], inst=x, empty=empty, attn=attn)
        if run_post:
            flat = x.reshape(B * T, cfg.d)
            out.ir_tokens, attn["ir_post"] = self.ir_post(
                upsample_residual(flat, ir_h, batch.ir_slot), batch.ir_slot < 0, keep_attn)
            out.env_tokens, attn["env_post"] = self.env_post(
                upsample_residual(flat, env_h, batch.env_slot), batch.env_slot < 0, keep_attn)
        return out


class MlmHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.dense = nn.Linear(cfg.d, cfg.d)
        self.ln = nn.LayerNorm(cfg.d)
        self.decoder = nn.Linear(cfg.d, cfg.vocab_size)

    def forward(self, h: Tensor) -> Tensor:
        return self.decoder(self.ln(F.gelu(self.dense(h))))


class MocoHead(nn.Module):
    """Two-layer projection from the [CLS] state to the contrastive space."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.d, cfg.d)
        self.fc2 = nn.Linear(cfg.d, cfg.moco_dim)

    def forward(self, h: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(h)))


def mlm_logits(out: EncoderOutput, batch: Batch, head: MlmHead) -> tuple[Tensor, Tensor]:
    """Logits and targets at the token positions of masked instructions only."""
    states, targets = [], []
    for toks, labels in ((out.ir_tokens, batch.ir_labels), (out.env_tokens, batch.env_labels)):
        if toks is None:
            raise ValueError("recovery encoders were not run")
        sel = labels != IGNORE
        states.append(toks[sel])
        targets.append(labels[sel])
    h = torch.cat(states)
    return head(h), torch.cat(targets)


def mlm_loss(logits: Tensor, targets: Tensor) -> Tensor:
    if targets.numel() == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, targets)


def init_weights(module: nn.Module, std: float) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class PretrainModel(nn.Module):
    """Query encoder with MLM and MoCo heads plus their momentum copies."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.encoder = HierarchicalEncoder(cfg)
        self.mlm = MlmHead(cfg)
        self.moco = MocoHead(cfg)
        init_weights(self, cfg.init_std)
        torch.random.set_rng_state(gen_state)
        self.key_encoder = copy.deepcopy(self.encoder)
        self.key_moco = copy.deepcopy(self.moco)
        for p in self.key_parameters():
            p.requires_grad_(False)
        self.to(cfg.torch_dtype)

    def query_pairs(self) -> list[tuple[Tensor, Tensor]]:
        """(query, key) parameter pairs of the momentum-updated path."""
        q = list(self.encoder.parameters()) + list(self.moco.parameters())
        k = list(self.key_encoder.parameters()) + list(self.key_moco.parameters())
        return list(zip(q, k))

    def key_parameters(self) -> list[Tensor]:
        return list(self.key_encoder.parameters()) + list(self.key_moco.parameters())

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]
