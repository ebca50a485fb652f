"""Training loops for pretraining and the two fine-tuning tasks."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Sequence

import numpy as np
import torch
from torch import Tensor

from .checkpoint import CheckpointError, load_checkpoint, optimizer_tensors, restore_optimizer, save_checkpoint
from .model import ModelConfig, PretrainModel, build_batch
from .objectives import (
    ClassificationHead, MocoConfig, MocoQueue, PretrainLossWeights, classification_forward,
    diffing_batch_loss, diffing_tau, momentum_update, pretrain_losses,
)
from .text import MASK_RATE, TrainingSample, sample_mask_plan


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 4
    lr: float = 1e-3
    warmup: int = 10
    weight_decay: float = 0.01
    seed: int = 0
    mask_rate: float = MASK_RATE
    lam: float = 1.0
    mu: float = 1000.0
    queue_size: int = 1024
    momentum: float = 0.999
    temperature: float = 0.02

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_factor(step: int, warmup: int, total: int) -> float:
    """Linear warm-up followed by linear decay to zero."""
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    if total <= warmup:
        return 1.0
    return max(0.0, (total - step) / (total - warmup))


def group_variants(samples: Sequence[TrainingSample]) -> dict[str, list[TrainingSample]]:
    groups: dict[str, list[TrainingSample]] = defaultdict(list)
    for s in samples:
        groups[s.function_id].append(s)
    return dict(sorted(groups.items()))


class _Trainer:
    kind = ""

    def __init__(self, model: PretrainModel, tc: TrainConfig, params: list[Tensor]):
        self.model = model
        self.tc = tc
        self.step = 0
        self.rng = np.random.default_rng(tc.seed)
        torch.manual_seed(tc.seed)
        decay = [p for p in params if p.dim() > 1]
        no_decay = [p for p in params if p.dim() <= 1]
        self.opt = torch.optim.AdamW(
            [{"params": decay, "weight_decay": tc.weight_decay},
             {"params": no_decay, "weight_decay": 0.0}], lr=tc.lr)

    def _set_lr(self) -> float:
        lr = self.tc.lr * lr_factor(self.step, self.tc.warmup, self.tc.steps)
        for g in self.opt.param_groups:
            g["lr"] = lr
        return lr

    def _extra_tensors(self) -> dict[str, Tensor]:
        return {}

    def _extra_state(self) -> dict:
        return {}

    def _load_extra(self, tensors: dict[str, Tensor], state: dict) -> None:
        pass

    def save(self, path: str | Path) -> None:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        opt_t, opt_info = optimizer_tensors(self.opt)
        tensors.update(opt_t)
        tensors["rng.torch"] = torch.random.get_rng_state()
        tensors.update(self._extra_tensors())
        state = {"step": self.step, "train": self.tc.to_dict(), "optim": opt_info,
                 "numpy_rng": self.rng.bit_generator.state}
        state.update(self._extra_state())
        save_checkpoint(path, tensors, self.kind, self.model.cfg.to_dict(), state)

    def restore(self, tensors: dict[str, Tensor], state: dict) -> None:
        self.step = state["step"]
        restore_optimizer(self.opt, tensors, state["optim"])
        self.rng.bit_generator.state = state["numpy_rng"]
        torch.random.set_rng_state(tensors["rng.torch"])
        self._load_extra(tensors, state)


def load_model(tensors: dict[str, Tensor], model_config: dict) -> PretrainModel:
    cfg = ModelConfig.from_dict(model_config)
    model = PretrainModel(cfg)
    sd = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    try:
        model.load_state_dict(sd)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not fit the model configuration: {exc}") from exc
    return model


class Pretrainer(_Trainer):
    """Masked instruction modelling plus momentum contrast.

    Each step draws ``batch_size`` functions; the query is one variant with a
    fresh mask plan, the key another variant (the same one when a function
    has a single variant) encoded unmasked by the momentum path.
    """

    kind = "pretrain"

    def __init__(self, model: PretrainModel, samples: Sequence[TrainingSample], tc: TrainConfig):
        super().__init__(model, tc, [p for _, p in model.trainable()])
        self.groups = group_variants(samples)
        if not self.groups:
            raise ValueError("empty dataset")
        self.keys = list(self.groups)
        self.ir_pool = [t for s in samples for t in s.ir_tokens]
        self.env_pool = [t for s in samples for t in s.env_tokens]
        self.weights = PretrainLossWeights(tc.lam, tc.mu)
        self.moco = MocoConfig(tc.queue_size, tc.momentum, tc.temperature)
        self.queue = MocoQueue(tc.queue_size, model.cfg.moco_dim, model.cfg.torch_dtype)

    def draw(self):
        n = len(self.keys)
        picks = self.rng.choice(n, size=self.tc.batch_size, replace=n < self.tc.batch_size)
        queries, keys, masks = [], [], []
        for p in picks:
            variants = self.groups[self.keys[int(p)]]
            if len(variants) > 1:
                a, b = (int(x) for x in self.rng.choice(len(variants), size=2, replace=False))
            else:
                a = b = 0
            q = variants[a]
            queries.append(q)
            keys.append(variants[b])
            masks.append(sample_mask_plan(q, self.rng, self.tc.mask_rate, self.ir_pool, self.env_pool))
        cfg = self.model.cfg
        return build_batch(queries, cfg, masks), build_batch(keys, cfg)

    def train_step(self) -> dict:
        self.model.train()
        lr = self._set_lr()
        qb, kb = self.draw()
        losses = pretrain_losses(self.model, qb, kb, self.queue, self.weights, self.moco.temperature)
        self.opt.zero_grad(set_to_none=True)
        losses.total.backward()
        self.opt.step()
        momentum_update(self.model.query_pairs(), self.moco.momentum)
        self.queue.enqueue(losses.keys)
        self.step += 1
        return {"step": self.step, "mlm": losses.mlm.item(), "moco": losses.moco.item(),
                "total": losses.total.item(), "lr": lr}

    def _extra_tensors(self):
        return {"queue.buf": self.queue.buf}

    def _extra_state(self):
        return {"queue": {"cursor": self.queue.cursor, "count": self.queue.count}}

    def _load_extra(self, tensors, state):
        self.queue.load({"buf": tensors["queue.buf"], **state["queue"]})


class DiffTrainer(_Trainer):
    """Fine-tunes the encoder on (anchor, positive, negative) triplets."""

    kind = "diff"

    def __init__(self, model: PretrainModel, samples: Sequence[TrainingSample], tc: TrainConfig):
        super().__init__(model, tc, list(model.encoder.parameters()))
        self.groups = {k: v for k, v in group_variants(samples).items() if len(v) > 1}
        if len(self.groups) < 2:
            raise ValueError("diffing needs at least two functions with two variants each")
        self.keys = list(self.groups)
        self.tau = diffing_tau(model.cfg.d)

    def draw(self):
        n = len(self.keys)
        picks = self.rng.choice(n, size=self.tc.batch_size, replace=n < self.tc.batch_size)
        anchors, positives, negatives, labels = [], [], [], []
        for p in picks:
            p = int(p)
            variants = self.groups[self.keys[p]]
            a, b = (int(x) for x in self.rng.choice(len(variants), size=2, replace=False))
            other = int(self.rng.integers(n - 1))
            other += other >= p
            ov = self.groups[self.keys[other]]
            anchors.append(variants[a])
            positives.append(variants[b])
            negatives.append(ov[int(self.rng.integers(len(ov)))])
            labels.append(p)
        cfg = self.model.cfg
        return [build_batch(x, cfg) for x in (anchors, positives, negatives)], labels

    def train_step(self) -> dict:
        self.model.train()
        lr = self._set_lr()
        (ab, pb, nb), labels = self.draw()
        enc = self.model.encoder
        v = enc(ab, run_post=False).cls
        vp = enc(pb, run_post=False).cls
        vn = enc(nb, run_post=False).cls
        loss = diffing_batch_loss(v, vp, vn, labels, self.tau)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.step += 1
        return {"step": self.step, "loss": loss.item(), "lr": lr}


@dataclass
class LabeledFile:
    file_id: str
    label: int
    functions: list[TrainingSample] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"file_id": self.file_id, "label": self.label,
                           "functions": [json.loads(f.to_json()) for f in self.functions]},
                          separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "LabeledFile":
        d = json.loads(line)
        return cls(d["file_id"], int(d["label"]),
                   [TrainingSample.from_json(json.dumps(f)) for f in d["functions"]])


class ClassifyTrainer(_Trainer):
    """Encoder plus classification head on whole files."""

    kind = "classify"

    def __init__(self, model: PretrainModel, files: Sequence[LabeledFile], tc: TrainConfig,
                 num_classes: int):
        head = ClassificationHead(model.cfg.d, num_classes).to(model.cfg.torch_dtype)
        self.head = head
        super().__init__(model, tc, list(model.encoder.parameters()) + list(head.parameters()))
        if not files:
            raise ValueError("empty dataset")
        if any(not f.functions for f in files):
            raise ValueError("every file needs at least one function")
        self.files = list(files)
        self.num_classes = num_classes

    def file_vectors(self, files: Sequence[LabeledFile]) -> list[Tensor]:
        flat = [s for f in files for s in f.functions]
        cls = self.model.encoder(build_batch(flat, self.model.cfg), run_post=False).cls
        out, k = [], 0
        for f in files:
            out.append(cls[k:k + len(f.functions)])
            k += len(f.functions)
        return out

    def train_step(self) -> dict:
        self.model.train()
        self.head.train()
        lr = self._set_lr()
        n = len(self.files)
        picks = self.rng.choice(n, size=self.tc.batch_size, replace=n < self.tc.batch_size)
        files = [self.files[int(p)] for p in picks]
        labels = torch.tensor([f.label for f in files], dtype=torch.long)
        _, loss = classification_forward(self.file_vectors(files), self.head, labels)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.step += 1
        return {"step": self.step, "loss": loss.item(), "lr": lr}

    def _extra_tensors(self):
        return {f"head.{k}": v for k, v in self.head.state_dict().items()}

    def _extra_state(self):
        return {"num_classes": self.num_classes}

    def _load_extra(self, tensors, state):
        self.head.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("head.")})


def run(trainer: _Trainer, steps: int, log: IO[str] | None = None) -> list[dict]:
    """Run ``steps`` more steps, writing one JSON line per step to ``log``."""
    records = []
    for _ in range(steps):
        rec = trainer.train_step()
        if not all(math.isfinite(v) for v in rec.values()):
            raise FloatingPointError(f"non-finite loss at step {rec['step']}")
        records.append(rec)
        if log is not None:
            log.write(json.dumps(rec) + "\n")
            log.flush()
    return records


@torch.no_grad()
def encode_features(model: PretrainModel, samples: Sequence[TrainingSample], batch_size: int = 16) -> Tensor:
    """[CLS] vectors of the instruction-level encoder in eval mode."""
    model.eval()
    out = []
    for k in range(0, len(samples), batch_size):
        out.append(model.encoder(build_batch(samples[k:k + batch_size], model.cfg), run_post=False).cls)
    return torch.cat(out) if out else torch.zeros(0, model.cfg.d, dtype=model.cfg.torch_dtype)


def resume(path: str | Path, samples, files=None):
    """Rebuild a trainer of the recorded kind from a checkpoint."""
    tensors, kind, mc, state = load_checkpoint(path)
    model = load_model(tensors, mc)
    tc = TrainConfig.from_dict(state["train"])
    if kind == "pretrain":
        tr: _Trainer = Pretrainer(model, samples, tc)
    elif kind == "diff":
        tr = DiffTrainer(model, samples, tc)
    elif kind == "classify":
        tr = ClassifyTrainer(model, files, tc, state["num_classes"])
    else:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    tr.restore(tensors, state)
    return tr
