"""Checkpoint files.

A checkpoint is a safetensors file: an 8-byte little-endian header length,
a JSON header naming every tensor with dtype, shape and byte offsets, then
the raw little-endian tensor data. The header's ``__metadata__`` map holds

* ``format``: ``irsem-checkpoint``
* ``version``: the integer ``FORMAT_VERSION``
* ``kind``: ``pretrain``, ``diff`` or ``classify``
* ``model_config``: JSON of the model configuration
* ``state``: JSON of anything that is not a tensor (step, seeds, numpy RNG
  state, queue cursor, training options)

Tensor names are prefixed by their role: ``model.`` for parameters,
``optim.<k>.<field>`` for optimizer state of parameter k, ``queue.buf`` for
the contrastive queue, ``rng.torch`` for torch's generator state and
``head.`` for task heads.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file

FORMAT = "irsem-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], kind: str,
                    model_config: dict, state: dict) -> None:
    meta = {
        "format": FORMAT,
        "version": str(FORMAT_VERSION),
        "kind": kind,
        "model_config": json.dumps(model_config, sort_keys=True),
        "state": json.dumps(state, sort_keys=True),
    }
    flat = {k: v.detach().contiguous().clone() for k, v in tensors.items()}
    save_file(flat, str(path), metadata=meta)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], str, dict, dict]:
    """Returns ``(tensors, kind, model_config, state)``."""
    try:
        with safe_open(str(path), framework="pt") as f:
            meta = f.metadata() or {}
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except (OSError, ValueError, RuntimeError, SafetensorError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an irsem checkpoint")
    if int(meta.get("version", -1)) != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return tensors, meta["kind"], json.loads(meta["model_config"]), json.loads(meta["state"])


def optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], dict]:
    """Split an optimizer state dict into tensors and JSON-able scalars."""
    sd = opt.state_dict()
    tensors, scalars = {}, {}
    for k, st in sd["state"].items():
        for field, val in st.items():
            if torch.is_tensor(val):
                tensors[f"optim.{k}.{field}"] = val
            else:
                scalars[f"{k}.{field}"] = val
    return tensors, {"param_groups": sd["param_groups"], "scalars": scalars}


def restore_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], info: dict) -> None:
    state: dict[int, dict] = {}
    for name, val in tensors.items():
        if not name.startswith("optim."):
            continue
        _, k, field = name.split(".", 2)
        state.setdefault(int(k), {})[field] = val
    for key, val in info["scalars"].items():
        k, field = key.split(".", 1)
        state.setdefault(int(k), {})[field] = val
    opt.load_state_dict({"state": state, "param_groups": info["param_groups"]})
