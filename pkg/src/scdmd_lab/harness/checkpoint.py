"""Versioned checkpoints: a JSON header line followed by little-endian float64 blobs.

Layout (format version 1)::

    SCDMDCKPT 1\\n
    <header JSON, one line>\\n
    <concatenated '<f8' arrays, in header['blobs'] order>

The header records the step, the config hash, the shapes of every blob, the
scalar optimizer fields and the bit-generator states of the training streams,
which is everything needed to resume a run bit-exactly.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..autodiff import AdamWState, MlpParams

MAGIC = b"SCDMDCKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _opt_meta(opt: AdamWState) -> dict:
    return {"step": opt.step, "learning_rate": opt.learning_rate, "betas": list(opt.betas),
            "epsilon": opt.epsilon, "weight_decay": opt.weight_decay}


def save(path, state, config_hash: str, streams: Optional[Tuple[np.random.Generator, ...]] = None,
         extra: Optional[dict] = None) -> Path:
    """Write ``state`` (a DistillState or ArState) atomically to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "generator": state.generator.params.flat,
        "critic": state.critic.params.flat,
        "gen_opt.m": state.gen_opt.m,
        "gen_opt.v": state.gen_opt.v,
        "critic_opt.m": state.critic_opt.m,
        "critic_opt.v": state.critic_opt.v,
    }
    header = {
        "version": VERSION,
        "step": state.step,
        "config_hash": config_hash,
        "blobs": [{"name": k, "size": int(v.size)} for k, v in arrays.items()],
        "gen_opt": _opt_meta(state.gen_opt),
        "critic_opt": _opt_meta(state.critic_opt),
        "rng": [g.bit_generator.state for g in streams] if streams is not None else None,
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + b" " + str(VERSION).encode() + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    os.replace(tmp, path)
    return path


def read(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    """``(header, arrays)`` from a checkpoint file."""
    with open(path, "rb") as fh:
        first = fh.readline().rstrip(b"\n").split(b" ")
        if len(first) != 2 or first[0] != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        if int(first[1]) != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {first[1].decode()}")
        header = json.loads(fh.readline())
        body = fh.read()
    arrays, offset = {}, 0
    for blob in header["blobs"]:
        n = blob["size"] * 8
        if offset + n > len(body):
            raise CheckpointError(f"{path} is truncated")
        arrays[blob["name"]] = np.frombuffer(body[offset : offset + n], dtype="<f8").astype(np.float64)
        offset += n
    if offset != len(body):
        raise CheckpointError(f"{path} has {len(body) - offset} trailing bytes")
    return header, arrays


def _restore_opt(meta: dict, m: np.ndarray, v: np.ndarray) -> AdamWState:
    return AdamWState(m=m, v=v, step=meta["step"], learning_rate=meta["learning_rate"],
                      betas=tuple(meta["betas"]), epsilon=meta["epsilon"], weight_decay=meta["weight_decay"])


def load_into(path, state, expected_hash: Optional[str] = None):
    """Overwrite a freshly initialised ``state`` from ``path``.

    Returns ``(state, streams)``; ``streams`` is ``None`` if the checkpoint
    carries no RNG states.
    """
    header, arrays = read(path)
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise CheckpointError(f"checkpoint was written for config {header['config_hash']}, not {expected_hash}")
    for name, net in (("generator", state.generator), ("critic", state.critic)):
        if arrays[name].size != net.spec.n_params:
            raise CheckpointError(f"{name} has {arrays[name].size} parameters, network expects {net.spec.n_params}")
    state.generator = state.generator.with_params(MlpParams(state.generator.spec, arrays["generator"]))
    state.critic = state.critic.with_params(MlpParams(state.critic.spec, arrays["critic"]))
    state.gen_opt = _restore_opt(header["gen_opt"], arrays["gen_opt.m"], arrays["gen_opt.v"])
    state.critic_opt = _restore_opt(header["critic_opt"], arrays["critic_opt.m"], arrays["critic_opt.v"])
    state.step = header["step"]
    streams = None
    if header.get("rng"):
        streams = []
        for st in header["rng"]:
            g = np.random.default_rng()
            g.bit_generator.state = st
            streams.append(g)
        streams = tuple(streams)
    return state, streams


def list_checkpoints(directory) -> List[Path]:
    return sorted(Path(directory).glob("step_*.ckpt"))
