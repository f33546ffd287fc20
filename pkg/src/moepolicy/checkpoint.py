"""Versioned binary checkpoints for the denoiser network.

Layout: magic, format version, u64 header length, JSON header, then the raw
parameter blobs concatenated in header order. The header records the model
config, the task registry in registration order (so expert expansion can be
replayed structurally), per-parameter shape/dtype/frozen flags, per-task
normalization stats, and a sha256 lineage pointer to the parent checkpoint.

Round-trips are bit-exact: blobs are stored in their native dtype, and
loading copies them verbatim over a structurally rebuilt network.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .data import FormatError, NormStats, _atomic_write
from .diffusion import DenoiserNetwork, ModelConfig

MAGIC = b"MPCK"
FORMAT_VERSION = 1


@dataclass
class CheckpointMeta:
    stage: str
    parent_sha256: Optional[str]


@dataclass
class LoadedCheckpoint:
    net: DenoiserNetwork
    norm_stats: Dict[str, NormStats]
    usage: Dict
    meta: CheckpointMeta
    sha256: str


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _structure(net: DenoiserNetwork) -> dict:
    """Task registry and expert pool shape, in replayable order."""
    tasks = []
    for task_id in net.task_embeds:
        entry = {"task_id": task_id}
        if not net.cfg.dense_ffn:
            widths = [b.moe.router_for(task_id).n_addressable for b in net.blocks]
            ks = [b.moe.router_for(task_id).top_k for b in net.blocks]
            if len(set(widths)) != 1 or len(set(ks)) != 1:
                raise FormatError(f"task {task_id!r} routers differ across layers")
            entry["n_addressable"] = widths[0]
            entry["top_k"] = ks[0]
        tasks.append(entry)
    out = {"tasks": tasks}
    if not net.cfg.dense_ffn:
        out["expert_stages"] = [[e.stage for e in b.moe.experts] for b in net.blocks]
    return out


def _rebuild(header: dict) -> DenoiserNetwork:
    """Reconstruct the network skeleton: same config, then replay task
    registration / expert expansion in the recorded order. Parameter values
    are overwritten afterwards, so the init randomness is irrelevant."""
    net = DenoiserNetwork(ModelConfig(**header["config"]), seed=header["seed"])
    structure = header["structure"]
    for entry in structure["tasks"]:
        tid = entry["task_id"]
        if net.cfg.dense_ffn:
            net.register_task(tid)
            continue
        current = net.blocks[0].moe.n_experts
        if entry["n_addressable"] > current:
            net.expand_experts(entry["n_addressable"] - current, tid,
                               new_top_k=entry["top_k"])
        elif entry["n_addressable"] == current:
            net.register_task(tid, top_k=entry["top_k"])
        else:
            raise FormatError(f"task {tid!r} addresses {entry['n_addressable']} experts "
                              f"but the pool already holds {current}")
    if not net.cfg.dense_ffn:
        for block, stages in zip(net.blocks, structure["expert_stages"]):
            if len(stages) != block.moe.n_experts:
                raise FormatError("expert pool size mismatch after structural replay")
            for expert, stage in zip(block.moe.experts, stages):
                expert.stage = stage
    return net


def save_checkpoint(net: DenoiserNetwork, path: str,
                    norm_stats: Optional[Dict[str, NormStats]] = None,
                    usage: Optional[dict] = None, stage: str = "",
                    parent: Optional[str] = None) -> str:
    """Write the network to `path` atomically; returns the file's sha256.

    `parent` may be a prior checkpoint path (hashed here) or a hex digest.
    `usage` is a normalized usage snapshot keyed by (task, layer)."""
    named = net.named_parameters()
    manifest = [{"name": name, "shape": list(p.data.shape),
                 "dtype": str(p.data.dtype), "frozen": bool(p.frozen)}
                for name, p in named.items()]
    parent_digest = None
    if parent is not None:
        parent_digest = parent if len(parent) == 64 and "/" not in parent else file_sha256(parent)
    header = {
        "config": net._raw_config.to_dict(),
        "seed": net.seed,
        "structure": _structure(net),
        "params": manifest,
        "norm_stats": {tid: ns.to_dict() for tid, ns in (norm_stats or {}).items()},
        "usage": {f"{tid}|{layer}": np.asarray(row).tolist()
                  for (tid, layer), row in (usage or {}).items()},
        "stage": stage,
        "parent_sha256": parent_digest,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(blob)), blob]
    for entry in manifest:
        arr = named[entry["name"]].data
        parts.append(np.ascontiguousarray(arr).tobytes())
    _atomic_write(path, b"".join(parts))
    return file_sha256(path)


def load_checkpoint(path: str) -> LoadedCheckpoint:
    with open(path, "rb") as f:
        payload = f.read()
    if payload[:4] != MAGIC:
        raise FormatError(f"bad magic {payload[:4]!r}, expected {MAGIC!r}")
    version, header_len = struct.unpack("<IQ", payload[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(payload[16:16 + header_len])
    net = _rebuild(header)
    named = net.named_parameters()
    expected = set(named)
    stored = [e["name"] for e in header["params"]]
    if expected != set(stored):
        missing = expected - set(stored)
        extra = set(stored) - expected
        raise FormatError(f"parameter manifest mismatch: missing={sorted(missing)} "
                          f"extra={sorted(extra)}")
    offset = 16 + header_len
    for entry in header["params"]:
        p = named[entry["name"]]
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
        raw = payload[offset:offset + nbytes]
        if len(raw) != nbytes:
            raise FormatError(f"truncated blob for {entry['name']!r}")
        p.data = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        p.frozen = entry["frozen"]
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing bytes after last blob")
    stats = {tid: NormStats.from_dict(d) for tid, d in header["norm_stats"].items()}
    usage = {}
    for key, row in header["usage"].items():
        tid, layer = key.rsplit("|", 1)
        usage[(tid, int(layer))] = np.asarray(row)
    meta = CheckpointMeta(header["stage"], header["parent_sha256"])
    return LoadedCheckpoint(net, stats, usage, meta, file_sha256(path))


def verify_lineage(child_path: str, parent_path: str) -> None:
    """Raise FormatError unless `child_path` records `parent_path` as its
    immediate ancestor."""
    child = load_checkpoint(child_path)
    digest = file_sha256(parent_path)
    if child.meta.parent_sha256 != digest:
        raise FormatError(f"lineage mismatch: child records {child.meta.parent_sha256}, "
                          f"parent file hashes to {digest}")
