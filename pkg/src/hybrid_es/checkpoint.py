"""Binary checkpoints: a JSON header followed by little-endian float64 arrays.

Layout::

    b"HESCKPT" + version byte
    uint32 (little-endian) header length
    header: UTF-8 JSON with "arrays": [{"name", "shape", "offset"}] and metadata
    payload: concatenated float64 values, offsets counted in elements

Sampling in this package is keyed by (master seed, step, sample index), so the
"RNG position" of a run is fully described by its master seed and step.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict

import numpy as np

from .mask_dist import MaskDist, SparsitySchedule
from .nn import MLP, FlatModel
from .search_dist import GaussianSearchDist

MAGIC = b"HESCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict, meta: dict):
    entries, off = [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": off})
        off += arr.size
    header = json.dumps({**meta, "version": VERSION, "arrays": entries}, sort_keys=True).encode()
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC + bytes([VERSION]))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for arr in arrays.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_arrays(path):
    """Return ``(arrays, meta)``."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = raw[len(MAGIC)]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 1
    (hlen,) = struct.unpack("<I", raw[start:start + 4])
    meta = json.loads(raw[start + 4:start + 4 + hlen])
    payload = np.frombuffer(raw, dtype="<f8", offset=start + 4 + hlen)
    arrays = {}
    for e in meta.pop("arrays"):
        size = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + size > payload.size:
            raise CheckpointError(f"{path}: payload truncated at array {e['name']!r}")
        arrays[e["name"]] = payload[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return arrays, meta


def _mask_meta(md: MaskDist) -> dict:
    return {"temperature": md.temperature, "eta_logits": md.eta_logits, "block_width": md.block_width}


def save_training_state(path, model: FlatModel, md=None, *, step: int, master_seed: int,
                        schedule: SparsitySchedule | None = None, extra: dict | None = None):
    """Model params, momentum, BN running stats, mask distribution(s) and step counter."""
    arrays = {"params": model.params, "momentum": model.momentum_buffer}
    for i, (mu, var) in enumerate(model.bn_running):
        arrays[f"bn{i}/running_mean"] = mu
        arrays[f"bn{i}/running_var"] = var
    dists = [] if md is None else list(md) if isinstance(md, tuple) else [md]
    for i, d in enumerate(dists):
        arrays[f"mask{i}/logits"] = d.logits
    meta = {
        "kind": "training-state",
        "arch": model.arch.describe(),
        "step": int(step),
        "master_seed": int(master_seed),
        "mask_dists": [_mask_meta(d) for d in dists],
        "mask_per_tensor": isinstance(md, tuple),
        "schedule": None if schedule is None else {**asdict(schedule), "shape": schedule.shape.value},
        "extra": extra or {},
    }
    save_arrays(path, arrays, meta)


def load_training_state(path) -> dict:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "training-state":
        raise CheckpointError(f"{path}: not a training-state checkpoint")
    a = meta["arch"]
    arch = MLP(tuple(a["sizes"]), a["use_bias"], a["use_batch_norm"], a["mask_last"])
    n_bn = sum(1 for name in arrays if name.endswith("/running_mean"))
    running = tuple((arrays[f"bn{i}/running_mean"], arrays[f"bn{i}/running_var"]) for i in range(n_bn))
    model = FlatModel(arch, arrays["params"], arrays["momentum"], running)
    dists = tuple(MaskDist(arrays[f"mask{i}/logits"], **m) for i, m in enumerate(meta["mask_dists"]))
    md = dists if meta["mask_per_tensor"] else (dists[0] if dists else None)
    sched = meta["schedule"]
    return {
        "model": model,
        "mask_dist": md,
        "step": meta["step"],
        "master_seed": meta["master_seed"],
        "schedule": None if sched is None else SparsitySchedule(**sched),
        "extra": meta["extra"],
    }


def save_search_dist(path, dist: GaussianSearchDist, master_seed: int, extra: dict | None = None):
    meta = {k: v for k, v in dist.to_dict().items() if k not in ("mean", "sigma")}
    meta.update(kind="search-dist", master_seed=int(master_seed), extra=extra or {})
    save_arrays(path, {"mean": dist.mean, "sigma": dist.sigma}, meta)


def load_search_dist(path):
    """Return ``(dist, master_seed)``; the next generation to run is ``dist.generation``."""
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "search-dist":
        raise CheckpointError(f"{path}: not a search-distribution checkpoint")
    seed = meta.pop("master_seed")
    for k in ("kind", "version", "extra"):
        meta.pop(k, None)
    return GaussianSearchDist.from_dict({**meta, "mean": arrays["mean"], "sigma": arrays["sigma"]}), seed
