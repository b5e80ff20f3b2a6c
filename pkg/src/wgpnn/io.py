"""Checkpoint container, run manifests and report writers.

Checkpoint layout (all integers little-endian)::

    b"WGPNN-CKPT\\n"          magic
    uint32                   format version
    uint64                   header length H
    H bytes                  UTF-8 JSON header: {"meta": {...}, "tensors": [
                                 {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload                  raw C-ordered tensor bytes, offsets relative to payload start

The JSON is written with sorted keys and no timestamps, so identical
inputs give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

from wgpnn.errors import CheckpointError

CKPT_MAGIC = b"WGPNN-CKPT\n"
CKPT_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict):
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.array(tensors[name], order="C")  # ascontiguousarray would promote 0-d to 1-d
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for data in chunks:
            fh.write(data)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", blob, pos)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(blob[pos : pos + hlen])
    payload = pos + hlen
    tensors = {}
    for e in header["tensors"]:
        start = payload + e["offset"]
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]).newbyteorder("<"), count=int(np.prod(e["shape"], dtype=np.int64)), offset=start)
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return tensors, header["meta"]


def save_checkpoint(path, model, state=None, meta=None):
    """Store model parameters and, if given, the Adam state (``adam.m.*``, ``adam.v.*``)."""
    tensors = {f"param.{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    meta = dict(meta or {})
    meta["model"] = {
        "num_entities": model.num_entities,
        "num_predicates": model.num_predicates,
        "dim": model.dim,
        "hidden": model.hidden,
        "num_points": model.num_points,
    }
    if state is not None:
        meta["adam_step"] = state.step
        for k, v in state.m.items():
            tensors[f"adam.m.{k}"] = v.numpy()
        for k, v in state.v.items():
            tensors[f"adam.v.{k}"] = v.numpy()
    save_tensors(path, tensors, meta)


def load_checkpoint(path, expect=None):
    """Rebuild a model (and Adam state) from ``path``.

    ``expect`` maps model dimension names to required values; a mismatch
    raises :class:`CheckpointError` naming every offending dimension.
    """
    from wgpnn.neural import WGPNN
    from wgpnn.optim import AdamState

    tensors, meta = load_tensors(path)
    dims = meta.get("model")
    if dims is None:
        raise CheckpointError(f"{path}: missing model dimensions")
    if expect:
        bad = [f"{k}: checkpoint {dims.get(k)} != expected {v}" for k, v in expect.items() if dims.get(k) != v]
        if bad:
            raise CheckpointError("incompatible checkpoint; " + "; ".join(bad))
    model = WGPNN(dims["num_entities"], dims["num_predicates"], dim=dims["dim"], num_points=dims["num_points"], hidden=dims["hidden"])
    params = {k[len("param."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("param.")}
    try:
        model.load_state_dict(params)
    except RuntimeError as err:
        raise CheckpointError(f"{path}: {err}") from None
    state = None
    if "adam_step" in meta:
        state = AdamState(step=meta["adam_step"])
        state.m = {k[len("adam.m."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("adam.m.")}
        state.v = {k[len("adam.v."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("adam.v.")}
    return model, state, meta


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_report(prefix, report, extra=None, protocols=("raw", "filtered")):
    """Write ``<prefix>.json`` (metrics, per-query ranks, ``extra``) and ``<prefix>.tsv`` (metric table)."""
    summary = {d: {p: m[p] for p in protocols} for d, m in report.summary().items()}
    rank_keys = {"raw": "raw_rank", "filtered": "filtered_rank"}
    dropped = [rank_keys[p] for p in rank_keys if p not in protocols]
    rows = [{k: v for k, v in row.items() if k not in dropped} for row in report.rows()]
    write_json(f"{prefix}.json", {**(extra or {}), "metrics": summary, "ranks": rows})
    with open(f"{prefix}.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("direction\tprotocol\tmrr\thits@1\thits@3\thits@10\tcount\n")
        for direction, by_protocol in summary.items():
            for protocol, m in by_protocol.items():
                fh.write(
                    f"{direction}\t{protocol}\t{m['mrr']:.6f}\t{m['hits@1']:.6f}\t{m['hits@3']:.6f}\t{m['hits@10']:.6f}\t{m['count']}\n"
                )
