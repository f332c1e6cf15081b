"""Checkpoint container for trainable parameters, optimizer moments and loop state.

Layout (little-endian)::

    b"CADPT1" | u32 version | u32 header_len | JSON header | f32 payloads | SHA-256 of all preceding bytes

The header echoes the configuration, the model seed and the SHA-256 of the
frozen backbone, and lists every payload tensor as ``{name, dims, offset}``.
The backbone itself is never stored; it is regenerated from the config and
seed and checked against the recorded digest.
"""

import dataclasses
import hashlib
import json
import math
import struct

import numpy as np

from .config import ExperimentConfig
from .errors import CheckpointError

MAGIC = b"CADPT1"
VERSION = 1
_DIGEST = 32


def _model_dict(cfg):
    m = dataclasses.asdict(cfg)
    return {k: m[k] for k in ("backbone", "spm", "adapter", "num_classes", "strategy", "components")}


def encode(model, state, exp_cfg=None):
    """Serialize ``model`` and a training state to bytes."""
    opt = state.optimizer
    tensors = []
    for name, p in model.trainable_named():
        tensors.append(("param/" + name, p.data))
        tensors.append(("adam_m/" + name, opt.state["m"][name]))
        tensors.append(("adam_v/" + name, opt.state["v"][name]))
    directory, chunks, offset = [], [], 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "dims": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "model": _model_dict(model.cfg),
        "experiment": exp_cfg.to_dict() if exp_cfg is not None else None,
        "seed": int(model.seed),
        "backbone_sha256": model.backbone.checksum(),
        "iteration": int(state.iteration),
        "best_miou": None if not math.isfinite(state.best_miou) else state.best_miou,
        "optimizer": {"step": opt.state["step"], "weight_decay": opt.weight_decay,
                      "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
        "stream": state.stream.get_state(),
        "stream_shape": [state.stream.n, state.stream.batch_size],
        "log": [list(r) for r in state.log.rows],
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, model, state, exp_cfg=None):
    blob = encode(model, state, exp_cfg)
    with open(path, "wb") as fh:
        fh.write(blob)
    return path


def read_header(blob, where="<bytes>"):
    """Validate framing and digest; returns ``(header, payload bytes)``."""
    fixed = len(MAGIC) + 8
    if len(blob) < fixed + _DIGEST:
        raise CheckpointError(f"{where}: truncated checkpoint ({len(blob)} bytes)")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{where}: bad magic, not a CADPT1 checkpoint")
    version, hlen = struct.unpack("<II", blob[len(MAGIC):fixed])
    if version != VERSION:
        raise CheckpointError(f"{where}: unsupported checkpoint version {version} (expected {VERSION})")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{where}: SHA-256 mismatch; file is corrupt, tampered or truncated")
    if fixed + hlen > len(body):
        raise CheckpointError(f"{where}: header length {hlen} exceeds file size")
    try:
        header = json.loads(body[fixed:fixed + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{where}: unreadable header: {exc}") from None
    return header, body[fixed + hlen:]


def load_checkpoint(path):
    """Rebuild ``(model, TrainState, header)`` from a checkpoint file."""
    from .model import CloudAdapterNet
    from .training import AdamW, BatchStream, TrainLog, TrainState

    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    header, payload = read_header(blob, path)
    try:
        model_cfg = ExperimentConfig.from_dict(header["model"]).model
        model = CloudAdapterNet(model_cfg, header["seed"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header field {exc}") from None
    if model.backbone.checksum() != header["backbone_sha256"]:
        raise CheckpointError(f"{path}: regenerated backbone does not match the recorded checksum")

    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["dims"], dtype=np.int64))
        start, stop = entry["offset"], entry["offset"] + 4 * count
        if stop > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the payload")
        arrays[entry["name"]] = np.frombuffer(payload, "<f4", count, start).reshape(entry["dims"]).astype(np.float32)

    named = model.trainable_named()
    o = header["optimizer"]
    opt = AdamW(named, o["weight_decay"], o["beta1"], o["beta2"], o["eps"])
    opt.state["step"] = int(o["step"])
    for name, p in named:
        for key, dest in (("param/", None), ("adam_m/", "m"), ("adam_v/", "v")):
            arr = arrays.get(key + name)
            if arr is None:
                raise CheckpointError(f"{path}: missing tensor {key + name}")
            if arr.shape != p.shape:
                raise CheckpointError(f"{path}: tensor {key + name} has shape {arr.shape}, model expects {p.shape}")
            if dest is None:
                p.data = arr
            else:
                opt.state[dest][name] = arr
    extra = set(arrays) - {k + n for n, _ in named for k in ("param/", "adam_m/", "adam_v/")}
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(extra)}")

    n, batch = header["stream_shape"]
    stream = BatchStream(n, batch, header["seed"])
    stream.set_state(header["stream"])
    log = TrainLog([tuple(r) for r in header["log"]])
    best = header["best_miou"]
    state = TrainState(header["iteration"], opt, stream, log, -math.inf if best is None else best)
    return model, state, header
