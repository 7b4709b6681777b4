"""Versioned binary checkpoints: magic, config, tensors, optional Adam state.

Layout (everything little-endian):

    "R2MF" | u32 version | u32 len + config text (key=value lines)
    u32 n_params  | records of (u16 name_len, name, u8 ndim, u32*ndim, f32*)
    u32 n_buffers | same record shape
    u8 has_adam   | [u64 t, then per param in file order: f32* m, f32* v]
    u32 n_epochs  | per epoch f64 train_loss, f64 val_loss, f64 lr

The loader parses the whole file before constructing anything, so a bad
byte yields an error and no half-initialized model. A save -> load -> save
trip reproduces the file exactly; tensors are stored as 32-bit floats, so
checkpointing a float64 model narrows it (training runs in float32).
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .network import ModelConfig, build_model
from .optim import AdamState

MAGIC = b"R2MF"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a checkpoint this code wrote."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict            # name -> float32 ndarray
    buffers: dict           # name -> float32 ndarray
    adam: AdamState = None
    history: list = field(default_factory=list)  # (train, val, lr) per epoch

    @classmethod
    def from_model(cls, model, adam=None, history=()):
        params = {n: p.data.astype(np.float32, copy=True)
                  for n, p in model.named_parameters()}
        buffers = {n: np.asarray(d[k], dtype=np.float32).copy()
                   for n, d, k in model.named_buffers()}
        if adam is not None:
            adam = AdamState(
                t=adam.t,
                m={n: v.astype(np.float32, copy=True) for n, v in adam.m.items()},
                v={n: v.astype(np.float32, copy=True) for n, v in adam.v.items()})
        return cls(config=model.cfg, params=params, buffers=buffers,
                   adam=adam, history=list(history))

    def build_model(self, dtype=np.float32):
        """A fresh model carrying this checkpoint's weights and buffers."""
        model = build_model(self.config, dtype=dtype)
        named = dict(model.named_parameters())
        if set(named) != set(self.params):
            raise CheckpointError("checkpoint parameters do not match the "
                                  "model its config builds")
        for n, p in named.items():
            if p.data.shape != self.params[n].shape:
                raise CheckpointError(f"{n}: dims {self.params[n].shape} "
                                      f"do not fit {p.data.shape}")
            p.data[...] = self.params[n].astype(p.data.dtype)
        for n, d, k in model.named_buffers():
            if n not in self.buffers:
                raise CheckpointError(f"missing buffer {n}")
            d[k] = self.buffers[n].astype(d[k].dtype)
        return model


def _config_text(cfg):
    enc = {}
    for key in sorted(cfg.__dataclass_fields__):
        val = getattr(cfg, key)
        if isinstance(val, tuple):
            enc[key] = ",".join(str(v) for v in val)
        elif isinstance(val, bool):
            enc[key] = "true" if val else "false"
        else:
            enc[key] = repr(val) if isinstance(val, float) else str(val)
    return "".join(f"{k}={v}\n" for k, v in enc.items())


def _config_parse(text):
    fields = ModelConfig.__dataclass_fields__
    kwargs = {}
    for ln in text.strip().split("\n"):
        key, _, raw = ln.partition("=")
        if key not in fields:
            raise CheckpointError(f"unknown config key {key!r}")
        ftype = fields[key].type
        if ftype is tuple or isinstance(getattr(ModelConfig, key, None), tuple):
            kwargs[key] = tuple(int(v) for v in raw.split(","))
        elif ftype is bool or raw in ("true", "false"):
            kwargs[key] = raw == "true"
        elif ftype is float:
            kwargs[key] = float(raw)
        else:
            kwargs[key] = int(raw)
    return ModelConfig(**kwargs).validate()


def _pack_record(name, arr):
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def record(self):
        name = self.take(self.unpack("<H")).decode("utf-8")
        ndim = self.unpack("<B")
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape)
        return name, data.astype(np.float32)


def save_checkpoint(path, ckpt):
    cfg_text = _config_text(ckpt.config).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION),
           struct.pack("<I", len(cfg_text)), cfg_text]
    out.append(struct.pack("<I", len(ckpt.params)))
    names = list(ckpt.params)  # insertion order = model construction order
    for n in names:
        out.append(_pack_record(n, ckpt.params[n]))
    out.append(struct.pack("<I", len(ckpt.buffers)))
    for n in ckpt.buffers:
        out.append(_pack_record(n, ckpt.buffers[n]))
    if ckpt.adam is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<BQ", 1, ckpt.adam.t))
        for n in names:
            for bank in (ckpt.adam.m, ckpt.adam.v):
                out.append(np.ascontiguousarray(
                    bank[n], dtype="<f4").tobytes())
    out.append(struct.pack("<I", len(ckpt.history)))
    for train, val, lr in ckpt.history:
        out.append(struct.pack("<ddd", train, val, lr))
    with open(path, "wb") as f:
        f.write(b"".join(out))


def load_checkpoint(path):
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"version {version} not supported "
                              f"(this code reads {VERSION})")
    config = _config_parse(r.take(r.unpack("<I")).decode("utf-8"))
    params = dict(r.record() for _ in range(r.unpack("<I")))
    buffers = dict(r.record() for _ in range(r.unpack("<I")))
    adam = None
    if r.unpack("<B"):
        adam = AdamState(t=r.unpack("<Q"))
        for n in params:
            shape = params[n].shape
            count = params[n].size
            adam.m[n] = np.frombuffer(r.take(4 * count),
                                      dtype="<f4").reshape(shape).copy()
            adam.v[n] = np.frombuffer(r.take(4 * count),
                                      dtype="<f4").reshape(shape).copy()
    history = [r.unpack("<ddd") for _ in range(r.unpack("<I"))]
    if r.pos != len(r.blob):
        raise CheckpointError(f"{len(r.blob) - r.pos} trailing bytes")
    return Checkpoint(config=config, params=params, buffers=buffers,
                      adam=adam, history=history)
