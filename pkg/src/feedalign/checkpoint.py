"""Flat little-endian binary checkpoints.

Layout::

    "FDAL" | version u32 | layer count u32 | precision u32 (32 or 64)
    per layer:   tag u8 | tensor count u32 | per tensor: rank u32, extents u32..., values
    feedback:    count u32 | sections (see ``feedback.FeedbackMatrix.to_bytes``)
    train state: epoch u32 | step u64 | velocity count u32 | per velocity: rank, extents, values

Tensors are written in a fixed order (parameters, then buffers, in insertion
order), so identical networks always produce identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import feedback as fb
from .errors import FormatError
from .trainer import Network, TrainState

MAGIC = b"FDAL"
VERSION = 1


def _tensor_bytes(a: np.ndarray, dtype) -> bytes:
    a = np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<"))
    return struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape) + a.tobytes()


def _read_tensor(buf, off, dtype):
    (rank,) = struct.unpack_from("<I", buf, off)
    off += 4
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    dt = np.dtype(dtype).newbyteorder("<")
    n = int(np.prod(shape)) if rank else 1
    end = off + n * dt.itemsize
    if end > len(buf):
        raise FormatError(f"truncated tensor at byte {off}")
    a = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape).astype(dtype)
    return a, end


def _layer_tensors(layer):
    return list(layer.params.items()) + list(layer.buffers().items())


def to_bytes(net: Network, state: TrainState | None = None) -> bytes:
    dt = net.dtype
    out = [MAGIC, struct.pack("<III", VERSION, len(net.layers), np.dtype(dt).itemsize * 8)]
    for layer in net.layers:
        tensors = _layer_tensors(layer)
        out.append(struct.pack("<BI", layer.tag, len(tensors)))
        out.extend(_tensor_bytes(v, dt) for _, v in tensors)
    out.append(struct.pack("<I", len(net.feedback)))
    out.append(net.feedback_bytes())
    state = state or TrainState()
    keys = [k for k, _, _ in net.named_params() if k in state.velocity]
    out.append(struct.pack("<IQI", state.epoch, state.step, len(keys)))
    out.extend(_tensor_bytes(state.velocity[k], dt) for k in keys)
    return b"".join(out)


def save(net: Network, path, state: TrainState | None = None) -> None:
    Path(path).write_bytes(to_bytes(net, state))


def from_bytes(net: Network, buf: bytes) -> TrainState:
    """Restore parameters, buffers and feedback into ``net`` (built from the same spec).

    Returns the stored :class:`TrainState`.
    """
    try:
        return _restore(net, buf)
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None


def _restore(net, buf):
    if buf[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, count, bits = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    dt = net.dtype
    if bits != np.dtype(dt).itemsize * 8:
        raise FormatError(f"checkpoint precision {bits}-bit does not match the network")
    if count != len(net.layers):
        raise FormatError(f"checkpoint has {count} layers, network has {len(net.layers)}")
    off = 16
    for i, layer in enumerate(net.layers):
        tag, n = struct.unpack_from("<BI", buf, off)
        off += 5
        tensors = _layer_tensors(layer)
        if tag != layer.tag or n != len(tensors):
            raise FormatError(f"layer {i}: layout differs from the network")
        for name, cur in tensors:
            a, off = _read_tensor(buf, off, dt)
            if a.shape != cur.shape:
                raise FormatError(f"layer {i} {name}: shape {a.shape}, expected {cur.shape}")
            if name in layer.params:
                layer.params[name] = a
            else:
                setattr(layer, name, a)
    (nfb,) = struct.unpack_from("<I", buf, off)
    off += 4
    if nfb != len(net.feedback):
        raise FormatError(f"checkpoint has {nfb} feedback matrices, network has {len(net.feedback)}")
    for k in sorted(net.feedback):
        m, off = fb.feedback_from_bytes(buf, off, dt)
        cur = net.feedback[k]
        if m.shape != cur.shape or type(m) is not type(cur):
            raise FormatError(f"feedback {k}: stored {type(m).__name__} {m.shape}, "
                              f"network has {type(cur).__name__} {cur.shape}")
        net.feedback[k] = m
    epoch, step, nv = struct.unpack_from("<IQI", buf, off)
    off += 16
    state = TrainState(epoch=epoch, step=step)
    keys = [k for k, _, _ in net.named_params()]
    if nv not in (0, len(keys)):
        raise FormatError(f"checkpoint has {nv} velocity tensors, expected {len(keys)}")
    for k in keys[:nv]:
        state.velocity[k], off = _read_tensor(buf, off, dt)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after checkpoint")
    return state


def load(net: Network, path) -> TrainState:
    return from_bytes(net, Path(path).read_bytes())
