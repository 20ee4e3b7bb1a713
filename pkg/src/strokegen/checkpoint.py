"""Versioned binary checkpoints: parameters, optimizer state, rng, config echo.

Layout (all integers little-endian)::

    magic  b"SGCK"
    u32    format version (1)
    u64    step counter
    u32    config length, followed by the canonical config text (utf-8)
    u32    rng-state length, followed by canonical JSON
    u32    meta length, followed by canonical JSON (optimizer counters)
    u32    number of arrays
    per array:
        u16 name length, name utf-8
        u8  ndim, then ndim x u32 dims
        raw float32 data, C order

No serialization framework is involved; save -> load -> save is
byte-identical (parameters are stored and trained in float32).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import config as C

MAGIC = b"SGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointState:
    version: int
    step: int
    config_text: str
    rng_state: dict
    meta: dict
    arrays: List[Tuple[str, np.ndarray]]

    @property
    def cfg(self) -> C.RunConfig:
        return C.loads(self.config_text)

    def rng(self) -> np.random.Generator:
        gen = np.random.default_rng(0)
        gen.bit_generator.state = self.rng_state
        return gen

    def array_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.arrays)


def _pack_blob(out: bytearray, blob: bytes) -> None:
    out += struct.pack("<I", len(blob))
    out += blob


def dumps_state(state: CheckpointState) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", state.version)
    out += struct.pack("<Q", state.step)
    _pack_blob(out, state.config_text.encode("utf-8"))
    _pack_blob(out, json.dumps(state.rng_state, sort_keys=True).encode("utf-8"))
    _pack_blob(out, json.dumps(state.meta, sort_keys=True).encode("utf-8"))
    out += struct.pack("<I", len(state.arrays))
    for name, arr in state.arrays:
        shape = np.asarray(arr).shape  # ascontiguousarray would promote 0-d to 1-d
        blob = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        out += struct.pack("<H", len(name_b))
        out += name_b
        out += struct.pack("<B", len(shape))
        for d in shape:
            out += struct.pack("<I", d)
        out += blob.tobytes()
    return bytes(out)


def loads_state(data: bytes) -> CheckpointState:
    try:
        return _loads_state(data)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc


def _loads_state(data: bytes) -> CheckpointState:
    if data[:4] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (step,) = struct.unpack_from("<Q", data, off)
    off += 8

    def blob():
        nonlocal off
        (n,) = struct.unpack_from("<I", data, off)
        off_local = off + 4
        if off_local + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        out = data[off_local : off_local + n]
        off = off_local + n
        return out

    config_text = blob().decode("utf-8")
    rng_state = json.loads(blob())
    meta = json.loads(blob())
    (n_arrays,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays: List[Tuple[str, np.ndarray]] = []
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", data, off) if ndim else ()
        off += 4 * ndim
        count = int(np.prod(dims)) if dims else 1
        nbytes = count * 4
        if off + nbytes > len(data):
            raise CheckpointError(f"truncated array {name!r} at byte {off}")
        arr = np.frombuffer(data[off : off + nbytes], dtype="<f4").reshape(dims)
        off += nbytes
        arrays.append((name, arr.copy()))
    return CheckpointState(
        version=version, step=step, config_text=config_text, rng_state=rng_state, meta=meta, arrays=arrays
    )


def _rng_state_jsonable(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))


def save(path, cfg, gen, rec, baseline_net, adam, rng, step: int, normalizer=None) -> None:
    params = gen.named_parameters() + rec.named_parameters()
    if baseline_net is not None:
        params += baseline_net.named_parameters()
    arrays = [(name, p.data) for name, p in params]
    meta = {"adam_t": 0, "adam_skipped": 0}
    if adam is not None:
        arrays += [(name, arr) for name, arr in adam.state_arrays()]
        meta = {"adam_t": adam.t, "adam_skipped": adam.skipped}
    if normalizer is not None:
        meta["norm_mean"] = normalizer.mean
        meta["norm_var"] = normalizer.var
        meta["norm_ready"] = normalizer._ready
    state = CheckpointState(
        version=VERSION,
        step=step,
        config_text=C.dumps(cfg),
        rng_state=_rng_state_jsonable(rng),
        meta=meta,
        arrays=arrays,
    )
    with open(path, "wb") as fh:
        fh.write(dumps_state(state))


def load(path) -> CheckpointState:
    with open(path, "rb") as fh:
        return loads_state(fh.read())


def restore_model(state: CheckpointState, gen, rec, baseline_net=None, adam=None) -> None:
    """Copy checkpoint arrays into freshly built model objects (by name)."""
    arrays = state.array_dict()
    params = gen.named_parameters() + rec.named_parameters()
    if baseline_net is not None:
        params += baseline_net.named_parameters()
    for name, p in params:
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    if adam is not None:
        adam.load_state_arrays(arrays, int(state.meta.get("adam_t", 0)), int(state.meta.get("adam_skipped", 0)))


def restore_normalizer(state: CheckpointState, normalizer) -> None:
    if "norm_mean" in state.meta:
        normalizer.mean = float(state.meta["norm_mean"])
        normalizer.var = float(state.meta["norm_var"])
        normalizer._ready = bool(state.meta["norm_ready"])


def build_from_checkpoint(path):
    """Load a checkpoint and reconstruct (cfg, gen, rec) ready for evaluation."""
    from .generative import build_model

    state = load(path)
    cfg = state.cfg
    gen, rec = build_model(cfg, np.random.default_rng(0))
    restore_model(state, gen, rec)
    return cfg, gen, rec, state
