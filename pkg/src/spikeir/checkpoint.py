"""Binary checkpoints for model parameters.

Layout::

    b"SPIR" | u32 version | u32 header length | JSON header (UTF-8)
    | float32 payload, little-endian, in manifest order | u64 checksum

The header holds the graph kind, a config echo and the ordered
``[name, shape]`` manifest. The checksum is an 8-byte BLAKE2b digest of the
payload, stored little-endian.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, CheckpointError, ManifestError, VersionError
from .models import ModelGraph, StudentConfig, TeacherConfig, build_student, build_teacher
from .neuron import LifParams

MAGIC = b"SPIR"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def config_from_dict(kind: str, d: dict):
    d = dict(d)
    d["channels"] = tuple(d["channels"])
    if kind == "student":
        d["lif"] = LifParams(**d["lif"])
        return StudentConfig(**d)
    if kind == "teacher":
        return TeacherConfig(**d)
    raise CheckpointError(f"unknown graph kind {kind!r}")


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def encode(g: ModelGraph, extra: dict | None = None) -> bytes:
    manifest = [[name, list(p.shape)] for name, p in g.params.items()]
    header = {"kind": g.kind, "config": config_to_dict(g.config), "manifest": manifest}
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in g.params.values())
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload + _checksum(payload)


def save_checkpoint(g: ModelGraph, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(encode(g, extra))


def decode(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, state)`` with parameters in manifest order."""
    if len(raw) < _PREFIX.size or raw[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {raw[:4]!r}")
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (reader is {VERSION})")
    start = _PREFIX.size + hlen
    if len(raw) < start + 8:
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(raw[_PREFIX.size:start])
    except ValueError as e:
        raise CheckpointError(f"corrupt header: {e}") from None
    payload, digest = raw[start:-8], raw[-8:]
    expected = sum(int(np.prod(shape)) for _, shape in header["manifest"]) * 4
    if len(payload) != expected:
        raise ManifestError(f"manifest describes {expected} payload bytes, file has {len(payload)}")
    if _checksum(payload) != digest:
        raise ChecksumError("payload checksum mismatch")
    state = {}
    flat = np.frombuffer(payload, dtype="<f4")
    pos = 0
    for name, shape in header["manifest"]:
        n = int(np.prod(shape))
        state[name] = flat[pos:pos + n].reshape(shape).astype(np.float32)
        pos += n
    return header, state


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def load_into(g: ModelGraph, path) -> dict:
    """Copy checkpoint parameters into ``g``; the manifests must match exactly."""
    header, state = load_checkpoint(path)
    if header["kind"] != g.kind:
        raise ManifestError(f"checkpoint holds a {header['kind']}, graph is a {g.kind}")
    names = list(state)
    for i, (name, p) in enumerate(g.params.items()):
        if i >= len(names) or names[i] != name:
            raise ManifestError(f"tensor {name!r} missing or out of order in checkpoint")
        if state[name].shape != p.shape:
            raise ManifestError(f"tensor {name!r}: checkpoint shape {state[name].shape}, graph {p.shape}")
    if len(names) > len(g.params):
        raise ManifestError(f"tensor {names[len(g.params)]!r} is not part of the graph")
    for name, p in g.params.items():
        p.data = state[name].copy()
    return header


def graph_from_checkpoint(path) -> ModelGraph:
    """Rebuild the graph described by the config echo and load its parameters."""
    header, _ = load_checkpoint(path)
    cfg = config_from_dict(header["kind"], header["config"])
    g = build_student(cfg) if header["kind"] == "student" else build_teacher(cfg)
    load_into(g, path)
    return g
