"""Binary checkpoint container.

Layout: magic "FNAS", u32 format version, u64 header length, canonical JSON
header, then the raw array payload.  The header records the resolved config
text and its digest, the epoch, named array descriptors (dtype, shape, byte
offset), rng stream states, history rows, and free-form metadata.  All JSON
is sorted-key/compact and arrays are laid out in name order, so the same
state always produces the same bytes.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .ioutil import atomic_write_bytes

MAGIC = b"FNAS"
VERSION = 1


@dataclass
class Checkpoint:
    config_text: str
    epoch: int
    arrays: dict
    rng_states: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def config_digest(config_text: str) -> str:
    return hashlib.sha256(config_text.encode("utf8")).hexdigest()


def checkpoint_bytes(cp: Checkpoint) -> bytes:
    names = sorted(cp.arrays)
    descriptors = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(cp.arrays[name])
        blob = arr.tobytes()
        descriptors.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        offset += len(blob)
        blobs.append(blob)
    header = {
        "config_sha256": config_digest(cp.config_text),
        "config_text": cp.config_text,
        "epoch": cp.epoch,
        "arrays": descriptors,
        "rng": cp.rng_states,
        "history": cp.history,
        "meta": cp.meta,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf8")
    out = bytearray()
    out += MAGIC
    out += VERSION.to_bytes(4, "little")
    out += len(hjson).to_bytes(8, "little")
    out += hjson
    for blob in blobs:
        out += blob
    return bytes(out)


def save_checkpoint(path: str, cp: Checkpoint) -> None:
    atomic_write_bytes(path, checkpoint_bytes(cp))


def load_checkpoint_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 16:
        raise FormatError(f"checkpoint truncated at offset {len(buf)}: no header")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r} at offset 0")
    version = int.from_bytes(buf[4:8], "little")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    hlen = int.from_bytes(buf[8:16], "little")
    if len(buf) < 16 + hlen:
        raise FormatError(f"checkpoint truncated at offset {len(buf)}: header needs {16 + hlen}")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}") from exc
    base = 16 + hlen
    arrays = {}
    for d in header["arrays"]:
        start = base + d["offset"]
        end = start + d["nbytes"]
        if end > len(buf):
            raise FormatError(
                f"checkpoint truncated at offset {len(buf)}: array {d['name']} needs {end}")
        arr = np.frombuffer(buf[start:end], dtype=np.dtype(d["dtype"]))
        arrays[d["name"]] = arr.reshape(d["shape"]).copy()
    digest = config_digest(header["config_text"])
    if digest != header["config_sha256"]:
        raise FormatError("checkpoint config digest does not match its config text")
    return Checkpoint(
        config_text=header["config_text"],
        epoch=int(header["epoch"]),
        arrays=arrays,
        rng_states=header.get("rng", {}),
        history=header.get("history", []),
        meta=header.get("meta", {}),
    )


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return load_checkpoint_bytes(buf)
