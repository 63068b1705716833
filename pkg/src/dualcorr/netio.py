"""The DNET binary blob: named float64 parameter arrays plus a manifest.

Layout: magic ``DNET``, u32 version, u32 manifest length, UTF-8 JSON
manifest ``{"kind": ..., "config": {...}, "params": [{"name", "shape"}]}``,
then the parameter data as concatenated little-endian float64 blocks in
manifest order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

DNET_MAGIC = b"DNET"
DNET_VERSION = 1


def save_params(path, kind: str, config: dict, params: dict) -> None:
    """Write named parameter arrays with their describing config."""
    manifest = {
        "kind": kind,
        "config": config,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    mjson = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DNET_MAGIC)
        fh.write(struct.pack("<II", DNET_VERSION, len(mjson)))
        fh.write(mjson)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_params(path):
    """Read a DNET blob; returns (kind, config, {name: ndarray})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != DNET_MAGIC:
        raise FormatError(f"{path}: not a DNET file")
    version, mlen = struct.unpack("<II", blob[4:12])
    if version != DNET_VERSION:
        raise FormatError(f"{path}: unsupported DNET version {version}")
    if len(blob) < 12 + mlen:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad manifest: {exc}") from None
    offset = 12 + mlen
    params = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: truncated data for {entry['name']!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        params[entry["name"]] = np.array(arr, dtype=np.float64).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return manifest["kind"], manifest["config"], params
