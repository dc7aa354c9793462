"""Single-file named-array archive.

Layout::

    CPFS3D-CKPT 1\\n
    <manifest byte length>\\n
    <manifest: JSON, one array entry per line>\\n
    <payload: row-major little-endian float32 arrays, back to back>

The manifest lists (name, shape, offset, nbytes) for every array and carries
non-array state (epoch, step counters, rng state, config) under ``meta``.
"""

import json

import numpy as np

MAGIC = b"CPFS3D-CKPT 1\n"


class CheckpointError(ValueError):
    pass


def dumps(arrays, meta):
    """arrays: ordered mapping name -> array (stored as float32)."""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        raw = a.tobytes(order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    lines = ['{"arrays": [']
    lines += [json.dumps(e, sort_keys=True) + ("," if i < len(entries) - 1 else "") for i, e in enumerate(entries)]
    lines.append('], "meta": ' + json.dumps(meta, sort_keys=True) + "}")
    manifest = "\n".join(lines).encode()
    return MAGIC + str(len(manifest)).encode() + b"\n" + manifest + b"\n" + b"".join(blobs)


def loads(data):
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint archive (bad magic)")
    rest = data[len(MAGIC):]
    nl = rest.find(b"\n")
    try:
        n = int(rest[:nl])
        manifest = json.loads(rest[nl + 1:nl + 1 + n])
    except ValueError as e:
        raise CheckpointError(f"corrupt manifest: {e}") from None
    payload = rest[nl + 1 + n + 1:]
    arrays = {}
    for e in manifest["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"truncated payload at array {e['name']!r}")
        a = np.frombuffer(payload[e["offset"]:end], dtype="<f4").reshape(e["shape"])
        arrays[e["name"]] = a.astype(np.float32)
    return arrays, manifest["meta"]


def save(path, arrays, meta):
    data = dumps(arrays, meta)
    with open(path, "wb") as f:
        f.write(data)


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
