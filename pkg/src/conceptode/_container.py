"""Deterministic single-file container: JSON manifest + raw npy blocks.

Zip-based formats embed local timestamps, so two byte-identical writes of the
same content are impossible with them. Artifacts here must reproduce exactly
per seed, so datasets and checkpoints use this flat layout instead:

    magic  b"CODC1\\n"
    8-byte little-endian manifest length
    manifest JSON (UTF-8; carries the array block order)
    npy blocks back to back, in manifest order

Floats round-trip bit-exactly (npy stores raw IEEE754 data).
"""

from __future__ import annotations

import io
import json

import numpy as np

_MAGIC = b"CODC1\n"


def save_blocks(path, manifest: dict, arrays: dict) -> None:
    manifest = dict(manifest)
    manifest["_blocks"] = list(arrays.keys())
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for name in manifest["_blocks"]:
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), version=(1, 0))
            fh.write(buf.getvalue())


def load_blocks(path):
    """Return (manifest, arrays). Raises ValueError on a foreign file."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a recognized container file")
        n = int.from_bytes(fh.read(8), "little")
        manifest = json.loads(fh.read(n).decode("utf-8"))
        arrays = {}
        for name in manifest.pop("_blocks"):
            arrays[name] = np.lib.format.read_array(fh, allow_pickle=False)
    return manifest, arrays
