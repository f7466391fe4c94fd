"""Binary checkpoint: magic line, length-prefixed JSON header, raw float64 data.

Layout::

    b"PATTERNPRUNE-CKPT\\n"
    8-byte little-endian header length
    UTF-8 JSON header (sorted keys)
    concatenated little-endian float64 arrays, row-major

The header records the format version, the encoder config, one entry per
array (name, shape, byte offset) and free-form metadata.  Masks are stored
as arrays under ``mask/<target_id>``.  Writing the same content twice gives
identical bytes.
"""

import json
import struct
from dataclasses import asdict

import numpy as np

from .errors import InputError
from .model import EncoderConfig, ModelParams

MAGIC = b"PATTERNPRUNE-CKPT\n"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def save_checkpoint(path, params, masks=None, meta=None):
    arrays = [(name, params.arrays[name]) for name in params.names()]
    for t, m in (masks or {}).items():
        arrays.append((f"mask/{t}", m))
    entries, chunks, offset = [], [], 0
    for name, a in arrays:
        buf = np.ascontiguousarray(a, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(np.shape(a)), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": _DTYPE.str,
        "encoder": asdict(params.cfg),
        "arrays": entries,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path):
    """Return ``(params, masks, meta)``; ``masks`` is None if none were saved."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    if not blob.startswith(MAGIC):
        raise InputError(f"{path} is not a checkpoint file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint version {header.get('format_version')!r}")
    data = memoryview(blob)[pos + hlen:]
    arrays, masks = {}, {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(data, dtype=_DTYPE, count=n, offset=e["offset"])
        a = a.reshape(e["shape"]).astype(np.float64)
        if e["name"].startswith("mask/"):
            masks[e["name"][5:]] = a
        else:
            arrays[e["name"]] = a
    params = ModelParams(EncoderConfig(**header["encoder"]), arrays)
    return params, masks or None, header["meta"]
