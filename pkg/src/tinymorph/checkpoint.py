"""The TDM1 checkpoint container.

Layout, all integers little-endian:

    bytes 0-3    magic "TDM1"
    bytes 4-7    format version (uint32)
    bytes 8-15   manifest length in bytes (uint64)
    manifest     UTF-8 JSON: tensor name -> {dtype, shape, offset, length},
                 offsets relative to the start of the payload section
    payload      raw little-endian float32 data
    last 4 bytes CRC-32 of the payload (uint32)

Save -> load round-trips bit-identically; every corruption mode raises its
own error type instead of crashing.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

MAGIC = b"TDM1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass


def save_tensors(path, tensors):
    """Write named float32 arrays; names must be unique, values finite."""
    manifest = {}
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} must be float32, got {arr.dtype}")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name!r} contains non-finite values")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest[name] = {"dtype": "f4", "shape": list(arr.shape),
                          "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(manifest_bytes)))
        f.write(manifest_bytes)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_tensors(path):
    """Read a TDM1 container back into {name: float32 array}."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise TruncatedFileError(f"{path}: file shorter than the fixed header")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version > VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version} > supported {VERSION}")
    (mlen,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + mlen
    if header_end + 4 > len(blob):
        raise TruncatedFileError(f"{path}: manifest overruns the file")
    try:
        manifest = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: manifest is not valid JSON: {e}") from e
    if not isinstance(manifest, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")

    payload = blob[header_end:-4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)

    spans = []
    out = {}
    for name, entry in manifest.items():
        try:
            dtype, shape = entry["dtype"], tuple(int(s) for s in entry["shape"])
            off, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"{path}: malformed entry for {name!r}") from e
        if dtype != "f4":
            raise ManifestError(f"{path}: {name!r} has unsupported dtype {dtype!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if length != 4 * count:
            raise ManifestError(f"{path}: {name!r} length/shape disagree")
        if off < 0 or off + length > len(payload):
            raise TruncatedFileError(f"{path}: {name!r} extends past the payload")
        spans.append((off, off + length, name))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ManifestError(f"{path}: tensors {n0!r} and {n1!r} overlap")

    if zlib.crc32(payload) != crc_stored:
        raise ChecksumError(f"{path}: payload CRC mismatch")

    for name, entry in manifest.items():
        off, length = int(entry["offset"]), int(entry["length"])
        shape = tuple(int(s) for s in entry["shape"])
        arr = np.frombuffer(payload[off : off + length], dtype="<f4").astype(np.float32)
        out[name] = arr.reshape(shape)
    return out
