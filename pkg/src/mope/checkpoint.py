"""``mope-ckpt-1``: JSON manifest plus a raw little-endian float32 payload.

``save_arrays(stem, ...)`` writes ``stem.json`` and ``stem.bin``. The manifest
lists every array with its logical shape and byte offset, in payload order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

FORMAT_VERSION = "mope-ckpt-1"
_LE_F32 = np.dtype("<f4")


def manifest_path(stem: str | Path) -> Path:
    stem = Path(stem)
    return stem if stem.suffix == ".json" else stem.with_name(stem.name + ".json")


def payload_path(stem: str | Path) -> Path:
    return manifest_path(stem).with_suffix(".bin")


def save_arrays(stem: str | Path, kind: str, arrays: list[tuple[str, np.ndarray]],
                meta: dict) -> Path:
    mpath, ppath = manifest_path(stem), payload_path(stem)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT_VERSION, "kind": kind, "payload": ppath.name,
                "payload_bytes": offset, "params": entries, **meta}
    mpath.parent.mkdir(parents=True, exist_ok=True)
    ppath.write_bytes(b"".join(chunks))
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return mpath


def load_arrays(stem: str | Path, kind: str) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    mpath = manifest_path(stem)
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{mpath}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise FormatError(f"{mpath}: expected format {FORMAT_VERSION!r}, "
                          f"got {manifest.get('format')!r}")
    if manifest.get("kind") != kind:
        raise FormatError(f"{mpath}: expected a {kind} checkpoint, got {manifest.get('kind')!r}")
    ppath = mpath.with_name(manifest.get("payload", payload_path(stem).name))
    try:
        payload = ppath.read_bytes()
    except OSError as exc:
        raise FormatError(f"{ppath}: unreadable payload ({exc})") from exc
    if len(payload) != manifest.get("payload_bytes"):
        raise FormatError(f"{ppath}: payload has {len(payload)} bytes, manifest says "
                          f"{manifest.get('payload_bytes')}")
    arrays, expected_offset = [], 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if entry["offset"] != expected_offset or entry.get("nbytes", nbytes) != nbytes:
            raise FormatError(f"{mpath}: entry {entry['name']!r} has inconsistent offset/size")
        if entry["offset"] + nbytes > len(payload):
            raise FormatError(f"{ppath}: payload truncated at {entry['name']!r}")
        arr = np.frombuffer(payload, dtype=_LE_F32, count=nbytes // 4, offset=entry["offset"])
        arrays.append((entry["name"], arr.astype(np.float32).reshape(shape)))
        expected_offset += nbytes
    if expected_offset != len(payload):
        raise FormatError(f"{ppath}: {len(payload) - expected_offset} trailing payload bytes")
    return manifest, arrays
