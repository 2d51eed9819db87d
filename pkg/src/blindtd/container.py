"""Single-file dataset container.

Layout::

    8 bytes   magic b"BTDDATA1"
    8 bytes   header length H, unsigned little-endian
    H bytes   UTF-8 JSON header
    ...       array payloads, back to back

The header holds ``"arrays"``: a list of ``{"name", "dtype", "shape",
"offset", "nbytes"}`` entries, offsets counted from the first payload byte,
plus any caller metadata under ``"meta"``. Payloads are column-major;
``complex128`` arrays are interleaved re/im little-endian float64 pairs,
``float64`` arrays are plain little-endian float64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from numpy.typing import NDArray

MAGIC = b"BTDDATA1"


class ContainerError(ValueError):
    pass


def write_container(
    path: str | Path, arrays: Mapping[str, NDArray], meta: Mapping[str, Any] | None = None
) -> None:
    entries = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.iscomplexobj(arr):
            dtype, data = "complex128", arr.astype("<c16")
        else:
            dtype, data = "float64", arr.astype("<f8")
        raw = data.tobytes(order="F")
        entries.append({
            "name": name,
            "dtype": dtype,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format": "blindtd-container", "version": 1, "arrays": entries, "meta": dict(meta or {})},
        sort_keys=True,
        allow_nan=False,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def read_container(path: str | Path) -> tuple[dict[str, NDArray], dict[str, Any]]:
    """Return ``(arrays, meta)``."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ContainerError(f"{path}: not a dataset container")
    if len(blob) < 16:
        raise ContainerError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header") from exc
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        chunk = blob[start : start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ContainerError(f"{path}: payload of {e['name']!r} truncated")
        dt = {"complex128": "<c16", "float64": "<f8"}.get(e["dtype"])
        if dt is None:
            raise ContainerError(f"unsupported dtype {e['dtype']!r}")
        flat = np.frombuffer(chunk, dtype=dt)
        native = complex if e["dtype"] == "complex128" else float
        arrays[e["name"]] = np.array(flat.reshape(e["shape"], order="F"), dtype=native)
    return arrays, header.get("meta", {})
