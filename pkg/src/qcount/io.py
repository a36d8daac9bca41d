"""On-disk formats: density grids, density PNGs and the checkpoint archive."""
from __future__ import annotations

import io
import json
import struct
import zipfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image

DENSITY_MAGIC = b"DMAP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, mismatched or wrong-version checkpoint."""


def write_density(path, density):
    """Raw float32 grid: b"DMAP", uint16 H, uint16 W (little-endian), then H*W float32 LE row-major."""
    d = np.ascontiguousarray(density, dtype="<f4")
    if d.ndim != 2:
        raise ValueError("density must be 2-D")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(DENSITY_MAGIC + struct.pack("<HH", h, w))
        fh.write(d.tobytes())


def read_density(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DENSITY_MAGIC:
        raise ValueError(f"{path}: not a density grid file")
    h, w = struct.unpack("<HH", raw[4:8])
    body = raw[8:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {h}x{w} floats, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)


def write_density_png(path, density, vmax=None):
    """16-bit grayscale PNG scaled to [0, vmax] (vmax defaults to the map maximum)."""
    d = np.asarray(density, dtype=np.float64)
    vmax = float(d.max()) if vmax is None else float(vmax)
    scaled = np.zeros_like(d) if vmax <= 0 else np.clip(d / vmax, 0, 1)
    Image.fromarray((scaled * 65535).round().astype(np.uint16)).save(path)
    return vmax


def _tensor_blob(tensors: dict):
    manifest, chunks, offset = {}, [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        b = arr.tobytes()
        manifest[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
        chunks.append(b)
        offset += len(b)
    return manifest, b"".join(chunks)


def save_checkpoint(path, tensors: dict, metadata: dict):
    """Zip archive with manifest.json and one contiguous little-endian float32 blob."""
    manifest, blob = _tensor_blob(tensors)
    doc = {"version": CHECKPOINT_VERSION, "tensors": manifest, "metadata": metadata}
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(doc, sort_keys=True))
        zf.writestr("tensors.bin", blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple:
    """Returns (name -> float32 tensor, metadata)."""
    try:
        with zipfile.ZipFile(path) as zf:
            doc = json.loads(zf.read("manifest.json"))
            blob = zf.read("tensors.bin")
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}")
    tensors = {}
    for name, entry in doc["tensors"].items():
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=start).reshape(entry["shape"])
        tensors[name] = torch.from_numpy(arr.copy())
    return tensors, doc["metadata"]
