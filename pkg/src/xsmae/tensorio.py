"""Binary tensor files and the on-disk tile dataset.

Tensor files are a minimal little-endian container: magic "XSTEN1", a
dtype tag byte, a rank byte, uint32 dims, then raw row-major bytes. No
compression, no codecs — bit-exact by construction.

A tile dataset is a directory with a text manifest (`manifest.txt`): a
shape header and one record per image (file name, integer label, base
GSD), plus one tensor file per image.
"""

from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConsistencyError

__all__ = [
    "tensor_to_bytes", "tensor_from_bytes", "write_tensor", "read_tensor",
    "write_tile_dataset", "read_tile_dataset",
]

TENSOR_MAGIC = b"XSTEN1"
MANIFEST_NAME = "manifest.txt"

_DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("uint8"): 3,
    np.dtype("<i4"): 4,
}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if not arr.flags.c_contiguous:
        # ascontiguousarray would also promote 0-d to 1-d, so only copy when needed
        arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in _DTYPE_TAGS:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    arr = arr.astype(dt, copy=False)
    out = io.BytesIO()
    out.write(TENSOR_MAGIC)
    out.write(bytes([_DTYPE_TAGS[dt], arr.ndim]))
    for dim in arr.shape:
        out.write(np.uint32(dim).tobytes())
    out.write(arr.tobytes())
    return out.getvalue()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor; returns (array, offset just past it)."""
    if buf[offset:offset + 6] != TENSOR_MAGIC:
        raise CheckpointError("bad tensor magic — not a tensor block")
    tag, rank = buf[offset + 6], buf[offset + 7]
    if tag not in _TAG_DTYPES:
        raise CheckpointError(f"unknown dtype tag {tag}")
    pos = offset + 8
    shape = []
    for _ in range(rank):
        shape.append(int(np.frombuffer(buf, "<u4", count=1, offset=pos)[0]))
        pos += 4
    dt = _TAG_DTYPES[tag]
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * dt.itemsize
    if pos + nbytes > len(buf):
        raise CheckpointError("truncated tensor block")
    arr = np.frombuffer(buf, dt, count=count, offset=pos).reshape(shape).copy()
    return arr, pos + nbytes


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(tensor_to_bytes(arr))
    os.replace(tmp, path)


def read_tensor(path: str | Path) -> np.ndarray:
    arr, _ = tensor_from_bytes(Path(path).read_bytes())
    return arr


# ---------------------------------------------------------------------------
# tile dataset
# ---------------------------------------------------------------------------

def write_tile_dataset(directory: str | Path, images: np.ndarray, labels: np.ndarray,
                       base_gsd: float = 1.0) -> None:
    """Write [N,H,W,C] images + labels as one tensor file each plus a manifest."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 4 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"need [N,H,W,C] images with [N] labels, got {images.shape} and {labels.shape}"
        )
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _, h, w, c = images.shape
    lines = [f"shape={h},{w},{c}"]
    for i in range(images.shape[0]):
        name = f"img_{i:05d}.xst"
        write_tensor(directory / name, images[i])
        lines.append(f"{name} {int(labels[i])} {base_gsd!r}")
    tmp = directory / (MANIFEST_NAME + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, directory / MANIFEST_NAME)


def read_tile_dataset(directory: str | Path) -> tuple[np.ndarray, np.ndarray, float]:
    """Load a tile dataset; returns (images [N,H,W,C], labels [N], base_gsd)."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest at {manifest}")
    lines = [ln.strip() for ln in manifest.read_text().splitlines()
             if ln.strip() and not ln.startswith("#")]
    if not lines or not lines[0].startswith("shape="):
        raise ConsistencyError(f"manifest {manifest} has no shape header")
    try:
        h, w, c = (int(v) for v in lines[0][len("shape="):].split(","))
    except ValueError as exc:
        raise ConsistencyError(f"bad shape header in {manifest}: {lines[0]!r}") from exc
    images, labels, gsds = [], [], []
    for line in lines[1:]:
        parts = line.split()
        if len(parts) != 3:
            raise ConsistencyError(f"bad manifest record: {line!r}")
        name, label, gsd = parts
        path = directory / name
        if not path.is_file():
            raise FileNotFoundError(f"manifest entry {name} missing from {directory}")
        img = read_tensor(path)
        if img.shape != (h, w, c):
            raise ConsistencyError(f"{name} has shape {img.shape}, manifest declares {(h, w, c)}")
        images.append(img)
        labels.append(int(label))
        gsds.append(float(gsd))
    if not images:
        raise ConsistencyError(f"dataset at {directory} is empty")
    if len(set(gsds)) != 1:
        raise ConsistencyError("all images must share one base GSD")
    return np.stack(images), np.asarray(labels, dtype=np.int64), gsds[0]
