"""On-disk formats: DFT tensor container, IDX image/label files, checkpoints.

DFT layout (header fields little-endian):

    offset  size  field
    0       4     magic "DFT1"
    4       1     dtype tag: 0 = FP32, 1 = quantized INT16
    5       1     bit width (32 for FP32; 2..16 for quantized)
    6       1     shared exponent, signed  (quantized tensors only)
    then    4     rank (u32)
    then    4*r   dims (u32 each)
    then    payload, little-endian: float32 or int16 elements in C order

IDX files use the classic big-endian layout: u32 magic (0x00000803 for
uint8 rank-3 images, 0x00000801 for uint8 rank-1 labels) followed by
big-endian u32 dims and raw bytes.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Dict, Tuple, Union

import numpy as np

from .tensor import DfpTensor

MAGIC = b"DFT1"
_DTYPE_FP32 = 0
_DTYPE_DFP = 1

TensorLike = Union[np.ndarray, DfpTensor]


# === DFT tensor container ===


def write_dft(path: str, tensor: TensorLike) -> None:
    """Serialize one FP32 array or one quantized tensor."""
    if isinstance(tensor, DfpTensor):
        head = MAGIC + struct.pack("<BBb", _DTYPE_DFP, tensor.bit_width,
                                   tensor.shared_exponent)
        dims = tensor.elements.shape
        payload = tensor.elements.astype("<i2").tobytes()
    else:
        arr = np.asarray(tensor)
        if arr.dtype != np.float32:
            raise ValueError(f"FP32 tensor file requires float32 data, got {arr.dtype}")
        head = MAGIC + struct.pack("<BB", _DTYPE_FP32, 32)
        dims = arr.shape
        payload = arr.astype("<f4").tobytes()
    body = struct.pack("<I", len(dims)) + b"".join(struct.pack("<I", d) for d in dims)
    with open(path, "wb") as fh:
        fh.write(head + body + payload)


def read_dft(path: str) -> TensorLike:
    """Parse a tensor file; errors cite the byte offset of the defect."""
    with open(path, "rb") as fh:
        buf = fh.read()

    def need(offset: int, count: int, what: str) -> bytes:
        if offset + count > len(buf):
            raise ValueError(
                f"{path}: truncated {what} at byte {offset}: "
                f"need {count} bytes, have {len(buf) - offset}")
        return buf[offset: offset + count]

    if need(0, 4, "magic") != MAGIC:
        raise ValueError(f"{path}: bad magic at byte 0: "
                         f"expected {MAGIC!r}, got {buf[:4]!r}")
    dtype_tag = need(4, 1, "dtype tag")[0]
    bit_width = need(5, 1, "bit width")[0]
    off = 6
    shared_exponent = 0
    if dtype_tag == _DTYPE_DFP:
        shared_exponent = struct.unpack("<b", need(6, 1, "shared exponent"))[0]
        off = 7
        if not 2 <= bit_width <= 16:
            raise ValueError(f"{path}: bad bit width {bit_width} at byte 5")
    elif dtype_tag == _DTYPE_FP32:
        if bit_width != 32:
            raise ValueError(f"{path}: bad bit width {bit_width} at byte 5 "
                             f"(FP32 tensors use 32)")
    else:
        raise ValueError(f"{path}: unknown dtype tag {dtype_tag} at byte 4")
    rank = struct.unpack("<I", need(off, 4, "rank"))[0]
    off += 4
    if rank > 32:
        raise ValueError(f"{path}: implausible rank {rank} at byte {off - 4}")
    dims = []
    for i in range(rank):
        dims.append(struct.unpack("<I", need(off, 4, f"dim {i}"))[0])
        off += 4
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    esize = 2 if dtype_tag == _DTYPE_DFP else 4
    raw = need(off, count * esize, "payload")
    if len(buf) != off + count * esize:
        raise ValueError(f"{path}: {len(buf) - off - count * esize} trailing "
                         f"bytes after payload at byte {off + count * esize}")
    if dtype_tag == _DTYPE_DFP:
        elements = np.frombuffer(raw, dtype="<i2").reshape(dims).astype(np.int16)
        return DfpTensor(elements, shared_exponent, bit_width)
    return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)


# === IDX image and label files ===

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def write_idx_images(path: str, images: np.ndarray) -> None:
    arr = np.asarray(images)
    if arr.dtype != np.uint8 or arr.ndim != 3:
        raise ValueError(f"images must be uint8 with shape (n, rows, cols), "
                         f"got {arr.dtype} rank {arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IDX_IMAGES, *arr.shape))
        fh.write(arr.tobytes())


def write_idx_labels(path: str, labels: np.ndarray) -> None:
    arr = np.asarray(labels).astype(np.uint8)
    if arr.ndim != 1:
        raise ValueError(f"labels must be rank 1, got rank {arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", _IDX_LABELS, arr.shape[0]))
        fh.write(arr.tobytes())


def _read_idx(path: str, magic: int, rank: int) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    head = 4 * (1 + rank)
    if len(buf) < head:
        raise ValueError(f"{path}: truncated header, need {head} bytes, "
                         f"have {len(buf)}")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise ValueError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{rank}I", buf[4:head])
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != head + count:
        raise ValueError(f"{path}: expected {head + count} bytes for dims "
                         f"{dims}, file has {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=head).reshape(dims)


def read_idx_images(path: str) -> np.ndarray:
    return _read_idx(path, _IDX_IMAGES, 3)


def read_idx_labels(path: str) -> np.ndarray:
    return _read_idx(path, _IDX_LABELS, 1)


# === checkpoints ===


def save_checkpoint(directory: str, model, manifest_extra: dict) -> None:
    """Write every parameter and buffer as a tensor file plus manifest.json."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for layer in model.iter_layers():
        arrays: Dict[str, np.ndarray] = {}
        arrays.update(layer.params())
        arrays.update(layer.buffers())
        if not arrays:
            continue
        files = {}
        for pname, arr in arrays.items():
            fname = f"{layer.name}.{pname}.dft"
            write_dft(os.path.join(directory, fname), np.asarray(arr, np.float32))
            files[pname] = fname
        entries.append({"layer": layer.name, "type": type(layer).__name__,
                        "tensors": files})
    manifest = {"format": "dfp-checkpoint-v1", "entries": entries}
    manifest.update(manifest_extra)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory: str) -> Tuple[dict, Dict[str, Dict[str, np.ndarray]]]:
    """Returns (manifest, {layer_name: {tensor_name: array}})."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "dfp-checkpoint-v1":
        raise ValueError(f"{directory}: unknown checkpoint format "
                         f"{manifest.get('format')!r}")
    tensors: Dict[str, Dict[str, np.ndarray]] = {}
    for entry in manifest["entries"]:
        loaded = {}
        for pname, fname in entry["tensors"].items():
            loaded[pname] = read_dft(os.path.join(directory, fname))
        tensors[entry["layer"]] = loaded
    return manifest, tensors


def restore_model(model, tensors: Dict[str, Dict[str, np.ndarray]]) -> None:
    """Copy checkpoint arrays into a freshly built model in place."""
    for layer in model.iter_layers():
        if layer.name not in tensors:
            continue
        stored = tensors[layer.name]
        arrays = {}
        arrays.update(layer.params())
        arrays.update(layer.buffers())
        for pname, arr in arrays.items():
            if pname not in stored:
                raise ValueError(f"checkpoint missing {layer.name}.{pname}")
            src = stored[pname]
            if src.shape != arr.shape:
                raise ValueError(f"checkpoint {layer.name}.{pname} shape "
                                 f"{src.shape} != model shape {arr.shape}")
            arr[...] = src
    model.refresh_quantized()


# === metrics CSV ===

METRICS_HEADER = ("iteration", "epoch", "train_loss", "val_acc",
                  "overflow_count", "wall_ms")


def write_metrics(path: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for row in rows:
            val = row["val_acc"]
            fh.write("{},{},{:.8g},{},{},{:.3f}\n".format(
                row["iteration"], row["epoch"], row["train_loss"],
                "" if val == "" else f"{val:.6g}",
                row["overflow_count"], row["wall_ms"]))


def read_metrics(path: str):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        for line in fh:
            it, ep, loss, val, ovf, wall = line.rstrip("\n").split(",")
            rows.append({
                "iteration": int(it),
                "epoch": int(ep),
                "train_loss": float(loss),
                "val_acc": "" if val == "" else float(val),
                "overflow_count": int(ovf),
                "wall_ms": float(wall),
            })
    return rows
