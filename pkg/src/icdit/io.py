"""Bit-exact binary tensor containers, checkpoints, and dataset directories.

One little-endian format serves both sample containers and model
checkpoints: magic "ICDT", version, tensor count, then per-tensor entries of
(name, dims, dtype tag, f32 payload). Unknown magic or version is rejected
before any state is touched; truncation fails cleanly.
"""

from __future__ import annotations

import io as _stdio
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ICDT"
VERSION = 1
DTYPE_F32 = 0


def tensors_to_bytes(tensors):
    """Serialize an ordered {name: array} mapping to container bytes."""
    buf = _stdio.BytesIO()
    items = list(tensors.items())
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(items)))
    for name, arr in items:
        arr = np.asarray(arr)
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(struct.pack("<B", DTYPE_F32))
        buf.write(arr.astype("<f4").tobytes())
    return buf.getvalue()


def tensors_from_bytes(data):
    """Parse container bytes back to {name: f64 array} (f32 precision)."""
    view = memoryview(data)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated container while reading {what}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError("unknown container magic")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        (dtype,) = struct.unpack("<B", take(1, "dtype"))
        if dtype != DTYPE_F32:
            raise FormatError(f"unknown dtype tag {dtype}")
        n = int(np.prod(dims)) if rank else 1
        payload = take(4 * n, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims) \
            .astype(np.float64)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes in container")
    return out


def save_tensors(path, tensors):
    Path(path).write_bytes(tensors_to_bytes(tensors))


def load_tensors(path):
    return tensors_from_bytes(Path(path).read_bytes())


def save_checkpoint(path, model_params):
    """Write every trainable tensor at f32 precision."""
    save_tensors(path, {name: t.data
                        for name, t in model_params.named_trainable()})


def load_checkpoint(path, model_params):
    """Restore trainable tensors in place; rejects mismatched checkpoints."""
    loaded = load_tensors(path)
    named = dict(model_params.named_trainable())
    missing = set(named) - set(loaded)
    extra = set(loaded) - set(named)
    if missing or extra:
        raise FormatError(
            f"checkpoint does not match model "
            f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, arr in loaded.items():
        if named[name].data.shape != arr.shape:
            raise FormatError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, "
                f"expected {named[name].data.shape}")
    for name, arr in loaded.items():
        named[name].data[:] = arr


# -- dataset directories ------------------------------------------------------

def save_dataset(directory, samples):
    """manifest.jsonl plus one tensor container per sample."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            fname = f"sample_{i:05d}.bin"
            save_tensors(directory / fname,
                         {"image": s.image, "mask": s.mask})
            fh.write(json.dumps({
                "seed": s.seed,
                "label": s.label,
                "caption": s.caption,
                "caption_ids": s.caption_ids,
                "blobs": [[float(x), float(y), float(r)]
                          for x, y, r in s.blobs],
                "tensor_file": fname,
            }, ensure_ascii=False) + "\n")


def load_dataset(directory):
    """Load samples back; image/mask are f32-precision copies."""
    from .synthdata import SynthSample

    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        raise FormatError(f"no manifest.jsonl in {directory}")
    samples = []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            tensors = load_tensors(directory / rec["tensor_file"])
            mask = np.round(tensors["mask"])  # exact binary after f32 trip
            samples.append(SynthSample(
                image=tensors["image"], mask=mask,
                caption_ids=list(rec["caption_ids"]),
                caption=rec["caption"], label=int(rec["label"]),
                blobs=[tuple(b) for b in rec["blobs"]],
                seed=int(rec["seed"])))
    return samples
