"""Checkpoint container: JSON metadata header + named float32 tensor blocks.

Layout (all integers little-endian):

    bytes 0..3    magic "SBDK"
    bytes 4..7    container version (u32)
    bytes 8..15   metadata length in bytes (u64)
    ...           metadata: canonical JSON (sorted keys, compact separators)
    then, for each tensor in ascending name order:
        u16   name length, followed by the UTF-8 name
        u8    rank
        u32   per dimension
        raw   float32 values, C order

Canonical ordering and timestamp-free metadata make save -> load -> save
byte-identical. Model parameters are stored under channel prefixes that
separate the adapter tensors from everything else: base.* (denoiser
projections and convs), lora_frame.* / lora_story.* (the two adapter sets),
context.* (context extractor), textenc.* (text encoder).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"SBDK"
CONTAINER_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1

_FRAME_MARK = ".frame_adapters."
_STORY_MARK = ".story_adapters."


def _canonical_json(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path: Path | str, metadata: dict,
                    tensors: dict[str, np.ndarray]) -> None:
    """Serialize metadata + named float32 arrays to `path`."""
    meta = dict(metadata)
    meta["tensor_count"] = len(tensors)
    blob = _canonical_json(meta)
    parts = [MAGIC, struct.pack("<I", CONTAINER_VERSION),
             struct.pack("<Q", len(blob)), blob]
    for name in sorted(tensors):
        # np.ascontiguousarray would promote rank-0 arrays to rank 1.
        arr = np.asarray(tensors[name], dtype="<f4")
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    """Inverse of write_container; raises CheckpointError naming what failed."""
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    offset = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal offset
        if offset + n > len(raw):
            raise CheckpointError(
                f"truncated file: reading {what} needs {n} bytes at offset "
                f"{offset}, file has {len(raw)}"
            )
        piece = view[offset:offset + n]
        offset += n
        return piece

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint container")
    (container_version,) = struct.unpack("<I", take(4, "container version"))
    if container_version != CONTAINER_VERSION:
        raise CheckpointError(
            f"container version {container_version} unsupported "
            f"(expected {CONTAINER_VERSION})"
        )
    (meta_len,) = struct.unpack("<Q", take(8, "metadata length"))
    try:
        metadata = json.loads(bytes(take(meta_len, "metadata")).decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"metadata is not valid JSON: {exc}") from exc

    expected = metadata.get("tensor_count")
    if not isinstance(expected, int):
        raise CheckpointError("metadata field tensor_count missing or not an integer")

    tensors: dict[str, np.ndarray] = {}
    for i in range(expected):
        (name_len,) = struct.unpack("<H", take(2, f"tensor {i} name length"))
        name = bytes(take(name_len, f"tensor {i} name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"tensor {name!r} rank"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"tensor {name!r} dims"))
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        data = take(4 * count, f"tensor {name!r} data")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).copy()
    if offset != len(raw):
        raise CheckpointError(
            f"{len(raw) - offset} trailing bytes after the last tensor"
        )
    return metadata, tensors


def read_metadata(path: Path | str) -> dict:
    """Read only the metadata header of a container, skipping tensor data.

    Cheap enough to call on every startup or collection pass; raises
    CheckpointError on anything that read_container would reject about the
    header.
    """
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != MAGIC:
            raise CheckpointError("bad magic: not a checkpoint container")
        (container_version,) = struct.unpack("<I", head[4:8])
        if container_version != CONTAINER_VERSION:
            raise CheckpointError(
                f"container version {container_version} unsupported "
                f"(expected {CONTAINER_VERSION})"
            )
        (meta_len,) = struct.unpack("<Q", head[8:16])
        blob = fh.read(meta_len)
    if len(blob) < meta_len:
        raise CheckpointError(
            f"truncated file: metadata needs {meta_len} bytes, "
            f"got {len(blob)}"
        )
    try:
        return json.loads(blob.decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"metadata is not valid JSON: {exc}") from exc


def _to_channel_name(key: str) -> str:
    """Map a model state-dict key to its checkpoint channel name."""
    if key.startswith("text_encoder."):
        return "textenc." + key[len("text_encoder."):]
    if key.startswith("context_extractor."):
        return "context." + key[len("context_extractor."):]
    if key.startswith("denoiser."):
        rest = key[len("denoiser."):]
        if _FRAME_MARK in rest:
            return "lora_frame." + rest.replace(_FRAME_MARK, ".")
        if _STORY_MARK in rest:
            return "lora_story." + rest.replace(_STORY_MARK, ".")
        return "base." + rest
    raise CheckpointError(f"state key {key!r} has no checkpoint channel")


def _from_channel_name(name: str) -> str:
    """Inverse of _to_channel_name. Adapter names end in <proj>.<matrix>,
    so the adapter-set marker is re-inserted before the last two segments."""
    for prefix, mark in (("lora_frame.", _FRAME_MARK), ("lora_story.", _STORY_MARK)):
        if name.startswith(prefix):
            rest = name[len(prefix):]
            parts = rest.rsplit(".", 2)
            if len(parts) != 3:
                raise CheckpointError(f"malformed adapter tensor name {name!r}")
            return "denoiser." + parts[0] + mark[:-1] + "." + parts[1] + "." + parts[2]
    if name.startswith("textenc."):
        return "text_encoder." + name[len("textenc."):]
    if name.startswith("context."):
        return "context_extractor." + name[len("context."):]
    if name.startswith("base."):
        return "denoiser." + name[len("base."):]
    raise CheckpointError(f"tensor name {name!r} has no known channel prefix")


def save_checkpoint(model, path: Path | str, step: int = 0,
                    train_config: dict | None = None) -> None:
    """Write the model's parameters and configs as a checkpoint file."""
    tensors = {
        _to_channel_name(key): value.detach().cpu().numpy()
        for key, value in model.state_dict().items()
    }
    metadata = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "model",
        "step": step,
        "model_config": model.config.to_json(),
        "train_config": train_config,
        "schedule": model.schedule.spec(),
    }
    write_container(path, metadata, tensors)


def load_checkpoint(path: Path | str):
    """Rebuild a StoryModel from a checkpoint; returns (model, metadata)."""
    from .model import ModelConfig, StoryModel

    metadata, tensors = read_container(path)
    if metadata.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {metadata.get('format_version')} "
            f"unsupported (expected {CHECKPOINT_FORMAT_VERSION})"
        )
    if metadata.get("kind") != "model":
        raise CheckpointError(
            f"expected a model checkpoint, found kind {metadata.get('kind')!r}"
        )
    try:
        config = ModelConfig.from_json(metadata["model_config"])
    except KeyError as exc:
        raise CheckpointError(f"metadata missing model_config field {exc}") from exc

    model = StoryModel(config)
    state = {}
    for name, arr in tensors.items():
        state[_from_channel_name(name)] = torch.from_numpy(arr)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"parameter mismatch: {exc}") from exc
    model.eval()
    return model, metadata


def checkpoint_hash(path: Path | str) -> str:
    """Hex SHA-256 of the checkpoint file (used in manifests and health)."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
