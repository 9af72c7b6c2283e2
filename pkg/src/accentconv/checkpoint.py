"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic     4 bytes   b"ACCK"
    version   uint32    1
    hdr_len   uint64    length of the JSON header
    header    hdr_len   UTF-8 JSON: section tag, config, inventory, mel stats,
                        speaker list, tensor index (name, dtype, shape, offset)
    payload   ...       raw tensor bytes, row-major, in index order
    sha256    32 bytes  digest of every preceding byte

Section tags are ``"tts"`` and ``"speech_encoder"``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from . import dsp
from .speech_encoder import SpeechEncoderConfig, SpeechEncoderModel
from .text import PhonemeInventory
from .tts import TTSConfig, TTSModel

MAGIC = b"ACCK"
VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


def _section(model) -> str:
    if isinstance(model, TTSModel):
        return "tts"
    if isinstance(model, SpeechEncoderModel):
        return "speech_encoder"
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model, path, meta: dict | None = None) -> None:
    state = model.state_dict()
    index, chunks, offset = [], [], 0
    for name, tensor in state.items():
        t = tensor.detach().cpu().contiguous()
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes(order="C")
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "section": _section(model),
        "config": model.cfg.to_dict(),
        "inventory": model.inventory.to_dict(),
        "stats": model.stats.to_dict(),
        "speakers": list(model.speakers),
        "tensors": index,
        "payload_bytes": offset,
        "meta": meta or {},
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", VERSION, len(hdr)) + hdr + b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


def read_header(path) -> dict:
    return _read(path)[0]


def _read(path):
    data = Path(path).read_bytes()
    if len(data) < 16 + 32 or data[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint or truncated header")
    version, hdr_len = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or corrupted file)")
    header = json.loads(body[16 : 16 + hdr_len].decode("utf-8"))
    payload = body[16 + hdr_len :]
    if len(payload) != header["payload_bytes"]:
        raise CorruptCheckpointError(f"{path}: payload size mismatch")
    return header, payload


def load_checkpoint(path, expected_inventory: PhonemeInventory | None = None, section: str | None = None):
    header, payload = _read(path)
    if section is not None and header["section"] != section:
        raise IncompatibleCheckpointError(f"{path}: expected a {section!r} checkpoint, found {header['section']!r}")
    inventory = PhonemeInventory.from_dict(header["inventory"])
    if expected_inventory is not None and inventory.symbols != expected_inventory.symbols:
        raise IncompatibleCheckpointError(
            f"{path}: inventory {inventory.name!r} ({len(inventory)} symbols) does not match "
            f"expected {expected_inventory.name!r} ({len(expected_inventory)} symbols)"
        )
    stats = dsp.MelStats.from_dict(header["stats"])
    if header["section"] == "tts":
        model = TTSModel(inventory, header["speakers"], stats, TTSConfig.from_dict(header["config"]))
    elif header["section"] == "speech_encoder":
        model = SpeechEncoderModel(
            inventory, stats, SpeechEncoderConfig.from_dict(header["config"]), header["speakers"]
        )
    else:
        raise CheckpointError(f"{path}: unknown section {header['section']!r}")
    state = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"])) * dt.itemsize
        arr = np.frombuffer(payload[entry["offset"] : entry["offset"] + n], dtype=dt).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    if any(t.dtype == torch.float64 for t in state.values()):
        model.double()
    model.eval()
    return model


def check_compatible(encoder: SpeechEncoderModel, tts: TTSModel) -> None:
    problems = []
    if encoder.inventory.symbols != tts.inventory.symbols:
        problems.append("phoneme inventories differ")
    if encoder.d_emb != tts.d_emb:
        problems.append(f"speech embedding width {encoder.d_emb} != text embedding width {tts.d_emb}")
    if encoder.cfg.d_spk != tts.cfg.d_spk:
        problems.append(f"speaker vector width {encoder.cfg.d_spk} != {tts.cfg.d_spk}")
    if problems:
        raise IncompatibleCheckpointError("; ".join(problems))


def parameter_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
