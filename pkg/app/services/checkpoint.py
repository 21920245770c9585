"""
Checkpoint file format.

    b"SPFZ" | u32 version | u32 header length | JSON header | f32 payloads | u32 CRC32

All integers and floats are little-endian. The header is sorted-key JSON with
the experiment config, a tensor directory (section, name, shape, offset),
optimizer scalars, RNG state and step/stage/phase markers. The CRC covers
every byte before it.
"""
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from ..errors import BadMagic, IoError, VersionMismatch
from ..models.config import ModelConfig
from ..utils.console import get_logger

logger = get_logger(__name__)

MAGIC = b"SPFZ"
FORMAT_VERSION = 1
SECTIONS = ("params", "adam_m", "adam_v")


@dataclass
class Checkpoint:
    """Everything needed to resume a run bit-exactly."""
    config: Dict[str, Any]
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: Dict[str, Any] = field(default_factory=dict)
    rng_state: Dict[str, Any] = field(default_factory=dict)
    step: int = 0
    stage: int = 1
    phase: str = "coarse"
    markers: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for section in SECTIONS:
        tensors = getattr(ckpt, section)
        for name in sorted(tensors):
            raw = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
            directory.append({
                "section": section,
                "name": name,
                "shape": list(np.shape(tensors[name])),
                "offset": offset,
                "nbytes": len(raw),
            })
            chunks.append(raw)
            offset += len(raw)
    header = {
        "config": ckpt.config,
        "tensors": directory,
        "optimizer": ckpt.optimizer,
        "rng_state": ckpt.rng_state,
        "step": ckpt.step,
        "stage": ckpt.stage,
        "phase": ckpt.phase,
        "markers": ckpt.markers,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", ckpt.version, len(header_bytes)) + header_bytes + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    """
    Parse checkpoint bytes.

    Raises:
        BadMagic: Wrong magic, truncation, CRC failure or an unparseable header
        VersionMismatch: Unknown format version
    """
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise BadMagic(f"{source}: not a checkpoint (bad magic or truncated)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise VersionMismatch("format_version", FORMAT_VERSION, version)
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise BadMagic(f"{source}: checksum mismatch (truncated or corrupt)")
    start = 12 + header_len
    if start > len(body):
        raise BadMagic(f"{source}: header runs past the end of the file")
    try:
        header = json.loads(body[12:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BadMagic(f"{source}: unreadable header ({e})") from None

    payload = body[start:]
    sections: Dict[str, Dict[str, np.ndarray]] = {s: {} for s in SECTIONS}
    for entry in header.get("tensors", []):
        lo, n = int(entry["offset"]), int(entry["nbytes"])
        shape = tuple(entry["shape"])
        if lo + n > len(payload) or entry.get("section") not in sections:
            raise BadMagic(f"{source}: tensor '{entry.get('name')}' lies outside the payload")
        count = int(np.prod(shape)) if shape else 1
        if count * 4 != n:
            raise BadMagic(f"{source}: tensor '{entry['name']}' size does not match shape {shape}")
        values = np.frombuffer(payload[lo:lo + n], dtype="<f4").astype(np.float32).reshape(shape)
        sections[entry["section"]][entry["name"]] = values
    return Checkpoint(
        config=header["config"],
        params=sections["params"],
        adam_m=sections["adam_m"],
        adam_v=sections["adam_v"],
        optimizer=header.get("optimizer", {}),
        rng_state=header.get("rng_state", {}),
        step=int(header.get("step", 0)),
        stage=int(header.get("stage", 1)),
        phase=header.get("phase", "coarse"),
        markers=header.get("markers", {}),
        version=version,
    )


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(ckpt))
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from None
    logger.info(f"checkpoint written to {path} (step {ckpt.step}, stage {ckpt.stage}, {ckpt.phase})")
    return path


def verify_config(ckpt: Checkpoint, expected: ModelConfig) -> None:
    """Raise VersionMismatch naming the first model field that differs."""
    found = ckpt.config.get("model", {})
    for key, value in expected.to_dict().items():
        if key not in found:
            raise VersionMismatch(f"model.{key}", value, None)
        other = found[key]
        if isinstance(value, tuple):
            value = list(value)
        if other != value:
            raise VersionMismatch(f"model.{key}", value, other)


def load_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None) -> Checkpoint:
    """
    Read a checkpoint, optionally checking it against the model config in use.

    Raises:
        IoError: The file cannot be read
        BadMagic / VersionMismatch: See decode_checkpoint and verify_config
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from None
    ckpt = decode_checkpoint(blob, str(path))
    if expected is not None:
        verify_config(ckpt, expected)
    return ckpt
