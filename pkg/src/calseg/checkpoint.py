"""
CALCKPT1 checkpoint container

Layout (little-endian):
    magic "CALCKPT1" | u32 version | u32 len + stage tag
    u32 array count, then per array:
        u32 len + name | u8 kind (0 parameter, 1 buffer) | u32 ndim | u32 dims... | float32 data
    u32 len + JSON metadata block
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ArtifactIOError, FormatError
from .model import SegModel, ValueNet

logger = logging.getLogger(__name__)

MAGIC = b"CALCKPT1"
VERSION = 1
KIND_PARAM = 0
KIND_BUFFER = 1
SEG_PREFIX = "seg."
VALUE_PREFIX = "value."


class CheckpointMeta(BaseModel):
    """Metrics block stored with every checkpoint"""
    model_config = ConfigDict(extra="forbid")

    stage: str
    epoch: int = 0
    round: Optional[int] = None
    metrics: Dict[str, float] = Field(default_factory=dict)
    notes: Dict[str, Any] = Field(default_factory=dict)


@dataclass
class CheckpointFile:
    stage: str
    arrays: Dict[str, np.ndarray]
    kinds: Dict[str, int]
    meta: CheckpointMeta
    version: int = VERSION
    path: Optional[Path] = field(default=None, compare=False)


def _u32(*values: int) -> bytes:
    return np.array(values, dtype="<u4").tobytes()


def _text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _u32(len(raw)) + raw


def model_arrays(model: SegModel, valuenet: Optional[ValueNet] = None) -> tuple[Dict[str, np.ndarray], Dict[str, int]]:
    arrays: Dict[str, np.ndarray] = {}
    kinds: Dict[str, int] = {}
    for prefix, module in ((SEG_PREFIX, model), (VALUE_PREFIX, valuenet)):
        if module is None:
            continue
        params = {p.name for p in module.parameters()}
        for name, value in module.state_dict().items():
            arrays[prefix + name] = value
            kinds[prefix + name] = KIND_PARAM if name in params else KIND_BUFFER
    return arrays, kinds


def encode(ckpt: CheckpointFile) -> bytes:
    parts = [MAGIC, _u32(ckpt.version), _text(ckpt.stage), _u32(len(ckpt.arrays))]
    for name, value in ckpt.arrays.items():
        data = np.ascontiguousarray(value, dtype="<f4")
        parts.append(_text(name))
        parts.append(np.array([ckpt.kinds.get(name, KIND_PARAM)], dtype=np.uint8).tobytes())
        parts.append(_u32(data.ndim, *data.shape))
        parts.append(data.tobytes())
    parts.append(_text(ckpt.meta.model_dump_json()))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, path: Path) -> None:
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(self.path, "truncated checkpoint")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1) -> list[int]:
        return [int(v) for v in np.frombuffer(self.take(4 * count), dtype="<u4")]

    def text(self) -> str:
        (n,) = self.u32()
        return self.take(n).decode("utf-8")


def decode(buf: bytes, path: Path) -> CheckpointFile:
    reader = _Reader(buf, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise FormatError(path, "bad magic, expected CALCKPT1")
    (version,) = reader.u32()
    if version != VERSION:
        raise FormatError(path, f"unsupported checkpoint version {version}")
    stage = reader.text()
    (count,) = reader.u32()
    arrays: Dict[str, np.ndarray] = {}
    kinds: Dict[str, int] = {}
    for _ in range(count):
        name = reader.text()
        kinds[name] = reader.take(1)[0]
        (ndim,) = reader.u32()
        shape = tuple(reader.u32(ndim)) if ndim else ()
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    try:
        meta = CheckpointMeta.model_validate_json(reader.text())
    except ValueError as e:
        raise FormatError(path, f"invalid metadata block: {e}") from e
    if reader.pos != len(buf):
        raise FormatError(path, "trailing bytes after metadata")
    return CheckpointFile(stage=stage, arrays=arrays, kinds=kinds, meta=meta, version=version, path=path)


def save_checkpoint(
    path: Union[str, Path],
    model: SegModel,
    valuenet: Optional[ValueNet],
    meta: CheckpointMeta,
) -> Path:
    """Write parameters and BN buffers of model (and valuenet, if given)."""
    path = Path(path)
    arrays, kinds = model_arrays(model, valuenet)
    ckpt = CheckpointFile(stage=meta.stage, arrays=arrays, kinds=kinds, meta=meta)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode(ckpt))
    except OSError as e:
        raise ArtifactIOError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug(f"Saved checkpoint {path} ({len(arrays)} arrays)")
    return path


def load_checkpoint(path: Union[str, Path]) -> CheckpointFile:
    """
    Raises:
        FormatError: wrong magic, version or a truncated file
    """
    path = Path(path)
    return decode(path.read_bytes(), path)


def restore(ckpt: CheckpointFile, model: SegModel, valuenet: Optional[ValueNet] = None) -> None:
    """Load the seg (and value net) state held by ckpt into the given modules."""
    for prefix, module in ((SEG_PREFIX, model), (VALUE_PREFIX, valuenet)):
        if module is None:
            continue
        state = {k[len(prefix) :]: v for k, v in ckpt.arrays.items() if k.startswith(prefix)}
        if not state:
            raise FormatError(ckpt.path, f"no '{prefix}' arrays in checkpoint")
        module.load_state_dict(state)


def has_value_net(ckpt: CheckpointFile) -> bool:
    return any(k.startswith(VALUE_PREFIX) for k in ckpt.arrays)
