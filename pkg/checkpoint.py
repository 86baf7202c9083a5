"""
Checkpoint file format for DPT training stages.

Layout (all integers little-endian):
    b"DPT1"                magic
    uint32                 format version
    uint32                 header length in bytes
    header                 UTF-8 text: `key=value` metadata lines, then a
                           `[manifest]` line and one line per parameter:
                           name<TAB>shape<TAB>f64|f32<TAB>frozen<TAB>offset
    payload                raw little-endian arrays at the manifest offsets

Files are written atomically and never modified afterwards.
"""
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from encoder import AUX_BEHAVIOR_TABLE, EncoderSpec, ITEM_TABLE, USER_TABLE, layer_param
from logger import setup_logger
from numcore import ParameterStore
from utils import atomic_write_bytes, format_float

logger = setup_logger("Checkpoint")

MAGIC = b"DPT1"
FORMAT_VERSION = 1
_PREFIX = struct.Struct('<4sII')
_DTYPES = {'f64': np.dtype('<f8'), 'f32': np.dtype('<f4')}


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """
    Parameter snapshot of one finished stage.

    values/frozen hold every parameter by name; the metadata records what
    a later stage or the evaluator needs to rebuild the encoder.
    """
    stage: int
    values: Dict[str, np.ndarray]
    frozen: Dict[str, bool]
    config_hash: str
    seed: int
    denoised_graph: str = ''
    prompt_variant: str = ''
    include_layer0: bool = False
    interaction_norm: str = 'none'
    active: Tuple[bool, ...] = ()
    loss_trace: Tuple[float, ...] = ()
    init_seed: int = 0
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"checkpoint stage must be 1, 2 or 3, got {self.stage}")
        if set(self.values) != set(self.frozen):
            raise ValueError("every parameter needs a frozen flag")

    @classmethod
    def from_store(cls, stage: int, store: ParameterStore, **meta) -> 'Checkpoint':
        return cls(stage=stage, values=store.snapshot(), frozen={p.name: p.frozen for p in store},
                   init_seed=store.seed, **meta)

    def to_store(self) -> ParameterStore:
        """Fresh ParameterStore holding copies of the saved values and flags."""
        store = ParameterStore(self.init_seed)
        for name in sorted(self.values):
            store.add(name, self.values[name].shape, values=self.values[name], frozen=self.frozen[name])
        return store

    def encoder_spec(self) -> EncoderSpec:
        """Encoder shapes recovered from the parameter tables."""
        num_users, dim = self.values[USER_TABLE].shape
        num_items = self.values[ITEM_TABLE].shape[0]
        aux = self.values[AUX_BEHAVIOR_TABLE].shape[0] if AUX_BEHAVIOR_TABLE in self.values else 0
        layers = 0
        while layer_param(layers + 1, 'user_conv') in self.values:
            layers += 1
        return EncoderSpec(num_users, num_items, aux + 1, dim, layers, self.include_layer0)

    def with_meta(self, **changes) -> 'Checkpoint':
        return replace(self, **changes)


def _header_text(ckpt: Checkpoint, manifest) -> str:
    lines = [
        f"stage={ckpt.stage}",
        f"config_hash={ckpt.config_hash}",
        f"seed={ckpt.seed}",
        f"init_seed={ckpt.init_seed}",
        f"denoised_graph={ckpt.denoised_graph}",
        f"prompt_variant={ckpt.prompt_variant}",
        f"include_layer0={int(ckpt.include_layer0)}",
        f"interaction_norm={ckpt.interaction_norm}",
        f"active_behaviors={','.join(str(int(a)) for a in ckpt.active)}",
        f"loss_trace={','.join(format_float(v) for v in ckpt.loss_trace)}",
    ]
    for key in sorted(ckpt.metadata):
        lines.append(f"{key}={ckpt.metadata[key]}")
    lines.append("[manifest]")
    for name, shape, kind, frozen, offset in manifest:
        lines.append(f"{name}\t{','.join(str(s) for s in shape)}\t{kind}\t{int(frozen)}\t{offset}")
    return "\n".join(lines) + "\n"


def encode_checkpoint(ckpt: Checkpoint, precision: str = 'f64') -> bytes:
    """
    Serialize to bytes; parameters are laid out in sorted-name order.

    Args:
        ckpt: Checkpoint to serialize
        precision: 'f64' for training artifacts, 'f32' for a compact export

    Raises:
        ValueError: unknown precision
    """
    if precision not in _DTYPES:
        raise ValueError(f"unknown checkpoint precision {precision!r}; expected one of {tuple(_DTYPES)}")
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.values):
        # f32 export rounds to nearest; decoding always widens back to f64
        data = np.ascontiguousarray(ckpt.values[name], dtype=_DTYPES[precision])
        manifest.append((name, data.shape, precision, ckpt.frozen[name], offset))
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = _header_text(ckpt, manifest).encode('utf-8')
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)


_KNOWN_KEYS = ('stage', 'config_hash', 'seed', 'init_seed', 'denoised_graph', 'prompt_variant',
               'include_layer0', 'interaction_norm', 'active_behaviors', 'loss_trace')


def decode_checkpoint(payload: bytes, source: str = '<bytes>') -> Checkpoint:
    """
    Parse checkpoint bytes.

    Raises:
        ValueError: bad magic, unsupported version, or a malformed header/manifest
    """
    if len(payload) < _PREFIX.size:
        raise ValueError(f"{source}: truncated checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(payload)
    if magic != MAGIC:
        raise ValueError(f"{source}: not a DPT checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ValueError(f"{source}: unsupported checkpoint version {version}")
    body_start = _PREFIX.size + header_len
    if len(payload) < body_start:
        raise ValueError(f"{source}: truncated checkpoint header")
    header = payload[_PREFIX.size:body_start].decode('utf-8')

    meta: Dict[str, str] = {}
    values: Dict[str, np.ndarray] = {}
    frozen: Dict[str, bool] = {}
    in_manifest = False
    for line in header.splitlines():
        if not line:
            continue
        if line == "[manifest]":
            in_manifest = True
            continue
        if not in_manifest:  # key=value metadata precedes the manifest
            key, _, value = line.partition('=')
            meta[key] = value
            continue
        parts = line.split('\t')
        if len(parts) != 5 or parts[2] not in _DTYPES:
            raise ValueError(f"{source}: malformed manifest line {line!r}")
        name, shape_text, kind, frozen_flag, offset_text = parts
        shape = tuple(int(s) for s in shape_text.split(',') if s)
        dtype = _DTYPES[kind]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        # offsets count from the end of the header
        start = body_start + int(offset_text)
        end = start + count * dtype.itemsize
        if end > len(payload):
            raise ValueError(f"{source}: parameter {name!r} runs past the end of the file")
        values[name] = np.frombuffer(payload[start:end], dtype=dtype).astype(np.float64).reshape(shape)
        frozen[name] = frozen_flag == '1'

    missing = [key for key in _KNOWN_KEYS if key not in meta]
    if missing:
        raise ValueError(f"{source}: checkpoint header lacks {', '.join(missing)}")
    return Checkpoint(
        stage=int(meta['stage']),
        values=values,
        frozen=frozen,
        config_hash=meta['config_hash'],
        seed=int(meta['seed']),
        init_seed=int(meta['init_seed']),
        denoised_graph=meta['denoised_graph'],
        prompt_variant=meta['prompt_variant'],
        include_layer0=meta['include_layer0'] == '1',
        interaction_norm=meta['interaction_norm'],
        active=tuple(flag == '1' for flag in meta['active_behaviors'].split(',') if flag),
        loss_trace=tuple(float(v) for v in meta['loss_trace'].split(',') if v),
        metadata={k: v for k, v in meta.items() if k not in _KNOWN_KEYS},
    )


def save_checkpoint(ckpt: Checkpoint, path, precision: str = 'f64') -> Path:
    """Write a checkpoint atomically ('f32' only for exports, never for stage inputs)."""
    path = Path(path)
    atomic_write_bytes(path, encode_checkpoint(ckpt, precision))
    trainable = sum(v.size for name, v in ckpt.values.items() if not ckpt.frozen[name])
    logger.info(f"Saved stage-{ckpt.stage} checkpoint {path} ({len(ckpt.values)} arrays, "
                f"{trainable} trainable entries, {precision}, hash {ckpt.config_hash})")
    return path


def load_checkpoint(path, expected_stage: Optional[int] = None) -> Checkpoint:
    """
    Read a checkpoint from disk.

    Args:
        path: Checkpoint file
        expected_stage: When given, any other stage tag is an error

    Raises:
        FileNotFoundError: no such file
        ValueError: malformed file or stage mismatch
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    ckpt = decode_checkpoint(path.read_bytes(), str(path))
    if expected_stage is not None and ckpt.stage != expected_stage:
        raise ValueError(f"{path} is a stage-{ckpt.stage} checkpoint, expected stage {expected_stage}")
    return ckpt
