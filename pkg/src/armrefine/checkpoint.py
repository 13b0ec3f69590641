"""Binary checkpoint format.

Layout (little-endian)::

    b"ARMCKPT1"                      magic
    u32 version (=1)
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
                prod(dims) x f32 values
    u32 metadata length, UTF-8 ``key=value`` lines
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arm import ArmConfig, ArmWeights
from .tensor import Tensor

MAGIC = b"ARMCKPT1"
VERSION = 1


class CheckpointError(Exception):
    """Base class for unreadable checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arm_config: ArmConfig
    weights: ArmWeights
    provider: dict  # encoder fingerprint, values as strings
    train_meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, arm_cfg, weights, provider_cfg, train_cfg, epoch_losses) -> "Checkpoint":
        meta = {
            "seed": str(train_cfg.seed),
            "epochs": str(len(epoch_losses)),
            "train_scenes": str(train_cfg.train_scenes),
            "variant": provider_cfg.variant,
            "final_loss": repr(epoch_losses[-1]) if epoch_losses else "nan",
        }
        for i, loss in enumerate(epoch_losses, 1):
            meta[f"epoch_loss.{i}"] = repr(loss)
        fp = {k: str(v) for k, v in provider_cfg.fingerprint().items()}
        # f32 is the storage precision; keep the in-memory copy identical to what a reload gives
        stored = ArmWeights(
            {k: Tensor(v.data.astype(np.float32)) for k, v in weights.tensors.items()}
        )
        return cls(arm_cfg, stored, fp, meta)

    def metadata_lines(self) -> list:
        c = self.arm_config
        lines = [
            f"arm.layer_pair={c.layer_pair[0]},{c.layer_pair[1]}",
            f"arm.n_cross={c.n_cross}",
            f"arm.n_self={c.n_self}",
            f"arm.attn_mode={c.attn_mode}",
            f"arm.mlp_hidden={'auto' if c.mlp_hidden is None else c.mlp_hidden}",
            f"arm.scale_blocks={c.scale_blocks}",
            f"arm.heads={c.heads}",
        ]
        lines += [f"provider.{k}={v}" for k, v in self.provider.items()]
        lines += [f"train.{k}={v}" for k, v in self.train_meta.items()]
        return lines

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<II", VERSION, len(self.weights.tensors))
        for name, t in self.weights.tensors.items():
            raw = name.encode("utf-8")
            out += struct.pack("<H", len(raw)) + raw
            out += struct.pack("<B", t.data.ndim)
            out += struct.pack(f"<{t.data.ndim}I", *t.shape)
            out += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        meta = "\n".join(self.metadata_lines()).encode("utf-8")
        out += struct.pack("<I", len(meta)) + meta
        out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
        return bytes(out)

    def fingerprint(self) -> str:
        return f"{zlib.crc32(self.to_bytes()) & 0xFFFFFFFF:08x}"


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedError(f"checkpoint ends early (need {n} bytes at offset {self.pos})")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


_NAME = re.compile(r"(mlp\.(w1|b1|w2|b2)|(cross|self)\.\d+\.w[qkvo]|scale\.\d+\.(kernel|bias))")
_MAX_META = 1 << 20
_MAX_DIM = 1 << 12


def _expected_shape(name: str, seen: dict):
    """Shape implied by tensors already read, or None when unconstrained."""
    hidden = seen["mlp.w1"][1] if "mlp.w1" in seen else None
    width = seen["mlp.w2"][1] if "mlp.w2" in seen else None
    if name == "mlp.b1":
        return (hidden,)
    if name == "mlp.w2":
        return (hidden, None)
    if name == "mlp.b2":
        return (width,)
    if name.endswith(("wq", "wk", "wv", "wo")):
        return (width, width)
    if name.endswith("kernel"):
        return (width, width, 2, 2)
    if name.endswith("bias"):
        return (width,)
    return (None, None)  # mlp.w1


def _check_name(name: str, seen: dict) -> None:
    if not _NAME.fullmatch(name) or name in seen:
        raise CheckpointError(f"unexpected tensor name {name!r}")
    if not seen and name != "mlp.w1":
        raise CheckpointError(f"first tensor is {name!r}, expected mlp.w1")


def _check_dims(name: str, dims: tuple, seen: dict) -> None:
    if any(not 1 <= d <= _MAX_DIM for d in dims):
        raise CheckpointError(f"tensor {name} has implausible dims {dims}")
    expect = _expected_shape(name, seen)
    if len(dims) != len(expect) or any(e is not None and d != e for d, e in zip(dims, expect)):
        raise CheckpointError(f"tensor {name} has shape {dims}, expected {expect}")
    if name == "mlp.w1" and dims[0] % 2:
        raise CheckpointError("mlp.w1 input width must be even")


def _parse(buf: bytes, end: int):
    r = _Reader(buf, end)
    r.take(len(MAGIC) + 4)
    (count,) = r.unpack("<I")
    tensors, shapes = {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        _check_name(name, shapes)
        (rank,) = r.unpack("<B")
        if rank != len(_expected_shape(name, shapes)):
            raise CheckpointError(f"tensor {name} has rank {rank}")
        dims = r.unpack(f"<{rank}I")
        _check_dims(name, dims, shapes)
        shapes[name] = dims
        n = int(np.prod(dims))
        values = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        tensors[name] = values.astype(np.float32)
    last_scale = max((int(k.split(".")[1]) for k in shapes if k.startswith("scale.")), default=-1)
    if f"scale.{last_scale}.bias" != next(reversed(shapes), None):
        raise CheckpointError("tensor list does not end with the last scale block")
    (mlen,) = r.unpack("<I")
    if mlen > _MAX_META:
        raise CheckpointError(f"metadata length {mlen} is implausible")
    meta = r.take(mlen).decode("utf-8")
    if r.pos != end:
        raise CheckpointError(f"{end - r.pos} unexpected bytes before checksum")
    return tensors, meta


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC):
        raise TruncatedError("file shorter than the magic header")
    if buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:len(MAGIC)]!r}")
    if len(buf) < len(MAGIC) + 4:
        raise TruncatedError("file ends inside the header")
    (version,) = struct.unpack_from("<I", buf, len(MAGIC))
    if version != VERSION:
        raise VersionMismatchError(f"format version {version}, expected {VERSION}")
    if len(buf) < len(MAGIC) + 16:
        raise TruncatedError("file ends inside the header")
    end = len(buf) - 4
    (stored,) = struct.unpack_from("<I", buf, end)
    if zlib.crc32(buf[:end]) & 0xFFFFFFFF != stored:
        # A short file is one whose structure is sound up to where the bytes run
        # out (or that lacks only its checksum). Any other mismatch is corruption.
        try:
            _parse(buf, len(buf))
        except TruncatedError:
            raise TruncatedError("checkpoint is truncated") from None
        except (CheckpointError, UnicodeDecodeError, ValueError):
            raise ChecksumError(f"CRC-32 mismatch (stored {stored:08x})") from None
        raise TruncatedError("checkpoint is missing its checksum")
    tensors, meta = _parse(buf, end)
    return _assemble(tensors, meta)


def _assemble(tensors: dict, meta_text: str) -> Checkpoint:
    arm, provider, train = {}, {}, {}
    for line in meta_text.split("\n") if meta_text else []:
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed metadata line {line!r}")
        group, _, name = key.partition(".")
        {"arm": arm, "provider": provider, "train": train}.get(group, train)[name] = value
    try:
        cfg = ArmConfig(
            layer_pair=tuple(int(v) for v in arm["layer_pair"].split(",")),
            n_cross=int(arm["n_cross"]),
            n_self=int(arm["n_self"]),
            attn_mode=arm["attn_mode"],
            mlp_hidden=None if arm["mlp_hidden"] == "auto" else int(arm["mlp_hidden"]),
            scale_blocks=int(arm["scale_blocks"]),
            heads=int(arm["heads"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad arm metadata: {exc}") from None
    weights = ArmWeights({k: Tensor(v) for k, v in tensors.items()})
    return Checkpoint(cfg, weights, provider, train)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
