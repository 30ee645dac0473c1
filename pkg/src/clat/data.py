"""Datasets (IDX, CIFAR-10 binary, procedural gratings) and checkpoint files."""

from __future__ import annotations

import gzip
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, ConsistencyError, CorruptionError, FormatError, UsageError
from .network import Network, build_network
from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

CHECKPOINT_MAGIC = b"CLTF"
CHECKPOINT_VERSION = 1


@dataclass
class Dataset:
    images: np.ndarray  # float32 [N, C, H, W] in [0, 1]
    labels: np.ndarray  # int64 [N]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes, self.split)

    def head(self, n: int) -> "Dataset":
        return self if not n or n >= len(self) else self.subset(slice(0, n))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield (images, labels) minibatches; shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, path) -> tuple:
    if len(raw) < 8:
        raise FormatError(f"{path}: too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size != math.prod(dims):
        raise CorruptionError(f"{path}: header promises {math.prod(dims)} bytes, file holds {body.size}")
    return dims, body.reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels are scaled by 1/255."""
    dims, pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    (count,), labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if count != dims[0]:
        raise ConsistencyError(f"{images_path} has {dims[0]} images but {labels_path} has {count} labels")
    if count and labels.max() >= num_classes:
        raise FormatError(f"{labels_path}: label {labels.max()} outside [0, {num_classes})")
    images = pixels.reshape(dims[0], 1, dims[1], dims[2]).astype(np.float32) / np.float32(255.0)
    return Dataset(images, labels.astype(np.int64), num_classes, split)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images [N, H, W] and labels [N] in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches


def load_cifar_binary(paths, num_classes: int = 10, split: str = "train") -> Dataset:
    """Records are 1 label byte followed by 1024 R, 1024 G and 1024 B bytes."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    labels = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
    if len(labels) and labels.max() >= num_classes:
        raise FormatError(f"label {labels.max()} outside [0, {num_classes})")
    pixels = np.concatenate(images) if images else np.zeros((0, 3, 32, 32), dtype=np.uint8)
    return Dataset(pixels.astype(np.float32) / np.float32(255.0), labels, num_classes, split)


# ---------------------------------------------------------------------------
# procedural gratings


def synth_dataset(num_classes: int = 10, n: int = 1000, size: int = 12, seed: int = 0,
                  noise: float = 0.1, split: str = "train", channels: int = 1,
                  amplitude: tuple = (0.3, 0.45), waveform: str = "sine") -> Dataset:
    """Oriented gratings; class c fixes the wave vector.

    Orientation is ``pi * c / K`` and spatial frequency alternates between two
    values by class parity.  Each sample gets a small phase and amplitude jitter
    plus Gaussian pixel noise, so at low noise a template-matching (linear)
    classifier separates the classes.  ``waveform="square"`` thresholds the
    carrier into two grey levels.  Labels are assigned round-robin and then
    shuffled.
    """
    if num_classes < 2:
        raise UsageError("synth_dataset needs at least two classes")
    if waveform not in ("sine", "square"):
        raise UsageError(f"waveform must be 'sine' or 'square', got {waveform!r}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    theta = np.pi * labels / num_classes
    freq = np.where(labels % 2 == 0, 2.0, 3.0)
    phase = rng.uniform(-np.pi / 4, np.pi / 4, size=n)
    amp = rng.uniform(amplitude[0], amplitude[1], size=n)
    arg = 2 * np.pi * freq[:, None, None] * (np.cos(theta)[:, None, None] * xx
                                             + np.sin(theta)[:, None, None] * yy)
    carrier = np.cos(arg + phase[:, None, None])
    if waveform == "square":
        carrier = np.where(carrier >= 0, 1.0, -1.0)
    base = 0.5 + amp[:, None, None] * carrier
    images = np.repeat(base[:, None], channels, axis=1)
    if noise:
        images = images + noise * rng.standard_normal(images.shape)
    return Dataset(np.clip(images, 0.0, 1.0).astype(np.float32), labels, num_classes, split)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    net: Network
    epoch: int = 0
    seed: int = 0
    optimizer: dict = field(default_factory=dict)  # layer index -> [weight buffer, bias buffer]
    state: dict = field(default_factory=dict)  # JSON-serialisable training state


def _blob(arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return struct.pack("<Q", len(data) // 4) + data


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    net = ckpt.net
    arch = json.dumps(net.architecture(), sort_keys=True, separators=(",", ":")).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
           struct.pack("<I", len(arch)), arch, struct.pack("<I", net.depth)]
    for spec in net.layers:
        out += [_blob(spec.weight.data), _blob(spec.bias.data), struct.pack("<B", int(spec.frozen))]
    out.append(struct.pack("<I", len(ckpt.optimizer)))
    for i in sorted(ckpt.optimizer):
        bw, bb = ckpt.optimizer[i]
        out += [struct.pack("<I", i), _blob(bw), _blob(bb)]
    state = json.dumps(ckpt.state, sort_keys=True, separators=(",", ":")).encode()
    out += [struct.pack("<qQ", int(ckpt.epoch), int(ckpt.seed) & 0xFFFFFFFFFFFFFFFF),
            struct.pack("<I", len(state)), state]
    payload = b"".join(out)
    return payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.raw):
            raise CorruptionError(f"{self.path}: truncated checkpoint (need {n} bytes at offset {self.pos})")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self, shape) -> np.ndarray:
        (count,) = self.unpack("<Q")
        if count != math.prod(shape):
            raise CorruptionError(f"{self.path}: parameter blob of {count} floats, expected shape {shape}")
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)


def decode_checkpoint(raw: bytes, path="<bytes>") -> Checkpoint:
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12:
        raise CorruptionError(f"{path}: truncated checkpoint")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise CorruptionError(f"{path}: checksum mismatch (truncated or corrupted file)")
    rd = _Reader(payload, path)
    rd.take(8)
    try:
        (alen,) = rd.unpack("<I")
        arch = json.loads(rd.take(alen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptionError(f"{path}: unreadable architecture block") from None
    net = build_network(arch["layers"], arch["input_shape"], arch["num_classes"])
    (depth,) = rd.unpack("<I")
    if depth != net.depth:
        raise CorruptionError(f"{path}: {depth} parameter blocks for a {net.depth}-layer network")
    for spec in net.layers:
        spec.weight = Tensor(rd.blob(spec.weight.shape), True)
        spec.bias = Tensor(rd.blob(spec.bias.shape), True)
        (frozen,) = rd.unpack("<B")
        spec.set_frozen(bool(frozen))
    (nbuf,) = rd.unpack("<I")
    optimizer = {}
    for _ in range(nbuf):
        (i,) = rd.unpack("<I")
        spec = net.layer(i) if 1 <= i <= net.depth else None
        if spec is None:
            raise CorruptionError(f"{path}: optimizer state for unknown layer {i}")
        optimizer[i] = [rd.blob(spec.weight.shape), rd.blob(spec.bias.shape)]
    epoch, seed = rd.unpack("<qQ")
    (slen,) = rd.unpack("<I")
    try:
        state = json.loads(rd.take(slen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptionError(f"{path}: unreadable training state") from None
    if rd.pos != len(payload):
        raise CorruptionError(f"{path}: {len(payload) - rd.pos} trailing bytes")
    return Checkpoint(net, epoch, seed, optimizer, state)


def save_checkpoint(path, net: Network, *, epoch: int = 0, seed: int = 0,
                    optimizer: dict | None = None, state: dict | None = None) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    raw = encode_checkpoint(Checkpoint(net, epoch, seed, optimizer or {}, state or {}))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(raw)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), path)


def check_architecture(net: Network, expected: dict) -> None:
    if net.architecture() != expected:
        raise CompatibilityError("checkpoint architecture does not match the configured model:\n"
                                 f"  checkpoint: {net.architecture()}\n  config:     {expected}")

