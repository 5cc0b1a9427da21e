"""Image ingestion (IDX, QSRT), LR/HR pair construction and batch order."""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

IDX_UBYTE_3D = 0x00000803
IDX_UBYTE_1D = 0x00000801
QSRT_MAGIC = b"QSRT"


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_bytes(path):
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def parse_idx(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise FormatError("file shorter than the IDX magic number", offset=0)
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_UBYTE_3D:
        ndim = 3
    elif magic == IDX_UBYTE_1D:
        ndim = 1
    else:
        raise FormatError(f"unsupported IDX magic 0x{magic:08x}", offset=0)
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise FormatError("truncated IDX dimension header", offset=len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    expected = int(np.prod(dims))
    payload = len(data) - header_end
    if payload < expected:
        raise FormatError(
            f"IDX payload holds {payload} bytes, header promises {expected}", offset=len(data)
        )
    if payload > expected:
        raise FormatError("trailing bytes after IDX payload", offset=header_end + expected)
    return np.frombuffer(data, dtype=np.uint8, offset=header_end).reshape(dims).copy()


def load_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file (magic 0x803 images or 0x801 labels), gzip or raw."""
    return parse_idx(_read_bytes(path))


def encode_idx(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValidationError("IDX writer only handles uint8 arrays")
    if arr.ndim == 3:
        magic = IDX_UBYTE_3D
    elif arr.ndim == 1:
        magic = IDX_UBYTE_1D
    else:
        raise ValidationError(f"IDX writer handles 1-D or 3-D arrays, got {arr.ndim}-D")
    header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def write_idx(path, arr):
    Path(path).write_bytes(encode_idx(arr))


# ---------------------------------------------------------------------------
# QSRT: b"QSRT" | u32 LE header length | JSON header | raw u8 [count, rows, cols, channels]
# ---------------------------------------------------------------------------


def write_qsrt(path, images):
    images = np.asarray(images)
    if images.dtype != np.uint8:
        raise ValidationError("QSRT stores uint8 images")
    if images.ndim == 3:
        images = images[..., None]
    count, rows, cols, channels = images.shape
    header = json.dumps(
        {"count": count, "rows": rows, "cols": cols, "channels": channels, "dtype": "u8"},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(QSRT_MAGIC + struct.pack("<I", len(header)) + header)
        fh.write(np.ascontiguousarray(images).tobytes())


def load_qsrt(path) -> np.ndarray:
    """Returns ``[count, rows, cols, channels]`` uint8."""
    data = _read_bytes(path)
    if data[:4] != QSRT_MAGIC:
        raise FormatError("missing QSRT magic", offset=0)
    if len(data) < 8:
        raise FormatError("truncated QSRT header", offset=len(data))
    (hlen,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable QSRT header: {exc}", offset=8) from exc
    if header.get("dtype") != "u8":
        raise FormatError(f"unsupported QSRT dtype {header.get('dtype')!r}", offset=8)
    shape = tuple(int(header[k]) for k in ("count", "rows", "cols", "channels"))
    body = data[8 + hlen :]
    if len(body) != int(np.prod(shape)):
        raise FormatError("QSRT payload length does not match header", offset=8 + hlen)
    return np.frombuffer(body, dtype=np.uint8).reshape(shape).copy()


def load_images(path) -> np.ndarray:
    """Load any supported file as ``[count, rows, cols, channels]`` uint8."""
    data = _read_bytes(path)
    if data[:4] == QSRT_MAGIC:
        return load_qsrt(path)
    images = parse_idx(data)
    if images.ndim != 3:
        raise FormatError("IDX file does not hold images (magic 0x803 expected)", offset=0)
    return images[..., None]


# ---------------------------------------------------------------------------
# Pairs and batches
# ---------------------------------------------------------------------------


def downsample2(hr):
    """2x2 box mean: ``[..., H, W, C] -> [..., H/2, W/2, C]``."""
    hr = np.asarray(hr, dtype=np.float64)
    h, w = hr.shape[-3], hr.shape[-2]
    if h % 2 or w % 2:
        raise ValidationError(f"cannot halve odd dimensions {h}x{w}")
    lead = hr.shape[:-3]
    blocks = hr.reshape(*lead, h // 2, 2, w // 2, 2, hr.shape[-1])
    return (blocks[..., 0, :, 0, :] + blocks[..., 0, :, 1, :]
            + blocks[..., 1, :, 0, :] + blocks[..., 1, :, 1, :]) / 4.0


@dataclass
class ImagePair:
    lr: np.ndarray
    hr: np.ndarray
    source_index: int


@dataclass
class DatasetHandle:
    name: str
    hr: np.ndarray  # [N, H, W, C] in [0, 1]
    lr: np.ndarray  # [N, H/2, W/2, C]
    split: str = "train"
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.indices is None:
            self.indices = np.arange(len(self.hr))

    def __len__(self):
        return len(self.hr)

    def __getitem__(self, i):
        return ImagePair(self.lr[i], self.hr[i], int(self.indices[i]))

    @property
    def channels(self):
        return self.hr.shape[-1]

    def subset(self, start, stop=None):
        sl = slice(start, stop) if stop is not None else slice(0, start)
        return DatasetHandle(self.name, self.hr[sl], self.lr[sl], self.split, self.indices[sl])


def make_pairs(images, name="dataset", split="train") -> DatasetHandle:
    """``hr = pixels / 255`` and ``lr = downsample2(hr)``, order preserved."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    if images.dtype != np.uint8:
        raise ValidationError("make_pairs expects uint8 pixels")
    hr = images.astype(np.float64) / 255.0
    return DatasetHandle(name, hr, downsample2(hr), split)


def load_dataset(path, split="train", name=None, limit=None) -> DatasetHandle:
    images = load_images(path)
    if limit is not None:
        images = images[:limit]
    return make_pairs(images, name or Path(path).name, split)


def epoch_rng(seed, epoch):
    """Counter-based generator keyed by ``(seed, epoch)``."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(epoch)]))


def batches(handle_or_len, batch_size, seed, epoch):
    """Yield index arrays covering a fresh permutation; the last partial batch is kept."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    n = handle_or_len if isinstance(handle_or_len, int) else len(handle_or_len)
    order = epoch_rng(seed, epoch).permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]
