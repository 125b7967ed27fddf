"""On-disk formats: raw float videos (``.rvid``), PPM frame folders, and
named-tensor checkpoints (``.ravw``). All integers are little-endian u32."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RVID_MAGIC = b"RVID"
RVID_VERSION = 1
CKPT_MAGIC = b"RAVW"
CKPT_VERSION = 1

_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None, path: str | Path | None = None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset
        self.path = path


class CheckpointMismatch(ValueError):
    def __init__(self, diffs: list[str]):
        super().__init__("checkpoint does not match the model:\n  " + "\n  ".join(diffs))
        self.diffs = diffs


# ---------------------------------------------------------------- rvid


def encode_rvid(video: np.ndarray) -> bytes:
    v = np.asarray(video)
    if v.ndim != 4:
        raise ValueError(f"video must be [T, H, W, C], got shape {v.shape}")
    header = RVID_MAGIC + struct.pack("<5I", RVID_VERSION, *v.shape)
    return header + np.ascontiguousarray(v, dtype=_F32).tobytes()


def decode_rvid(buf: bytes, path=None) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != RVID_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {RVID_MAGIC!r}", 0, path)
    if len(buf) < 24:
        raise FormatError(f"truncated header: expected 24 bytes, got {len(buf)}", len(buf), path)
    version, t, h, w, c = struct.unpack_from("<5I", buf, 4)
    if version != RVID_VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    expected = t * h * w * c * 4
    actual = len(buf) - 24
    if actual != expected:
        raise FormatError(f"payload length mismatch: expected {expected} bytes, got {actual}", 24 + min(actual, expected), path)
    return np.frombuffer(buf, dtype=_F32, offset=24).reshape(t, h, w, c).astype(np.float32)


def write_rvid(path, video: np.ndarray) -> None:
    Path(path).write_bytes(encode_rvid(video))


def read_rvid(path) -> np.ndarray:
    p = Path(path)
    try:
        buf = p.read_bytes()
    except OSError as e:
        raise FileNotFoundError(f"cannot read video {p}: {e.strerror}") from e
    return decode_rvid(buf, p)


# ---------------------------------------------------------------- ppm


def quantize(v: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to 8-bit codes, rounding halves up."""
    return np.floor(np.clip(np.asarray(v, np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def write_ppm_seq(directory, video: np.ndarray) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(np.asarray(video)):
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise ValueError(f"PPM frames must be [H, W, 3], got {frame.shape}")
        h, w, _ = frame.shape
        p = d / f"frame_{t:05d}.ppm"
        p.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + quantize(frame).tobytes())
        paths.append(p)
    return paths


def _ppm_tokens(buf: bytes, path) -> tuple[int, int, int, int]:
    # returns width, height, maxval, payload offset
    pos, tokens = 0, []
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", pos, path)
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"bad magic {tokens[0]!r}, expected b'P6'", 0, path)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-integer PPM header field", pos, path) from None
    return w, h, maxval, pos + 1


def read_ppm(path) -> np.ndarray:
    p = Path(path)
    buf = p.read_bytes()
    w, h, maxval, off = _ppm_tokens(buf, p)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", off, p)
    expected = w * h * 3
    actual = len(buf) - off
    if actual < expected:
        raise FormatError(f"payload length mismatch: expected {expected} bytes, got {actual}", len(buf), p)
    codes = np.frombuffer(buf, dtype=np.uint8, count=expected, offset=off).reshape(h, w, 3)
    return codes.astype(np.float32) / np.float32(255)


def read_ppm_seq(directory) -> np.ndarray:
    d = Path(directory)
    files = sorted(d.glob("*.ppm"))
    if not files:
        raise FileNotFoundError(f"no .ppm frames in {d}")
    return np.stack([read_ppm(f) for f in files])


def read_video(path) -> np.ndarray:
    """Load a ``.rvid`` file or a directory of PPM frames."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such video: {p}")
    return read_ppm_seq(p) if p.is_dir() else read_rvid(p)


def write_video(path, video: np.ndarray) -> None:
    p = Path(path)
    if p.suffix == ".rvid":
        write_rvid(p, video)
    else:
        write_ppm_seq(p, video)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=_F32).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, path=None) -> Checkpoint:
    view = memoryview(buf)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise FormatError(f"truncated checkpoint: need {n} bytes, {len(view) - off} left", off, path)
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(4)) != CKPT_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {CKPT_MAGIC!r}", 0, path)
    version, meta_len = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4, path)
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", off, path)
        (rank,) = struct.unpack("<I", take(4))
        if rank > 4:
            raise FormatError(f"tensor {name!r} has rank {rank} > 4", off, path)
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * n), dtype=_F32).reshape(shape).astype(np.float32)
    if off != len(view):
        raise FormatError(f"{len(view) - off} trailing bytes after tensor table", off, path)
    return Checkpoint(meta=meta, tensors=tensors)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    p = Path(path)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(p)


def read_checkpoint(path) -> Checkpoint:
    p = Path(path)
    try:
        buf = p.read_bytes()
    except OSError as e:
        raise FileNotFoundError(f"cannot read checkpoint {p}: {e.strerror}") from e
    return decode_checkpoint(buf, p)


def manifest_diff(expected: dict[str, tuple], found: dict[str, tuple]) -> list[str]:
    diffs = []
    for name, shape in expected.items():
        if name not in found:
            diffs.append(f"missing {name} {tuple(shape)}")
        elif tuple(found[name]) != tuple(shape):
            diffs.append(f"shape {name}: model {tuple(shape)} vs checkpoint {tuple(found[name])}")
    for name in found:
        if name not in expected:
            diffs.append(f"unexpected {name} {tuple(found[name])}")
    return diffs
