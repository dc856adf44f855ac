"""RAW10 Bayer container, CFA plane split/merge, channel statistics and ``.craw`` I/O."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CRAW"
VERSION = 1
DEFAULT_BLACK_LEVEL = 64
PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
_HEADER = struct.Struct("<4sHHHBBHffff")

# (row, col) offset inside the 2x2 tile for each plane, in r, gr, gb, b order.
# gr is the green sharing a row with red, gb the green sharing a row with blue.
_OFFSETS = {
    "RGGB": ((0, 0), (0, 1), (1, 0), (1, 1)),
    "BGGR": ((1, 1), (1, 0), (0, 1), (0, 0)),
    "GRBG": ((0, 1), (0, 0), (1, 1), (1, 0)),
    "GBRG": ((1, 0), (1, 1), (0, 0), (0, 1)),
}


class RawFormatError(ValueError):
    """Malformed ``.craw`` payload; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class CaptureParams:
    iso: float = 1000.0
    shutter_ms: float = 10.0
    aperture_f: float = 2.8
    focal_mm: float = 4.0

    def __post_init__(self):
        for name in ("iso", "shutter_ms", "aperture_f", "focal_mm"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"CaptureParams.{name} must be positive and finite, got {v}")
            # stored as f32 in .craw; keep the in-memory value identical to what a reload yields
            object.__setattr__(self, name, float(np.float32(v)))


@dataclass(frozen=True, eq=False)
class RawImage:
    samples: np.ndarray  # (height, width) uint16
    capture: CaptureParams = field(default_factory=CaptureParams)
    black_level: int = DEFAULT_BLACK_LEVEL
    cfa_pattern: str = "RGGB"
    bit_depth: int = 10

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2:
            raise ValueError(f"samples must be 2-D (height, width), got shape {s.shape}")
        h, w = s.shape
        if h % 2 or w % 2:
            raise ValueError(f"invalid dimensions {w}x{h}: width and height must be even")
        if h < 4 or w < 4:
            raise ValueError(f"invalid dimensions {w}x{h}: minimum is 4x4")
        if self.cfa_pattern not in _OFFSETS:
            raise ValueError(f"unknown CFA pattern {self.cfa_pattern!r}")
        if s.size and (s.min() < 0 or s.max() > self.white_level):
            raise ValueError(f"sample values must lie in [0, {self.white_level}]")
        s = s.astype(np.uint16)
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def white_level(self) -> int:
        return (1 << self.bit_depth) - 1

    def __eq__(self, other) -> bool:
        if not isinstance(other, RawImage):
            return NotImplemented
        return (
            self.capture == other.capture
            and self.black_level == other.black_level
            and self.cfa_pattern == other.cfa_pattern
            and self.bit_depth == other.bit_depth
            and np.array_equal(self.samples, other.samples)
        )


@dataclass(frozen=True, eq=False)
class CfaPlanes:
    r: np.ndarray
    gr: np.ndarray
    gb: np.ndarray
    b: np.ndarray
    black_level: int = DEFAULT_BLACK_LEVEL

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.r, self.gr, self.gb, self.b

    def stack(self) -> np.ndarray:
        return np.stack(self.as_tuple())


def _check_even(arr: np.ndarray) -> None:
    h, w = arr.shape
    if h % 2 or w % 2:
        raise ValueError(f"invalid dimensions {w}x{h}: width and height must be even")


def split_mosaic(mosaic: np.ndarray, pattern: str = "RGGB") -> tuple[np.ndarray, ...]:
    """Split any 2-D mosaic array (integer or float) into (r, gr, gb, b)."""
    _check_even(mosaic)
    return tuple(mosaic[dy::2, dx::2] for dy, dx in _OFFSETS[pattern])


def decompose_cfa(raw: RawImage) -> CfaPlanes:
    r, gr, gb, b = (p.copy() for p in split_mosaic(raw.samples, raw.cfa_pattern))
    return CfaPlanes(r, gr, gb, b, black_level=raw.black_level)


def recompose_cfa(planes: CfaPlanes | tuple, pattern: str = "RGGB") -> np.ndarray:
    parts = planes.as_tuple() if isinstance(planes, CfaPlanes) else tuple(planes)
    shapes = {np.shape(p) for p in parts}
    if len(parts) != 4 or len(shapes) != 1:
        raise ValueError(f"planes must be four arrays of identical shape, got {[np.shape(p) for p in parts]}")
    h, w = shapes.pop()
    out = np.empty((2 * h, 2 * w), dtype=np.result_type(*parts))
    for plane, (dy, dx) in zip(parts, _OFFSETS[pattern]):
        out[dy::2, dx::2] = plane
    return out


def channel_mean(plane, black_level: float = DEFAULT_BLACK_LEVEL) -> float:
    a = np.asarray(plane, dtype=np.float64)
    if a.size == 0:
        raise ValueError("channel_mean of an empty plane")
    return max(float(a.mean()) - black_level, 0.0)


def channel_means(raw: RawImage) -> dict[str, float]:
    planes = decompose_cfa(raw)
    return {
        name: channel_mean(p, raw.black_level)
        for name, p in zip(("r", "gr", "gb", "b"), planes.as_tuple())
    }


def mean_luma(raw: RawImage) -> float:
    m = channel_means(raw)
    return (m["r"] + m["gr"] + m["gb"] + m["b"]) / 4.0


def mosaic_luma(mosaic: np.ndarray, black_level: float = 0.0, pattern: str = "RGGB") -> float:
    """:func:`mean_luma` for a float mosaic (used by the noise-free renderer)."""
    return sum(channel_mean(p, black_level) for p in split_mosaic(mosaic, pattern)) / 4.0


def encode_raw(raw: RawImage) -> bytes:
    c = raw.capture
    header = _HEADER.pack(
        MAGIC, VERSION, raw.width, raw.height, raw.bit_depth, PATTERNS.index(raw.cfa_pattern),
        raw.black_level, c.iso, c.shutter_ms, c.aperture_f, c.focal_mm,
    )
    return header + raw.samples.astype("<u2").tobytes()


def decode_raw(data: bytes) -> RawImage:
    if len(data) < 4 or data[:4] != MAGIC:
        raise RawFormatError("bad magic", 0)
    if len(data) < _HEADER.size:
        raise RawFormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(data)}", len(data))
    _, version, w, h, depth, pat, black, iso, shutter, aperture, focal = _HEADER.unpack_from(data)
    if version != VERSION:
        raise RawFormatError(f"unsupported version {version}", 4)
    if pat >= len(PATTERNS):
        raise RawFormatError(f"unknown cfa_pattern code {pat}", 11)
    if not 1 <= depth <= 16:
        raise RawFormatError(f"invalid bit_depth {depth}", 10)
    expected = _HEADER.size + 2 * w * h
    if len(data) != expected:
        raise RawFormatError(
            f"payload length mismatch: expected {expected} bytes, got {len(data)}", min(len(data), expected)
        )
    samples = np.frombuffer(data, dtype="<u2", offset=_HEADER.size).reshape(h, w)
    limit = (1 << depth) - 1
    bad = np.flatnonzero(samples > limit)
    if bad.size:
        idx = int(bad[0])
        raise RawFormatError(f"sample {int(samples.flat[idx])} exceeds {limit}", _HEADER.size + 2 * idx)
    try:
        capture = CaptureParams(float(iso), float(shutter), float(aperture), float(focal))
        return RawImage(samples.astype(np.uint16), capture, int(black), PATTERNS[pat], int(depth))
    except ValueError as exc:
        raise RawFormatError(str(exc), 6) from exc


def write_raw(raw: RawImage, path) -> None:
    Path(path).write_bytes(encode_raw(raw))


def read_raw(path) -> RawImage:
    return decode_raw(Path(path).read_bytes())
