"""Image container conventions, binary PGM I/O and region extraction.

Images are 2D ``float64`` numpy arrays indexed ``img[y, x]``: row-major,
origin at the top-left pixel, x to the right, y downward.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .utils.validation import check_image

__all__ = [
    "PGMFormatError",
    "RegionSpec",
    "load_pgm",
    "save_pgm",
    "extract_region",
    "image_stats",
]

_WHITESPACE = b" \t\n\r\v\f"


class PGMFormatError(ValueError):
    """Malformed or unsupported PGM data; ``offset`` is the byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class RegionSpec:
    """A named rectangular window of a parent image, in pixels."""

    name: str
    origin_x: int
    origin_y: int
    width: int
    height: int

    def __post_init__(self):
        for field in ("origin_x", "origin_y", "width", "height"):
            value = getattr(self, field)
            if int(value) != value:
                raise ValueError(f"RegionSpec.{field} must be an integer, got {value!r}")
            object.__setattr__(self, field, int(value))
        if self.width < 1 or self.height < 1:
            raise ValueError(f"region {self.name!r} has empty extent {self.width}x{self.height}")
        if self.origin_x < 0 or self.origin_y < 0:
            raise ValueError(f"region {self.name!r} has negative origin")

    def fits(self, shape):
        h, w = shape
        return self.origin_x + self.width <= w and self.origin_y + self.height <= h

    def check_divisible(self, depth):
        divisor = 2 ** depth
        if self.width % divisor or self.height % divisor:
            raise ValueError(
                f"region {self.name!r} size {self.width}x{self.height} is not divisible "
                f"by 2**{depth} = {divisor}"
            )

    @property
    def slices(self):
        return (
            slice(self.origin_y, self.origin_y + self.height),
            slice(self.origin_x, self.origin_x + self.width),
        )

    def to_dict(self):
        return {
            "name": self.name,
            "x": self.origin_x,
            "y": self.origin_y,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["x"], d["y"], d["width"], d["height"])


def _read_token(data, pos):
    """Skip whitespace and comments, then return (token, end position)."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c in _WHITESPACE and c:
            pos += 1
        elif c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos:pos + 1] not in _WHITESPACE and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PGMFormatError("unexpected end of header", start)
    return data[start:pos], start, pos


def _parse_int(token, offset, what):
    if not token.isdigit():
        raise PGMFormatError(f"invalid {what} {token!r}", offset)
    return int(token)


def load_pgm(path):
    """Read a binary (P5) PGM file with maxval up to 65535.

    Sample values are returned unchanged as floats; 16-bit samples are
    big-endian.
    """
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise PGMFormatError(f"unsupported magic number {data[:2]!r}, expected b'P5'", 0)
    pos = 2
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise PGMFormatError("missing whitespace after magic number", pos)
    tok, start, pos = _read_token(data, pos)
    width = _parse_int(tok, start, "width")
    tok, start, pos = _read_token(data, pos)
    height = _parse_int(tok, start, "height")
    tok, start, pos = _read_token(data, pos)
    maxval = _parse_int(tok, start, "maxval")
    if width < 1 or height < 1:
        raise PGMFormatError(f"invalid dimensions {width}x{height}", start)
    if not 0 < maxval < 65536:
        raise PGMFormatError(f"maxval {maxval} outside 1..65535", start)
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise PGMFormatError("missing whitespace after maxval", pos)
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    nbytes = width * height * dtype.itemsize
    if len(data) - pos < nbytes:
        raise PGMFormatError(
            f"truncated pixel data: expected {nbytes} bytes, found {len(data) - pos}", len(data)
        )
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    if pixels.max(initial=0) > maxval:
        bad = int(np.argmax(pixels > maxval))
        raise PGMFormatError(f"sample exceeds maxval {maxval}", pos + bad * dtype.itemsize)
    return pixels.reshape(height, width).astype(np.float64)


def save_pgm(img, path, maxval=65535):
    """Write ``img`` as a binary PGM, rounding to the nearest integer.

    Out-of-range samples raise ``ValueError`` instead of being clipped.
    """
    if maxval not in (255, 65535):
        raise ValueError(f"maxval must be 255 or 65535, got {maxval}")
    arr = check_image(img)
    rounded = np.rint(arr)
    if rounded.min() < 0 or rounded.max() > maxval:
        raise ValueError(
            f"intensities [{arr.min():g}, {arr.max():g}] fall outside [0, {maxval}] after rounding"
        )
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = arr.shape
    header = b"P5\n%d %d\n%d\n" % (w, h, maxval)
    Path(path).write_bytes(header + rounded.astype(dtype).tobytes())


def extract_region(img, spec):
    """Copy the window described by ``spec`` out of ``img``."""
    if not spec.fits(img.shape):
        h, w = img.shape
        raise ValueError(
            f"region {spec.name!r} ({spec.origin_x},{spec.origin_y},{spec.width}x{spec.height}) "
            f"does not fit inside a {w}x{h} image"
        )
    return np.array(img[spec.slices], dtype=np.float64, copy=True)


def image_stats(img):
    """Return (mean, population std, min, max)."""
    arr = np.asarray(img, dtype=np.float64)
    return float(arr.mean()), float(arr.std()), float(arr.min()), float(arr.max())
