"""Image and tensor I/O, CIELAB conversion, feature upscaling and channel stacking.

Binary formats (all little-endian unless noted):

* FTEN  feature tensor: ``b"FTEN"``, u32 version=1, W, H, M, then W*H*M float32,
  map-planar, row-major.
* SPXL  label map: ``b"SPXL"``, u32 version=1, W, H, then W*H u32 labels row-major.
* PGM/PPM (P5/P6) 8-bit images; 16-bit PGM (big-endian samples) for label interchange.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from superpix.errors import (
    BadMagic,
    Downscale,
    LabelOverflow,
    MalformedHeader,
    ShapeMismatch,
    TruncatedData,
    UnsupportedDepth,
    VersionMismatch,
    WrongChannelCount,
)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class RawImage:
    """8-bit image as read from disk; ``data`` has shape (H, W, channels)."""

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ShapeMismatch(f"image dims must be >= 1, got {self.width}x{self.height}")
        if self.channels not in (1, 3):
            raise WrongChannelCount(f"expected 1 or 3 channels, got {self.channels}")
        if self.data.shape != (self.height, self.width, self.channels):
            raise ShapeMismatch(
                f"data shape {self.data.shape} != {(self.height, self.width, self.channels)}"
            )


@dataclass(frozen=True)
class MultiChannelImage:
    """Real-valued channel-planar image, ``data`` shape (C, H, W)."""

    data: np.ndarray
    channel_names: tuple[str, ...]

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeMismatch("MultiChannelImage data must be (C, H, W)")
        if len(self.channel_names) != self.data.shape[0]:
            raise ShapeMismatch(
                f"{len(self.channel_names)} names for {self.data.shape[0]} channels"
            )
        if len(set(self.channel_names)) != len(self.channel_names):
            raise ShapeMismatch(f"duplicate channel names in {self.channel_names}")

    @property
    def channel_count(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_array(cls, data, names: Sequence[str] | None = None) -> "MultiChannelImage":
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if names is None:
            names = [f"c{i}" for i in range(data.shape[0])]
        return cls(data, tuple(names))


@dataclass(frozen=True)
class FeatureTensor:
    """Stack of M feature maps, ``data`` shape (M, H, W), float32."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeMismatch("FeatureTensor data must be (M, H, W)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("FeatureTensor values must be finite")

    @property
    def map_count(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class SuperpixelMap:
    """Integer label map of shape (H, W)."""

    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def n_labels(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


# ---------------------------------------------------------------------------
# Netpbm
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*([^\s#]+)")


def _parse_netpbm(buf: bytes):
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise MalformedHeader(f"not a binary PGM/PPM file (magic {magic!r})")
    pos = 2
    values = []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise MalformedHeader("incomplete netpbm header")
        try:
            values.append(int(m.group(1)))
        except ValueError:
            raise MalformedHeader(f"bad header token {m.group(1)!r}") from None
        pos = m.end()
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise MalformedHeader("missing whitespace after maxval")
    width, height, maxval = values
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise MalformedHeader(f"bad header values {values}")
    channels = 1 if magic == b"P5" else 3
    return width, height, channels, maxval, buf[pos + 1 :]


def _read_netpbm(path, allow_16bit: bool):
    width, height, channels, maxval, payload = _parse_netpbm(Path(path).read_bytes())
    if maxval > 255 and not allow_16bit:
        raise UnsupportedDepth(f"maxval {maxval}: only 8-bit samples are supported")
    nbytes = 2 if maxval > 255 else 1
    need = width * height * channels * nbytes
    if len(payload) < need:
        raise TruncatedData(f"expected {need} data bytes, found {len(payload)}")
    dtype = ">u2" if nbytes == 2 else np.uint8
    data = np.frombuffer(payload[:need], dtype=dtype).reshape(height, width, channels)
    return width, height, channels, data


def load_image(path) -> RawImage:
    """Read an 8-bit binary PGM (P5) or PPM (P6) file."""
    width, height, channels, data = _read_netpbm(path, allow_16bit=False)
    return RawImage(width, height, channels, data.copy())


def load_pgm_labels(path) -> np.ndarray:
    """Read an 8- or 16-bit PGM as an integer (H, W) array, e.g. a GT segmentation."""
    _, _, channels, data = _read_netpbm(path, allow_16bit=True)
    if channels != 1:
        raise WrongChannelCount("label maps must be single-channel PGM")
    return data[:, :, 0].astype(np.int64)


def save_pgm(path, data: np.ndarray, maxval: int | None = None) -> None:
    """Write a (H, W) integer array as P5; 16-bit big-endian when maxval > 255."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise ShapeMismatch("PGM data must be 2-D")
    if maxval is None:
        maxval = 255 if data.size == 0 or data.max() <= 255 else 65535
    if data.size and (data.min() < 0 or data.max() > maxval):
        raise LabelOverflow(f"values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else np.uint8
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + data.astype(dtype).tobytes())


def save_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeMismatch("PPM data must be (H, W, 3)")
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + rgb.tobytes())


def save_image(path, img: RawImage) -> None:
    if img.channels == 1:
        save_pgm(path, img.data[:, :, 0], maxval=255)
    else:
        save_ppm(path, img.data)


# ---------------------------------------------------------------------------
# Color
# ---------------------------------------------------------------------------

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# D65 white taken from the matrix itself so that white maps to a = b = 0 exactly.
_WHITE = _SRGB_TO_XYZ.sum(axis=1)
_EPS = (6.0 / 29.0) ** 3


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _EPS, np.cbrt(t), t / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)


def rgb_to_lab(img: RawImage) -> MultiChannelImage:
    """sRGB (8-bit) -> CIELAB under D65, L in [0, 100]."""
    if img.channels != 3:
        raise WrongChannelCount(f"rgb_to_lab needs 3 channels, got {img.channels}")
    c = img.data.astype(np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _SRGB_TO_XYZ.T / _WHITE
    f = _lab_f(xyz)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return MultiChannelImage(np.stack([L, a, b]), ("L", "a", "b"))


def gray_to_lightness(img: RawImage) -> MultiChannelImage:
    """Single-channel image -> CIELAB lightness of the equivalent gray pixel."""
    if img.channels != 1:
        raise WrongChannelCount(f"expected a gray image, got {img.channels} channels")
    rgb = np.repeat(img.data, 3, axis=2)
    lab = rgb_to_lab(RawImage(img.width, img.height, 3, rgb))
    return MultiChannelImage(lab.data[:1], ("L",))


def to_multichannel(img: RawImage) -> MultiChannelImage:
    """Lab planes for colour or gray input (gray pixels map to a = b = 0 up to rounding)."""
    if img.channels == 1:
        img = RawImage(img.width, img.height, 3, np.repeat(img.data, 3, axis=2))
    return rgb_to_lab(img)


# ---------------------------------------------------------------------------
# Feature maps
# ---------------------------------------------------------------------------


def _nearest_index(src: int, dst: int) -> np.ndarray:
    scale = dst / src
    starts = np.floor(np.arange(src) * scale)
    return np.searchsorted(starts, np.arange(dst), side="right") - 1


def upscale_nearest(t: FeatureTensor, target_w: int, target_h: int) -> FeatureTensor:
    """Nearest-neighbour upscaling; source pixel x fills targets from floor(x*sw)."""
    if target_w < t.width or target_h < t.height:
        raise Downscale(f"cannot upscale {t.width}x{t.height} to {target_w}x{target_h}")
    if (target_w, target_h) == (t.width, t.height):
        return FeatureTensor(t.data.copy())
    ix = _nearest_index(t.width, target_w)
    iy = _nearest_index(t.height, target_h)
    return FeatureTensor(np.ascontiguousarray(t.data[:, iy[:, None], ix[None, :]]))


def concat_channels(
    img: MultiChannelImage, t: FeatureTensor, mask: Sequence[bool] | None = None, prefix: str = "f"
) -> MultiChannelImage:
    """Append the feature maps selected by ``mask`` as channels ``{prefix}{m}``."""
    if (t.width, t.height) != (img.width, img.height):
        raise ShapeMismatch(
            f"feature maps {t.width}x{t.height} do not match image {img.width}x{img.height}"
        )
    if mask is None:
        mask = [True] * t.map_count
    if len(mask) != t.map_count:
        raise ShapeMismatch(f"mask length {len(mask)} != map count {t.map_count}")
    keep = [m for m, on in enumerate(mask) if on]
    if not keep:
        return img
    data = np.concatenate([img.data, t.data[keep].astype(np.float64)])
    names = img.channel_names + tuple(f"{prefix}{m}" for m in keep)
    return MultiChannelImage(data, names)


# ---------------------------------------------------------------------------
# FTEN / SPXL
# ---------------------------------------------------------------------------


def _check_header(buf: bytes, magic: bytes, n_fields: int) -> tuple[int, ...]:
    head = 4 + 4 * n_fields
    if len(buf) < 4 or buf[:4] != magic:
        raise BadMagic(f"expected magic {magic!r}, found {buf[:4]!r}")
    if len(buf) < head:
        raise TruncatedData("file shorter than its header")
    fields = struct.unpack(f"<{n_fields}I", buf[4:head])
    if fields[0] != FORMAT_VERSION:
        raise VersionMismatch(f"version {fields[0]} not supported (expected {FORMAT_VERSION})")
    return fields[1:]


def write_feature_file(path, t: FeatureTensor) -> None:
    m, h, w = t.data.shape
    head = b"FTEN" + struct.pack("<4I", FORMAT_VERSION, w, h, m)
    Path(path).write_bytes(head + np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_feature_file(path) -> FeatureTensor:
    buf = Path(path).read_bytes()
    w, h, m = _check_header(buf, b"FTEN", 4)
    need = 4 * w * h * m
    body = buf[20:]
    if len(body) < need:
        raise TruncatedData(f"expected {need} data bytes, found {len(body)}")
    data = np.frombuffer(body[:need], dtype="<f4").reshape(m, h, w).astype(np.float32)
    return FeatureTensor(data)


def write_labelmap(path, sp: SuperpixelMap) -> None:
    h, w = sp.labels.shape
    if sp.labels.size and (sp.labels.min() < 0 or sp.labels.max() > 0xFFFFFFFF):
        raise LabelOverflow("SPXL labels must fit in u32")
    head = b"SPXL" + struct.pack("<3I", FORMAT_VERSION, w, h)
    Path(path).write_bytes(head + sp.labels.astype("<u4").tobytes())


def read_labelmap(path) -> SuperpixelMap:
    buf = Path(path).read_bytes()
    w, h = _check_header(buf, b"SPXL", 3)
    need = 4 * w * h
    body = buf[16:]
    if len(body) < need:
        raise TruncatedData(f"expected {need} data bytes, found {len(body)}")
    labels = np.frombuffer(body[:need], dtype="<u4").reshape(h, w).astype(np.int64)
    return SuperpixelMap(labels)


def export_labelmap_pgm(path, sp: SuperpixelMap) -> None:
    """16-bit PGM export; labels above 65535 cannot be represented."""
    if sp.labels.size and sp.labels.max() > 65535:
        raise LabelOverflow(f"label {int(sp.labels.max())} exceeds 65535")
    save_pgm(path, sp.labels, maxval=65535)


def boundary_overlay(rgb: np.ndarray, labels: np.ndarray, color=(255, 0, 0)) -> np.ndarray:
    """Paint superpixel boundary pixels onto an (H, W, 3) uint8 image."""
    from superpix.metrics import boundary_pixels

    out = np.array(rgb, dtype=np.uint8, copy=True)
    if out.ndim == 2:
        out = np.repeat(out[:, :, None], 3, axis=2)
    out[boundary_pixels(labels)] = color
    return out
