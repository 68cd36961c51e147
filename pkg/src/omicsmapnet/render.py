"""Turn one sample's expression values into a treemap image.

Values are min-max scaled per sample, painted onto the frozen layout and
optionally colored with a 256-entry blue-yellow-red palette.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Tuple

import numpy as np

from ._io import atomic_open, write_bytes_atomic
from .errors import FormatError, MissingValue, NotDivisible, OutOfRange
from .treemap import TreemapLayout

TENSOR_MAGIC = b"OMNT"
TENSOR_VERSION = 1
_TENSOR_HEADER = struct.Struct("<4sIIII")

BORDER = -2
EMPTY = -1
BORDER_GRAY = 0.25


@dataclass
class SampleImage:
    data: np.ndarray  # height x width x channels, values in [0, 1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _palette() -> np.ndarray:
    k = np.arange(128) / 127.0
    lower = np.stack([255 * k, 255 * k, 255 * (1 - k)], axis=1)
    upper = np.stack([np.full(128, 255.0), 255 * (1 - k), np.zeros(128)], axis=1)
    return np.rint(np.vstack([lower, upper])).astype(np.uint8)


# blue -> yellow over entries 0..127, yellow -> red over 128..255
PALETTE = _palette()


def sample_intensities(layout: TreemapLayout, values) -> np.ndarray:
    """Per-leaf intensity ``(v - min) / (max - min)``; constant samples map to 0.5.

    ``values`` is keyed by kegg id, or by ``(kegg_id, copy_index)`` when copies
    should differ.
    """
    out = np.empty(len(layout.entries))
    for i, e in enumerate(layout.entries):
        if (e.kegg_id, e.copy_index) in values:
            out[i] = values[(e.kegg_id, e.copy_index)]
        elif e.kegg_id in values:
            out[i] = values[e.kegg_id]
        else:
            raise MissingValue(f"no value for gene {e.kegg_id!r}")
    return scale_unit(out)


def scale_unit(v: np.ndarray) -> np.ndarray:
    """Min-max scale along the last axis; constant rows become 0.5."""
    v = np.asarray(v, dtype=np.float64)
    if not np.isfinite(v).all():
        raise MissingValue("non-finite expression value")
    lo = v.min(axis=-1, keepdims=True)
    hi = v.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span == 0
    u = (v - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, u)


def palette_index(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0) or np.any(u > 1) or np.any(np.isnan(u)):
        raise OutOfRange("intensity outside [0, 1]")
    return np.floor(u * 255 + 0.5).astype(np.intp)


def apply_colormap(u) -> Tuple[int, int, int]:
    """RGB triple (0..255) for one intensity."""
    r, g, b = PALETTE[palette_index(u)]
    return int(r), int(g), int(b)


def colorize(u: np.ndarray) -> np.ndarray:
    """Array of intensities -> float RGB in [0, 1] with a trailing channel axis."""
    return PALETTE[palette_index(u)].astype(np.float64) / 255.0


def leaf_index_map(layout: TreemapLayout, side_px: Optional[int] = None,
                   borders: bool = False) -> np.ndarray:
    """Pixel -> leaf index (``-1`` uncovered, ``-2`` border).

    A pixel belongs to the leaf whose half-open rect holds its center.
    """
    if side_px is None:
        side_px = int(round(layout.side))
    scale = side_px / layout.side
    centers = (np.arange(side_px) + 0.5) / scale
    index = np.full((side_px, side_px), EMPTY, dtype=np.int32)

    def span(a, b):
        return np.searchsorted(centers, a, "left"), np.searchsorted(centers, b, "left")

    for i, e in enumerate(layout.entries):
        c0, c1 = span(e.rect.x0, e.rect.x1)
        r0, r1 = span(e.rect.y0, e.rect.y1)
        index[r0:r1, c0:c1] = i

    if borders:
        for path, rect in layout.category_rects.items():
            if not 2 <= len(path) <= 4:
                continue
            c0, c1 = span(rect.x0, rect.x1)
            r0, r1 = span(rect.y0, rect.y1)
            if c1 <= c0 or r1 <= r0:
                continue
            index[r0:r1, c0] = BORDER
            index[r0:r1, c1 - 1] = BORDER
            index[r0, c0:c1] = BORDER
            index[r1 - 1, c0:c1] = BORDER
    return index


def paint(index: np.ndarray, intensities: np.ndarray, channels: int = 1) -> np.ndarray:
    """Fill an index map with per-leaf intensities.

    ``intensities`` may be one vector or a samples x leaves matrix; the result
    has shape ``(..., H, W, channels)``.
    """
    u = np.asarray(intensities, dtype=np.float64)
    padded = np.concatenate([u, np.zeros(u.shape[:-1] + (2,))], axis=-1)
    # EMPTY (-1) and BORDER (-2) both read the zero padding
    flat = padded[..., index]
    if channels == 1:
        return flat[..., None]
    rgb = colorize(flat)
    border = np.broadcast_to(index == BORDER, flat.shape)
    rgb[border] = BORDER_GRAY
    rgb[np.broadcast_to(index == EMPTY, flat.shape)] = 0.0
    return rgb


def rasterize(layout: TreemapLayout, leaf_intensities, side_px: Optional[int] = None,
              borders: bool = False, channels: int = 1) -> SampleImage:
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    index = leaf_index_map(layout, side_px, borders)
    return SampleImage(paint(index, leaf_intensities, channels))


def downsample_mean(img, factor: int):
    """Block-mean downsampling; accepts a SampleImage or an (..., H, W, C) array."""
    data = img.data if isinstance(img, SampleImage) else np.asarray(img)
    h, w = data.shape[-3], data.shape[-2]
    if factor < 1 or h % factor or w % factor:
        raise NotDivisible(f"{h}x{w} image is not divisible by {factor}")
    if factor == 1:
        out = data.copy()
    else:
        lead = data.shape[:-3]
        blocks = data.reshape(lead + (h // factor, factor, w // factor, factor, data.shape[-1]))
        out = blocks.mean(axis=(-4, -2))
    return SampleImage(out) if isinstance(img, SampleImage) else out


# ---------------------------------------------------------------------------
# files

def tensor_bytes(data: np.ndarray) -> bytes:
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[..., None]
    h, w, c = data.shape
    header = _TENSOR_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, h, w, c)
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _TENSOR_HEADER.size:
        raise FormatError(f"{path}: truncated tensor header")
    magic, version, h, w, c = _TENSOR_HEADER.unpack_from(raw)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported tensor version {version}")
    body = raw[_TENSOR_HEADER.size:]
    if len(body) != h * w * c * 4:
        raise FormatError(f"{path}: payload size does not match {h}x{w}x{c}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).copy()


def export_image(img, path, format: str = "tensor") -> None:
    data = img.data if isinstance(img, SampleImage) else np.asarray(img)
    if format == "tensor":
        write_bytes_atomic(path, tensor_bytes(data))
    elif format == "png":
        from PIL import Image

        if data.shape[-1] == 1:
            rgb = PALETTE[palette_index(np.clip(data[..., 0], 0.0, 1.0))]
        else:
            rgb = np.rint(np.clip(data, 0.0, 1.0) * 255).astype(np.uint8)
        with atomic_open(path, "wb") as fh:
            Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(fh, format="PNG")
    else:
        raise ValueError(f"unknown image format {format!r}")
