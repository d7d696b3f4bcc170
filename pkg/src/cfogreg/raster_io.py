"""Reading and writing rasters (binary PGM, grayscale PNG) and ESRI world files.

Intensities are held in [0, 1]: 8-bit samples are divided by 255, 16-bit by 65535.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PILImage

from .imagecore import GeoTransform, Image, ParameterError


class RasterIOError(IOError):
    pass


def world_file_path(image_path) -> Path:
    return Path(image_path).with_suffix(".wld")


def read_world_file(path) -> GeoTransform:
    # line order is a, d, b, e, c, f
    try:
        values = [float(line) for line in Path(path).read_text().split()]
    except ValueError as exc:
        raise RasterIOError(f"{path}: malformed world file ({exc})") from exc
    if len(values) != 6:
        raise RasterIOError(f"{path}: world file needs 6 values, found {len(values)}")
    a, d, b, e, c, f = values
    return GeoTransform(a=a, b=b, c=c, d=d, e=e, f=f)


def write_world_file(path, geo: GeoTransform) -> None:
    lines = [geo.a, geo.d, geo.b, geo.e, geo.c, geo.f]
    Path(path).write_text("".join(f"{v!r}\n" for v in lines))


def _read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if raw[:2] != b"P5":
        raise RasterIOError(f"{path}: not a binary PGM (P5)")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise RasterIOError(f"{path}: truncated PGM header")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace before the raster
    width, height, maxval = fields
    if not 0 < maxval < 65536:
        raise RasterIOError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    body = raw[pos:pos + count * dtype.itemsize]
    if len(body) != count * dtype.itemsize:
        raise RasterIOError(f"{path}: truncated PGM raster")
    pixels = np.frombuffer(body, dtype=dtype).reshape(height, width)
    divisor = 65535.0 if maxval > 255 else 255.0
    return pixels.astype(np.float64) / divisor


def _write_pgm(path: Path, data: np.ndarray, bits: int) -> None:
    h, w = data.shape
    if bits == 16:
        samples = np.round(np.clip(data, 0, 1) * 65535).astype(">u2")
        maxval = 65535
    else:
        samples = np.round(np.clip(data, 0, 1) * 255).astype("u1")
        maxval = 255
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    path.write_bytes(header + samples.tobytes())


def _read_png(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        elif im.mode == "L":
            arr = np.asarray(im, dtype=np.float64) / 255.0
        else:
            # first band / luma only
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return arr


def _write_png(path: Path, data: np.ndarray, bits: int) -> None:
    if bits == 16:
        samples = np.round(np.clip(data, 0, 1) * 65535).astype(np.uint16)
        PILImage.fromarray(samples).save(path)
    else:
        samples = np.round(np.clip(data, 0, 1) * 255).astype(np.uint8)
        PILImage.fromarray(samples, mode="L").save(path)


def read_image(path, load_world: bool = True) -> Image:
    """Load a PGM or PNG raster; picks up ``<stem>.wld`` when present."""
    path = Path(path)
    if not path.is_file():
        raise RasterIOError(f"{path}: no such file")
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        data = _read_pgm(path)
    elif suffix == ".png":
        data = _read_png(path)
    else:
        raise RasterIOError(f"{path}: unsupported raster format {suffix!r}")
    geo = None
    wld = world_file_path(path)
    if load_world and wld.is_file():
        geo = read_world_file(wld)
    return Image(data, geo)


def write_image(path, img, bits: int = 8, geo: Optional[GeoTransform] = None) -> None:
    """Write ``img`` (Image or 2-D array in [0, 1]) and, if georeferenced, its world file."""
    if bits not in (8, 16):
        raise ParameterError("bits must be 8 or 16")
    path = Path(path)
    data = img.data if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    if geo is None and isinstance(img, Image):
        geo = img.geo
    suffix = path.suffix.lower()
    if path.parent and not path.parent.exists():
        os.makedirs(path.parent, exist_ok=True)
    if suffix == ".pgm":
        _write_pgm(path, data, bits)
    elif suffix == ".png":
        _write_png(path, data, bits)
    else:
        raise RasterIOError(f"{path}: unsupported raster format {suffix!r}")
    if geo is not None:
        write_world_file(world_file_path(path), geo)


def rescale_to_unit(arr: np.ndarray) -> np.ndarray:
    """Linear min/max stretch to [0, 1]; constant input maps to zeros."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo <= 0:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)
