"""Image file I/O: 8-bit PNG and binary PPM/PGM.

Float grids in [0,1] are quantized to 8 bits on save; loading returns
float32 in [0,1].  save(load(x)) is byte-stable and load(save(q)) == q for
already-quantized grids.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float32)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / 255.0


def encode_png(image: np.ndarray) -> bytes:
    """Encode an HxW or HxWx{1,3} float grid as 8-bit PNG bytes."""
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    mode = "L" if arr.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        im = im.convert("RGB") if im.mode not in ("L", "RGB") else im.copy()
    arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return from_uint8(arr)


def encode_ppm(image: np.ndarray) -> bytes:
    """Binary PPM (P6) for 3-channel grids, PGM (P5) for single-channel."""
    arr = to_uint8(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if c == 1:
        header = f"P5\n{w} {h}\n255\n".encode("ascii")
        return header + arr[:, :, 0].tobytes()
    if c == 3:
        header = f"P6\n{w} {h}\n255\n".encode("ascii")
        return header + arr.tobytes()
    raise ValueError(f"unsupported channel count {c}")


def decode_ppm(data: bytes) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] not in (b"P5", b"P6"):
        raise ValueError("not a binary PPM/PGM stream")
    magic, w, h, maxval, body = parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4]
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported, maxval={maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = w * h * channels
    if len(body) < expected:
        raise ValueError("truncated PPM body")
    arr = np.frombuffer(body[:expected], dtype=np.uint8).reshape(h, w, channels)
    return from_uint8(arr)


def save_image(path, image: np.ndarray) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        path.write_bytes(encode_png(image))
    elif suffix in (".ppm", ".pgm"):
        path.write_bytes(encode_ppm(image))
    else:
        raise ValueError(f"unsupported image extension {suffix!r}")


def load_image(path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        return decode_png(path.read_bytes())
    if suffix in (".ppm", ".pgm"):
        return decode_ppm(path.read_bytes())
    raise ValueError(f"unsupported image extension {suffix!r}")
