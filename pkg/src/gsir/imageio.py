"""Image file ingestion and artifact emission.

PNG (8/16-bit, via Pillow) and binary PPM (P6) are the only accepted input
formats; 8-bit values map to [0, 1] by /255. Exports clamp to [0, 1] and
quantize to 8 bits at the file boundary only, never inside the math.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageFormatError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    """Read a PNG or binary PPM into a float (H, W, 3) array in [0, 1]."""
    try:
        head = open(path, "rb").read(2)
    except OSError:
        raise
    if head == b"P6":
        return _load_ppm(path)
    try:
        img = Image.open(path)
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: not a PNG or binary PPM") from exc
    if img.format not in ("PNG", "PPM"):
        raise ImageFormatError(f"{path}: unsupported format {img.format}")
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
        return np.repeat(arr[:, :, None], 3, axis=2)
    arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def _load_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
            elif data[pos : pos + 1].isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        return data[start:pos]

    magic = next_token()
    if magic != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM")
    try:
        width, height, maxval = (int(next_token()) for _ in range(3))
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PPM header") from exc
    pos += 1  # single whitespace after maxval
    if maxval <= 0 or maxval > 65535:
        raise ImageFormatError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = width * height * 3 * dtype.itemsize
    raw = data[pos : pos + need]
    if len(raw) < need:
        raise ImageFormatError(f"{path}: truncated PPM payload")
    arr = np.frombuffer(raw, dtype=dtype).reshape(height, width, 3)
    return arr.astype(np.float64) / maxval


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.clip(image, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def save_ppm(path, image: np.ndarray) -> None:
    arr = to_uint8(image)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def save_pgm(path, grid: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> None:
    """Grayscale heatmap of a 2-D grid (quality maps, density maps)."""
    grid = np.asarray(grid, dtype=np.float64)
    lo = float(np.min(grid)) if vmin is None else vmin
    hi = float(np.max(grid)) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip(np.rint((grid - lo) / span * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode())
        fh.write(scaled.tobytes())
