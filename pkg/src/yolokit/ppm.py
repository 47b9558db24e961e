"""Binary P6 PPM reading/writing and box rendering.

The only supported image codec: zero dependencies, bit-exact fixtures.
Images are exchanged as (3, H, W) float arrays with values in [0, 1]
(stored 8-bit, maxval 255).
"""

from __future__ import annotations

import numpy as np

from .detect import Box
from .errors import ValidationError

# Fixed 10-color class palette (RGB, 0-255), cycled for class indices >= 10.
PALETTE = (
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (170, 110, 40),
)

_WHITESPACE = b" \t\n\r\x0b\x0c"


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data):
        if data[pos : pos + 1] in _WHITESPACE:
            pos += 1
        elif data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(data) and data[pos : pos + 1] not in _WHITESPACE:
        pos += 1
    if start == pos:
        raise ValidationError("truncated PPM header")
    return data[start:pos], pos


def parse_ppm(data: bytes) -> np.ndarray:
    """Decode P6 bytes into a (3, H, W) float64 array scaled to [0, 1]."""
    magic, pos = _next_token(data, 0)
    if magic != b"P6":
        raise ValidationError(f"not a binary P6 PPM (magic {magic!r})")
    fields = []
    for _ in range(3):
        token, pos = _next_token(data, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise ValidationError(f"bad PPM header token {token!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ValidationError(f"bad PPM dimensions {width}x{height}")
    if maxval != 255:
        raise ValidationError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte separates the header from the raster
    expected = 3 * width * height
    raster = data[pos : pos + expected]
    if len(raster) != expected:
        raise ValidationError(
            f"PPM raster truncated: expected {expected} bytes, got {len(raster)}"
        )
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_ppm(fh.read())


def encode_ppm(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValidationError(f"expected a (3, H, W) image, got shape {image.shape}")
    _, h, w = image.shape
    raster = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + raster.transpose(1, 2, 0).tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def class_color(class_index: int) -> tuple[float, float, float]:
    r, g, b = PALETTE[class_index % len(PALETTE)]
    return (r / 255.0, g / 255.0, b / 255.0)


def draw_box_outline(image: np.ndarray, box: Box, color, thickness: int = 2) -> None:
    """Draw a box outline in place, clamped to the image bounds."""
    _, h, w = image.shape
    x1, y1, x2, y2 = (int(round(v)) for v in box.corners())
    x1, x2 = max(0, x1), min(w - 1, x2)
    y1, y2 = max(0, y1), min(h - 1, y2)
    if x1 > x2 or y1 > y2:
        return
    col = np.asarray(color, dtype=image.dtype)[:, None, None]
    t = thickness
    image[:, y1 : min(y1 + t, y2 + 1), x1 : x2 + 1] = col
    image[:, max(y2 - t + 1, y1) : y2 + 1, x1 : x2 + 1] = col
    image[:, y1 : y2 + 1, x1 : min(x1 + t, x2 + 1)] = col
    image[:, y1 : y2 + 1, max(x2 - t + 1, x1) : x2 + 1] = col


def render_detections(image: np.ndarray, detections, thickness: int = 2) -> np.ndarray:
    """Return a copy of the image with class-colored outlines drawn on it."""
    canvas = np.array(image, copy=True)
    for det in detections:
        draw_box_outline(canvas, det.box, class_color(det.class_index), thickness)
    return canvas
