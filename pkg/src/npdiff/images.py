"""Binary PPM (P6, maxval 255) image I/O.

Images are float arrays of shape (H, W, 3) in [0, 1], row 0 at the top.
Writing quantizes with round(clip(v) * 255); loading maps k -> k / 255,
so u8 content round-trips exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def save_ppm(image: np.ndarray, path):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    h, w, _ = image.shape
    quantized = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantized.tobytes())


def _tokens(data: bytes):
    """Header tokens, skipping whitespace and # comments."""
    i = 0
    while True:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace():
            i += 1
        if start == i:
            raise FormatError("truncated PPM header")
        yield data[start:i], i


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    toks = _tokens(data)
    magic, _ = next(toks)
    if magic != b"P6":
        raise FormatError(f"bad PPM magic {magic!r}, expected b'P6'")
    try:
        (w_tok, _), (h_tok, _), (max_tok, end) = next(toks), next(toks), next(toks)
        w, h, maxval = int(w_tok), int(h_tok), int(max_tok)
    except (StopIteration, ValueError) as e:
        raise FormatError("malformed PPM header") from e
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}, expected 255")
    if w < 1 or h < 1:
        raise FormatError(f"invalid PPM dimensions {w}x{h}")
    pixels = data[end + 1:]
    if len(pixels) != w * h * 3:
        raise FormatError(f"PPM payload is {len(pixels)} bytes, expected {w * h * 3}")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0
