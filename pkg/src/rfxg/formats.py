"""File formats: portable pixmaps, saliency map files, sidecar records.

Images travel as binary PNM (P6 color / P5 gray, maxval 255) with a linear
[0,1] <-> [0,255] quantization. Saliency maps use a small headered binary
format so values round-trip at 32-bit float precision regardless of sign
or scale.
"""

import io

import numpy as np

from .core import ImageTensor, SaliencyMap

__all__ = [
    "write_pnm",
    "read_pnm",
    "write_saliency",
    "read_saliency",
    "write_sidecar",
    "read_sidecar",
]

SALIENCY_MAGIC = b"RFXG-SAL 1"


def _quantize(data):
    return np.floor(data * 255.0 + 0.5).astype(np.uint8)


def write_pnm(image, path):
    """Write an image as binary P6 (3 channels) or P5 (1 channel), maxval 255."""
    if not isinstance(image, ImageTensor):
        image = ImageTensor(image)
    magic = b"P6" if image.channels == 3 else b"P5"
    header = b"%s\n%d %d\n255\n" % (magic, image.width, image.height)
    payload = _quantize(image.data)
    if image.channels == 1:
        payload = payload[:, :, 0]
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def _read_pnm_token(fh):
    # PNM headers allow whitespace runs and '#' comments between tokens
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            if token:
                return token
            raise ValueError("truncated pixmap header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_pnm(path):
    """Read a binary P6 or P5 file back into an ImageTensor (values byte/255)."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic not in (b"P6", b"P5"):
            raise ValueError(f"not a binary pixmap/graymap: magic {magic!r}")
        width = int(_read_pnm_token(fh))
        height = int(_read_pnm_token(fh))
        maxval = int(_read_pnm_token(fh))
        if maxval != 255:
            raise ValueError(f"only maxval 255 supported, got {maxval}")
        channels = 3 if magic == b"P6" else 1
        count = width * height * channels
        raw = fh.read(count)
        if len(raw) != count:
            raise ValueError(
                f"pixmap payload truncated: expected {count} bytes, got {len(raw)}"
            )
    data = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    return ImageTensor(data.reshape(height, width, channels))


def write_saliency(saliency, path):
    """Write a saliency map: magic line, `<height> <width>` line, LE f32 row-major."""
    if not isinstance(saliency, SaliencyMap):
        saliency = SaliencyMap(saliency)
    with open(path, "wb") as fh:
        fh.write(SALIENCY_MAGIC + b"\n")
        fh.write(b"%d %d\n" % (saliency.height, saliency.width))
        fh.write(saliency.values.astype("<f4").tobytes())


def read_saliency(path):
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != SALIENCY_MAGIC:
            raise ValueError(f"bad saliency magic {magic!r}")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise ValueError("bad saliency dimension line")
        height, width = int(dims[0]), int(dims[1])
        if height < 1 or width < 1:
            raise ValueError(f"bad saliency dimensions {height}x{width}")
        count = height * width
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise ValueError(
                f"saliency payload truncated: expected {4 * count} bytes, "
                f"got {len(raw)}"
            )
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return SaliencyMap(values.reshape(height, width))


def write_sidecar(records, path):
    """Write key=value lines describing how an artifact was produced.

    Keys are emitted in the order given; values are single-line strings.
    """
    buf = io.StringIO()
    for key, value in records:
        key = str(key)
        value = str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"sidecar entry not representable: {key!r}={value!r}")
        buf.write(f"{key}={value}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


def read_sidecar(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad sidecar line {line!r}")
            key, value = line.split("=", 1)
            records.append((key, value))
    return records
