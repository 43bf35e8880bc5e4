"""Binary array and float-map file formats shared by all pipeline stages.

Array files carry a 16-byte little-endian header ``magic, width, height,
channels`` followed by a C-ordered ``(height, width, channels)`` payload.
The magic encodes the element type.
"""
import os
import struct
import tempfile

import numpy as np

_MAGIC_BY_DTYPE = {
    np.dtype("<f8"): b"BAF8",
    np.dtype("<f4"): b"BAF4",
    np.dtype("<i4"): b"BAI4",
    np.dtype("<i8"): b"BAI8",
}
_DTYPE_BY_MAGIC = {v: k for k, v in _MAGIC_BY_DTYPE.items()}
_HEADER = struct.Struct("<4sIII")


class ArrayFormatError(ValueError):
    pass


def atomic_write_bytes(path, data):
    """Write ``data`` to ``path`` through a temp file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_array(array):
    a = np.asarray(array)
    if a.ndim == 1:
        a = a[:, None, None]
    elif a.ndim == 2:
        a = a[:, :, None]
    elif a.ndim != 3:
        raise ArrayFormatError(f"expected 1-3 dimensions, got {a.ndim}")
    dtype = a.dtype.newbyteorder("<")
    if dtype not in _MAGIC_BY_DTYPE:
        if np.issubdtype(a.dtype, np.floating):
            dtype = np.dtype("<f8")
        elif np.issubdtype(a.dtype, np.integer) or a.dtype == bool:
            dtype = np.dtype("<i8")
        else:
            raise ArrayFormatError(f"unsupported dtype {a.dtype}")
    a = np.ascontiguousarray(a, dtype=dtype)
    height, width, channels = a.shape
    return _HEADER.pack(_MAGIC_BY_DTYPE[dtype], width, height, channels) + a.tobytes()


def decode_array(data):
    if len(data) < _HEADER.size:
        raise ArrayFormatError("truncated header")
    magic, width, height, channels = _HEADER.unpack_from(data)
    if magic not in _DTYPE_BY_MAGIC:
        raise ArrayFormatError(f"bad magic {magic!r}")
    dtype = _DTYPE_BY_MAGIC[magic]
    expected = width * height * channels * dtype.itemsize
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise ArrayFormatError(f"payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(height, width, channels).copy()


def save_array(path, array):
    """Save a 1-3 dimensional array; 1-D/2-D arrays gain trailing unit axes."""
    atomic_write_bytes(path, encode_array(array))


def load_array(path):
    """Load an array saved by :func:`save_array` as ``(height, width, channels)``."""
    with open(path, "rb") as fh:
        return decode_array(fh.read())


def save_pfm(path, image):
    """Save a single-channel float image as a little-endian PFM file."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise ArrayFormatError("PFM writer takes a 2-D image")
    height, width = img.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    # PFM rows run bottom to top
    atomic_write_bytes(path, header + np.ascontiguousarray(img[::-1]).tobytes())


def load_pfm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"Pf":
        raise ArrayFormatError("not a single-channel PFM file")
    width, height = (int(t) for t in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(parts[3], dtype=dtype, count=width * height)
    return img.reshape(height, width)[::-1].astype(np.float64)
