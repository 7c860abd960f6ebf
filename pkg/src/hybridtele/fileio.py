"""File formats: PFM, 16-bit PNG with sidecar, binary field dumps, JSON.

Image I/O goes through OpenCV, which handles PFM and 16-bit PNG natively.
Color arrays are exchanged in RGB order; the BGR swap is internal.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import cv2
import numpy as np

FIELD_MAGIC = b"HTFIELD1"
FIELD_HEADER = struct.Struct("<8sQdd")  # magic, N, pitch nm, wavelength nm: 32 bytes


def _to_cv(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1] if img.ndim == 3 else img


def write_pfm(path, image: np.ndarray) -> Path:
    """Write a float image (H×W or H×W×3, RGB) as little-endian PFM."""
    path = Path(path)
    img = np.ascontiguousarray(_to_cv(np.asarray(image, dtype=np.float32)))
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write PFM {path}")
    return path


def read_pfm(path) -> np.ndarray:
    """Read a PFM file; color images come back in RGB order."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise OSError(f"could not read PFM {path}")
    return np.ascontiguousarray(_to_cv(img)).astype(np.float64)


def write_png16(path, image: np.ndarray, scale: float | None = None, extra: dict | None = None) -> Path:
    """Write a linear image as 16-bit PNG plus a sidecar JSON.

    Pixel values are ``round(image / scale * 65535)``; ``scale`` defaults to
    the image maximum and is stored in ``<path>.json`` so the linear values
    can be recovered.
    """
    path = Path(path)
    image = np.asarray(image, dtype=np.float64)
    if scale is None:
        scale = float(image.max()) if image.size and image.max() > 0 else 1.0
    q = np.clip(np.rint(image / scale * 65535.0), 0, 65535).astype(np.uint16)
    if not cv2.imwrite(str(path), np.ascontiguousarray(_to_cv(q))):
        raise OSError(f"could not write PNG {path}")
    side = {"scale": scale, "encoding": "linear = value / 65535 * scale"}
    if extra:
        side.update(extra)
    write_json(path.with_suffix(path.suffix + ".json"), side)
    return path


def read_image(path) -> np.ndarray:
    """Read PNG (8/16-bit) or PFM into float RGB/gray.

    Integer images are returned as display-referred values in [0, 1].
    """
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"could not decode image {path}")
    if raw.ndim == 3 and raw.shape[2] == 4:
        raw = raw[..., :3]
    img = _to_cv(raw)
    maxval = float(np.iinfo(raw.dtype).max) if np.issubdtype(raw.dtype, np.integer) else 1.0
    return np.ascontiguousarray(img).astype(np.float64) / maxval


def write_field(path, amplitude: np.ndarray, pitch: float, wavelength: float) -> Path:
    """Dump a complex field: 32-byte header then interleaved float64 re/im."""
    a = np.asarray(amplitude, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("field dump expects a square grid")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(FIELD_HEADER.pack(FIELD_MAGIC, a.shape[0], pitch * 1e9, wavelength * 1e9))
        fh.write(np.ascontiguousarray(a).view("<f8").tobytes())
    return path


def read_field(path) -> tuple[np.ndarray, float, float]:
    """Inverse of :func:`write_field`; returns (amplitude, pitch m, wavelength m)."""
    data = Path(path).read_bytes()
    magic, n, pitch_nm, lam_nm = FIELD_HEADER.unpack_from(data)
    if magic != FIELD_MAGIC:
        raise ValueError(f"{path}: not a field dump")
    body = np.frombuffer(data, dtype="<f8", offset=FIELD_HEADER.size)
    if body.size != 2 * n * n:
        raise ValueError(f"{path}: truncated field dump")
    return body.view(np.complex128).reshape(n, n).copy(), pitch_nm * 1e-9, lam_nm * 1e-9


def _default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps_json(obj) -> str:
    """Canonical JSON (sorted keys, fixed indentation)."""
    return json.dumps(obj, indent=2, sort_keys=True, default=_default, allow_nan=True) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps_json(obj), encoding="utf-8")
    return path


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_csv(path, header: list[str], columns: list[np.ndarray], fmt: str = "%.10g") -> Path:
    """Write equal-length columns as CSV with a header row."""
    path = Path(path)
    table = np.column_stack([np.asarray(c, dtype=np.float64) for c in columns])
    np.savetxt(path, table, delimiter=",", header=",".join(header), comments="", fmt=fmt)
    return path
