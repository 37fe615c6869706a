"""PNG and PFM helpers.  Images are float arrays in [0, 1] internally.

Pillow handles 8-bit files; 16-bit colour PNGs go through pypng because
Pillow only keeps 16 bits for single-channel images.
"""
import numpy as np
import png
from PIL import Image


def _bit_depth(path):
    with open(path, "rb") as f:
        head = f.read(25)
    if head[:8] != b"\x89PNG\r\n\x1a\n" or len(head) < 25:
        raise ValueError(f"{path}: not a PNG file")
    return head[24]


def read_png(path):
    if _bit_depth(path) == 16:
        w, h, rows, info = png.Reader(filename=path).asDirect()
        planes = info["planes"]
        arr = np.vstack([np.asarray(r, dtype=np.uint16) for r in rows]).reshape(h, w, planes)
        arr = arr.astype(np.float64) / 65535.0
        return arr[..., 0] if planes == 1 else arr
    im = Image.open(path)
    if im.mode in ("I;16", "I;16B", "I"):
        return np.asarray(im, dtype=np.float64) / 65535.0
    if im.mode not in ("L", "RGB", "RGBA"):
        im = im.convert("RGB")
    return np.asarray(im, dtype=np.float64) / 255.0


def to_uint8(img):
    return (np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img, bits=8):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        if bits == 16:
            arr = (np.clip(img, 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)
            h, w = arr.shape[:2]
            planes = 1 if arr.ndim == 2 else arr.shape[2]
            writer = png.Writer(w, h, greyscale=planes < 3, alpha=planes in (2, 4), bitdepth=16)
            with open(path, "wb") as f:
                writer.write(f, arr.reshape(h, w * planes))
            return
        if bits != 8:
            raise ValueError(f"PNG bit depth must be 8 or 16, got {bits}")
        img = to_uint8(img)
    Image.fromarray(img).save(path)


def write_pfm(path, arr):
    """Single-channel little-endian PFM (scale -1.0), rows stored bottom-up."""
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        channels = 1 if header == b"Pf" else 3
        w, h = (int(t) for t in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise ValueError(f"{path}: truncated PFM payload")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].astype(np.float32)


def luminance(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., :3] @ np.array([0.299, 0.587, 0.114])
