"""File formats: PNG images, PFM float maps, camera JSON, fixture directories.

A fixture (view) directory holds ``rgb.png``, ``depth.png`` (16-bit,
millimeters, 0 = invalid), ``iuv.png`` (16-bit, part id in the first
channel, U and V scaled to 0..65535), ``mask.png`` and ``camera.json``.
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .cloud import RGBDFrame
from .errors import SplatviewError
from .geometry import Camera


class ImageIOError(SplatviewError, OSError):
    pass


def _imread(path, flags) -> np.ndarray:
    img = cv2.imread(str(path), flags)
    if img is None:
        raise ImageIOError(f"cannot read image {path}")
    return img


def _imwrite(path, img) -> None:
    if not cv2.imwrite(str(path), img):
        raise ImageIOError(f"cannot write image {path}")


def write_rgb_png(path, rgb: np.ndarray) -> None:
    """Write a float image in [0, 1] (H x W x 3 or H x W) as 8-bit PNG."""
    img = np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 3:
        img = img[..., ::-1]
    _imwrite(path, img)


def read_rgb_png(path) -> np.ndarray:
    img = _imread(path, cv2.IMREAD_COLOR)
    return img[..., ::-1].astype(np.float64) / 255.0


def write_depth_png(path, depth: np.ndarray) -> None:
    mm = np.rint(np.asarray(depth, dtype=np.float64) * 1000.0)
    if mm.max(initial=0) > 65535:
        raise ImageIOError("depth exceeds the 16-bit millimeter range")
    _imwrite(path, np.clip(mm, 0, 65535).astype(np.uint16))


def read_depth_png(path) -> np.ndarray:
    img = _imread(path, cv2.IMREAD_UNCHANGED)
    if img.dtype != np.uint16 or img.ndim != 2:
        raise ImageIOError(f"{path}: depth must be single-channel 16-bit")
    return img.astype(np.float64) / 1000.0


def write_iuv_png(path, iuv: np.ndarray) -> None:
    iuv = np.asarray(iuv, dtype=np.float64)
    out = np.empty(iuv.shape, dtype=np.uint16)
    out[..., 0] = np.rint(iuv[..., 0]).astype(np.uint16)
    out[..., 1:] = np.rint(np.clip(iuv[..., 1:], 0, 1) * 65535).astype(np.uint16)
    _imwrite(path, out[..., ::-1])


def read_iuv_png(path) -> np.ndarray:
    img = _imread(path, cv2.IMREAD_UNCHANGED)
    if img.dtype != np.uint16 or img.ndim != 3 or img.shape[2] != 3:
        raise ImageIOError(f"{path}: IUV must be 3-channel 16-bit")
    img = img[..., ::-1].astype(np.float64)
    img[..., 1:] /= 65535.0
    return img


def write_mask_png(path, mask: np.ndarray) -> None:
    _imwrite(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask_png(path) -> np.ndarray:
    return _imread(path, cv2.IMREAD_GRAYSCALE) > 127


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM. 1 and 3 channels use the standard ``Pf``/``PF``
    headers; other channel counts use ``PX`` with the count on its own line.
    Rows are stored bottom to top as usual.
    """
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    if c == 1:
        header = b"Pf\n"
    elif c == 3:
        header = b"PF\n"
    else:
        header = b"PX\n%d\n" % c
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"%d %d\n-1.0\n" % (w, h))
        fh.write(np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            kind = fh.readline().strip()
            if kind == b"Pf":
                c = 1
            elif kind == b"PF":
                c = 3
            elif kind == b"PX":
                c = int(fh.readline())
            else:
                raise ImageIOError(f"{path}: not a PFM file")
            w, h = (int(x) for x in fh.readline().split())
            scale = float(fh.readline())
            raw = np.frombuffer(fh.read(), dtype="<f4" if scale < 0 else ">f4")
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"cannot read PFM {path}: {exc}") from exc
    if raw.size != w * h * c:
        raise ImageIOError(f"{path}: truncated PFM")
    arr = raw.reshape(h, w, c)[::-1].astype(np.float64)
    return arr[..., 0] if c == 1 else arr


def read_camera(path) -> Camera:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ImageIOError(f"cannot read camera {path}: {exc}") from exc
    return Camera.from_dict(data)


def write_camera(path, cam: Camera) -> None:
    write_json(path, cam.to_dict())


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_view(directory, frame: RGBDFrame, cam: Camera) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_rgb_png(d / "rgb.png", frame.rgb)
    write_depth_png(d / "depth.png", frame.depth)
    if frame.iuv is not None:
        write_iuv_png(d / "iuv.png", frame.iuv)
    if frame.fg_mask is not None:
        write_mask_png(d / "mask.png", frame.fg_mask)
    write_camera(d / "camera.json", cam)


def load_view(directory, require_iuv: bool = False):
    """Read a view directory back as ``(RGBDFrame, Camera)``."""
    d = Path(directory)
    if not d.is_dir():
        raise ImageIOError(f"no such view directory: {d}")
    rgb = read_rgb_png(d / "rgb.png")
    depth = read_depth_png(d / "depth.png")
    iuv = read_iuv_png(d / "iuv.png") if (d / "iuv.png").exists() else None
    if require_iuv and iuv is None:
        raise ImageIOError(f"{d}: missing iuv.png")
    mask = read_mask_png(d / "mask.png") if (d / "mask.png").exists() else None
    cam = read_camera(d / "camera.json")
    if rgb.shape[:2] != (cam.height, cam.width):
        raise ImageIOError(f"{d}: image size does not match camera.json")
    return RGBDFrame(rgb, depth, iuv=iuv, fg_mask=mask), cam
