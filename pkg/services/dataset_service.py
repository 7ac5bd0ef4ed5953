"""
Dataset Service - on-disk multiview datasets.

Layout of a dataset directory:
    images/NNN.png   8-bit RGB, or RGBA when the dataset carries alpha
    masks/NNN.png    8-bit, 0/255 (optional)
    depth/NNN.pfm    little-endian float32, 0 = no depth (optional)
    cameras.json     [{fx, fy, cx, cy, width, height, cam_to_world: 16 row-major numbers}, ...]
    meta.json        {near, far, bounds, background, kind}
"""
import io
import json
import logging
import os

import numpy as np
from PIL import Image

from field_engine.scene import Camera, MaskImage, MultiViewDataset, View

logger = logging.getLogger(__name__)

CAMERAS_FILE = "cameras.json"
META_FILE = "meta.json"


class DatasetFormatError(ValueError):
    pass


# ---------------------------------------------------------------- codecs

def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_png(rgb: np.ndarray, alpha: np.ndarray = None) -> bytes:
    pixels = to_uint8(rgb)
    if alpha is not None:
        pixels = np.dstack([pixels, to_uint8(alpha)])
    buffer = io.BytesIO()
    Image.fromarray(pixels, mode="RGBA" if alpha is not None else "RGB").save(buffer, format="PNG")
    return buffer.getvalue()


def decode_png(data: bytes):
    """(rgb float64 in [0,1], alpha or None)."""
    with Image.open(io.BytesIO(data)) as img:
        has_alpha = img.mode in ("RGBA", "LA")
        pixels = np.asarray(img.convert("RGBA" if has_alpha else "RGB"), dtype=np.float64) / 255.0
    if has_alpha:
        return pixels[..., :3], pixels[..., 3]
    return pixels, None


def encode_mask_png(mask: MaskImage) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray((mask.data * 255).astype(np.uint8), mode="L").save(buffer, format="PNG")
    return buffer.getvalue()


def decode_mask_png(data: bytes) -> MaskImage:
    with Image.open(io.BytesIO(data)) as img:
        pixels = np.asarray(img.convert("L"))
    return MaskImage((pixels >= 128).astype(np.uint8))


def write_pfm(path: str, data: np.ndarray) -> None:
    """Greyscale PFM, little-endian (scale -1.0), rows stored bottom to top."""
    data = np.asarray(data, dtype="<f4")
    height, width = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(data).tobytes())


def read_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        dims = f.readline().split()
        scale_line = f.readline().strip()
        payload = f.read()
    if header != b"Pf" or len(dims) != 2:
        raise DatasetFormatError(f"{path}: not a greyscale PFM file")
    try:
        width, height = int(dims[0]), int(dims[1])
        scale = float(scale_line)
    except ValueError as e:
        raise DatasetFormatError(f"{path}: bad PFM header field ({e})") from e
    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(payload, dtype=dtype)
    if values.size != width * height:
        raise DatasetFormatError(f"{path}: expected {width * height} values, found {values.size}")
    return np.flipud(values.reshape(height, width)).astype(np.float64)


# ---------------------------------------------------------------- metadata

def camera_to_dict(camera: Camera) -> dict:
    return {
        "fx": float(camera.fx),
        "fy": float(camera.fy),
        "cx": float(camera.cx),
        "cy": float(camera.cy),
        "width": int(camera.width),
        "height": int(camera.height),
        "cam_to_world": [float(v) for v in camera.cam_to_world.reshape(-1)],
    }


def camera_from_dict(data: dict, source: str) -> Camera:
    if not isinstance(data, dict):
        raise DatasetFormatError(f"{source}: camera must be an object, got {type(data).__name__}")
    for key in ("fx", "fy", "cx", "cy", "width", "height", "cam_to_world"):
        if key not in data:
            raise DatasetFormatError(f"{source}: camera is missing field '{key}'")
    if not isinstance(data["cam_to_world"], list) or len(data["cam_to_world"]) != 16:
        raise DatasetFormatError(f"{source}: field 'cam_to_world' needs 16 numbers")
    try:
        return Camera(
            fx=float(data["fx"]), fy=float(data["fy"]), cx=float(data["cx"]), cy=float(data["cy"]),
            width=int(data["width"]), height=int(data["height"]),
            cam_to_world=np.asarray(data["cam_to_world"], dtype=np.float64).reshape(4, 4),
        )
    except (TypeError, ValueError) as e:
        raise DatasetFormatError(f"{source}: invalid camera: {e}") from e


def _dump_json(path: str, payload) -> None:
    # sorted keys + repr floats: identical bytes on every save, exact round trip
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_json(path: str):
    name = os.path.basename(path)
    if not os.path.exists(path):
        raise DatasetFormatError(f"missing {name} in {os.path.dirname(path)}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{name}: malformed JSON ({e})") from e


# ---------------------------------------------------------------- dataset

def _frame(index: int) -> str:
    return f"{index:03d}"


def _read_file(path: str, name: str, decode):
    """Decode one dataset file; any decoding failure names the file."""
    with open(path, "rb") as f:
        data = f.read()
    try:
        return decode(data)
    except (OSError, ValueError) as e:
        raise DatasetFormatError(f"{name}: cannot decode ({e})") from e


def save_dataset(dataset: MultiViewDataset, path: str) -> None:
    for sub in ("images", "masks", "depth"):
        os.makedirs(os.path.join(path, sub), exist_ok=True)

    for i, view in enumerate(dataset.views):
        with open(os.path.join(path, "images", f"{_frame(i)}.png"), "wb") as f:
            f.write(encode_png(view.rgb, view.alpha))
        if view.mask is not None:
            with open(os.path.join(path, "masks", f"{_frame(i)}.png"), "wb") as f:
                f.write(encode_mask_png(view.mask))
        if view.depth is not None:
            write_pfm(os.path.join(path, "depth", f"{_frame(i)}.pfm"), view.depth)

    _dump_json(os.path.join(path, CAMERAS_FILE), [camera_to_dict(v.camera) for v in dataset.views])
    _dump_json(os.path.join(path, META_FILE), {
        "near": float(dataset.near),
        "far": float(dataset.far),
        "bounds": [[float(v) for v in dataset.bounds_min], [float(v) for v in dataset.bounds_max]],
        "background": None if dataset.background is None else [float(c) for c in dataset.background],
        "kind": dataset.kind,
    })
    logger.info(f"Saved {len(dataset)} views to {path}")


def load_dataset(path: str) -> MultiViewDataset:
    if not os.path.isdir(path):
        raise DatasetFormatError(f"dataset directory not found: {path}")

    cameras_raw = _load_json(os.path.join(path, CAMERAS_FILE))
    meta = _load_json(os.path.join(path, META_FILE))
    if not isinstance(cameras_raw, list):
        raise DatasetFormatError(f"{CAMERAS_FILE}: expected a list of cameras")
    if not isinstance(meta, dict):
        raise DatasetFormatError(f"{META_FILE}: expected an object")
    for key in ("near", "far", "bounds"):
        if key not in meta:
            raise DatasetFormatError(f"{META_FILE}: missing field '{key}'")
    try:
        bounds_min, bounds_max = (np.asarray(b, dtype=np.float64) for b in meta["bounds"])
    except (TypeError, ValueError) as e:
        raise DatasetFormatError(f"{META_FILE}: field 'bounds' must be [[min xyz], [max xyz]]") from e

    views = []
    for i, raw in enumerate(cameras_raw):
        camera = camera_from_dict(raw, f"{CAMERAS_FILE}[{i}]")
        image_path = os.path.join(path, "images", f"{_frame(i)}.png")
        if not os.path.exists(image_path):
            raise DatasetFormatError(f"missing image images/{_frame(i)}.png")
        rgb, alpha = _read_file(image_path, f"images/{_frame(i)}.png", decode_png)

        mask = None
        mask_path = os.path.join(path, "masks", f"{_frame(i)}.png")
        if os.path.exists(mask_path):
            mask = _read_file(mask_path, f"masks/{_frame(i)}.png", decode_mask_png)

        depth = None
        depth_path = os.path.join(path, "depth", f"{_frame(i)}.pfm")
        if os.path.exists(depth_path):
            depth = read_pfm(depth_path)

        views.append(View(rgb=rgb, camera=camera, alpha=alpha, mask=mask, depth=depth))

    background = meta.get("background")
    try:
        return MultiViewDataset(
            views, float(meta["near"]), float(meta["far"]), bounds_min, bounds_max,
            tuple(background) if background is not None else None, meta.get("kind", "full"),
        )
    except ValueError as e:
        raise DatasetFormatError(f"{path}: {e}") from e
