"""Z-buffered triangle rasterizer and crop construction for refinement.

Pixel ``(row i, col j)`` has its center at continuous image coordinates
``(u, v) = (j + 0.5, i + 0.5)``. Coverage is decided at pixel centers with a
top-left rule on shared edges, so adjacent triangles never double-cover a
pixel.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import BehindCameraError, DataError, OutOfViewError
from .geometry import CameraIntrinsics, Pose, object_center, project_points, transform_points
from .objects import ObjectModel

NEAR_PLANE = 1e-6
LIGHT_DIR = np.array([0.35, -0.45, -0.82]) / np.linalg.norm([0.35, -0.45, -0.82])
AMBIENT = 0.35


@dataclass
class RenderOutput:
    rgb: np.ndarray      # H x W x 3 in [0, 1]
    depth: np.ndarray    # H x W, +inf where empty
    mask: np.ndarray     # H x W bool
    coords: np.ndarray   # H x W x 3 model-frame surface point, 0 where empty
    face: np.ndarray     # H x W face index, -1 where empty

    @classmethod
    def empty(cls, width: int, height: int) -> "RenderOutput":
        return cls(np.zeros((height, width, 3)), np.full((height, width), np.inf),
                   np.zeros((height, width), dtype=bool), np.zeros((height, width, 3)),
                   np.full((height, width), -1, dtype=int))


def rasterize(model: ObjectModel, pose: Pose, K: CameraIntrinsics, size=None,
              out: RenderOutput | None = None) -> RenderOutput:
    """Render ``model`` under ``pose``.

    Faces with any vertex in front of the near plane are culled. Passing
    ``out`` composites into an existing buffer (nearest surface wins), which
    is how multi-object scenes are built.
    """
    width, height = size if size is not None else (K.width, K.height)
    if out is None:
        out = RenderOutput.empty(width, height)
    if len(model.faces) == 0:
        return out
    cam = transform_points(pose, model.vertices)
    z = cam[:, 2]
    uv = np.empty((len(cam), 2))
    ok = z > NEAR_PLANE
    uv[ok, 0] = K.fx * cam[ok, 0] / z[ok] + K.px
    uv[ok, 1] = K.fy * cam[ok, 1] / z[ok] + K.py

    for f_idx, face in enumerate(model.faces):
        if not ok[face].all():
            continue
        p = uv[face]
        area2 = _cross(p[1] - p[0], p[2] - p[0])
        if area2 == 0:
            continue
        order = face if area2 > 0 else face[[0, 2, 1]]
        p = uv[order]
        area2 = abs(area2)
        j0 = max(int(np.ceil(p[:, 0].min() - 0.5)), 0)
        j1 = min(int(np.floor(p[:, 0].max() - 0.5)), width - 1)
        i0 = max(int(np.ceil(p[:, 1].min() - 0.5)), 0)
        i1 = min(int(np.floor(p[:, 1].max() - 0.5)), height - 1)
        if j1 < j0 or i1 < i0:
            continue
        jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
        px = jj + 0.5
        py = ii + 0.5
        inside = np.ones(jj.shape, dtype=bool)
        bary = []
        for a, b in ((1, 2), (2, 0), (0, 1)):
            e = (p[b, 0] - p[a, 0]) * (py - p[a, 1]) - (p[b, 1] - p[a, 1]) * (px - p[a, 0])
            dx, dy = p[b] - p[a]
            top_left = dy < 0 or (dy == 0 and dx > 0)
            inside &= (e > 0) | ((e == 0) & top_left)
            bary.append(e / area2)
        if not inside.any():
            continue
        l0, l1, l2 = (b[inside] for b in bary)
        zo = z[order]
        inv_z = l0 / zo[0] + l1 / zo[1] + l2 / zo[2]
        depth = 1.0 / inv_z
        rows, cols = ii[inside], jj[inside]
        closer = depth < out.depth[rows, cols]
        if not closer.any():
            continue
        rows, cols, depth = rows[closer], cols[closer], depth[closer]
        w = np.stack([l0[closer] / zo[0], l1[closer] / zo[1], l2[closer] / zo[2]], axis=1) * depth[:, None]
        out.depth[rows, cols] = depth
        out.mask[rows, cols] = True
        out.face[rows, cols] = f_idx
        out.coords[rows, cols] = w @ model.vertices[order]
        n = np.cross(cam[face[1]] - cam[face[0]], cam[face[2]] - cam[face[0]])
        shade = AMBIENT + (1 - AMBIENT) * abs(n @ LIGHT_DIR) / np.linalg.norm(n)
        out.rgb[rows, cols] = np.clip(model.face_colors[f_idx] * shade, 0.0, 1.0)
    return out


def _cross(a, b) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def projected_bbox(model: ObjectModel, pose: Pose, K: CameraIntrinsics, pad: float = 0.0) -> np.ndarray:
    """Padded ``[u0, v0, u1, v1]`` box of the projected model, clipped to the image."""
    cam = transform_points(pose, model.bound_points)
    uv = project_points(cam, K)
    lo = uv.min(axis=0) - pad
    hi = uv.max(axis=0) + pad
    return np.array([
        np.clip(lo[0], 0, K.width), np.clip(lo[1], 0, K.height),
        np.clip(hi[0], 0, K.width), np.clip(hi[1], 0, K.height),
    ])


@dataclass
class CropPair:
    image_crop: np.ndarray   # H x W x 3
    render_crop: np.ndarray  # H x W x 3
    crop_origin: np.ndarray  # (u, v) of the window's top-left pixel in the source image
    render: RenderOutput
    crop_K: CameraIntrinsics


def crop_window(image: np.ndarray, origin, width: int, height: int) -> np.ndarray:
    """Fixed-size window of ``image``; parts outside the image are zero."""
    ox, oy = int(origin[0]), int(origin[1])
    H, W = image.shape[:2]
    out = np.zeros((height, width) + image.shape[2:], dtype=image.dtype)
    r0, r1 = max(oy, 0), min(oy + height, H)
    c0, c1 = max(ox, 0), min(ox + width, W)
    if r1 > r0 and c1 > c0:
        out[r0 - oy:r1 - oy, c0 - ox:c1 - ox] = image[r0:r1, c0:c1]
    return out


def crop_origin_for(center, width: int, height: int) -> np.ndarray:
    return np.floor(np.asarray(center) - np.array([width, height]) / 2 + 0.5).astype(int)


def make_input_crops(image: np.ndarray, model: ObjectModel, pose: Pose, K: CameraIntrinsics,
                     crop_size=(256, 256), pad: float = 10.0) -> CropPair:
    """Image and render crops centered on the object's projected center.

    ``crop_size`` is ``(height, width)``. Image pixels outside the padded
    projected box of ``pose`` are zeroed before cropping.
    """
    height, width = crop_size
    center = object_center(pose, K)
    if not (0 <= center[0] < K.width and 0 <= center[1] < K.height):
        raise OutOfViewError(f"object center {center} lies outside the image")
    origin = crop_origin_for(center, width, height)
    box = projected_bbox(model, pose, K, pad)
    c0, r0 = int(np.floor(box[0])), int(np.floor(box[1]))
    c1, r1 = int(np.ceil(box[2])), int(np.ceil(box[3]))
    masked = np.zeros_like(image)
    masked[r0:r1, c0:c1] = image[r0:r1, c0:c1]
    image_crop = crop_window(masked, origin, width, height)
    crop_K = K.window(origin, width, height)
    render = rasterize(model, pose, crop_K)
    return CropPair(image_crop, render.rgb, origin, render, crop_K)


def correspondence_flow(model: ObjectModel, gt_pose: Pose, current_pose: Pose,
                        crop_K: CameraIntrinsics) -> np.ndarray:
    """Exact flow field on the crop grid, shape (2, H, W).

    At every pixel covered by the object under ``gt_pose`` the vector points
    from that pixel to where the same surface point appears under
    ``current_pose``; elsewhere it is zero. Sampling the render crop at
    ``pixel + flow`` therefore aligns it with the observed crop.
    """
    gt = rasterize(model, gt_pose, crop_K)
    H, W = gt.mask.shape
    flow = np.zeros((2, H, W))
    if not gt.mask.any():
        return flow
    rows, cols = np.nonzero(gt.mask)
    cam = transform_points(current_pose, gt.coords[rows, cols])
    valid = cam[:, 2] > NEAR_PLANE
    uv = np.zeros((len(cam), 2))
    uv[valid] = project_points(cam[valid], crop_K)
    flow[0, rows[valid], cols[valid]] = uv[valid, 0] - 0.5 - cols[valid]
    flow[1, rows[valid], cols[valid]] = uv[valid, 1] - 0.5 - rows[valid]
    return flow


# --- file formats ----------------------------------------------------------

def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    H, W = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb[..., :3]).tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, 8-bit) as float RGB in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise DataError(f"{path}: only 8-bit binary PPM (P6) is supported")
    W, H = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=W * H * 3, offset=pos + 1)
    return pixels.reshape(H, W, 3).astype(float) / 255.0


RAW_MAGIC = b"PKRW"
_DTYPE_CODES = {"<f8": b"f8  ", "|u1": b"u1  ", "<f4": b"f4  "}


def write_raw(path, array: np.ndarray) -> None:
    """Flat little-endian array with a header: magic, dtype code, H, W."""
    array = np.asarray(array)
    if array.dtype == bool:
        array = array.astype(np.uint8)
    dt = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
    code = _DTYPE_CODES.get(dt.str)
    if code is None:
        raise DataError(f"unsupported raw dtype {array.dtype}")
    H, W = array.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + code + struct.pack("<II", H, W))
        fh.write(np.ascontiguousarray(array, dtype=dt).tobytes())


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RAW_MAGIC:
        raise DataError(f"{path}: bad magic")
    code = data[4:8]
    lookup = {v: k for k, v in _DTYPE_CODES.items()}
    if code not in lookup:
        raise DataError(f"{path}: unknown dtype code {code!r}")
    H, W = struct.unpack("<II", data[8:16])
    return np.frombuffer(data, dtype=np.dtype(lookup[code]), offset=16, count=H * W).reshape(H, W).copy()
