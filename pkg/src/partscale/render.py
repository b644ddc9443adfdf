"""Pinhole cameras, a software z-buffer rasterizer, and pixel/point correspondence.

Depth maps use camera-space depth (distance along the viewing axis), with
+inf for background. Pixel (row, col) covers the unit square whose center is
(col + 0.5, row + 0.5) in continuous (u, v) image coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import SampledCloud, TriangleMesh

DEFAULT_RESOLUTION = 256
DEFAULT_CAMERA_DISTANCE = 2.0
DEFAULT_VFOV = math.radians(50.0)
DEFAULT_DEPTH_TOL = 0.01

_AXIS_DIRECTIONS = np.array([
    [1, 0, 0], [0, 1, 0], [0, 0, 1],
    [-1, 0, 0], [0, -1, 0], [0, 0, -1],
], dtype=np.float64)


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    vertical_fov: float = DEFAULT_VFOV
    width: int = DEFAULT_RESOLUTION
    height: int = DEFAULT_RESOLUTION
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if not (0.0 < self.vertical_fov < math.pi):
            raise ValueError("vertical_fov must be in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be >= 1")
        if not (self.near < self.far):
            raise ValueError("near must be < far")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Right-handed (right, up, forward) unit vectors."""
        forward = np.asarray(self.look_at, dtype=np.float64) - np.asarray(self.position, dtype=np.float64)
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise ValueError("camera position equals look_at")
        forward = forward / norm
        right = np.cross(forward, np.asarray(self.up, dtype=np.float64))
        rnorm = np.linalg.norm(right)
        if rnorm < 1e-9:
            raise ValueError("up vector parallel to view direction")
        right = right / rnorm
        cam_up = np.cross(right, forward)
        return right, cam_up, forward

    def to_dict(self) -> dict:
        return {
            "position": [float(v) for v in self.position],
            "look_at": [float(v) for v in self.look_at],
            "up": [float(v) for v in self.up],
            "vertical_fov": float(self.vertical_fov),
            "width": int(self.width),
            "height": int(self.height),
            "near": float(self.near),
            "far": float(self.far),
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            np.asarray(d["position"], dtype=np.float64),
            np.asarray(d["look_at"], dtype=np.float64),
            np.asarray(d["up"], dtype=np.float64),
            float(d["vertical_fov"]),
            int(d["width"]), int(d["height"]),
            float(d.get("near", 0.05)), float(d.get("far", 100.0)),
        )


@dataclass
class ViewRender:
    """Per-view depth buffer and the two directions of pixel/point mapping."""

    camera: Camera
    depth: np.ndarray            # (H, W) float32, +inf background
    point_of_pixel: np.ndarray   # (H, W) int32, -1 where no visible point
    visible: np.ndarray          # (N,) bool
    uv: np.ndarray               # (N, 2) float32 continuous image coords (valid where in frustum)
    point_depth: np.ndarray      # (N,) float32 camera-space depth
    in_frustum: np.ndarray       # (N,) bool
    face_id: np.ndarray | None = field(default=None)  # (H, W) int32 from rasterization, -1 bg

    def pixel_of_point(self, i: int) -> tuple[int, int] | None:
        """Integer (col, row) of point i if visible, else None."""
        if not self.visible[i]:
            return None
        u, v = self.uv[i]
        return int(u), int(v)


@dataclass
class ViewSet:
    cameras: list[Camera]
    renders: list[ViewRender]

    def __post_init__(self):
        if len(self.cameras) != len(self.renders):
            raise ValueError("cameras and renders length mismatch")

    def __len__(self) -> int:
        return len(self.cameras)


def _up_for_direction(direction: np.ndarray) -> np.ndarray:
    # World +y up unless the view axis is (anti)parallel to it.
    if abs(float(direction[1])) > 0.99:
        return np.array([0.0, 0.0, 1.0])
    return np.array([0.0, 1.0, 0.0])


def make_cameras(n_fixed: int = 6, n_random: int = 30, seed: int = 0,
                 resolution: int = DEFAULT_RESOLUTION,
                 distance: float = DEFAULT_CAMERA_DISTANCE,
                 vertical_fov: float = DEFAULT_VFOV) -> list[Camera]:
    """Fixed axis cameras (+x, +y, +z, -x, -y, -z) plus random sphere cameras.

    All cameras sit at `distance` from the origin and look at it. The random
    directions are uniform on the sphere and deterministic per seed.
    """
    if n_fixed not in (0, 6):
        raise ValueError("n_fixed must be 0 or 6")
    cameras = []
    origin = np.zeros(3)
    for d in _AXIS_DIRECTIONS[:n_fixed]:
        cameras.append(Camera(d * distance, origin, _up_for_direction(d),
                              vertical_fov, resolution, resolution))
    rng = np.random.Generator(np.random.PCG64(seed))
    for _ in range(n_random):
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        while n < 1e-9:
            v = rng.normal(size=3)
            n = np.linalg.norm(v)
        d = v / n
        cameras.append(Camera(d * distance, origin, _up_for_direction(d),
                              vertical_fov, resolution, resolution))
    return cameras


def is_axis_camera(camera: Camera, distance: float = DEFAULT_CAMERA_DISTANCE,
                   tol: float = 1e-6) -> bool:
    """True for the canonical fixed-axis cameras produced by make_cameras."""
    pos = np.asarray(camera.position, dtype=np.float64)
    if abs(np.linalg.norm(pos) - distance) > tol:
        return False
    if np.linalg.norm(np.asarray(camera.look_at, dtype=np.float64)) > tol:
        return False
    return np.any(np.all(np.abs(_AXIS_DIRECTIONS * distance - pos) <= tol, axis=1))


def project(points: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Perspective-project points: returns (uv (N,2), depth (N,), in_frustum (N,)).

    `uv` is continuous, in pixel units, origin at the top-left corner; depth
    is positive camera-space z. Points behind the near plane or projecting
    outside the image are flagged out-of-frustum (uv still reported).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    right, cam_up, forward = camera.basis()
    rel = pts - np.asarray(camera.position, dtype=np.float64)
    x = rel @ right
    y = rel @ cam_up
    z = rel @ forward
    f = 1.0 / math.tan(camera.vertical_fov / 2.0)
    aspect = camera.width / camera.height
    safe_z = np.where(np.abs(z) > 1e-12, z, 1e-12)
    ndc_x = (x / safe_z) * (f / aspect)
    ndc_y = (y / safe_z) * f
    u = (ndc_x + 1.0) * 0.5 * camera.width
    v = (1.0 - ndc_y) * 0.5 * camera.height
    ok = (z >= camera.near) & (z <= camera.far) \
        & (u >= 0.0) & (u < camera.width) & (v >= 0.0) & (v < camera.height)
    return np.stack([u, v], axis=1), z, ok


def unproject(u: float, v: float, depth: float, camera: Camera) -> np.ndarray:
    """Inverse of project for a single pixel coordinate and camera depth."""
    right, cam_up, forward = camera.basis()
    f = 1.0 / math.tan(camera.vertical_fov / 2.0)
    aspect = camera.width / camera.height
    ndc_x = 2.0 * u / camera.width - 1.0
    ndc_y = 1.0 - 2.0 * v / camera.height
    x = ndc_x * aspect / f * depth
    y = ndc_y / f * depth
    return (np.asarray(camera.position, dtype=np.float64)
            + right * x + cam_up * y + forward * depth)


def camera_ray(u: float, v: float, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """World-space (origin, unit direction) of the ray through pixel coordinate (u, v)."""
    target = unproject(u, v, 1.0, camera)
    origin = np.asarray(camera.position, dtype=np.float64)
    d = target - origin
    return origin, d / np.linalg.norm(d)


def rasterize(mesh: TriangleMesh, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffer rasterization: returns (depth (H,W) f32, face_id (H,W) i32).

    Perspective-correct depth via screen-space interpolation of 1/z.
    Faces with any vertex behind the near plane are culled (objects here are
    normalized to the unit box and viewed from outside, so this never clips
    real geometry). Background pixels carry +inf depth and face id -1.
    """
    H, W = camera.height, camera.width
    depth = np.full((H, W), np.inf, dtype=np.float32)
    face_id = np.full((H, W), -1, dtype=np.int32)

    uv, z, _ = project(mesh.vertices, camera)
    tri_uv = uv[mesh.faces]          # (F, 3, 2)
    tri_z = z[mesh.faces]            # (F, 3)
    ok = np.all(tri_z >= camera.near, axis=1) & np.all(tri_z <= camera.far, axis=1)

    u0, v0 = tri_uv[:, 0, 0], tri_uv[:, 0, 1]
    u1, v1 = tri_uv[:, 1, 0], tri_uv[:, 1, 1]
    u2, v2 = tri_uv[:, 2, 0], tri_uv[:, 2, 1]
    area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
    ok &= np.abs(area) > 1e-12

    xmin = np.maximum(np.floor(np.minimum.reduce([u0, u1, u2])).astype(np.int64), 0)
    xmax = np.minimum(np.ceil(np.maximum.reduce([u0, u1, u2])).astype(np.int64), W)
    ymin = np.maximum(np.floor(np.minimum.reduce([v0, v1, v2])).astype(np.int64), 0)
    ymax = np.minimum(np.ceil(np.maximum.reduce([v0, v1, v2])).astype(np.int64), H)
    ok &= (xmin < xmax) & (ymin < ymax)

    inv_z = 1.0 / tri_z
    for fi in np.nonzero(ok)[0]:
        xs = np.arange(xmin[fi], xmax[fi]) + 0.5
        ys = np.arange(ymin[fi], ymax[fi]) + 0.5
        pu = xs[None, :]
        pv = ys[:, None]
        a = area[fi]
        w0 = ((u1[fi] - pu) * (v2[fi] - pv) - (u2[fi] - pu) * (v1[fi] - pv)) / a
        w1 = ((u2[fi] - pu) * (v0[fi] - pv) - (u0[fi] - pu) * (v2[fi] - pv)) / a
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        zi = 1.0 / (w0 * inv_z[fi, 0] + w1 * inv_z[fi, 1] + w2 * inv_z[fi, 2])
        block = depth[ymin[fi]:ymax[fi], xmin[fi]:xmax[fi]]
        closer = inside & (zi < block)
        if closer.any():
            block[closer] = zi[closer].astype(np.float32)
            face_id[ymin[fi]:ymax[fi], xmin[fi]:xmax[fi]][closer] = fi
    return depth, face_id


def rasterize_depth(mesh: TriangleMesh, camera: Camera) -> np.ndarray:
    depth, _ = rasterize(mesh, camera)
    return depth


def compute_visibility(cloud: SampledCloud, camera: Camera, depth: np.ndarray,
                       tau: float = DEFAULT_DEPTH_TOL,
                       face_id: np.ndarray | None = None) -> ViewRender:
    """Depth-test each point against the rasterized buffer.

    A point is visible iff it projects in-frustum and its camera depth agrees
    with the buffer within tau. point_of_pixel keeps, per pixel, the visible
    point with the smallest depth.
    """
    H, W = depth.shape
    if (H, W) != (camera.height, camera.width):
        raise ValueError("depth resolution does not match camera")
    uv, z, ok = project(cloud.points, camera)
    col = np.clip(uv[:, 0].astype(np.int64), 0, W - 1)
    row = np.clip(uv[:, 1].astype(np.int64), 0, H - 1)
    buf = depth[row, col].astype(np.float64)
    visible = ok & (np.abs(z - buf) <= tau)

    point_of_pixel = np.full((H, W), -1, dtype=np.int32)
    vis_idx = np.nonzero(visible)[0]
    if len(vis_idx):
        flat = row[vis_idx] * W + col[vis_idx]
        # Nearest-depth point wins each pixel; stable sort keeps low index on ties.
        order = np.lexsort((vis_idx, z[vis_idx], flat))
        flat_sorted = flat[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = flat_sorted[1:] != flat_sorted[:-1]
        winners = vis_idx[order[first]]
        point_of_pixel.flat[flat_sorted[first]] = winners.astype(np.int32)

    return ViewRender(
        camera=camera,
        depth=depth,
        point_of_pixel=point_of_pixel,
        visible=visible,
        uv=uv.astype(np.float32),
        point_depth=z.astype(np.float32),
        in_frustum=ok,
        face_id=face_id,
    )


def render_views(mesh: TriangleMesh, cloud: SampledCloud, cameras: list[Camera],
                 tau: float = DEFAULT_DEPTH_TOL) -> ViewSet:
    """Rasterize every camera and build the full per-view correspondence set."""
    renders = []
    for cam in cameras:
        depth, fid = rasterize(mesh, cam)
        renders.append(compute_visibility(cloud, cam, depth, tau, face_id=fid))
    return ViewSet(list(cameras), renders)


def depth_to_png(depth: np.ndarray, path) -> None:
    """Debug export: normalize finite depths to [0, 255] grayscale."""
    from PIL import Image

    finite = np.isfinite(depth)
    img = np.zeros(depth.shape, dtype=np.uint8)
    if finite.any():
        lo, hi = depth[finite].min(), depth[finite].max()
        span = max(hi - lo, 1e-9)
        img[finite] = (255 * (1.0 - (depth[finite] - lo) / span)).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
