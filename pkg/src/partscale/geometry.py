"""Triangle meshes, surface point sampling, and spatial queries.

Everything downstream (rendering, mask scales, clustering) assumes the mesh
has been through :func:`normalize_unit`, so scale-dependent constants are
comparable across objects.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Raised for unreadable, empty, or degenerate mesh inputs."""


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle mesh with per-vertex colors and per-face unit normals."""

    vertices: np.ndarray      # (V, 3) float64
    faces: np.ndarray         # (F, 3) int32
    vertex_colors: np.ndarray  # (V, 3) float32 in [0, 1]
    face_normals: np.ndarray  # (F, 3) float64, unit length

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)


@dataclass(frozen=True)
class SampledCloud:
    """Surface point samples with inherited normals/colors and face provenance."""

    points: np.ndarray    # (N, 3) float64
    normals: np.ndarray   # (N, 3) float64, unit
    colors: np.ndarray    # (N, 3) float32 in [0, 1]
    face_of: np.ndarray   # (N,) int32 indices into the source mesh faces

    @property
    def n_points(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class NormalizationTransform:
    """Rigid translate + uniform scale mapping object coords to the unit box."""

    translation: np.ndarray  # (3,) applied before scaling
    uniform_scale: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (pts + self.translation) * self.uniform_scale

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return pts / self.uniform_scale - self.translation


def _compute_face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(cross, axis=1, keepdims=True)
    # Degenerate (zero-area) faces get an arbitrary unit normal.
    safe = np.where(norm > 1e-20, norm, 1.0)
    normals = cross / safe
    normals[norm[:, 0] <= 1e-20] = np.array([0.0, 0.0, 1.0])
    return normals


def make_mesh(vertices, faces, vertex_colors=None) -> TriangleMesh:
    """Build a TriangleMesh from raw arrays, validating indices.

    Missing colors default to 0.5 gray. Face normals are always recomputed
    from geometry; normals stored in input files are ignored.
    """
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int32).reshape(-1, 3)
    if len(faces) == 0:
        raise MeshError("zero faces")
    if len(vertices) == 0:
        raise MeshError("zero vertices")
    if faces.min() < 0 or faces.max() >= len(vertices):
        raise MeshError("face index out of range")
    if vertex_colors is None:
        vertex_colors = np.full((len(vertices), 3), 0.5, dtype=np.float32)
    else:
        vertex_colors = np.asarray(vertex_colors, dtype=np.float32).reshape(-1, 3)
        if len(vertex_colors) != len(vertices):
            raise MeshError("vertex color count mismatch")
        vertex_colors = np.clip(vertex_colors, 0.0, 1.0)
    normals = _compute_face_normals(vertices, faces)
    return TriangleMesh(vertices, faces, vertex_colors, normals)


# ---------------------------------------------------------------------------
# File loading: OBJ and PLY (ascii + binary little-endian)
# ---------------------------------------------------------------------------

def _fan_triangulate(indices: list[int]) -> list[tuple[int, int, int]]:
    if len(indices) < 3:
        raise MeshError(f"face with {len(indices)} vertices cannot be triangulated")
    return [(indices[0], indices[i], indices[i + 1]) for i in range(1, len(indices) - 1)]


def _load_obj(path: Path) -> TriangleMesh:
    vertices: list[list[float]] = []
    colors: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    has_colors = False
    with open(path, "r", errors="replace") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vals = [float(v) for v in parts[1:]]
                vertices.append(vals[:3])
                if len(vals) >= 6:  # nonstandard `v x y z r g b` extension
                    colors.append(vals[3:6])
                    has_colors = True
                else:
                    colors.append([0.5, 0.5, 0.5])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    first = tok.split("/")[0]
                    i = int(first)
                    # OBJ indices are 1-based; negatives count from the end
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                faces.extend(_fan_triangulate(idx))
    if not faces:
        raise MeshError("zero faces")
    return make_mesh(vertices, faces, colors if has_colors else None)


_PLY_TYPES = {
    "char": ("b", 1), "int8": ("b", 1),
    "uchar": ("B", 1), "uint8": ("B", 1),
    "short": ("h", 2), "int16": ("h", 2),
    "ushort": ("H", 2), "uint16": ("H", 2),
    "int": ("i", 4), "int32": ("i", 4),
    "uint": ("I", 4), "uint32": ("I", 4),
    "float": ("f", 4), "float32": ("f", 4),
    "double": ("d", 8), "float64": ("d", 8),
}


def _load_ply(path: Path) -> TriangleMesh:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshError("not a PLY file")
        fmt = None
        elements: list[tuple[str, int, list[tuple[str, str, str | None]]]] = []
        while True:
            line = fh.readline()
            if not line:
                raise MeshError("unterminated PLY header")
            tokens = line.decode("ascii", errors="replace").split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    elements[-1][2].append((tokens[4], tokens[3], tokens[2]))
                else:
                    elements[-1][2].append((tokens[2], tokens[1], None))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise MeshError(f"unsupported PLY format {fmt!r}")

        data: dict[str, dict[str, list]] = {}
        for name, count, props in elements:
            cols: dict[str, list] = {p[0]: [] for p in props}
            for _ in range(count):
                if fmt == "ascii":
                    tokens = fh.readline().split()
                    ti = 0
                    for pname, ptype, ltype in props:
                        if ltype is not None:
                            n = int(tokens[ti]); ti += 1
                            cols[pname].append([float(tokens[ti + j]) for j in range(n)])
                            ti += n
                        else:
                            cols[pname].append(float(tokens[ti])); ti += 1
                else:
                    for pname, ptype, ltype in props:
                        if ltype is not None:
                            cfmt, csz = _PLY_TYPES[ltype]
                            (n,) = struct.unpack("<" + cfmt, fh.read(csz))
                            ifmt, isz = _PLY_TYPES[ptype]
                            vals = struct.unpack("<" + ifmt * n, fh.read(isz * n))
                            cols[pname].append(list(vals))
                        else:
                            ifmt, isz = _PLY_TYPES[ptype]
                            (v,) = struct.unpack("<" + ifmt, fh.read(isz))
                            cols[pname].append(v)
            data[name] = cols

    if "vertex" not in data or "face" not in data:
        raise MeshError("PLY missing vertex or face element")
    vert = data["vertex"]
    vertices = np.stack([vert["x"], vert["y"], vert["z"]], axis=1)
    colors = None
    if all(k in vert for k in ("red", "green", "blue")):
        colors = np.stack([vert["red"], vert["green"], vert["blue"]], axis=1)
        if colors.max() > 1.0:  # 8-bit color convention
            colors = colors / 255.0
    face_prop = data["face"]
    key = "vertex_indices" if "vertex_indices" in face_prop else next(iter(face_prop))
    faces: list[tuple[int, int, int]] = []
    for poly in face_prop[key]:
        faces.extend(_fan_triangulate([int(i) for i in poly]))
    if not faces:
        raise MeshError("zero faces")
    return make_mesh(vertices, faces, colors)


def load_mesh(path) -> TriangleMesh:
    """Load an OBJ or PLY mesh from disk; non-triangle faces are fan-triangulated."""
    path = Path(path)
    if not path.exists():
        raise MeshError(f"no such file: {path}")
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _load_obj(path)
    if suffix == ".ply":
        return _load_ply(path)
    # Sniff: PLY starts with the magic line regardless of extension.
    with open(path, "rb") as fh:
        head = fh.read(3)
    if head == b"ply":
        return _load_ply(path)
    return _load_obj(path)


def save_mesh_obj(path, mesh: TriangleMesh) -> None:
    """Write a mesh as OBJ with the `v x y z r g b` color extension."""
    with open(path, "w") as fh:
        for v, c in zip(mesh.vertices, mesh.vertex_colors):
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def save_cloud_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    """Write a colorized point cloud as binary little-endian PLY (inspection aid)."""
    points = np.asarray(points, dtype=np.float32)
    rgb = np.clip(np.asarray(colors, dtype=np.float64) * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(points)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property uchar red\nproperty uchar green\nproperty uchar blue\n"
            "element face 0\nproperty list uchar int vertex_indices\n"
            "end_header\n"
        )
        fh.write(header.encode("ascii"))
        rec = np.zeros(len(points), dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
        rec["xyz"] = points
        rec["rgb"] = rgb
        fh.write(rec.tobytes())


# ---------------------------------------------------------------------------
# Normalization and sampling
# ---------------------------------------------------------------------------

def normalize_unit(mesh: TriangleMesh) -> tuple[TriangleMesh, NormalizationTransform]:
    """Center the bounding box at the origin and scale the longest edge to 1.

    Must run before rendering or mask-scale computation: the scale factor
    in the mask-scale formula is only transferable across objects when every
    object occupies the same canvas.
    """
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = hi - lo
    longest = float(extent.max())
    if longest <= 0.0:
        raise MeshError("degenerate mesh: zero extent on all axes")
    translation = -(lo + hi) / 2.0
    scale = 1.0 / longest
    xf = NormalizationTransform(translation, scale)
    out = make_mesh(xf.apply(mesh.vertices), mesh.faces, mesh.vertex_colors)
    return out, xf


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> SampledCloud:
    """Area-weighted surface sampling, deterministic for a fixed seed.

    Normals are the provenance face normals; colors are barycentric
    interpolations of the per-vertex colors.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0.0:
        raise MeshError("mesh has zero total area")
    rng = np.random.Generator(np.random.PCG64(seed))
    probs = areas / total
    face_of = rng.choice(len(areas), size=n, p=probs).astype(np.int32)
    # Uniform barycentric coordinates via the square-root trick.
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w0, w1, w2 = 1.0 - r1, r1 * (1.0 - r2), r1 * r2
    tri = mesh.vertices[mesh.faces[face_of]]
    points = w0[:, None] * tri[:, 0] + w1[:, None] * tri[:, 1] + w2[:, None] * tri[:, 2]
    tric = mesh.vertex_colors[mesh.faces[face_of]].astype(np.float64)
    colors = (w0[:, None] * tric[:, 0] + w1[:, None] * tric[:, 1]
              + w2[:, None] * tric[:, 2]).astype(np.float32)
    normals = mesh.face_normals[face_of]
    return SampledCloud(points, normals, colors, face_of)


def knn(points: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest neighbors by Euclidean distance, ties broken by lower index.

    `query` may be a single 3-vector or a (Q, 3) batch; returns (k,) or (Q, k)
    index arrays ordered nearest-first.
    """
    points = np.asarray(points)
    if len(points) == 0:
        raise ValueError("empty cloud")
    if k > len(points):
        raise ValueError(f"k={k} exceeds point count {len(points)}")
    query = np.asarray(query, dtype=np.float64)
    single = query.ndim == 1
    q = query.reshape(-1, 3)
    d2 = ((q[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    # Stable argsort keeps ascending-index order among exact ties.
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return order[0] if single else order


def knn_self(points: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """All-pairs kNN of a cloud against itself (self excluded), chunked for memory."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k >= n:
        raise ValueError(f"k={k} must be < point count {n}")
    out = np.empty((n, k), dtype=np.int64)
    sq = (points ** 2).sum(axis=1)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = sq[start:stop, None] - 2.0 * (points[start:stop] @ points.T) + sq[None, :]
        rows = np.arange(start, stop)
        d2[np.arange(stop - start), rows] = np.inf
        part = np.argpartition(d2, k, axis=1)[:, :k]
        vals = np.take_along_axis(d2, part, axis=1)
        order = np.argsort(vals, axis=1, kind="stable")
        out[start:stop] = np.take_along_axis(part, order, axis=1)
    return out
