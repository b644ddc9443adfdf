"""Per-view feature/mask map file formats and the synthetic oracle generator.

Real 2D feature extractors and mask generators run out of process: any tool
may emit the SP3DFEAT / SP3DMASK formats below and the rest of the pipeline
consumes them unchanged. The toy generator in this module produces the same
artifacts from primitive objects with known part structure, so every stage
can be exercised and scored against ground truth on one machine.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import MeshError, TriangleMesh, make_mesh, normalize_unit
from .render import Camera, rasterize


class FormatError(ValueError):
    """Bad magic, version, truncation, or inconsistent sidecar."""


FEAT_MAGIC = b"SP3DFEAT"
MASK_MAGIC = b"SP3DMASK"
FORMAT_VERSION = 1


@dataclass
class FeatureMap:
    data: np.ndarray  # (H, W, C) float32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError("feature map must be H x W x C")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class MaskMap:
    ids: np.ndarray                      # (H, W) uint16, 0 = no mask
    mask_meta: dict[int, int] = field(default_factory=dict)  # id -> pixel count

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint16)
        if self.ids.ndim != 2:
            raise ValueError("mask map must be H x W")
        if not self.mask_meta:
            self.mask_meta = self._count()
        else:
            if self._count() != self.mask_meta:
                raise ValueError("mask_meta does not match pixel contents")

    def _count(self) -> dict[int, int]:
        vals, counts = np.unique(self.ids, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts) if v != 0}

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]


def write_feature_map(path, fm: FeatureMap) -> None:
    """Layout: magic, u32 version, u32 H, u32 W, u32 C, then H*W*C little-endian
    float32, row-major with channels innermost. Lossless round-trip."""
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, fm.height, fm.width, fm.channels))
        fh.write(fm.data.astype("<f4").tobytes())


def read_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != FEAT_MAGIC:
        raise FormatError("bad magic")
    if len(data) < 24:
        raise FormatError("truncated header")
    version, h, w, c = struct.unpack_from("<IIII", data, 8)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    need = 24 + 4 * h * w * c
    if len(data) != need:
        raise FormatError(f"payload size mismatch: have {len(data)}, need {need}")
    arr = np.frombuffer(data[24:], dtype="<f4").reshape(h, w, c).copy()
    return FeatureMap(arr)


def write_mask_map(path, mm: MaskMap) -> None:
    """Binary ids plus a `<path>.json` sidecar with per-id pixel counts."""
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, mm.height, mm.width))
        fh.write(mm.ids.astype("<u2").tobytes())
    sidecar = {str(k): int(v) for k, v in sorted(mm.mask_meta.items())}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True)


def read_mask_map(path) -> MaskMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MASK_MAGIC:
        raise FormatError("bad magic")
    if len(data) < 20:
        raise FormatError("truncated header")
    version, h, w = struct.unpack_from("<III", data, 8)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    need = 20 + 2 * h * w
    if len(data) != need:
        raise FormatError(f"payload size mismatch: have {len(data)}, need {need}")
    ids = np.frombuffer(data[20:], dtype="<u2").reshape(h, w).copy()
    try:
        with open(str(path) + ".json") as fh:
            sidecar = {int(k): int(v) for k, v in json.load(fh).items()}
    except FileNotFoundError as e:
        raise FormatError("missing mask sidecar") from e
    vals, counts = np.unique(ids, return_counts=True)
    present = {int(v): int(c) for v, c in zip(vals, counts) if v != 0}
    for mid, cnt in present.items():
        if mid not in sidecar:
            raise FormatError(f"mask id {mid} present in pixels but absent from sidecar")
        if sidecar[mid] != cnt:
            raise FormatError(f"mask id {mid} pixel count mismatch")
    return MaskMap(ids, sidecar if sidecar else present)


# ---------------------------------------------------------------------------
# Toy objects: primitive parts with two-level ground truth
# ---------------------------------------------------------------------------

# Names and RGB for part coloring. Red channel stays <= 0.55 everywhere so the
# highlight blend used for semantic querying is unambiguous.
PALETTE: list[tuple[str, tuple[float, float, float]]] = [
    ("cobalt", (0.15, 0.25, 0.80)),
    ("moss", (0.20, 0.60, 0.25)),
    ("plum", (0.50, 0.20, 0.65)),
    ("teal", (0.10, 0.55, 0.55)),
    ("slate", (0.35, 0.40, 0.50)),
    ("olive", (0.45, 0.50, 0.15)),
    ("denim", (0.25, 0.35, 0.65)),
    ("fern", (0.30, 0.55, 0.30)),
    ("indigo", (0.30, 0.15, 0.55)),
    ("sand", (0.55, 0.50, 0.30)),
]

PALETTE_COLORS = {name: rgb for name, rgb in PALETTE}


@dataclass(frozen=True)
class ToyPart:
    name: str
    kind: str            # sphere | box | cylinder
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # sphere: radii; box: edge lengths; cylinder: (rx, ry, h)
    color: str           # palette name
    group: str           # coarse-level group name
    axis: str = "z"      # cylinder axis


@dataclass(frozen=True)
class ToyObjectSpec:
    name: str
    category: str
    parts: tuple[ToyPart, ...]

    def __post_init__(self):
        if not self.parts:
            raise ValueError("toy spec needs at least one part")
        for p in self.parts:
            if p.color not in PALETTE_COLORS:
                raise ValueError(f"unknown palette color {p.color!r}")


@dataclass
class ToyObject:
    """Union mesh plus per-face ground truth at both granularities."""

    spec: ToyObjectSpec
    mesh: TriangleMesh
    fine_labels: np.ndarray    # (F,) int32, index into spec.parts
    coarse_labels: np.ndarray  # (F,) int32, index into coarse_names
    coarse_names: list[str]

    @property
    def fine_names(self) -> list[str]:
        return [p.name for p in self.spec.parts]

    @property
    def fine_colors(self) -> np.ndarray:
        return np.array([PALETTE_COLORS[p.color] for p in self.spec.parts], dtype=np.float64)

    @property
    def n_fine(self) -> int:
        return len(self.spec.parts)

    @property
    def n_coarse(self) -> int:
        return len(self.coarse_names)


def _sphere_mesh(center, radii, rings=24, segments=32):
    cx, cy, cz = center
    rx, ry, rz = radii
    verts = [(cx, cy, cz + rz)]
    for i in range(1, rings):
        theta = np.pi * i / rings
        for j in range(segments):
            phi = 2 * np.pi * j / segments
            verts.append((cx + rx * np.sin(theta) * np.cos(phi),
                          cy + ry * np.sin(theta) * np.sin(phi),
                          cz + rz * np.cos(theta)))
    verts.append((cx, cy, cz - rz))
    south = len(verts) - 1
    faces = []
    for j in range(segments):
        faces.append((0, 1 + j, 1 + (j + 1) % segments))
    for i in range(rings - 2):
        a = 1 + i * segments
        b = 1 + (i + 1) * segments
        for j in range(segments):
            j2 = (j + 1) % segments
            faces.append((a + j, b + j, b + j2))
            faces.append((a + j, b + j2, a + j2))
    a = 1 + (rings - 2) * segments
    for j in range(segments):
        faces.append((south, a + (j + 1) % segments, a + j))
    return np.array(verts), np.array(faces)


def _box_mesh(center, size):
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(size, dtype=np.float64) / 2.0
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                       dtype=np.float64)
    verts = c + corners * h
    # Corner order: bit 2 = +x, bit 1 = +y, bit 0 = +z.
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    faces = []
    for a, b, cq, d in quads:
        faces.append((a, b, cq))
        faces.append((a, cq, d))
    return verts, np.array(faces)


_AXIS_PERM = {"x": (2, 1, 0), "y": (0, 2, 1), "z": (0, 1, 2)}


def _cylinder_mesh(center, size, axis="z", segments=32):
    rx, ry, h = size[0], size[1], size[2]
    ring_top, ring_bot = [], []
    for j in range(segments):
        phi = 2 * np.pi * j / segments
        ring_top.append((rx * np.cos(phi), ry * np.sin(phi), h / 2))
        ring_bot.append((rx * np.cos(phi), ry * np.sin(phi), -h / 2))
    verts = ring_top + ring_bot + [(0, 0, h / 2), (0, 0, -h / 2)]
    top_c, bot_c = 2 * segments, 2 * segments + 1
    faces = []
    for j in range(segments):
        j2 = (j + 1) % segments
        faces.append((j, segments + j, segments + j2))
        faces.append((j, segments + j2, j2))
        faces.append((top_c, j, j2))
        faces.append((bot_c, segments + j2, segments + j))
    verts = np.array(verts, dtype=np.float64)
    perm = _AXIS_PERM[axis]
    verts = verts[:, perm]
    return verts + np.asarray(center, dtype=np.float64), np.array(faces)


def _penetration_into(points: np.ndarray, part: ToyPart) -> float:
    """Max penetration depth of points into a primitive; 0 if all outside."""
    c = np.asarray(part.center)
    s = np.asarray(part.size)
    p = points - c
    if part.kind == "sphere":
        r = np.linalg.norm(p / s, axis=1)
        return float(max(0.0, np.max((1.0 - r)) * s.min()))
    if part.kind == "box":
        half = s / 2.0
        slack = half - np.abs(p)
        depth = slack.min(axis=1)
        return float(max(0.0, depth.max(initial=0.0)))
    if part.kind == "cylinder":
        perm = _AXIS_PERM[part.axis]
        q = p[:, perm]
        radial = 1.0 - np.sqrt((q[:, 0] / s[0]) ** 2 + (q[:, 1] / s[1]) ** 2)
        axial = s[2] / 2.0 - np.abs(q[:, 2])
        depth = np.minimum(radial * min(s[0], s[1]), axial)
        return float(max(0.0, depth.max(initial=0.0)))
    raise ValueError(f"unknown primitive kind {part.kind!r}")


def make_toy_object(spec: ToyObjectSpec, seed: int = 0,
                    overlap_tol: float = 0.02) -> ToyObject:
    """Build the union mesh with per-face fine and coarse ground-truth labels.

    A tiny deterministic vertex jitter (1e-4 of object scale) breaks exact
    symmetry ties; part shapes and labels are unaffected.
    """
    if isinstance(spec, str):
        spec = TOY_SPECS[spec]()
    rng = np.random.Generator(np.random.PCG64(seed))
    all_verts, all_faces, all_colors = [], [], []
    fine_labels = []
    offset = 0
    part_vertices = []
    for pi, part in enumerate(spec.parts):
        if part.kind == "sphere":
            v, f = _sphere_mesh(part.center, part.size)
        elif part.kind == "box":
            v, f = _box_mesh(part.center, part.size)
        elif part.kind == "cylinder":
            v, f = _cylinder_mesh(part.center, part.size, part.axis)
        else:
            raise ValueError(f"unknown primitive kind {part.kind!r}")
        part_vertices.append(v)
        all_verts.append(v)
        all_faces.append(np.asarray(f) + offset)
        color = PALETTE_COLORS[part.color]
        all_colors.append(np.tile(color, (len(v), 1)))
        fine_labels.extend([pi] * len(f))
        offset += len(v)

    for ai, a in enumerate(spec.parts):
        for bi, b in enumerate(spec.parts):
            if ai == bi:
                continue
            depth = _penetration_into(part_vertices[ai], b)
            if depth > overlap_tol:
                raise MeshError(
                    f"parts {a.name!r} and {b.name!r} overlap by {depth:.4f} "
                    f"(tolerance {overlap_tol})")

    verts = np.vstack(all_verts)
    scale = max(verts.max(axis=0) - verts.min(axis=0))
    verts = verts + rng.uniform(-1e-4, 1e-4, size=verts.shape) * scale
    mesh = make_mesh(verts, np.vstack(all_faces), np.vstack(all_colors))
    # Normalized up front: every consumer (cameras, mask scales) assumes the
    # unit bounding box.
    mesh, _ = normalize_unit(mesh)
    fine = np.asarray(fine_labels, dtype=np.int32)

    coarse_names = []
    for part in spec.parts:
        if part.group not in coarse_names:
            coarse_names.append(part.group)
    group_of_part = np.array([coarse_names.index(p.group) for p in spec.parts], dtype=np.int32)
    coarse = group_of_part[fine]
    return ToyObject(spec, mesh, fine, coarse, coarse_names)


def _spec_snowman() -> ToyObjectSpec:
    return ToyObjectSpec("snowman", "figures", (
        ToyPart("base", "sphere", (0, 0, -0.26), (0.24, 0.24, 0.24), "cobalt", "body"),
        ToyPart("torso", "sphere", (0, 0, 0.15), (0.17, 0.17, 0.17), "moss", "body"),
        ToyPart("head", "sphere", (0, 0, 0.44), (0.12, 0.12, 0.12), "plum", "body"),
    ))


def _spec_table() -> ToyObjectSpec:
    legs = []
    for i, ((sx, sy), color) in enumerate(zip(
            [(-1, -1), (1, -1), (-1, 1), (1, 1)],
            ["cobalt", "moss", "teal", "plum"])):
        legs.append(ToyPart(f"leg{i}", "box", (0.35 * sx, 0.35 * sy, 0.0),
                            (0.08, 0.08, 0.42), color, "legs"))
    top = ToyPart("top", "box", (0, 0, 0.24), (0.9, 0.9, 0.06), "sand", "slab")
    return ToyObjectSpec("table", "furniture", tuple([top] + legs))


def _spec_caterpillar() -> ToyObjectSpec:
    xs = [-0.375, -0.125, 0.125, 0.375]
    colors = ["fern", "denim", "olive", "indigo"]
    parts = []
    for i, (x, c) in enumerate(zip(xs, colors)):
        group = "head_half" if i < 2 else "tail_half"
        parts.append(ToyPart(f"segment{i}", "sphere", (x, 0, 0),
                             (0.125, 0.125, 0.125), c, group))
    return ToyObjectSpec("caterpillar", "figures", tuple(parts))


def _spec_barbell() -> ToyObjectSpec:
    return ToyObjectSpec("barbell", "equipment", (
        ToyPart("plate_l", "sphere", (-0.33, 0, 0), (0.17, 0.17, 0.17), "teal", "plates"),
        ToyPart("plate_r", "sphere", (0.33, 0, 0), (0.17, 0.17, 0.17), "slate", "plates"),
        ToyPart("bar", "cylinder", (0, 0, 0), (0.06, 0.06, 0.32), "sand", "bar", axis="x"),
    ))


def _spec_mushroom() -> ToyObjectSpec:
    return ToyObjectSpec("mushroom", "plants", (
        ToyPart("cap", "sphere", (0, 0, 0.22), (0.32, 0.32, 0.18), "plum", "cap"),
        ToyPart("stem", "cylinder", (0, 0, -0.14), (0.09, 0.09, 0.36), "sand", "stem"),
    ))


def _spec_rocket() -> ToyObjectSpec:
    return ToyObjectSpec("rocket", "vehicles", (
        ToyPart("body", "cylinder", (0, 0, -0.05), (0.12, 0.12, 0.5), "denim", "core"),
        ToyPart("nose", "sphere", (0, 0, 0.4), (0.12, 0.12, 0.2), "moss", "core"),
        ToyPart("booster_l", "cylinder", (-0.18, 0, -0.2), (0.06, 0.06, 0.3), "slate", "boosters"),
        ToyPart("booster_r", "cylinder", (0.18, 0, -0.2), (0.06, 0.06, 0.3), "olive", "boosters"),
    ))


TOY_SPECS = {
    "snowman": _spec_snowman,
    "table": _spec_table,
    "caterpillar": _spec_caterpillar,
    "barbell": _spec_barbell,
    "mushroom": _spec_mushroom,
    "rocket": _spec_rocket,
}


# ---------------------------------------------------------------------------
# Synthetic oracle views
# ---------------------------------------------------------------------------

def part_code(color_rgb, dim: int, seed: int) -> np.ndarray:
    """Fixed random unit feature code for a part, keyed by its 8-bit color.

    Keying on color (not part index) makes codes agree across objects that
    share palette colors, so a backbone trained on some objects is scored
    against the same codes on held-out ones.
    """
    r, g, b = (int(round(float(c) * 255)) for c in color_rgb)
    ss = np.random.SeedSequence([seed, dim, r, g, b])
    v = np.random.Generator(np.random.PCG64(ss)).normal(size=dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


def oracle_codes(toy: ToyObject, dim: int, seed: int) -> np.ndarray:
    """(n_fine, dim) unit codes for each fine part of a toy object."""
    return np.stack([part_code(c, dim, seed) for c in toy.fine_colors])


def synthesize_views(toy: ToyObject, cameras: list[Camera], level: str = "fine",
                     feature_noise: float = 0.0, seed: int = 0,
                     feature_dim: int = 32) -> list[tuple[FeatureMap, MaskMap]]:
    """Oracle feature and mask maps for each camera.

    Foreground pixels carry the unit code of their fine part plus Gaussian
    noise; the mask map labels the visible region of each part at the
    requested level, one id per part per view. Background is id 0 with zero
    features.
    """
    if level not in ("fine", "coarse"):
        raise ValueError("level must be 'fine' or 'coarse'")
    labels = toy.fine_labels if level == "fine" else toy.coarse_labels
    codes = oracle_codes(toy, feature_dim, seed)
    out = []
    for vi, cam in enumerate(cameras):
        _, fid = rasterize(toy.mesh, cam)
        fg = fid >= 0
        part_at = np.where(fg, labels[np.clip(fid, 0, None)], -1)
        fine_at = np.where(fg, toy.fine_labels[np.clip(fid, 0, None)], -1)
        feat = np.zeros((cam.height, cam.width, feature_dim), dtype=np.float32)
        feat[fg] = codes[fine_at[fg]]
        if feature_noise > 0.0:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, vi])))
            noise = rng.normal(0.0, feature_noise, size=feat.shape).astype(np.float32)
            feat[fg] += noise[fg]
        ids = (part_at + 1).astype(np.uint16)
        out.append((FeatureMap(feat), MaskMap(ids)))
    return out
