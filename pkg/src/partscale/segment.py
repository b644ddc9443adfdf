"""From scale-conditioned features to parts: clustering, noise fill,
multi-granularity sweeps, mesh voting, click queries, and segmentation
driven by user-provided 2D masks."""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass

import numpy as np

from .clustering import ClusterError, cluster
from .geometry import SampledCloud, TriangleMesh, save_cloud_ply
from .grouping import FieldContext, FitConfig, GroupingField, MaskObservation, \
    build_observation, fit
from .providers import MaskMap
from .render import ViewSet

DEFAULT_SWEEP_SCALES = (0.0, 0.5, 1.0, 1.5, 2.0)


class ClickMiss(ValueError):
    """Pick ray does not hit the object."""


def default_min_cluster_size(n: int) -> int:
    return max(20, n // 200)


@dataclass
class Segmentation:
    """Hard partition of the cloud at one scale; ids contiguous from 0."""

    scale: float
    labels: np.ndarray        # (N,) int32
    counts: np.ndarray        # (P,)
    confidences: np.ndarray   # (P,) point share per part

    @property
    def n_parts(self) -> int:
        return len(self.counts)

    def part_points(self, part_id: int) -> np.ndarray:
        return np.nonzero(self.labels == part_id)[0]


@dataclass
class MeshSegmentation:
    face_labels: np.ndarray  # (F,) int32
    voted: np.ndarray        # (F,) bool; False = filled from nearest labeled face


def assign_noise(labels: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Give each noise point (-1) the label of the nearest cluster centroid in
    feature space; exact ties go to the lower cluster id."""
    labels = np.asarray(labels)
    noise = labels == -1
    if not noise.any():
        return labels.copy()
    ids = np.unique(labels[~noise])
    if len(ids) == 0:
        raise ValueError("need at least one non-noise cluster")
    cents = np.stack([features[labels == c].mean(axis=0) for c in ids])
    d2 = ((features[noise][:, None, :] - cents[None]) ** 2).sum(axis=2)
    out = labels.copy()
    out[noise] = ids[np.argmin(d2, axis=1)]
    return out


def _finalize(labels: np.ndarray, scale: float) -> Segmentation:
    """Relabel parts contiguously: largest first, ties by earliest point."""
    ids, counts = np.unique(labels, return_counts=True)
    first = np.array([np.argmax(labels == c) for c in ids])
    order = np.lexsort((first, -counts))
    remap = np.zeros(ids.max() + 1, dtype=np.int32)
    for new, oi in enumerate(order):
        remap[ids[oi]] = new
    new_labels = remap[labels]
    new_counts = counts[order]
    conf = new_counts / len(labels)
    return Segmentation(float(scale), new_labels.astype(np.int32),
                        new_counts.astype(np.int64), conf.astype(np.float64))


def segment_at_scale(field: GroupingField, ctx: FieldContext, sigma: float,
                     min_cluster_size: int | None = None,
                     method: str = "hdbscan") -> Segmentation:
    """Evaluate grouping features at one scale, cluster, and fill noise."""
    if sigma < 0:
        raise ValueError("scale must be nonnegative")
    feats = field.features_all(ctx, sigma).astype(np.float64)
    mcs = min_cluster_size or default_min_cluster_size(ctx.n_points)
    labels = cluster(feats, mcs, method=method)
    labels = assign_noise(labels, feats)
    return _finalize(labels, sigma)


@dataclass
class SweepEntry:
    scale: float
    segmentation: Segmentation | None
    error: str | None = None


def segment_sweep(field: GroupingField, ctx: FieldContext,
                  scales=DEFAULT_SWEEP_SCALES,
                  min_cluster_size: int | None = None) -> list[SweepEntry]:
    """segment_at_scale per scale; per-scale failures are recorded, not fatal."""
    out = []
    for s in scales:
        try:
            out.append(SweepEntry(float(s), segment_at_scale(field, ctx, s, min_cluster_size)))
        except (ClusterError, ValueError) as e:
            out.append(SweepEntry(float(s), None, str(e)))
    return out


def vote_mesh(seg: Segmentation, cloud: SampledCloud, mesh: TriangleMesh,
              chunk: int = 2048) -> MeshSegmentation:
    """Majority vote of sampled points per face (ties to the lower part id);
    faces with no samples copy the nearest voted face by centroid distance."""
    n_faces = mesh.n_faces
    counts = np.zeros((n_faces, seg.n_parts), dtype=np.int64)
    np.add.at(counts, (cloud.face_of, seg.labels), 1)
    sampled = counts.sum(axis=1) > 0
    face_labels = np.full(n_faces, -1, dtype=np.int32)
    face_labels[sampled] = np.argmax(counts[sampled], axis=1)
    if not sampled.all():
        cents = mesh.face_centroids()
        voted_idx = np.nonzero(sampled)[0]
        voted_c = cents[voted_idx]
        holes = np.nonzero(~sampled)[0]
        for s in range(0, len(holes), chunk):
            block = holes[s:s + chunk]
            d2 = ((cents[block][:, None, :] - voted_c[None]) ** 2).sum(axis=2)
            face_labels[block] = face_labels[voted_idx[np.argmin(d2, axis=1)]]
    return MeshSegmentation(face_labels, sampled)


def nearest_point(cloud: SampledCloud, location: np.ndarray) -> int:
    d2 = ((cloud.points - np.asarray(location, dtype=np.float64)) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def pick_ray_point(cloud: SampledCloud, origin, direction,
                   pick_radius: float = 0.02) -> int:
    """Frontmost cloud point within pick_radius of the ray; ClickMiss if none."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    nd = np.linalg.norm(d)
    if nd < 1e-12:
        raise ClickMiss("zero-length ray direction")
    d = d / nd
    rel = cloud.points - o
    along = rel @ d
    perp2 = (rel ** 2).sum(axis=1) - along ** 2
    hit = (along > 0) & (perp2 <= pick_radius ** 2)
    if not hit.any():
        raise ClickMiss("ray misses the object")
    idx = np.nonzero(hit)[0]
    return int(idx[np.argmin(along[idx])])


def click_segment(field: GroupingField, ctx: FieldContext, click, sigma: float,
                  segmentation: Segmentation | None = None,
                  pick_radius: float = 0.02) -> tuple[int, np.ndarray, Segmentation]:
    """Part containing the clicked location at the given scale.

    `click` is either a 3D point or an (origin, direction) ray. Returns
    (part id, member point indices, the segmentation used), where the member
    set is exactly that part of segment_at_scale(sigma).
    """
    if segmentation is None:
        segmentation = segment_at_scale(field, ctx, sigma)
    if isinstance(click, tuple) and len(click) == 2:
        pi = pick_ray_point(ctx.cloud, click[0], click[1], pick_radius)
    else:
        pi = nearest_point(ctx.cloud, click)
    part = int(segmentation.labels[pi])
    return part, segmentation.part_points(part), segmentation


def segment_from_masks(ctx: FieldContext, views: ViewSet, view_id: int,
                       user_mask: MaskMap, cfg: FitConfig) -> tuple[Segmentation, GroupingField]:
    """Segmentation controlled by user 2D masks on one view.

    The field is refit using only the provided masks (plus the visible
    remainder of the silhouette as an implicit background group, so a single
    user mask still separates from the rest). The result is clustered at the
    mean user-mask scale over the view's visible points; hidden points take
    the nearest cluster in feature space.
    """
    render = views.renders[view_id]
    obs = build_observation(view_id, user_mask, render, ctx.cloud, cfg.eps)
    if not obs.records:
        raise ValueError("user mask covers zero points")
    user_sigmas = obs.sigmas()

    rest_ids = user_mask.ids.copy()
    rest_region = (render.point_of_pixel >= 0) & (user_mask.ids == 0)
    rest_id = int(user_mask.ids.max()) + 1
    rest_ids[rest_region] = rest_id
    combined = build_observation(view_id, MaskMap(rest_ids), render, ctx.cloud, cfg.eps)

    field, _ = fit(ctx, [combined], cfg)
    sigma = float(np.mean(user_sigmas))
    feats = field.features_all(ctx, sigma).astype(np.float64)
    visible = render.visible
    mcs = min(default_min_cluster_size(int(visible.sum())),
              max(5, int(visible.sum()) // 4))
    vis_labels = cluster(feats[visible], mcs)
    labels = np.full(ctx.n_points, -1, dtype=np.int64)
    labels[visible] = vis_labels
    labels = assign_noise(labels, feats)
    return _finalize(labels, sigma), field


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def part_palette(n: int) -> np.ndarray:
    """n visually distinct RGB colors (golden-angle hue walk), stable per id."""
    cols = []
    for i in range(n):
        h = (i * 0.61803398875) % 1.0
        cols.append(colorsys.hsv_to_rgb(h, 0.65, 0.95))
    return np.asarray(cols)


def save_segmentation(prefix, seg: Segmentation) -> None:
    """JSON header + little-endian u16 per-point labels at <prefix>.json/.bin."""
    header = {
        "scale": seg.scale,
        "n_points": int(len(seg.labels)),
        "n_parts": int(seg.n_parts),
        "counts": [int(c) for c in seg.counts],
        "confidences": [float(c) for c in seg.confidences],
    }
    with open(str(prefix) + ".json", "w") as fh:
        json.dump(header, fh, sort_keys=True)
    with open(str(prefix) + ".bin", "wb") as fh:
        fh.write(seg.labels.astype("<u2").tobytes())


def load_segmentation(prefix) -> Segmentation:
    with open(str(prefix) + ".json") as fh:
        header = json.load(fh)
    with open(str(prefix) + ".bin", "rb") as fh:
        labels = np.frombuffer(fh.read(), dtype="<u2").astype(np.int32)
    if len(labels) != header["n_points"]:
        raise ValueError("segmentation label payload size mismatch")
    return Segmentation(float(header["scale"]), labels,
                        np.asarray(header["counts"], dtype=np.int64),
                        np.asarray(header["confidences"], dtype=np.float64))


def save_mesh_segmentation(prefix, mseg: MeshSegmentation) -> None:
    header = {
        "n_faces": int(len(mseg.face_labels)),
        "n_parts": int(mseg.face_labels.max()) + 1,
        "voted": int(mseg.voted.sum()),
        "filled": int((~mseg.voted).sum()),
    }
    with open(str(prefix) + ".json", "w") as fh:
        json.dump(header, fh, sort_keys=True)
    with open(str(prefix) + ".bin", "wb") as fh:
        fh.write(mseg.face_labels.astype("<u2").tobytes())


def export_colored_cloud(path, cloud: SampledCloud, seg: Segmentation) -> None:
    colors = part_palette(seg.n_parts)[seg.labels]
    save_cloud_ply(path, cloud.points, colors)
