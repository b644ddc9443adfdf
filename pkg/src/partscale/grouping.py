"""Scale-conditioned grouping field fitted from 2D masks.

Each 2D mask gets a 3D scale from the spread of the points it covers. Pixel
pairs sampled inside the masks supervise a pair of MLP heads (a backbone head
and a long-skip head on raw point attributes) with a margin contrastive loss,
conditioned on that scale. Clustering the resulting features at any scale
yields a part decomposition at that granularity.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import SampledCloud
from .numerics import Adam, Mlp, PosEnc, load_checkpoint, mlp_from_tensors, \
    mlp_init, mlp_to_tensors, posenc, save_checkpoint
from .providers import MaskMap
from .render import ViewRender

logger = logging.getLogger(__name__)

DEFAULT_SCALE_FACTOR = 10.0
MIN_MASK_POINTS = 5


def mask_scale(points: np.ndarray, eps: float = DEFAULT_SCALE_FACTOR) -> float:
    """3D scale of a mask: sqrt((eps*sx)^2 + (eps*sy)^2 + (eps*sz)^2) with
    population standard deviations of the covered points' coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("mask covers zero points")
    std = pts.std(axis=0)  # population (ddof=0)
    return float(np.sqrt(np.sum((eps * std) ** 2)))


@dataclass
class MaskRecord:
    """One 2D mask with its covered 3D points and scale."""

    view: int
    mask_id: int
    point_indices: np.ndarray  # unique covered cloud points
    pixel_count: int
    sigma: float


@dataclass
class MaskObservation:
    """One (view, mask map) supervision image, reduced to liftable pixels.

    Valid pixels are those with a nonzero mask id that map to a 3D point and
    whose mask was not discarded for covering too few points.
    """

    view: int
    records: list[MaskRecord]
    pix_point: np.ndarray   # (M,) cloud point index per valid pixel
    pix_mask: np.ndarray    # (M,) local record index per valid pixel

    @property
    def n_valid(self) -> int:
        return len(self.pix_point)

    def sigmas(self) -> np.ndarray:
        return np.array([r.sigma for r in self.records], dtype=np.float64)


def build_observation(view_id: int, mm: MaskMap, render: ViewRender,
                      cloud: SampledCloud, eps: float = DEFAULT_SCALE_FACTOR,
                      min_points: int = MIN_MASK_POINTS) -> MaskObservation:
    """Turn a mask map into supervision records with per-mask 3D scales.

    Masks covering fewer than `min_points` unique points carry no usable
    scale and are discarded.
    """
    ids = mm.ids
    pop = render.point_of_pixel
    if ids.shape != pop.shape:
        raise ValueError("mask map resolution does not match the render")
    usable = (ids != 0) & (pop >= 0)
    flat_ids = ids[usable].astype(np.int64)
    flat_pts = pop[usable].astype(np.int64)
    records: list[MaskRecord] = []
    keep_local: dict[int, int] = {}
    for mid in sorted(mm.mask_meta.keys()):
        sel = flat_ids == mid
        pts = np.unique(flat_pts[sel])
        if len(pts) < min_points:
            continue
        sigma = mask_scale(cloud.points[pts], eps)
        keep_local[mid] = len(records)
        records.append(MaskRecord(view_id, mid, pts, int(sel.sum()), sigma))
    if records:
        kept = np.isin(flat_ids, list(keep_local.keys()))
        lut = np.zeros(max(keep_local.keys()) + 1, dtype=np.int64)
        for mid, local in keep_local.items():
            lut[mid] = local
        pix_point = flat_pts[kept]
        pix_mask = lut[flat_ids[kept]]
    else:
        pix_point = np.zeros(0, dtype=np.int64)
        pix_mask = np.zeros(0, dtype=np.int64)
    return MaskObservation(view_id, records, pix_point, pix_mask)


@dataclass
class PairBatch:
    """Sampled supervision pairs: point indices, same-mask flags, pair scales."""

    i: np.ndarray
    j: np.ndarray
    same: np.ndarray
    sigma: np.ndarray

    def __len__(self) -> int:
        return len(self.i)


@dataclass
class FitConfig:
    iterations: int = 2000
    views_per_iter: int = 90
    pixels_per_view: int = 256
    lr: float = 2e-3
    seed: int = 0
    margin: float = 1.0
    d: int = 32
    eps: float = DEFAULT_SCALE_FACTOR
    hidden: int = 64
    head_layers: int = 6
    skip_layers: int = 4
    sigma_enc_l: int = 4
    # The sinusoids see sigma / sigma_enc_scale so the encoding stays smooth
    # across the gaps between supervised mask scales; the raw scalar is
    # concatenated alongside.
    sigma_enc_scale: float = 5.0
    xyz_enc_l: int = 6
    use_skip: bool = True

    def __post_init__(self):
        for name in ("iterations", "views_per_iter", "pixels_per_view", "lr",
                     "margin", "d", "eps", "hidden", "head_layers", "skip_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def sample_pairs(observations: list[MaskObservation], cfg: FitConfig,
                 seed) -> PairBatch:
    """One iteration's pair batch, deterministic for a given seed.

    Views are drawn with replacement; per view, pixels are drawn uniformly
    from the valid region and paired consecutively (positive pairs take the
    shared mask's scale, negative pairs the anchor pixel's mask scale).
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    ii, jj, ss, gg = [], [], [], []
    order = rng.choice(len(observations), size=cfg.views_per_iter, replace=True)
    for oi in order:
        obs = observations[oi]
        m = obs.n_valid
        if m == 0:
            logger.warning("view %d has zero valid pixels; skipped", obs.view)
            continue
        take = cfg.pixels_per_view
        if m >= take:
            pick = rng.choice(m, size=take, replace=False)
        else:
            pick = rng.choice(m, size=take, replace=True)
        a, b = pick[0::2], pick[1::2]
        sig = obs.sigmas()
        ii.append(obs.pix_point[a])
        jj.append(obs.pix_point[b])
        ss.append(obs.pix_mask[a] == obs.pix_mask[b])
        gg.append(sig[obs.pix_mask[a]])
    if not ii:
        return PairBatch(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                         np.zeros(0, dtype=bool), np.zeros(0))
    return PairBatch(np.concatenate(ii), np.concatenate(jj),
                     np.concatenate(ss), np.concatenate(gg))


def contrastive_loss(fi: np.ndarray, fj: np.ndarray, same_mask, margin: float) -> np.ndarray:
    """Margin contrastive loss per pair: distance for same-mask pairs,
    hinge max(0, margin - distance) for different-mask pairs."""
    fi = np.atleast_2d(fi)
    fj = np.atleast_2d(fj)
    same = np.atleast_1d(np.asarray(same_mask, dtype=bool))
    dist = np.linalg.norm(fi.astype(np.float64) - fj.astype(np.float64), axis=1)
    return np.where(same, dist, np.maximum(0.0, margin - dist))


@dataclass
class FieldContext:
    """Frozen per-object inputs to the grouping field."""

    cloud: SampledCloud
    f3d: np.ndarray        # (N, C) float32 backbone features, frozen
    pe_xyz: np.ndarray     # (N, Dp) float32
    attrs: np.ndarray      # (N, 6) float32 normal + color

    @staticmethod
    def build(cloud: SampledCloud, f3d: np.ndarray, xyz_enc_l: int = 6) -> "FieldContext":
        pe = posenc(cloud.points.astype(np.float32), PosEnc(xyz_enc_l, True))
        attrs = np.concatenate([cloud.normals, cloud.colors], axis=1).astype(np.float32)
        return FieldContext(cloud, np.asarray(f3d, dtype=np.float32), pe.astype(np.float32), attrs)

    @property
    def n_points(self) -> int:
        return len(self.f3d)


class GroupingField:
    """Scale-conditioned feature field over one object's point cloud."""

    def __init__(self, head: Mlp, skip: Mlp | None, cfg: FitConfig):
        self.head = head
        self.skip = skip
        self.cfg = cfg
        self.sigma_enc = PosEnc(cfg.sigma_enc_l, False)

    def encode_sigma(self, sigma: np.ndarray) -> np.ndarray:
        """Raw scale concatenated with sinusoids of the normalized scale."""
        s = np.asarray(sigma, dtype=np.float32)[:, None]
        return np.concatenate(
            [s, posenc(s / self.cfg.sigma_enc_scale, self.sigma_enc)], axis=1)

    @staticmethod
    def init(feature_dim: int, pe_dim: int, cfg: FitConfig, seed: int) -> "GroupingField":
        enc_dim = 2 * cfg.sigma_enc_l + 1
        head_widths = [feature_dim + enc_dim] + [cfg.hidden] * (cfg.head_layers - 1) + [cfg.d]
        skip_widths = [pe_dim + 6 + enc_dim] + [cfg.hidden] * (cfg.skip_layers - 1) + [cfg.d]
        head = mlp_init(head_widths, seed)
        skip = mlp_init(skip_widths, seed + 1) if cfg.use_skip else None
        return GroupingField(head, skip, cfg)

    def parameters(self) -> list[np.ndarray]:
        params = self.head.parameters()
        if self.skip is not None:
            params += self.skip.parameters()
        return params

    def _inputs(self, ctx: FieldContext, idx: np.ndarray, sigma: np.ndarray):
        enc = self.encode_sigma(sigma)
        head_in = np.concatenate([ctx.f3d[idx], enc], axis=1)
        skip_in = None
        if self.skip is not None:
            skip_in = np.concatenate([ctx.pe_xyz[idx], ctx.attrs[idx], enc], axis=1)
        return head_in, skip_in

    def features(self, ctx: FieldContext, idx: np.ndarray, sigma,
                 want_cache: bool = False):
        """Grouping features for points `idx` at scale(s) `sigma` (scalar or per-point)."""
        idx = np.asarray(idx, dtype=np.int64)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), idx.shape)
        if np.any(sigma < 0):
            raise ValueError("sigma must be nonnegative")
        head_in, skip_in = self._inputs(ctx, idx, sigma)
        out, ch = self.head.forward(head_in, want_cache=True)
        cs = None
        if self.skip is not None:
            s, cs = self.skip.forward(skip_in, want_cache=True)
            out = out + s
        if want_cache:
            return out, (ch, cs)
        return out

    def features_all(self, ctx: FieldContext, sigma: float, chunk: int = 8192) -> np.ndarray:
        """Features for every point at one scale, chunked."""
        n = ctx.n_points
        out = np.empty((n, self.cfg.d), dtype=np.float32)
        for s in range(0, n, chunk):
            e = min(s + chunk, n)
            out[s:e] = self.features(ctx, np.arange(s, e), sigma)
        return out

    def to_tensors(self) -> dict[str, np.ndarray]:
        t = mlp_to_tensors("head", self.head)
        if self.skip is not None:
            t.update(mlp_to_tensors("skip", self.skip))
        return t

    def meta(self) -> dict:
        c = self.cfg
        return {"d": c.d, "margin": c.margin, "eps": c.eps, "hidden": c.hidden,
                "head_layers": c.head_layers, "skip_layers": c.skip_layers,
                "sigma_enc_l": c.sigma_enc_l, "sigma_enc_scale": c.sigma_enc_scale,
                "xyz_enc_l": c.xyz_enc_l, "use_skip": c.use_skip}


def save_field(path, field_: GroupingField) -> None:
    save_checkpoint(path, field_.to_tensors())
    with open(str(path) + ".json", "w") as fh:
        json.dump(field_.meta(), fh, sort_keys=True)


def load_field(path) -> GroupingField:
    tensors = load_checkpoint(path)
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    cfg = FitConfig(d=int(meta["d"]), margin=float(meta["margin"]), eps=float(meta["eps"]),
                    hidden=int(meta["hidden"]), head_layers=int(meta["head_layers"]),
                    skip_layers=int(meta["skip_layers"]), sigma_enc_l=int(meta["sigma_enc_l"]),
                    sigma_enc_scale=float(meta["sigma_enc_scale"]),
                    xyz_enc_l=int(meta["xyz_enc_l"]), use_skip=bool(meta["use_skip"]))
    head = mlp_from_tensors("head", tensors)
    skip = mlp_from_tensors("skip", tensors) if cfg.use_skip else None
    return GroupingField(head, skip, cfg)


def fit(ctx: FieldContext, observations: list[MaskObservation], cfg: FitConfig,
        log_path=None) -> tuple[GroupingField, list[dict]]:
    """Fit the grouping field on sampled pixel pairs; the backbone features in
    `ctx` stay frozen. Deterministic per cfg.seed."""
    usable = [o for o in observations if o.n_valid > 0]
    if not usable:
        raise ValueError("no mask observations with valid pixels")
    field_ = GroupingField.init(ctx.f3d.shape[1], ctx.pe_xyz.shape[1], cfg,
                                seed=cfg.seed)
    opt = Adam(field_.parameters(), lr=cfg.lr)
    log: list[dict] = []
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        batch = sample_pairs(usable, cfg, np.random.SeedSequence([cfg.seed, 65537, it]))
        p = len(batch)
        if p == 0:
            continue
        idx = np.concatenate([batch.i, batch.j])
        sig = np.concatenate([batch.sigma, batch.sigma])
        feats, (ch, cs) = field_.features(ctx, idx, sig, want_cache=True)
        f64 = feats.astype(np.float64)
        diff = f64[:p] - f64[p:]
        dist = np.linalg.norm(diff, axis=1)
        pos = batch.same
        hinge_active = (~pos) & (dist < cfg.margin)
        losses = np.where(pos, dist, np.maximum(0.0, cfg.margin - dist))
        loss = float(losses.mean())
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite contrastive loss at iteration {it}")
        safe = np.where(dist > 1e-12, dist, 1.0)
        unit = diff / safe[:, None]
        gi = np.zeros_like(unit)
        gi[pos & (dist > 1e-12)] = unit[pos & (dist > 1e-12)]
        gi[hinge_active & (dist > 1e-12)] = -unit[hinge_active & (dist > 1e-12)]
        gi /= p
        grad_f = np.concatenate([gi, -gi], axis=0)
        grads = field_.head.backward(ch, grad_f)[0]
        if field_.skip is not None:
            grads = grads + field_.skip.backward(cs, grad_f)[0]
        opt.step(grads)
        log.append({"iter": it, "loss": loss, "pairs": p,
                    "wall_ms": (time.perf_counter() - t0) * 1e3})
    if log_path is not None:
        with open(log_path, "w") as fh:
            for entry in log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return field_, log
