"""Multi-view feature distillation into a small point backbone.

Each view's 2D feature map is lifted onto the sampled points (occluded points
fall back to their current 3D feature), the lifted views are averaged into a
per-point target, and the backbone is trained with MSE against that target.
The fallback entries contain the prediction itself, so the target is treated
as a constant: no gradient flows through it.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import SampledCloud, knn_self
from .numerics import Adam, Mlp, load_checkpoint, mlp_from_tensors, mlp_init, \
    mlp_to_tensors, save_checkpoint
from .providers import FeatureMap
from .render import ViewRender


@dataclass
class ScatterPlan:
    """Transposed mean-pooling operator for the backward pass.

    Dense (N, N) is fine at training sizes (a few thousand points) and turns
    the scatter into one BLAS call; inference-only contexts never build it.
    """

    at: np.ndarray  # (N, N) float32, at[j, i] = 1/k where j is a neighbor of i

    @staticmethod
    def build(nbr: np.ndarray) -> "ScatterPlan":
        n, k = nbr.shape
        at = np.zeros((n, n), dtype=np.float32)
        rows = nbr.ravel()
        cols = np.repeat(np.arange(n), k)
        np.add.at(at, (rows, cols), np.float32(1.0 / k))
        return ScatterPlan(at)

    def backward(self, grad_pooled: np.ndarray, n_out: int) -> np.ndarray:
        return self.at @ grad_pooled


@dataclass
class CloudContext:
    """Per-cloud tensors the backbone needs: inputs, neighborhoods, scatter plans."""

    cloud: SampledCloud
    x: np.ndarray           # (N, 9) float32: xyz, normal, color
    nbr1: np.ndarray
    nbr2: np.ndarray
    plan1: ScatterPlan | None = None
    plan2: ScatterPlan | None = None

    @staticmethod
    def build(cloud: SampledCloud, k1: int = 16, k2: int = 64,
              for_training: bool = False) -> "CloudContext":
        x = np.concatenate([cloud.points, cloud.normals, cloud.colors], axis=1).astype(np.float32)
        nbr1 = knn_self(cloud.points, k1)
        nbr2 = knn_self(cloud.points, k2)
        ctx = CloudContext(cloud, x, nbr1, nbr2)
        if for_training:
            ctx.plan1 = ScatterPlan.build(nbr1)
            ctx.plan2 = ScatterPlan.build(nbr2)
        return ctx

    @property
    def n_points(self) -> int:
        return len(self.x)


def _pool(h: np.ndarray, nbr: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Mean of each row's k neighbor features; chunked to bound the gather."""
    n = len(nbr)
    out = np.empty((n, h.shape[1]), dtype=h.dtype)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        out[s:e] = h[nbr[s:e]].mean(axis=1)
    return out


class Backbone:
    """Point feature network: per-point MLP, two kNN mean-pooling stages, trunk.

    Permutation-consistent by construction: neighborhoods are functions of the
    point coordinates only.
    """

    def __init__(self, enc1: Mlp, enc2: Mlp, head: Mlp, k1: int = 16, k2: int = 64):
        self.enc1 = enc1
        self.enc2 = enc2
        self.head = head
        self.k1 = k1
        self.k2 = k2

    @staticmethod
    def init(hidden: int = 64, out_dim: int = 32, k1: int = 16, k2: int = 64,
             seed: int = 0) -> "Backbone":
        return Backbone(
            mlp_init([9, hidden, hidden], seed),
            mlp_init([2 * hidden, hidden, hidden], seed + 1),
            mlp_init([2 * hidden, hidden, out_dim], seed + 2),
            k1, k2,
        )

    @property
    def out_dim(self) -> int:
        return self.head.widths[-1]

    def parameters(self) -> list[np.ndarray]:
        return self.enc1.parameters() + self.enc2.parameters() + self.head.parameters()

    def forward(self, ctx: CloudContext, want_cache: bool = False):
        h1, c1 = self.enc1.forward(ctx.x, want_cache=True)
        p1 = _pool(h1, ctx.nbr1)
        in2 = np.concatenate([h1, p1], axis=1)
        h2, c2 = self.enc2.forward(in2, want_cache=True)
        p2 = _pool(h2, ctx.nbr2)
        in3 = np.concatenate([h2, p2], axis=1)
        out, c3 = self.head.forward(in3, want_cache=True)
        if want_cache:
            return out, (c1, c2, c3)
        return out

    def backward(self, ctx: CloudContext, caches, grad_out: np.ndarray) -> list[np.ndarray]:
        if ctx.plan1 is None or ctx.plan2 is None:
            raise ValueError("context was not built for training")
        c1, c2, c3 = caches
        h = self.enc1.widths[-1]
        g_head, g_in3 = self.head.backward(c3, grad_out)
        g_h2 = g_in3[:, :h] + ctx.plan2.backward(g_in3[:, h:], ctx.n_points)
        g_enc2, g_in2 = self.enc2.backward(c2, g_h2)
        g_h1 = g_in2[:, :h] + ctx.plan1.backward(g_in2[:, h:], ctx.n_points)
        g_enc1, _ = self.enc1.backward(c1, g_h1)
        return g_enc1 + g_enc2 + g_head

    def to_tensors(self) -> dict[str, np.ndarray]:
        t = {}
        t.update(mlp_to_tensors("enc1", self.enc1))
        t.update(mlp_to_tensors("enc2", self.enc2))
        t.update(mlp_to_tensors("head", self.head))
        return t

    def meta(self) -> dict:
        return {"hidden": self.enc1.widths[-1], "out_dim": self.out_dim,
                "k1": self.k1, "k2": self.k2}


def save_backbone(path, backbone: Backbone) -> None:
    save_checkpoint(path, backbone.to_tensors())
    with open(str(path) + ".json", "w") as fh:
        json.dump(backbone.meta(), fh, sort_keys=True)


def load_backbone(path) -> Backbone:
    tensors = load_checkpoint(path)
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    return Backbone(
        mlp_from_tensors("enc1", tensors),
        mlp_from_tensors("enc2", tensors),
        mlp_from_tensors("head", tensors),
        int(meta["k1"]), int(meta["k2"]),
    )


def encode_points(backbone: Backbone, cloud: SampledCloud) -> np.ndarray:
    """F3D for a cloud: (N, C) float32, deterministic and permutation-consistent."""
    ctx = CloudContext.build(cloud, backbone.k1, backbone.k2)
    return backbone.forward(ctx)


# ---------------------------------------------------------------------------
# Lifting 2D features onto points
# ---------------------------------------------------------------------------

def sample_feature_map(fm: FeatureMap, uv: np.ndarray, mode: str = "bilinear") -> np.ndarray:
    """Sample (N, C) features at continuous image coordinates (pixel units,
    origin top-left, pixel centers at i + 0.5)."""
    h, w = fm.height, fm.width
    gx = np.asarray(uv[:, 0], dtype=np.float64) - 0.5
    gy = np.asarray(uv[:, 1], dtype=np.float64) - 0.5
    if mode == "nearest":
        xi = np.clip(np.rint(gx).astype(np.int64), 0, w - 1)
        yi = np.clip(np.rint(gy).astype(np.int64), 0, h - 1)
        return fm.data[yi, xi]
    if mode != "bilinear":
        raise ValueError(f"unknown sampling mode {mode!r}")
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    tx = (gx - x0).astype(np.float32)[:, None]
    ty = (gy - y0).astype(np.float32)[:, None]
    x0 = np.clip(x0.astype(np.int64), 0, w - 1)
    y0 = np.clip(y0.astype(np.int64), 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    d = fm.data
    top = d[y0, x0] * (1 - tx) + d[y0, x1] * tx
    bot = d[y1, x0] * (1 - tx) + d[y1, x1] * tx
    return top * (1 - ty) + bot * ty


def lift_view(render: ViewRender, fm: FeatureMap, f3d: np.ndarray,
              mode: str = "bilinear") -> tuple[np.ndarray, np.ndarray]:
    """Per-point features for one view: bilinear map samples where visible,
    the point's own f3d row where occluded. Returns (features, fallback flags)."""
    if (fm.height, fm.width) != (render.camera.height, render.camera.width):
        raise ValueError("feature map resolution does not match the render")
    if f3d.shape[1] != fm.channels:
        raise ValueError("feature dimension mismatch")
    out = np.array(f3d, dtype=np.float32, copy=True)
    vis = render.visible
    if vis.any():
        out[vis] = sample_feature_map(fm, render.uv[vis], mode=mode)
    return out, ~vis


def average_views(lifted: list[np.ndarray]) -> np.ndarray:
    """Arithmetic mean over views (fallback entries included)."""
    if not lifted:
        raise ValueError("need at least one view")
    return np.mean(np.stack(lifted), axis=0, dtype=np.float64).astype(np.float32)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    hidden: int = 64
    feature_dim: int = 32
    k1: int = 16
    k2: int = 64
    fixed_views_per_step: int = 6
    random_views_per_step: int = 2
    average_visible_only: bool = False  # alternative reading of the view average
    seed: int = 0


@dataclass
class PretrainObject:
    """One training object: cloud context plus per-view lifted visible features."""

    ctx: CloudContext
    samples: np.ndarray   # (K, N, C) float32 bilinear samples (junk where occluded)
    vis: np.ndarray       # (K, N) bool

    @staticmethod
    def build(ctx: CloudContext, renders: list[ViewRender],
              feature_maps: list[FeatureMap]) -> "PretrainObject":
        n = ctx.n_points
        c = feature_maps[0].channels
        k = len(renders)
        samples = np.zeros((k, n, c), dtype=np.float32)
        vis = np.zeros((k, n), dtype=bool)
        zeros = np.zeros((n, c), dtype=np.float32)
        for vi, (render, fm) in enumerate(zip(renders, feature_maps)):
            feat, fallback = lift_view(render, fm, zeros)
            samples[vi] = feat
            vis[vi] = ~fallback
        return PretrainObject(ctx, samples, vis)


def distill_target(obj: PretrainObject, view_ids: np.ndarray, f3d: np.ndarray,
                   visible_only: bool = False) -> np.ndarray:
    """Per-point regression target: mean over the chosen views of the lifted
    feature (visible) or the current f3d row (occluded)."""
    sel = obj.samples[view_ids]
    vis = obj.vis[view_ids][..., None]
    if visible_only:
        num = (sel * vis).sum(axis=0, dtype=np.float64)
        den = vis.sum(axis=0)
        target = np.where(den > 0, num / np.maximum(den, 1), f3d.astype(np.float64))
        return target.astype(np.float32)
    stacked = np.where(vis, sel, f3d[None])
    return np.mean(stacked, axis=0, dtype=np.float64).astype(np.float32)


def _choose_views(rng: np.random.Generator, n_views: int, cfg: PretrainConfig) -> np.ndarray:
    n_fixed = min(cfg.fixed_views_per_step, n_views)
    ids = list(range(n_fixed))
    extra = n_views - n_fixed
    if extra > 0 and cfg.random_views_per_step > 0:
        pick = rng.choice(extra, size=min(cfg.random_views_per_step, extra), replace=False)
        ids.extend((n_fixed + pick).tolist())
    return np.asarray(ids)


def pretrain(objects: list[PretrainObject], cfg: PretrainConfig,
             log_path=None) -> tuple[Backbone, list[dict]]:
    """Train the backbone across objects; deterministic per cfg.seed.

    Returns the trained backbone and the loss curve. Raises on non-finite loss.
    """
    if not objects:
        raise ValueError("empty dataset")
    c = objects[0].samples.shape[2]
    if any(o.samples.shape[2] != c for o in objects):
        raise ValueError("objects disagree on feature dimension")
    backbone = Backbone.init(cfg.hidden, c, cfg.k1, cfg.k2, seed=cfg.seed)
    opt = Adam(backbone.parameters(), lr=cfg.lr)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 17])))
    log: list[dict] = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        obj = objects[step % len(objects)]
        view_ids = _choose_views(rng, len(obj.vis), cfg)
        f3d, caches = backbone.forward(obj.ctx, want_cache=True)
        target = distill_target(obj, view_ids, f3d, cfg.average_visible_only)
        resid = (f3d - target).astype(np.float64)
        loss = float(np.mean(resid * resid))
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"non-finite pretrain loss at step {step}; last finite losses: "
                f"{[e['loss'] for e in log[-5:]]}")
        grad = (2.0 / resid.size) * resid
        grads = backbone.backward(obj.ctx, caches, grad)
        opt.step(grads)
        log.append({"step": step, "loss": loss,
                    "wall_ms": (time.perf_counter() - t0) * 1e3})
    if log_path is not None:
        with open(log_path, "w") as fh:
            for entry in log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return backbone, log
