"""Part naming: canonical views, best-view selection, highlight rendering,
and a chat-protocol vision client (real endpoint or deterministic mock).

The client protocol is a generic chat-completions endpoint with base64 PNG
attachments, configured entirely by URL and key; no vendor is assumed.
"""

from __future__ import annotations

import base64
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import TriangleMesh
from .providers import PALETTE
from .render import ViewSet, is_axis_camera
from .segment import Segmentation

HIGHLIGHT_ALPHA = 0.5
DIM_FACTOR = 0.6
BACKGROUND = np.array([1.0, 1.0, 1.0], dtype=np.float32)

PROMPT_TEMPLATE_VERSION = 1
PROMPT_TEMPLATE = (
    "These images show a 3D object from several canonical views, followed by "
    "one view where a single part is highlighted in red. Name the highlighted "
    "part in 1-3 words. Answer with the name only."
)


class LabelError(RuntimeError):
    """Semantic querying failed for a part."""


@dataclass
class HighlightImage:
    part_id: int
    view_id: int
    rgb: np.ndarray          # (H, W, 3) float32 in [0, 1]
    highlighted: np.ndarray  # (H, W) bool

    def to_png_bytes(self) -> bytes:
        from PIL import Image

        arr = np.clip(self.rgb * 255.0, 0, 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PNG")
        return buf.getvalue()


@dataclass
class PartLabel:
    part_id: int
    label: str
    view_id: int
    transcript: dict = field(default_factory=dict)


def base_render(mesh: TriangleMesh, view) -> np.ndarray:
    """Flat-shaded RGB render from a completed ViewRender's face-id buffer."""
    if view.face_id is None:
        raise ValueError("view was rasterized without a face-id buffer")
    h, w = view.face_id.shape
    img = np.tile(BACKGROUND, (h, w, 1))
    fg = view.face_id >= 0
    if fg.any():
        faces = view.face_id[fg]
        tri_colors = mesh.vertex_colors[mesh.faces].mean(axis=1)
        # Simple diffuse shading toward the camera keeps the geometry readable.
        _, _, forward = view.camera.basis()
        lambert = np.abs(mesh.face_normals @ forward).astype(np.float32)
        shade = (0.55 + 0.45 * lambert)[faces, None]
        img[fg] = tri_colors[faces] * shade
    return img.astype(np.float32)


def canonical_views(views: ViewSet) -> list[int]:
    """Indices of the fixed axis cameras; empty (with a warning) if none."""
    ids = [i for i, cam in enumerate(views.cameras) if is_axis_camera(cam)]
    if not ids:
        import warnings

        warnings.warn("no fixed axis views present in this view set")
    return ids


def part_pixel_counts(part_points: np.ndarray, views: ViewSet) -> np.ndarray:
    member = np.zeros(len(views.renders[0].visible), dtype=bool)
    member[part_points] = True
    counts = np.zeros(len(views), dtype=np.int64)
    for i, render in enumerate(views.renders):
        pop = render.point_of_pixel
        counts[i] = int(member[pop[pop >= 0]].sum())
    return counts


def best_view(part_points: np.ndarray, views: ViewSet) -> int:
    """View with the most pixels mapped to the part's points; ties to lower id."""
    if len(part_points) == 0:
        raise ValueError("empty part")
    counts = part_pixel_counts(part_points, views)
    if counts.max() == 0:
        raise LabelError("part invisible in all views")
    return int(np.argmax(counts))


def render_highlight(mesh: TriangleMesh, views: ViewSet, view_id: int,
                     part_points: np.ndarray, part_id: int = -1) -> HighlightImage:
    """Blend the part's visible pixels toward red; dim the rest of the object.

    Highlighted pixels are exactly the pixels whose point_of_pixel lands in
    the part. Background keeps its color; other foreground drops to 60%
    luminance with hue preserved.
    """
    render = views.renders[view_id]
    member = np.zeros(len(render.visible), dtype=bool)
    member[part_points] = True
    pop = render.point_of_pixel
    hl = np.zeros(pop.shape, dtype=bool)
    has_pt = pop >= 0
    hl[has_pt] = member[pop[has_pt]]
    if not hl.any():
        raise ValueError("part has no visible pixels in this view")
    img = base_render(mesh, render)
    fg = (render.face_id >= 0) if render.face_id is not None else has_pt
    dim = fg & ~hl
    img[dim] *= DIM_FACTOR
    img[hl] = (1 - HIGHLIGHT_ALPHA) * img[hl] + HIGHLIGHT_ALPHA * np.array([1.0, 0.0, 0.0])
    return HighlightImage(part_id, view_id, img, hl)


# ---------------------------------------------------------------------------
# Vision clients
# ---------------------------------------------------------------------------

class MockVisionClient:
    """Deterministic stand-in: reads the final (highlight) image, recovers the
    dominant base color of the highlighted region, and answers from a fixed
    color-name table. Palette colors keep red <= 0.55, so a pixel with a
    strong red excess can only be a highlight blend."""

    def __init__(self, table: dict[str, str] | None = None):
        self.table = table if table is not None else {
            name: f"{name} part" for name, _ in PALETTE}

    def complete(self, images: list[bytes], prompt: str) -> str:
        from PIL import Image

        arr = np.asarray(Image.open(io.BytesIO(images[-1])).convert("RGB"),
                         dtype=np.float32) / 255.0
        r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
        hl = (r >= 0.45) & (r - np.maximum(g, b) >= 0.1)
        if not hl.any():
            return "unknown"
        mean = arr[hl].mean(axis=0)
        base = np.array([2 * mean[0] - 1.0, 2 * mean[1], 2 * mean[2]])
        names = [name for name, _ in PALETTE]
        rgbs = np.array([rgb for _, rgb in PALETTE])
        # Shading scales the base color per pixel; compare directions.
        bn = base / max(np.linalg.norm(base), 1e-9)
        dn = rgbs / np.linalg.norm(rgbs, axis=1, keepdims=True)
        return self.table[names[int(np.argmax(dn @ bn))]]


class HttpVisionClient:
    """Chat-completions style endpoint with data-URL image attachments."""

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 model: str = "default", timeout: float = 60.0, transport=None):
        self.endpoint = endpoint or os.environ.get("PARTSCALE_VLM_ENDPOINT", "")
        self.api_key = api_key if api_key is not None else os.environ.get("PARTSCALE_VLM_KEY", "")
        self.model = model
        self.timeout = timeout
        self._transport = transport
        if not self.endpoint:
            raise ValueError("no endpoint configured (PARTSCALE_VLM_ENDPOINT)")

    def complete(self, images: list[bytes], prompt: str) -> str:
        import httpx

        content: list[dict] = [{"type": "text", "text": prompt}]
        for png in images:
            data_url = "data:image/png;base64," + base64.b64encode(png).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": data_url}})
        body = {"model": self.model,
                "messages": [{"role": "user", "content": content}]}
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for _ in range(3):  # first try + 2 retries on transport failure
            try:
                with httpx.Client(timeout=self.timeout, transport=self._transport) as client:
                    resp = client.post(self.endpoint, json=body, headers=headers)
                resp.raise_for_status()
                payload = resp.json()
                return str(payload["choices"][0]["message"]["content"])
            except httpx.TransportError as e:
                last_error = e
        raise LabelError(f"transport failure after retries: {last_error}")


def query_label(images: list[bytes], client, prompt: str = PROMPT_TEMPLATE,
                part_id: int = -1, view_id: int = -1) -> PartLabel:
    """Send canonical images + the highlight to the client; the first response
    line is the label. The raw transcript is retained."""
    if not images:
        raise ValueError("empty image list")
    raw = client.complete(images, prompt)
    label = raw.strip().splitlines()[0].strip() if raw.strip() else ""
    if not label:
        raise LabelError("empty response from vision client")
    transcript = {"prompt": prompt, "prompt_version": PROMPT_TEMPLATE_VERSION,
                  "n_images": len(images), "response": raw}
    return PartLabel(part_id, label, view_id, transcript)


def label_all(seg: Segmentation, mesh: TriangleMesh, views: ViewSet, client,
              max_in_flight: int = 4) -> list[PartLabel]:
    """Best-effort labels for every part, gathered in part-id order.

    Parts invisible in every view come back as "unknown" with the reason in
    the transcript instead of failing the batch.
    """
    canon = canonical_views(views)
    canon_pngs = []
    for vi in canon:
        img = base_render(mesh, views.renders[vi])
        canon_pngs.append(HighlightImage(-1, vi, img, np.zeros(img.shape[:2], bool)).to_png_bytes())

    def one(part_id: int) -> PartLabel:
        pts = seg.part_points(part_id)
        try:
            bv = best_view(pts, views)
            hi = render_highlight(mesh, views, bv, pts, part_id)
            images = canon_pngs + [hi.to_png_bytes()]
            return query_label(images, client, part_id=part_id, view_id=bv)
        except (LabelError, ValueError) as e:
            return PartLabel(part_id, "unknown", -1, {"error": str(e)})

    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(one, range(seg.n_parts)))
