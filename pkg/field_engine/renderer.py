"""
Renderer - ray generation, stratified sampling and emission-absorption compositing.

Single-ray operations (generate_ray, sample_along_ray, composite_ray) are thin
wrappers over the batched kernels used by render_view, render_merged and the
training loops.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from field_engine.scene import (
    BACKGROUND, OBJECT, Camera, Ray, RaySamples, SrtTransform, VoxelField, srt_density_correction,
)

logger = logging.getLogger(__name__)

# alpha below this renders as empty space (depth = far)
EMPTY_ALPHA = 1e-4
CHUNK_RAYS = 4096

# independent jitter streams per field role
OBJECT_STREAM = 0
BACKGROUND_STREAM = 1


class EmptyFieldError(ValueError):
    pass


def thread_count() -> int:
    """Worker cap from RADIANT_THREADS; 0 or unset means one per CPU."""
    raw = os.getenv("RADIANT_THREADS", "0").strip() or "0"
    try:
        requested = int(raw)
    except ValueError:
        logger.warning(f"⚠️  Ignoring non-integer RADIANT_THREADS={raw!r}")
        requested = 0
    return requested if requested > 0 else (os.cpu_count() or 1)


@dataclass
class RenderConfig:
    samples_per_ray: int = 64
    jitter: bool = False
    background: Optional[tuple] = (1.0, 1.0, 1.0)  # None renders transparent
    rng_seed: int = 0
    near: float = 0.5
    far: float = 6.0

    def __post_init__(self) -> None:
        if isinstance(self.background, str):
            if self.background != "transparent":
                raise ValueError(f"unknown background {self.background!r}")
            self.background = None
        elif self.background is not None:
            self.background = tuple(float(c) for c in self.background)
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if not 0 <= self.near < self.far:
            raise ValueError(f"invalid depth range [{self.near}, {self.far}]")

    def with_background(self, background) -> "RenderConfig":
        return RenderConfig(self.samples_per_ray, self.jitter, background, self.rng_seed, self.near, self.far)


@dataclass
class RenderedView:
    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray


@dataclass
class SampleBatch:
    """Filled samples for R rays x N samples, plus the trilinear corners backprop scatters into."""

    depths: np.ndarray         # (R, N)
    deltas: np.ndarray         # (R, N)
    density: np.ndarray        # (R, N)
    color: np.ndarray          # (R, N, 3)
    far: np.ndarray            # (R,)
    corner_index: np.ndarray   # (R, N, 8)
    corner_weight: np.ndarray  # (R, N, 8)
    density_scale: float = 1.0


def seeded_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, stream])


def pixel_directions(camera: Camera, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Unit world directions through pixel centres."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    local = np.stack([(px + 0.5 - camera.cx) / camera.fx, (py + 0.5 - camera.cy) / camera.fy, np.ones_like(px)], axis=-1)
    world = local @ camera.rotation.T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def camera_rays(camera: Camera):
    """Origins and directions of every pixel, row-major (py outer, px inner)."""
    py, px = np.mgrid[0:camera.height, 0:camera.width]
    directions = pixel_directions(camera, px.reshape(-1), py.reshape(-1))
    origins = np.broadcast_to(camera.position, directions.shape).copy()
    return origins, directions


def generate_ray(camera: Camera, px: int, py: int, near: float = 0.5, far: float = 6.0) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    direction = pixel_directions(camera, np.array([px]), np.array([py]))[0]
    return Ray(camera.position.copy(), direction, near, far)


def stratified_depths(num_rays: int, near, far, samples: int, offsets: Optional[np.ndarray] = None):
    """Depths and deltas of `samples` equal strata between near and far, shaped (R, N).

    `offsets` in [0, 1) places each sample inside its stratum; None means stratum centres.
    """
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (num_rays,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (num_rays,))
    width = (far - near) / samples
    if offsets is None:
        offsets = np.full((num_rays, samples), 0.5)
    depths = near[:, None] + (np.arange(samples)[None, :] + offsets) * width[:, None]
    deltas = np.empty_like(depths)
    deltas[:, :-1] = np.diff(depths, axis=1)
    deltas[:, -1] = width
    # two jittered samples can meet at a stratum border
    np.maximum(deltas, 1e-12 * width[:, None], out=deltas)
    return depths, deltas


def draw_offsets(cfg: RenderConfig, num_rays: int, rng: Optional[np.random.Generator]) -> Optional[np.ndarray]:
    if not cfg.jitter:
        return None
    return rng.random((num_rays, cfg.samples_per_ray))


def sample_along_ray(ray: Ray, cfg: RenderConfig, rng: Optional[np.random.Generator] = None) -> RaySamples:
    if cfg.jitter and rng is None:
        rng = seeded_rng(cfg.rng_seed, OBJECT_STREAM)
    n = cfg.samples_per_ray
    depths, deltas = stratified_depths(1, ray.near, ray.far, n, draw_offsets(cfg, 1, rng))
    return RaySamples(depths[0], deltas[0], np.zeros(n), np.zeros((n, 3)), np.full(n, OBJECT), ray.near, ray.far)


def fill_samples(field: VoxelField, origins, directions, depths, deltas, far,
                 transform: Optional[SrtTransform] = None) -> SampleBatch:
    """Evaluate `field` at the sample points; a non-identity transform maps them into the canonical frame first."""
    points = origins[:, None, :] + depths[..., None] * directions[:, None, :]
    flat = points.reshape(-1, 3)
    density_scale = 1.0
    if transform is not None and not transform.is_identity:
        flat = transform.to_canonical(flat)
        density_scale = srt_density_correction(transform)

    index, weight = field.corner_weights(flat)
    density = np.einsum("mc,mc->m", weight, field.density.reshape(-1)[index])
    color = np.einsum("mc,mck->mk", weight, field.color.reshape(-1, 3)[index])
    if density_scale != 1.0:
        density = density * density_scale

    shape = depths.shape
    return SampleBatch(
        depths=depths,
        deltas=deltas,
        density=density.reshape(shape),
        color=color.reshape(shape + (3,)),
        far=np.broadcast_to(np.asarray(far, dtype=np.float64), (shape[0],)).copy(),
        corner_index=index.reshape(shape + (8,)),
        corner_weight=weight.reshape(shape + (8,)),
        density_scale=density_scale,
    )


def march_rays(field: VoxelField, origins, directions, cfg: RenderConfig, offsets=None, transform=None) -> SampleBatch:
    depths, deltas = stratified_depths(len(origins), cfg.near, cfg.far, cfg.samples_per_ray, offsets)
    return fill_samples(field, origins, directions, depths, deltas, cfg.far, transform)


def composite(depths, deltas, density, color, background, far):
    """Front-to-back emission-absorption over (R, N) samples.

    Returns rgb (R, 3), alpha (R,), depth (R,), weights (R, N) and the
    residual transmittance (R,).
    """
    optical = density * deltas
    inclusive = np.cumsum(optical, axis=1)
    transmittance = np.exp(-(inclusive - optical))
    weights = transmittance * -np.expm1(-optical)
    alpha = weights.sum(axis=1)
    residual = np.exp(-inclusive[:, -1])

    rgb = np.einsum("rn,rnk->rk", weights, color)
    if background is not None:
        rgb = rgb + (1.0 - alpha)[:, None] * np.asarray(background, dtype=np.float64)

    far = np.broadcast_to(np.asarray(far, dtype=np.float64), alpha.shape)
    expected = (weights * depths).sum(axis=1) / np.maximum(alpha, 1e-6)
    depth = np.where(alpha < EMPTY_ALPHA, far, expected)
    return rgb, alpha, depth, weights, residual


def composite_ray(samples: RaySamples, background) -> tuple:
    """(rgb, alpha, depth) of one ray; `background` is an rgb triple, None or "transparent"."""
    if __debug__ and np.any(np.diff(samples.depths) < 0):
        raise ValueError("samples must be sorted by depth before compositing")
    if isinstance(background, str):
        background = None
    rgb, alpha, depth, _, _ = composite(
        samples.depths[None], samples.deltas[None], samples.density[None], samples.color[None], background, samples.far,
    )
    return rgb[0], float(alpha[0]), float(depth[0])


def merge_batches(first: SampleBatch, second: SampleBatch, first_source: int, second_source: int):
    """Depth-sorted union of two sample batches on the same rays.

    Stable; equal depths put background samples first. Returns
    (depths, deltas, density, color, source), 2N samples per ray.
    """
    depths = np.concatenate([first.depths, second.depths], axis=1)
    deltas = np.concatenate([first.deltas, second.deltas], axis=1)
    density = np.concatenate([first.density, second.density], axis=1)
    color = np.concatenate([first.color, second.color], axis=1)
    source = np.concatenate([
        np.full(first.depths.shape, first_source, dtype=np.int8),
        np.full(second.depths.shape, second_source, dtype=np.int8),
    ], axis=1)

    # stable sort by source, then stable sort by depth: ties keep background (0) first
    by_source = np.argsort(source, axis=1, kind="stable")
    by_depth = np.argsort(np.take_along_axis(depths, by_source, axis=1), axis=1, kind="stable")
    order = np.take_along_axis(by_source, by_depth, axis=1)

    def take(a):
        return np.take_along_axis(a, order, axis=1)

    return take(depths), take(deltas), take(density), np.take_along_axis(color, order[..., None], axis=1), take(source)


def merge_ray_samples(object_samples: RaySamples, bkg_samples: RaySamples) -> RaySamples:
    """Single-ray form of the depth-sorted merge."""
    obj = RaySamples(object_samples.depths, object_samples.deltas, object_samples.density, object_samples.color,
                     np.full(len(object_samples), OBJECT), object_samples.near, object_samples.far)
    bkg = RaySamples(bkg_samples.depths, bkg_samples.deltas, bkg_samples.density, bkg_samples.color,
                     np.full(len(bkg_samples), BACKGROUND), bkg_samples.near, bkg_samples.far)
    return RaySamples.union(obj, bkg).sorted()


def _render_chunked(render_chunk, num_rays: int):
    """Run `render_chunk(slice)` over ray chunks on the worker pool and stitch the results."""
    chunks = [slice(start, min(start + CHUNK_RAYS, num_rays)) for start in range(0, num_rays, CHUNK_RAYS)]
    workers = min(thread_count(), len(chunks))
    if workers <= 1:
        parts = [render_chunk(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(render_chunk, chunks))
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


def _to_view(camera: Camera, rgb, alpha, depth) -> RenderedView:
    h, w = camera.height, camera.width
    return RenderedView(
        rgb=np.clip(rgb, 0.0, 1.0).reshape(h, w, 3),
        alpha=np.clip(alpha, 0.0, 1.0).reshape(h, w),
        depth=depth.reshape(h, w),
    )


def unpremultiply(rgb: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Straight colour from a transparent render; fully transparent pixels become black."""
    safe = np.where(alpha > EMPTY_ALPHA, alpha, 1.0)[..., None]
    return np.where(alpha[..., None] > EMPTY_ALPHA, np.clip(rgb / safe, 0.0, 1.0), 0.0)


def _view_offsets(cfg: RenderConfig, num_rays: int, stream: int) -> Optional[np.ndarray]:
    # drawn up front in pixel order so chunking and threading never change the result
    if not cfg.jitter:
        return None
    return draw_offsets(cfg, num_rays, seeded_rng(cfg.rng_seed, stream))


def _rows(offsets: Optional[np.ndarray], chunk: slice) -> Optional[np.ndarray]:
    return None if offsets is None else offsets[chunk]


def render_batch(field: VoxelField, origins, directions, cfg: RenderConfig, offsets=None, transform=None):
    """rgb, alpha, depth of arbitrary rays."""
    batch = march_rays(field, origins, directions, cfg, offsets, transform)
    rgb, alpha, depth, _, _ = composite(batch.depths, batch.deltas, batch.density, batch.color, cfg.background, batch.far)
    return rgb, alpha, depth


def render_view(field: VoxelField, camera: Camera, cfg: RenderConfig,
                transform: Optional[SrtTransform] = None) -> RenderedView:
    origins, directions = camera_rays(camera)
    offsets = _view_offsets(cfg, len(origins), OBJECT_STREAM)

    def render_chunk(chunk: slice):
        return render_batch(field, origins[chunk], directions[chunk], cfg, _rows(offsets, chunk), transform)

    return _to_view(camera, *_render_chunked(render_chunk, len(origins)))


def render_object_only(object_field: VoxelField, transform: Optional[SrtTransform], camera: Camera,
                       cfg: RenderConfig) -> RenderedView:
    """The (transformed) object alone over a transparent background."""
    return render_view(object_field, camera, cfg.with_background(None), transform)


def object_centroid(field: VoxelField) -> np.ndarray:
    total = field.density.sum()
    if total <= 0:
        raise EmptyFieldError("empty object field")
    positions = field.node_positions().reshape(-1, 3)
    return (field.density.reshape(-1) @ positions) / total


def render_merged(object_field: VoxelField, bkg_field: VoxelField, transform: Optional[SrtTransform],
                  camera: Camera, cfg: RenderConfig) -> RenderedView:
    """Render object and background together by depth-sorting the union of their samples per ray."""
    origins, directions = camera_rays(camera)
    object_offsets = _view_offsets(cfg, len(origins), OBJECT_STREAM)
    bkg_offsets = _view_offsets(cfg, len(origins), BACKGROUND_STREAM)

    def render_chunk(chunk: slice):
        o, d = origins[chunk], directions[chunk]
        obj = march_rays(object_field, o, d, cfg, _rows(object_offsets, chunk), transform)
        bkg = march_rays(bkg_field, o, d, cfg, _rows(bkg_offsets, chunk))
        depths, deltas, density, color, _ = merge_batches(obj, bkg, OBJECT, BACKGROUND)
        rgb, alpha, depth, _, _ = composite(depths, deltas, density, color, cfg.background, cfg.far)
        return rgb, alpha, depth

    return _to_view(camera, *_render_chunked(render_chunk, len(origins)))
