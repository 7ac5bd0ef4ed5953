"""
Synthetic Scene Service - ground-truth fields, datasets and the oracle inpainter.

Scenes are rasterised into three grids sharing one resolution and bounds: the
full scene, the object alone and the background alone, so every later stage
can be checked against exact ground truth.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np

from field_engine.renderer import RenderConfig, render_view, unpremultiply
from field_engine.scene import Camera, MaskImage, MultiViewDataset, View, VoxelField

logger = logging.getLogger(__name__)

SIGMA_MAX = 50.0
MASK_THRESHOLD = 0.5


class SceneSpecError(ValueError):
    pass


@dataclass
class Primitive:
    shape: str                # "sphere" (size = radius) or "box" (size = edge lengths)
    center: tuple
    size: object
    color: tuple
    role: str = "object"      # "object" or "background"


@dataclass
class GroundPlane:
    enabled: bool = True
    height: float = -0.6
    color_a: tuple = (0.9, 0.9, 0.9)
    color_b: tuple = (0.2, 0.2, 0.2)
    checker_size: float = 0.25


@dataclass
class CameraRig:
    count: int = 24
    radius: float = 3.2
    height: float = 1.4
    look_at: tuple = (0.0, 0.0, -0.2)
    fov_degrees: float = 45.0


@dataclass
class SceneSpec:
    primitives: list = dataclass_field(default_factory=lambda: [
        Primitive("sphere", (0.0, 0.0, 0.0), 0.35, (0.9, 0.1, 0.1), "object"),
        Primitive("box", (0.75, 0.55, -0.35), (0.35, 0.35, 0.5), (0.1, 0.6, 0.2), "background"),
        Primitive("box", (-0.7, -0.6, -0.4), (0.3, 0.3, 0.4), (0.2, 0.3, 0.8), "background"),
    ])
    ground: GroundPlane = dataclass_field(default_factory=GroundPlane)
    resolution: tuple = (96, 96, 96)
    bounds_min: tuple = (-1.2, -1.2, -1.0)
    bounds_max: tuple = (1.2, 1.2, 1.0)
    cameras: CameraRig = dataclass_field(default_factory=CameraRig)
    width: int = 64
    height: int = 64
    near: float = 1.0
    far: float = 6.0
    sky: tuple = (1.0, 1.0, 1.0)
    samples_per_ray: int = 128

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        if "primitives" in data:
            data["primitives"] = [Primitive(**p) for p in data["primitives"]]
        if "ground" in data:
            data["ground"] = GroundPlane(**data["ground"])
        if "cameras" in data:
            data["cameras"] = CameraRig(**data["cameras"])
        try:
            return cls(**data)
        except TypeError as e:
            raise SceneSpecError(f"invalid scene spec: {e}") from e

    def validate(self) -> None:
        roles = {p.role for p in self.primitives}
        if not roles <= {"object", "background"}:
            raise SceneSpecError(f"unknown primitive role in {sorted(roles)}")
        if "object" not in roles:
            raise SceneSpecError("scene needs at least one object primitive")
        if "background" not in roles and not self.ground.enabled:
            raise SceneSpecError("scene needs at least one background element")
        if self.cameras.count <= 3:
            raise SceneSpecError(f"camera rig needs more than 3 cameras, got {self.cameras.count}")
        if min(self.resolution) < 2:
            raise SceneSpecError("field resolution must be >= 2 per axis")
        lo, hi = np.asarray(self.bounds_min, float), np.asarray(self.bounds_max, float)
        if np.any(lo >= hi):
            raise SceneSpecError("bounds min must be < max componentwise")
        for p in self.primitives:
            if p.shape not in ("sphere", "box"):
                raise SceneSpecError(f"unknown primitive shape {p.shape!r}")
            half = _half_extent(p)
            center = np.asarray(p.center, float)
            if np.any(center - half < lo) or np.any(center + half > hi):
                raise SceneSpecError(f"{p.shape} at {tuple(p.center)} extends outside the scene bounds")
        if self.ground.enabled and not lo[2] < self.ground.height < hi[2]:
            raise SceneSpecError("ground plane height must lie inside the bounds")

    def build_cameras(self) -> list:
        rig = self.cameras
        target = np.asarray(rig.look_at, float)
        cams = []
        for i in range(rig.count):
            angle = 2.0 * np.pi * i / rig.count
            eye = target + np.array([rig.radius * np.cos(angle), rig.radius * np.sin(angle), rig.height])
            cams.append(Camera.look_at(eye, target, self.width, self.height, rig.fov_degrees))
        return cams

    def render_config(self, background, seed: int = 0) -> RenderConfig:
        return RenderConfig(samples_per_ray=self.samples_per_ray, jitter=False, background=background, rng_seed=seed,
                            near=self.near, far=self.far)


def _half_extent(p: Primitive) -> np.ndarray:
    if p.shape == "sphere":
        return np.full(3, float(p.size))
    return 0.5 * np.broadcast_to(np.asarray(p.size, float), (3,))


def _inside(p: Primitive, positions: np.ndarray, grow: float = 0.0) -> np.ndarray:
    offset = positions - np.asarray(p.center, float)
    if p.shape == "sphere":
        return np.linalg.norm(offset, axis=-1) <= float(p.size) + grow
    return np.all(np.abs(offset) <= _half_extent(p) + grow, axis=-1)


def _paint(density, color, region, color_region, rgb) -> None:
    density[region] = SIGMA_MAX
    # dilated colour only where nothing has density
    color[color_region & (density == 0)] = rgb
    color[region] = rgb


def generate_scene(spec: SceneSpec, seed: int = 0):
    """Rasterise `spec` into (gt_full, gt_object, gt_background) fields.

    Colours are dilated by one and a half voxels around each primitive so
    trilinear lookups at its surface never blend toward black. `seed` is
    accepted for interface symmetry; rasterisation is deterministic.
    """
    spec.validate()
    shape = tuple(int(n) for n in spec.resolution)
    lo, hi = np.asarray(spec.bounds_min, float), np.asarray(spec.bounds_max, float)
    grid = VoxelField(np.zeros(shape), np.zeros(shape + (3,)), lo, hi)
    positions = grid.node_positions()
    grow = 1.5 * float(grid.spacing.max())

    obj_d, obj_c = np.zeros(shape), np.zeros(shape + (3,))
    bkg_d, bkg_c = np.zeros(shape), np.zeros(shape + (3,))

    if spec.ground.enabled:
        g = spec.ground
        slab = positions[..., 2] <= g.height
        near_slab = positions[..., 2] <= g.height + grow
        parity = (np.floor(positions[..., 0] / g.checker_size) + np.floor(positions[..., 1] / g.checker_size)) % 2
        checker = np.where(parity[..., None] == 0, np.asarray(g.color_a, float), np.asarray(g.color_b, float))
        bkg_d[slab] = SIGMA_MAX
        bkg_c[near_slab] = checker[near_slab]

    for p in spec.primitives:
        region = _inside(p, positions)
        color_region = _inside(p, positions, grow)
        if p.role == "object":
            _paint(obj_d, obj_c, region, color_region, np.asarray(p.color, float))
        else:
            _paint(bkg_d, bkg_c, region, color_region, np.asarray(p.color, float))

    # union: max density, colour of the densest contributor (object wins ties)
    full_d = np.maximum(obj_d, bkg_d)
    object_wins = (obj_d >= bkg_d) & ((obj_d > 0) | (np.any(obj_c > 0, axis=-1) & (bkg_d == 0)))
    full_c = np.where(object_wins[..., None], obj_c, bkg_c)

    logger.info(f"Scene rasterised at {shape}: object voxels={int((obj_d > 0).sum())}, background voxels={int((bkg_d > 0).sum())}")
    return (
        VoxelField(full_d, full_c, lo, hi),
        VoxelField(obj_d, obj_c, lo, hi),
        VoxelField(bkg_d, bkg_c, lo, hi),
    )


def mask_from_alpha(alpha: np.ndarray, threshold: float = MASK_THRESHOLD) -> MaskImage:
    if not 0 < threshold < 1:
        raise ValueError("mask threshold must lie in (0, 1)")
    return MaskImage((np.asarray(alpha) > threshold).astype(np.uint8))


def render_dataset(field: VoxelField, cameras: list, cfg: RenderConfig, mask_field: Optional[VoxelField] = None,
                   kind: str = "full") -> MultiViewDataset:
    """Render one view per camera; masks come from `mask_field` (the object) rendered transparent.

    With a transparent `cfg` the views keep their alpha (RGBA datasets, straight colour).
    Depth is kept where the view is opaque and stored as 0 (invalid) elsewhere.
    """
    mask_cfg = cfg.with_background(None)
    views = []
    for camera in cameras:
        rendered = render_view(field, camera, cfg)
        if mask_field is field and cfg.background is None:
            mask_alpha = rendered.alpha
        elif mask_field is not None:
            mask_alpha = render_view(mask_field, camera, mask_cfg).alpha
        else:
            mask_alpha = None
        depth = np.where(rendered.alpha > MASK_THRESHOLD, rendered.depth, 0.0)
        views.append(View(
            rgb=rendered.rgb if cfg.background is not None else unpremultiply(rendered.rgb, rendered.alpha),
            camera=camera,
            alpha=rendered.alpha if cfg.background is None else None,
            mask=mask_from_alpha(mask_alpha) if mask_alpha is not None else None,
            depth=depth,
        ))
    return MultiViewDataset(views, cfg.near, cfg.far, field.bounds_min, field.bounds_max, cfg.background, kind)


def oracle_inpaint(view_index: int, dataset: MultiViewDataset, gt_background: VoxelField,
                   cfg: Optional[RenderConfig] = None) -> np.ndarray:
    """Perfect inpainting: the background field seen from the view's camera."""
    if not 0 <= view_index < len(dataset):
        raise IndexError(f"view {view_index} not in dataset of {len(dataset)}")
    if cfg is None:
        cfg = RenderConfig(background=dataset.background, near=dataset.near, far=dataset.far)
    return render_view(gt_background, dataset.views[view_index].camera, cfg).rgb


def build_datasets(spec: SceneSpec, seed: int = 0):
    """Ground-truth fields plus the full, object (RGBA) and oracle-inpainted background datasets."""
    gt_full, gt_object, gt_background = generate_scene(spec, seed)
    cameras = spec.build_cameras()
    scene_cfg = spec.render_config(spec.sky, seed)

    full = render_dataset(gt_full, cameras, scene_cfg, mask_field=gt_object, kind="full")
    obj = render_dataset(gt_object, cameras, scene_cfg.with_background(None), mask_field=gt_object, kind="object")
    background = render_dataset(gt_background, cameras, scene_cfg, mask_field=None, kind="background")
    for view, full_view in zip(background.views, full.views):
        view.mask = full_view.mask

    fields = {"full": gt_full, "object": gt_object, "background": gt_background}
    datasets = {"full": full, "object": obj, "background": background}
    return fields, datasets
