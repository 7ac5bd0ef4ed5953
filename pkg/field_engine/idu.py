"""
Iterative Dataset Update - alternate per-view 2D edits of the object images with
object-field training steps until the field absorbs the edit.

Each outer iteration shuffles the viewpoints, runs `d` edit rounds over them
(blend over black -> edit -> re-segment) and then takes `n` training steps on
rays drawn from the whole, partly edited, dataset.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Optional, Protocol

import numpy as np

from field_engine.optimizer import ObjectFieldTrainer, TrainConfig
from field_engine.renderer import seeded_rng, thread_count
from field_engine.scene import Camera, MaskImage, MultiViewDataset, RgbaImage, View, VoxelField

logger = logging.getLogger(__name__)

# a pixel counts as object when it differs from pure black by more than this
SEGMENT_THRESHOLD = 1e-3


class ViewpointEditError(RuntimeError):
    """An editor or segmenter failed; carries the viewpoint so the run can report it."""

    def __init__(self, viewpoint: int, cause: Exception):
        super().__init__(f"viewpoint {viewpoint}: {cause}")
        self.viewpoint = viewpoint
        self.cause = cause


@dataclass
class EditInstruction:
    text: str
    params: dict = dataclass_field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError("edit instruction text must be nonempty")


@dataclass
class IduSchedule:
    outer_iterations: int = 10
    d: int = 1
    n: int = 200
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.outer_iterations < 1 or self.d < 1:
            raise ValueError("outer_iterations and d must be >= 1")
        if self.n < 0:
            raise ValueError("n must be >= 0")


@dataclass
class IduView:
    original: RgbaImage
    current: RgbaImage
    camera: Camera
    mask: MaskImage


@dataclass
class IduDataset:
    views: list
    near: float
    far: float
    bounds_min: np.ndarray
    bounds_max: np.ndarray

    def __len__(self) -> int:
        return len(self.views)

    @classmethod
    def from_multiview(cls, dataset: MultiViewDataset, full_frame: bool = False) -> "IduDataset":
        """Binary-alpha RGBA views: rgb outside the mask is zeroed, alpha is the mask.

        With `full_frame` every view keeps its whole image under a full mask, so edits
        reach the entire scene.
        """
        views = []
        for i, view in enumerate(dataset.views):
            if full_frame:
                mask = MaskImage.full(*view.rgb.shape[:2])
                image = apply_mask(view.rgb, mask)
            elif view.mask is None:
                raise ValueError(f"view {i} has no object mask")
            else:
                mask = view.mask
                image = apply_mask(view.rgb * mask.data[..., None], mask)
            views.append(IduView(original=image, current=image.copy(), camera=view.camera, mask=mask))
        return cls(views, dataset.near, dataset.far, dataset.bounds_min, dataset.bounds_max)

    def to_multiview(self) -> MultiViewDataset:
        views = [
            View(rgb=v.current.rgb.copy(), camera=v.camera, alpha=v.current.alpha.copy(), mask=v.mask)
            for v in self.views
        ]
        return MultiViewDataset(views, self.near, self.far, self.bounds_min, self.bounds_max, None, "object")


class Editor(Protocol):
    def edit(self, current_rgb: np.ndarray, original_rgb: np.ndarray, instruction: EditInstruction) -> np.ndarray:
        ...


class Segmenter(Protocol):
    def segment(self, rgb: np.ndarray, prior_mask: MaskImage) -> MaskImage:
        ...


# ---------------------------------------------------------------- image ops

def alpha_blend_black(img: RgbaImage) -> np.ndarray:
    return img.rgb * img.alpha[..., None]


def apply_mask(rgb: np.ndarray, mask: MaskImage) -> RgbaImage:
    if rgb.shape[:2] != mask.data.shape:
        raise ValueError(f"image {rgb.shape[:2]} and mask {mask.data.shape} differ in size")
    return RgbaImage(rgb.copy(), mask.data.astype(np.float64))


# ---------------------------------------------------------------- editors

class IdentityEditor:
    def edit(self, current_rgb, original_rgb, instruction):
        return current_rgb


class RecolorEditor:
    """Moves every pixel a fraction `strength` toward `target`."""

    def __init__(self, target, strength: float = 1.0):
        self.target = np.asarray(target, dtype=np.float64)
        self.strength = float(strength)
        if self.target.shape != (3,) or np.any(self.target < 0) or np.any(self.target > 1):
            raise ValueError("recolor target must be an rgb triple in [0, 1]")
        if not 0 <= self.strength <= 1:
            raise ValueError("recolor strength must lie in [0, 1]")

    def edit(self, current_rgb, original_rgb, instruction):
        return current_rgb + self.strength * (self.target - current_rgb)


class HueShiftEditor:
    """Rotates colours about the grey axis by `degrees`."""

    def __init__(self, degrees: float = 60.0):
        theta = np.radians(degrees)
        cos, sin = np.cos(theta), np.sin(theta)
        third = (1.0 - cos) / 3.0
        root = np.sqrt(1.0 / 3.0) * sin
        self.matrix = np.array([
            [cos + third, third - root, third + root],
            [third + root, cos + third, third - root],
            [third - root, third + root, cos + third],
        ])

    def edit(self, current_rgb, original_rgb, instruction):
        return np.clip(current_rgb @ self.matrix.T, 0.0, 1.0)


class BrightenEditor:
    def __init__(self, factor: float = 1.2):
        if factor < 0:
            raise ValueError("brighten factor must be >= 0")
        self.factor = float(factor)

    def edit(self, current_rgb, original_rgb, instruction):
        return np.clip(current_rgb * self.factor, 0.0, 1.0)


def builtin_editor(kind: str, params: Optional[dict] = None) -> Editor:
    params = params or {}
    if kind == "identity":
        return IdentityEditor()
    if kind == "recolor":
        return RecolorEditor(params.get("target", (0.0, 0.0, 1.0)), params.get("strength", params.get("lambda", 1.0)))
    if kind == "hue_shift":
        return HueShiftEditor(params.get("degrees", 60.0))
    if kind == "brighten":
        return BrightenEditor(params.get("factor", 1.2))
    raise ValueError(f"unknown editor kind {kind!r}")


# ---------------------------------------------------------------- segmenters

class KnownMaskSegmenter:
    """Reuses the dataset mask; procedural edits never move object boundaries."""

    def segment(self, rgb, prior_mask: MaskImage) -> MaskImage:
        return prior_mask


class AlphaThresholdSegmenter:
    def __init__(self, threshold: float = SEGMENT_THRESHOLD):
        self.threshold = threshold

    def segment(self, rgb, prior_mask: MaskImage) -> MaskImage:
        return MaskImage((np.max(rgb, axis=-1) > self.threshold).astype(np.uint8))


def builtin_segmenter(kind: str) -> Segmenter:
    if kind == "known_mask":
        return KnownMaskSegmenter()
    if kind == "alpha_threshold":
        return AlphaThresholdSegmenter()
    raise ValueError(f"unknown segmenter kind {kind!r}")


# ---------------------------------------------------------------- loop

def _edit_view(view: IduView, index: int, editor: Editor, segmenter: Segmenter, instruction: EditInstruction) -> RgbaImage:
    try:
        current = alpha_blend_black(view.current)
        edited = np.asarray(editor.edit(current, alpha_blend_black(view.original), instruction), dtype=np.float64)
        if edited.shape != current.shape:
            raise ValueError(f"editor returned {edited.shape}, expected {current.shape}")
        edited = np.clip(edited, 0.0, 1.0)
        # segment the edit blended over black with the prior alpha; editors may tint the background
        mask = segmenter.segment(alpha_blend_black(RgbaImage(edited, view.current.alpha)), view.mask)
        if mask.data.shape != current.shape[:2]:
            raise ValueError(f"segmenter returned {mask.data.shape}, expected {current.shape[:2]}")
        return apply_mask(edited, mask)
    except Exception as e:
        raise ViewpointEditError(index, e) from e


def _edit_round(dataset: IduDataset, order, editor, segmenter, instruction, workers: int) -> dict:
    """Edit every viewpoint once; nothing is written back unless all of them succeed."""
    if workers <= 1:
        edited = [_edit_view(dataset.views[v], v, editor, segmenter, instruction) for v in order]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(_edit_view, dataset.views[v], v, editor, segmenter, instruction) for v in order]
            edited = [f.result() for f in futures]
    return dict(zip(order, edited))


def idu_run(field: VoxelField, dataset: IduDataset, editor: Editor, segmenter: Segmenter, schedule: IduSchedule,
            train_cfg: TrainConfig, instruction: Optional[EditInstruction] = None,
            on_iteration: Optional[Callable] = None, trainer: Optional[ObjectFieldTrainer] = None):
    """Run the update loop; returns (field, dataset). `dataset` is updated in place.

    `on_iteration(outer, field, dataset)` is called after each outer iteration.
    """
    if len(dataset) == 0:
        raise ValueError("IDU needs a nonempty dataset")
    instruction = instruction or EditInstruction("edit")
    trainer = trainer or ObjectFieldTrainer(dataset.to_multiview(), train_cfg, field)
    shuffle_rng = seeded_rng(schedule.rng_seed, 0)
    workers = min(thread_count(), len(dataset))
    edit_counts = np.zeros(len(dataset), dtype=np.int64)

    logger.info(f"🚀 IDU: {len(dataset)} views, {schedule.outer_iterations} iterations, d={schedule.d}, n={schedule.n}")
    for outer in range(schedule.outer_iterations):
        order = [int(v) for v in shuffle_rng.permutation(len(dataset))]
        for _ in range(schedule.d):
            updates = _edit_round(dataset, order, editor, segmenter, instruction, workers)
            for v in order:
                dataset.views[v].current = updates[v]
                trainer.replace_view(v, updates[v].rgb, updates[v].alpha)
                edit_counts[v] += 1

        trainer.run(schedule.n)
        logger.info(f"IDU iteration {outer + 1}/{schedule.outer_iterations} done (step {trainer.iteration})")
        if on_iteration is not None:
            on_iteration(outer, trainer.field, dataset)

    logger.info(f"✅ IDU finished; each view edited {int(edit_counts.min())}-{int(edit_counts.max())} times")
    return trainer.field, dataset
