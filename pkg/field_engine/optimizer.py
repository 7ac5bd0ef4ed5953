"""
Optimizer - losses, analytic render gradients, Adam and the field training loops.

The object field is fitted to RGBA views composited over a fresh random
background colour per batch, so density outside the object is always
penalised. The background field is fitted to inpainted RGB views plus true
depth where it is known.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np

from field_engine.renderer import RenderConfig, SampleBatch, camera_rays, composite, march_rays, seeded_rng
from field_engine.scene import MultiViewDataset, RaySamples, VoxelField

logger = logging.getLogger(__name__)

INIT_DENSITY = 0.01
INIT_COLOR = 0.5
# density parameters take larger steps than colour when fitting voxel fields
FIELD_DENSITY_LR_SCALE = 20.0

# rng streams inside a trainer
_RAY_STREAM = 10
_BACKGROUND_STREAM = 11
_JITTER_STREAM = 12


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 300
    rays_per_batch: int = 2048
    learning_rate: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    depth_loss_weight: float = 0.0
    rng_seed: int = 0
    density_lr_scale: float = 1.0
    samples_per_ray: int = 64
    jitter: bool = True
    random_background: bool = True
    fixed_background: tuple = (0.0, 0.0, 0.0)
    resolution: tuple = (32, 32, 32)
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.rays_per_batch <= 0:
            raise ValueError("rays_per_batch must be > 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.depth_loss_weight < 0:
            raise ValueError("depth_loss_weight must be >= 0")
        self.fixed_background = tuple(float(c) for c in self.fixed_background)
        self.resolution = tuple(int(n) for n in self.resolution)


@dataclass
class AdamState:
    first_moment: dict = dataclass_field(default_factory=dict)
    second_moment: dict = dataclass_field(default_factory=dict)
    step: int = 0


@dataclass
class TrainingTrace:
    """One record per optimisation step."""

    records: list = dataclass_field(default_factory=list)

    def record(self, iteration: int, loss: float, psnr: float, depth_error: Optional[float] = None) -> None:
        row = {"iteration": iteration, "loss": loss, "psnr": psnr}
        if depth_error is not None:
            row["depth_error"] = depth_error
        self.records.append(row)

    @property
    def losses(self) -> list:
        return [r["loss"] for r in self.records]


# ---------------------------------------------------------------- losses

def blended_photometric_loss(pred_rgb, pred_alpha: float, target, bg) -> float:
    """Squared error against the target alpha-blended over `bg`, averaged over channels.

    `pred_rgb` is assumed to be rendered over the same `bg` already.
    """
    target = np.asarray(target, dtype=np.float64)
    blended = target[3] * target[:3] + (1.0 - target[3]) * np.asarray(bg, dtype=np.float64)
    return float(np.mean((np.asarray(pred_rgb, dtype=np.float64) - blended) ** 2))


def photometric_loss_and_grad(pred_rgb: np.ndarray, target_rgb: np.ndarray, target_alpha: Optional[np.ndarray], bg):
    """Mean squared error over rays and channels, with d loss / d pred_rgb."""
    if target_alpha is not None:
        target_rgb = target_alpha[:, None] * target_rgb + (1.0 - target_alpha[:, None]) * np.asarray(bg, dtype=np.float64)
    diff = pred_rgb - target_rgb
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def depth_loss(pred_depth: float, true_depth: float, valid: bool) -> float:
    return float((pred_depth - true_depth) ** 2) if valid else 0.0


def depth_loss_and_grad(pred_depth: np.ndarray, true_depth: np.ndarray, valid: np.ndarray):
    """Mean over the batch of squared depth error on valid rays; invalid rays contribute zero."""
    diff = np.where(valid, pred_depth - true_depth, 0.0)
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


# ---------------------------------------------------------------- gradients

def composite_backward(depths, deltas, density, color, background, far, grad_rgb, grad_alpha, grad_depth):
    """Exact gradients of `composite` w.r.t. per-sample density and colour.

    With s_i = sigma_i delta_i the weights telescope, w_i = exp(-S_i) - exp(-S_{i+1}),
    so dw_i/ds_i = T_{i+1} and dw_k/ds_i = -w_k for k > i.
    """
    optical = density * deltas
    inclusive = np.cumsum(optical, axis=1)
    transmittance = np.exp(-(inclusive - optical))
    weights = transmittance * -np.expm1(-optical)
    alpha = weights.sum(axis=1)
    next_transmittance = np.exp(-inclusive)

    grad_w = np.einsum("rk,rnk->rn", grad_rgb, color)
    if background is not None:
        grad_w -= (grad_rgb @ np.asarray(background, dtype=np.float64))[:, None]
    grad_w += grad_alpha[:, None]

    # depth = sum(w t) / alpha; constant `far` once the ray is empty
    has_depth = alpha >= 1e-4
    safe_alpha = np.where(has_depth, alpha, 1.0)
    expected = (weights * depths).sum(axis=1) / safe_alpha
    grad_w += np.where(has_depth, grad_depth / safe_alpha, 0.0)[:, None] * (depths - expected[:, None])

    gw = grad_w * weights
    after = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1] - gw
    grad_optical = grad_w * next_transmittance - after

    grad_density = grad_optical * deltas
    grad_color = weights[..., None] * grad_rgb[:, None, :]
    return grad_density, grad_color


def backprop_ray(samples: RaySamples, grad_rgb, grad_alpha: float, grad_depth: float, background=None):
    """Per-sample (d sigma, d colour) for one ray given upstream gradients of (rgb, alpha, depth)."""
    grad_density, grad_color = composite_backward(
        samples.depths[None], samples.deltas[None], samples.density[None], samples.color[None], background,
        samples.far, np.asarray(grad_rgb, dtype=np.float64).reshape(1, 3),
        np.array([grad_alpha], dtype=np.float64), np.array([grad_depth], dtype=np.float64),
    )
    return grad_density[0], grad_color[0]


def scatter_to_voxels(field: VoxelField, batch: SampleBatch, grad_density: np.ndarray, grad_color: np.ndarray) -> dict:
    """Push per-sample gradients back through the trilinear weights onto the grid."""
    size = field.density.size
    index = batch.corner_index.reshape(-1)
    weight = batch.corner_weight.reshape(-1, 8)

    density_part = (weight * (grad_density.reshape(-1, 1) * batch.density_scale)).reshape(-1)
    voxel_density = np.bincount(index, weights=density_part, minlength=size)

    flat_color = grad_color.reshape(-1, 3)
    voxel_color = np.empty((size, 3))
    for channel in range(3):
        part = (weight * flat_color[:, channel:channel + 1]).reshape(-1)
        voxel_color[:, channel] = np.bincount(index, weights=part, minlength=size)

    return {
        "density": voxel_density.reshape(field.density.shape),
        "color": voxel_color.reshape(field.color.shape),
    }


def field_gradients(field: VoxelField, batch: SampleBatch, background, grad_rgb, grad_alpha, grad_depth) -> dict:
    grad_density, grad_color = composite_backward(
        batch.depths, batch.deltas, batch.density, batch.color, background, batch.far,
        grad_rgb, grad_alpha, grad_depth,
    )
    return scatter_to_voxels(field, batch, grad_density, grad_color)


# ---------------------------------------------------------------- Adam

def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> tuple:
    """Bias-corrected Adam, in place; `density` is clamped >= 0 and `color` to [0, 1] afterwards."""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"divergence: non-finite gradient for {name}")

    state.step += 1
    bc1 = 1.0 - cfg.adam_beta1 ** state.step
    bc2 = 1.0 - cfg.adam_beta2 ** state.step

    for name, grad in grads.items():
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros_like(params[name])
            state.second_moment[name] = np.zeros_like(params[name])
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= cfg.adam_beta1
        m += (1.0 - cfg.adam_beta1) * grad
        v *= cfg.adam_beta2
        v += (1.0 - cfg.adam_beta2) * (grad * grad)

        lr = cfg.learning_rate * (cfg.density_lr_scale if name == "density" else 1.0)
        params[name] -= (lr / bc1) * m / (np.sqrt(v / bc2) + cfg.adam_eps)

        if name == "density":
            np.maximum(params[name], 0.0, out=params[name])
        elif name == "color":
            np.clip(params[name], 0.0, 1.0, out=params[name])
    return params, state


# ---------------------------------------------------------------- training loops

def psnr_from_mse(mse: float) -> float:
    return 99.0 if mse < 1e-10 else float(10.0 * np.log10(1.0 / mse))


def initial_field(dataset: MultiViewDataset, cfg: TrainConfig) -> VoxelField:
    return VoxelField.constant(cfg.resolution, dataset.bounds_min, dataset.bounds_max, INIT_DENSITY, (INIT_COLOR,) * 3)


class _RayPool:
    """All pixels of all views flattened so rays can be drawn uniformly across the dataset."""

    def __init__(self, dataset: MultiViewDataset):
        origins, directions, rgb, alpha, depth = [], [], [], [], []
        self.view_slices = []
        start = 0
        for view in dataset.views:
            o, d = camera_rays(view.camera)
            origins.append(o)
            directions.append(d)
            rgb.append(view.rgb.reshape(-1, 3))
            alpha.append((view.alpha if view.alpha is not None else np.ones(view.rgb.shape[:2])).reshape(-1))
            depth.append((view.depth if view.depth is not None else np.zeros(view.rgb.shape[:2])).reshape(-1))
            self.view_slices.append(slice(start, start + len(o)))
            start += len(o)

        self.origins = np.concatenate(origins)
        self.directions = np.concatenate(directions)
        self.rgb = np.concatenate(rgb)
        self.alpha = np.concatenate(alpha)
        self.depth = np.concatenate(depth)

    def __len__(self) -> int:
        return len(self.origins)

    def replace_view(self, index: int, rgb: np.ndarray, alpha: np.ndarray) -> None:
        rows = self.view_slices[index]
        self.rgb[rows] = rgb.reshape(-1, 3)
        self.alpha[rows] = alpha.reshape(-1)


class _Trainer:
    def __init__(self, dataset: MultiViewDataset, cfg: TrainConfig, field: Optional[VoxelField] = None):
        if len(dataset) == 0:
            raise ValueError("cannot train on an empty dataset")
        self.cfg = cfg
        self.field = field.copy() if field is not None else initial_field(dataset, cfg)
        self.pool = _RayPool(dataset)
        self.render_cfg = RenderConfig(cfg.samples_per_ray, cfg.jitter, None, cfg.rng_seed, dataset.near, dataset.far)
        self.state = AdamState()
        self.trace = TrainingTrace()
        self.iteration = 0
        self._ray_rng = seeded_rng(cfg.rng_seed, _RAY_STREAM)
        self._jitter_rng = seeded_rng(cfg.rng_seed, _JITTER_STREAM)

    def _draw_batch(self):
        rows = self._ray_rng.integers(0, len(self.pool), size=self.cfg.rays_per_batch)
        offsets = self._jitter_rng.random((len(rows), self.cfg.samples_per_ray)) if self.cfg.jitter else None
        batch = march_rays(self.field, self.pool.origins[rows], self.pool.directions[rows], self.render_cfg, offsets)
        return rows, batch

    def _apply(self, grads: dict) -> None:
        params = {"density": self.field.density, "color": self.field.color}
        adam_step(params, grads, self.state, self.cfg)

    def run(self, iterations: Optional[int] = None) -> VoxelField:
        total = self.cfg.iterations if iterations is None else iterations
        for _ in range(total):
            self.step()
        return self.field

    def step(self) -> float:
        raise NotImplementedError


class ObjectFieldTrainer(_Trainer):
    """Fits the object field to RGBA views; resumable so the IDU loop can interleave edits."""

    def __init__(self, dataset: MultiViewDataset, cfg: TrainConfig, field: Optional[VoxelField] = None):
        super().__init__(dataset, cfg, field)
        self._background_rng = seeded_rng(cfg.rng_seed, _BACKGROUND_STREAM)

    def replace_view(self, index: int, rgb: np.ndarray, alpha: np.ndarray) -> None:
        self.pool.replace_view(index, rgb, alpha)

    def _background(self) -> np.ndarray:
        if self.cfg.random_background:
            return self._background_rng.random(3)
        return np.asarray(self.cfg.fixed_background, dtype=np.float64)

    def step(self) -> float:
        bg = self._background()
        rows, batch = self._draw_batch()
        rgb, alpha, depth, _, _ = composite(batch.depths, batch.deltas, batch.density, batch.color, bg, batch.far)

        loss, grad_rgb = photometric_loss_and_grad(rgb, self.pool.rgb[rows], self.pool.alpha[rows], bg)
        mse = loss
        if not np.isfinite(loss):
            raise DivergenceError(f"divergence: loss {loss} at iteration {self.iteration}")
        zeros = np.zeros(len(rows))
        grads = field_gradients(self.field, batch, bg, grad_rgb, zeros, zeros)
        self._apply(grads)

        self.iteration += 1
        self.trace.record(self.iteration, loss, psnr_from_mse(mse))
        if self.cfg.log_every and self.iteration % self.cfg.log_every == 0:
            logger.info(f"object field iter {self.iteration}: loss={loss:.6f} psnr={psnr_from_mse(mse):.2f}")
        return loss


class BackgroundFieldTrainer(_Trainer):
    """Fits the background field to inpainted RGB views plus true depth."""

    def __init__(self, dataset: MultiViewDataset, cfg: TrainConfig, field: Optional[VoxelField] = None):
        super().__init__(dataset, cfg, field)
        self.sky = np.asarray(dataset.background if dataset.background is not None else (0.0, 0.0, 0.0), dtype=np.float64)
        self.render_cfg = self.render_cfg.with_background(tuple(self.sky))

    def step(self) -> float:
        rows, batch = self._draw_batch()
        rgb, alpha, depth, _, _ = composite(batch.depths, batch.deltas, batch.density, batch.color, self.sky, batch.far)

        loss, grad_rgb = photometric_loss_and_grad(rgb, self.pool.rgb[rows], None, self.sky)
        mse = loss
        grad_depth = np.zeros(len(rows))
        true_depth = self.pool.depth[rows]
        valid = true_depth > 0
        depth_error = float(np.abs(depth - true_depth)[valid].mean()) if valid.any() else 0.0
        if self.cfg.depth_loss_weight > 0:
            d_loss, d_grad = depth_loss_and_grad(depth, true_depth, valid)
            loss += self.cfg.depth_loss_weight * d_loss
            grad_depth = self.cfg.depth_loss_weight * d_grad
        if not np.isfinite(loss):
            raise DivergenceError(f"divergence: loss {loss} at iteration {self.iteration}")

        grads = field_gradients(self.field, batch, self.sky, grad_rgb, np.zeros(len(rows)), grad_depth)
        self._apply(grads)

        self.iteration += 1
        self.trace.record(self.iteration, loss, psnr_from_mse(mse), depth_error)
        if self.cfg.log_every and self.iteration % self.cfg.log_every == 0:
            logger.info(f"background field iter {self.iteration}: loss={loss:.6f} depth_err={depth_error:.4f}")
        return loss


def train_object_field(dataset: MultiViewDataset, cfg: TrainConfig, field: Optional[VoxelField] = None,
                       trace: Optional[TrainingTrace] = None) -> VoxelField:
    logger.info(f"🚀 Training object field: {len(dataset)} views, {cfg.iterations} iterations")
    trainer = ObjectFieldTrainer(dataset, cfg, field)
    if trace is not None:
        trainer.trace = trace
    return trainer.run()


def train_background_field(dataset: MultiViewDataset, cfg: TrainConfig, field: Optional[VoxelField] = None,
                           trace: Optional[TrainingTrace] = None) -> VoxelField:
    logger.info(f"🚀 Training background field: {len(dataset)} views, {cfg.iterations} iterations")
    trainer = BackgroundFieldTrainer(dataset, cfg, field)
    if trace is not None:
        trainer.trace = trace
    return trainer.run()
