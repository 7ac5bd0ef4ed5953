"""
Scene primitives - voxel fields, cameras, rays, images, masks and the object transform.
Every other stage (rendering, training, editing, I/O) builds on these types.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

OBJECT = 1
BACKGROUND = 0

_ROTATION_TOL = 1e-6


def _check_rotation(rotation: np.ndarray, what: str) -> None:
    if not np.allclose(rotation @ rotation.T, np.eye(3), atol=_ROTATION_TOL):
        raise ValueError(f"{what} rotation is not orthonormal")
    if abs(np.linalg.det(rotation) - 1.0) > _ROTATION_TOL:
        raise ValueError(f"{what} rotation must have determinant +1")


@dataclass
class VoxelField:
    """Dense grid of (density, rgb) samples located on the grid nodes.

    Node (i, j, k) sits at bounds_min + (i, j, k) * spacing, so the first and
    last nodes lie exactly on the bounds. Single writer, many readers.
    """

    density: np.ndarray
    color: np.ndarray
    bounds_min: np.ndarray
    bounds_max: np.ndarray

    def __post_init__(self) -> None:
        self.density = np.asarray(self.density, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64).reshape(3)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64).reshape(3)

        if self.density.ndim != 3 or min(self.density.shape) < 2:
            raise ValueError(f"resolution must be >= 2 per axis, got {self.density.shape}")
        if self.color.shape != self.density.shape + (3,):
            raise ValueError(f"color shape {self.color.shape} does not match density {self.density.shape}")
        if np.any(self.bounds_min >= self.bounds_max):
            raise ValueError("bounds min must be < max componentwise")

    @classmethod
    def constant(cls, resolution, bounds_min, bounds_max, density: float = 0.01, color=(0.5, 0.5, 0.5)) -> "VoxelField":
        shape = tuple(int(n) for n in resolution)
        return cls(
            density=np.full(shape, float(density)),
            color=np.broadcast_to(np.asarray(color, dtype=np.float64), shape + (3,)).copy(),
            bounds_min=bounds_min,
            bounds_max=bounds_max,
        )

    @property
    def resolution(self) -> tuple:
        return self.density.shape

    @property
    def spacing(self) -> np.ndarray:
        return (self.bounds_max - self.bounds_min) / (np.asarray(self.resolution) - 1)

    def node_positions(self) -> np.ndarray:
        """World positions of every node, shaped (nx, ny, nz, 3)."""
        axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(self.bounds_min, self.bounds_max, self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def copy(self) -> "VoxelField":
        return VoxelField(self.density.copy(), self.color.copy(), self.bounds_min.copy(), self.bounds_max.copy())

    def clamp_(self) -> None:
        np.maximum(self.density, 0.0, out=self.density)
        np.clip(self.color, 0.0, 1.0, out=self.color)

    def corner_weights(self, points: np.ndarray):
        """Flat node indices and trilinear weights of the 8 corners around each point.

        Points outside the bounds get all-zero weights, so they read as empty space.
        Returns (index (M, 8) int64, weight (M, 8) float64).
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        res = np.asarray(self.resolution)
        g = (points - self.bounds_min) / self.spacing
        inside = np.all((g >= 0.0) & (g <= res - 1), axis=1)

        base = np.clip(np.floor(g), 0, res - 2).astype(np.int64)
        frac = g - base
        frac[~inside] = 0.0

        index = np.empty((len(points), 8), dtype=np.int64)
        weight = np.empty((len(points), 8), dtype=np.float64)
        stride_x = res[1] * res[2]
        stride_y = res[2]
        corner = 0
        for dx in (0, 1):
            wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
            for dy in (0, 1):
                wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
                for dz in (0, 1):
                    wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                    index[:, corner] = (base[:, 0] + dx) * stride_x + (base[:, 1] + dy) * stride_y + base[:, 2] + dz
                    weight[:, corner] = wx * wy * wz
                    corner += 1
        weight[~inside] = 0.0
        return index, weight

    def query(self, points: np.ndarray):
        """Vectorised trilinear lookup: (density (M,), color (M, 3))."""
        index, weight = self.corner_weights(points)
        density = np.einsum("mc,mc->m", weight, self.density.reshape(-1)[index])
        color = np.einsum("mc,mck->mk", weight, self.color.reshape(-1, 3)[index])
        return density, color


def trilinear_query(field: VoxelField, point) -> tuple:
    """Density and colour at a single world point; outside the bounds reads (0, black)."""
    density, color = field.query(np.asarray(point, dtype=np.float64).reshape(1, 3))
    return float(density[0]), color[0]


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. Camera frame: +z forward, x right, y down."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_world: np.ndarray = dataclass_field(default_factory=lambda: np.eye(4))

    def __post_init__(self) -> None:
        pose = np.asarray(self.cam_to_world, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "cam_to_world", pose)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        _check_rotation(pose[:3, :3], "camera")

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, fov_degrees: float, world_up=(0.0, 0.0, 1.0)) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(world_up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)

        pose = np.eye(4)
        pose[:3, 0] = right
        pose[:3, 1] = down
        pose[:3, 2] = forward
        pose[:3, 3] = eye

        focal = 0.5 * width / np.tan(0.5 * np.radians(fov_degrees))
        return cls(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0, width=width, height=height, cam_to_world=pose)

    def moved(self, pose: np.ndarray) -> "Camera":
        """Same intrinsics, new cam_to_world."""
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64).reshape(3))
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not 0 <= self.near < self.far:
            raise ValueError(f"invalid depth range [{self.near}, {self.far}]")


@dataclass
class RaySamples:
    """Samples along one ray; houses both object and background samples for merging."""

    depths: np.ndarray
    deltas: np.ndarray
    density: np.ndarray
    color: np.ndarray
    source: np.ndarray
    near: float
    far: float

    def __post_init__(self) -> None:
        self.depths = np.asarray(self.depths, dtype=np.float64)
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        self.density = np.asarray(self.density, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(-1, 3)
        self.source = np.asarray(self.source, dtype=np.int8)
        if np.any(self.deltas <= 0):
            raise ValueError("every sample delta must be positive")

    def __len__(self) -> int:
        return len(self.depths)

    def sorted(self) -> "RaySamples":
        """Stable depth sort; equal depths put background samples first."""
        order = np.lexsort((self.source, self.depths))
        return RaySamples(
            self.depths[order], self.deltas[order], self.density[order], self.color[order],
            self.source[order], self.near, self.far,
        )

    @staticmethod
    def union(a: "RaySamples", b: "RaySamples") -> "RaySamples":
        return RaySamples(
            np.concatenate([a.depths, b.depths]),
            np.concatenate([a.deltas, b.deltas]),
            np.concatenate([a.density, b.density]),
            np.concatenate([a.color, b.color]),
            np.concatenate([a.source, b.source]),
            min(a.near, b.near),
            max(a.far, b.far),
        )


@dataclass
class RgbaImage:
    """Straight (non-premultiplied) RGBA image."""

    rgb: np.ndarray
    alpha: np.ndarray

    def __post_init__(self) -> None:
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3 or self.alpha.shape != self.rgb.shape[:2]:
            raise ValueError(f"rgb {self.rgb.shape} and alpha {self.alpha.shape} do not form an RGBA image")
        if self.rgb.min(initial=0.0) < 0 or self.rgb.max(initial=0.0) > 1 or self.alpha.min(initial=0.0) < 0 or self.alpha.max(initial=0.0) > 1:
            raise ValueError("RGBA channels must lie in [0, 1]")

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    def copy(self) -> "RgbaImage":
        return RgbaImage(self.rgb.copy(), self.alpha.copy())


@dataclass
class MaskImage:
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not np.all((data == 0) | (data == 1)):
            raise ValueError("mask must be strictly binary")
        self.data = data.astype(np.uint8)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def full(cls, height: int, width: int) -> "MaskImage":
        return cls(np.ones((height, width), dtype=np.uint8))

    @classmethod
    def empty(cls, height: int, width: int) -> "MaskImage":
        return cls(np.zeros((height, width), dtype=np.uint8))


@dataclass(frozen=True)
class SrtTransform:
    """Uniform scale, rotation and translation applied about the centroid O."""

    scale: float = 1.0
    rotation: np.ndarray = dataclass_field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = dataclass_field(default_factory=lambda: np.zeros(3))
    centroid: np.ndarray = dataclass_field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "centroid", np.asarray(self.centroid, dtype=np.float64).reshape(3))
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        _check_rotation(self.rotation, "transform")

    @classmethod
    def identity(cls) -> "SrtTransform":
        return cls()

    @classmethod
    def from_axis_angle(cls, scale: float = 1.0, axis=(0.0, 0.0, 1.0), degrees: float = 0.0,
                        translation=(0.0, 0.0, 0.0), centroid=(0.0, 0.0, 0.0)) -> "SrtTransform":
        return cls(scale=float(scale), rotation=axis_angle_matrix(axis, degrees), translation=translation, centroid=centroid)

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and np.array_equal(self.rotation, np.eye(3)) and not np.any(self.translation)

    def to_canonical(self, points: np.ndarray) -> np.ndarray:
        """R^-1 ((p - t - O) / s) + O for rows of points."""
        local = (np.asarray(points, dtype=np.float64) - self.translation - self.centroid) / self.scale
        return local @ self.rotation + self.centroid

    def to_world(self, points: np.ndarray) -> np.ndarray:
        """R (p - O) s + O + t for rows of points."""
        local = (np.asarray(points, dtype=np.float64) - self.centroid) @ self.rotation.T
        return local * self.scale + self.centroid + self.translation

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous form of to_world."""
        matrix = np.eye(4)
        matrix[:3, :3] = self.scale * self.rotation
        matrix[:3, 3] = self.centroid + self.translation - self.scale * self.rotation @ self.centroid
        return matrix


def axis_angle_matrix(axis, degrees: float) -> np.ndarray:
    """Rodrigues rotation about `axis` by `degrees`."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if degrees == 0 or norm == 0:
        return np.eye(3)
    k = axis / norm
    theta = np.radians(degrees)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def srt_world_to_canonical(p, x: SrtTransform) -> np.ndarray:
    return x.to_canonical(np.asarray(p, dtype=np.float64).reshape(1, 3))[0]


def srt_canonical_to_world(p, x: SrtTransform) -> np.ndarray:
    return x.to_world(np.asarray(p, dtype=np.float64).reshape(1, 3))[0]


def srt_density_correction(x: SrtTransform) -> float:
    # keeps optical depth through the object unchanged when its extent grows by `scale`
    return 1.0 / x.scale


@dataclass
class View:
    """One captured viewpoint: rgb (+ optional alpha), camera, mask and depth."""

    rgb: np.ndarray
    camera: Camera
    alpha: Optional[np.ndarray] = None
    mask: Optional[MaskImage] = None
    depth: Optional[np.ndarray] = None

    def rgba(self) -> RgbaImage:
        alpha = self.alpha if self.alpha is not None else np.ones(self.rgb.shape[:2])
        return RgbaImage(self.rgb, alpha)


@dataclass
class MultiViewDataset:
    """Per-view images and cameras plus shared scene metadata."""

    views: list
    near: float
    far: float
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    background: Optional[tuple] = None
    kind: str = "full"

    def __post_init__(self) -> None:
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64).reshape(3)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64).reshape(3)
        for i, view in enumerate(self.views):
            if view.rgb.shape[:2] != (view.camera.height, view.camera.width):
                raise ValueError(f"view {i}: image {view.rgb.shape[:2]} does not match its camera")

    def __len__(self) -> int:
        return len(self.views)

    @property
    def cameras(self) -> list:
        return [view.camera for view in self.views]
