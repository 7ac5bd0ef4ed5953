"""
Field Engine - voxel radiance fields: scene types, rendering, optimisation and dataset updates
"""
from .scene import Camera, MultiViewDataset, SrtTransform, View, VoxelField, trilinear_query
from .renderer import RenderConfig, render_merged, render_object_only, render_view
from .optimizer import TrainConfig, train_background_field, train_object_field
from .idu import IduDataset, IduSchedule, idu_run

__all__ = [
    "Camera", "MultiViewDataset", "SrtTransform", "View", "VoxelField", "trilinear_query",
    "RenderConfig", "render_merged", "render_object_only", "render_view",
    "TrainConfig", "train_background_field", "train_object_field",
    "IduDataset", "IduSchedule", "idu_run",
]
