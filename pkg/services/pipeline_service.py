"""
Pipeline Service - the stages behind each CLI subcommand.

Every stage reads its inputs from and writes its outputs to `cfg.out_dir`:

    data/{full,object,background}/   ground-truth datasets (gen-data)
    data/inpainted/                  background training views (inpaint)
    data/object_edited/              object views after editing (edit)
    ground_truth/*.rcvf              ground-truth fields (gen-data)
    checkpoints/*.rcvf               trained / edited fields (train, edit, edit-baseline)
    logs/*.csv                       metric logs
    renders/NNN.png, renders/depth/NNN.pfm
    renders_baseline/NNN.png         whole-scene edit (edit-baseline)
    report.json

so running the stages one by one gives the same files as `cmd_pipeline`.
"""
import json
import logging
import os
from dataclasses import replace
from typing import Optional

import numpy as np

from config import RENDER_SEED, SCENE_SEED, PipelineConfig
from field_engine.idu import (
    EditInstruction, IduDataset, KnownMaskSegmenter, builtin_editor, builtin_segmenter, idu_run,
)
from field_engine.optimizer import ObjectFieldTrainer, TrainingTrace, train_background_field, train_object_field
from field_engine.renderer import (
    RenderConfig, object_centroid, render_merged, render_object_only, render_view, unpremultiply,
)
from field_engine.scene import MultiViewDataset, SrtTransform, View
from services.checkpoint_service import load_field, save_field
from services.dataset_service import decode_png, encode_png, load_dataset, save_dataset, write_pfm
from services.editor_service import RemoteEditor, RemoteEndpoint, RemoteInpainter
from services.metrics_service import (
    edit_alignment, leakage, mask_iou, masked_psnr, mean_masked_color, psnr, temporal_consistency,
    write_metrics_log,
)
from services.synth_service import build_datasets, mask_from_alpha, oracle_inpaint

logger = logging.getLogger(__name__)

DATASETS = ("full", "object", "background")


class PipelineInputError(ValueError):
    """A stage input is missing; names the path and the stage that produces it."""


def _require(path: str, producer: str) -> str:
    if not os.path.exists(path):
        raise PipelineInputError(f"missing input {path} (run '{producer}' first)")
    return path


def _render_config(cfg: PipelineConfig, background) -> RenderConfig:
    render_cfg = cfg.scene.render_config(background, cfg.stage_seed(RENDER_SEED))
    if cfg.render.samples_per_ray is not None:
        render_cfg = replace(render_cfg, samples_per_ray=int(cfg.render.samples_per_ray))
    return render_cfg


def _write_png(path: str, rgb, alpha=None) -> None:
    with open(path, "wb") as f:
        f.write(encode_png(rgb, alpha))


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(cfg: PipelineConfig) -> dict:
    """Ground-truth fields and the full / object / background datasets."""
    cfg.scene.validate()
    logger.info(f"🚀 Generating synthetic scene (seed={cfg.seed})")
    fields, datasets = build_datasets(cfg.scene, cfg.stage_seed(SCENE_SEED))

    for name in DATASETS:
        save_dataset(datasets[name], cfg.path("data", name))
        save_field(fields[name], cfg.path("ground_truth", f"{name}.rcvf"))

    full = datasets["full"]
    manifest = {
        "views": len(full),
        "image_size": [cfg.scene.width, cfg.scene.height],
        "resolution": list(fields["full"].resolution),
        "datasets": {name: cfg.path("data", name) for name in DATASETS},
        "masks": all(v.mask is not None for v in full.views),
        "depth": all(v.depth is not None for v in full.views),
    }
    logger.info(f"✅ Wrote {len(full)} views per dataset to {cfg.path('data')}")
    return manifest


# ---------------------------------------------------------------- inpaint

def cmd_inpaint(cfg: PipelineConfig) -> dict:
    """Background training views: the full-scene images with the object region inpainted."""
    full = load_dataset(_require(cfg.path("data", "full"), "gen-data"))
    gt_path = cfg.path("data", "background")
    depth_source = load_dataset(gt_path) if os.path.exists(gt_path) else None

    if cfg.inpaint.kind == "oracle":
        gt_background = load_field(_require(cfg.path("ground_truth", "background.rcvf"), "gen-data"))
        render_cfg = _render_config(cfg, full.background)

        def inpaint(i, view):
            return oracle_inpaint(i, full, gt_background, render_cfg)
    else:
        inpainter = RemoteInpainter(RemoteEndpoint(**vars(cfg.inpaint.remote)))

        def inpaint(i, view):
            return inpainter.inpaint(view.rgb, view.mask)

    views = []
    for i, view in enumerate(full.views):
        if view.mask is None:
            raise PipelineInputError(f"view {i} of {cfg.path('data', 'full')} has no object mask")
        if depth_source is not None:
            depth = depth_source.views[i].depth
        elif view.depth is not None:
            # full-scene depth is only the background's where the object is absent
            depth = np.where(view.mask.data == 1, 0.0, view.depth)
        else:
            logger.warning(f"⚠️ No depth for view {i}; background training will use colour only")
            depth = None
        views.append(View(rgb=inpaint(i, view), camera=view.camera, mask=view.mask, depth=depth))

    dataset = MultiViewDataset(views, full.near, full.far, full.bounds_min, full.bounds_max, full.background, "background")
    save_dataset(dataset, cfg.path("data", "inpainted"))
    logger.info(f"✅ Inpainted {len(views)} views with the {cfg.inpaint.kind} inpainter")
    return {"views": len(views), "inpainter": cfg.inpaint.kind, "dataset": cfg.path("data", "inpainted")}


# ---------------------------------------------------------------- train

def cmd_train(cfg: PipelineConfig, target: str) -> dict:
    if target not in ("object", "background"):
        raise ValueError(f"train target must be 'object' or 'background', got {target!r}")

    trace = TrainingTrace()
    if target == "object":
        dataset = load_dataset(_require(cfg.path("data", "object"), "gen-data"))
        field = train_object_field(dataset, cfg.object_train_config(), trace=trace)
    else:
        dataset = load_dataset(_require(cfg.path("data", "inpainted"), "inpaint"))
        field = train_background_field(dataset, cfg.background_train_config(), trace=trace)

    checkpoint = cfg.path("checkpoints", f"{target}.rcvf")
    save_field(field, checkpoint)
    write_metrics_log(cfg.path("logs", f"{target}_train.csv"), trace.records)

    final_psnr = trace.records[-1]["psnr"] if trace.records else None
    logger.info(f"✅ {target} field trained; final psnr={final_psnr}")
    return {"checkpoint": checkpoint, "iterations": len(trace.records), "final_psnr": final_psnr}


# ---------------------------------------------------------------- edit

def _editor(cfg: PipelineConfig):
    if cfg.editor.kind == "remote":
        return RemoteEditor(RemoteEndpoint(**vars(cfg.editor.remote)))
    return builtin_editor(cfg.editor.kind, cfg.editor.params)


def _object_renders(field, cameras, render_cfg):
    renders = [render_object_only(field, None, camera, render_cfg) for camera in cameras]
    return [unpremultiply(r.rgb, r.alpha) for r in renders], [r.alpha for r in renders]


def cmd_edit(cfg: PipelineConfig) -> dict:
    """Run the iterative dataset update on the trained object field."""
    field = load_field(_require(cfg.path("checkpoints", "object.rcvf"), "train object"))
    source = load_dataset(_require(cfg.path("data", "object"), "gen-data"))
    schedule = cfg.idu_schedule()
    train_cfg = cfg.object_train_config()
    render_cfg = _render_config(cfg, None)
    target = cfg.editor.params.get("target")

    dataset = IduDataset.from_multiview(source)
    trainer = ObjectFieldTrainer(dataset.to_multiview(), train_cfg, field)
    records = []

    def on_iteration(outer, current, _dataset):
        last = trainer.trace.records[-1] if trainer.trace.records else {}
        row = {"iteration": outer + 1, "loss": last.get("loss"), "psnr": last.get("psnr")}
        if target is not None:
            rgbs, alphas = _object_renders(current, source.cameras, render_cfg)
            row["edit_alignment"] = edit_alignment(rgbs, alphas, target)
            logger.info(f"IDU iteration {outer + 1}: edit alignment {row['edit_alignment']:.4f}")
        records.append(row)

    instruction = EditInstruction(cfg.editor.instruction, dict(cfg.editor.params))
    edited, dataset = idu_run(field, dataset, _editor(cfg), builtin_segmenter(cfg.segmenter), schedule, train_cfg,
                              instruction, on_iteration, trainer)

    checkpoint = cfg.path("checkpoints", "object_edited.rcvf")
    save_field(edited, checkpoint)
    save_dataset(dataset.to_multiview(), cfg.path("data", "object_edited"))
    header = f"idu outer_iterations={schedule.outer_iterations} d={schedule.d} n={schedule.n} seed={schedule.rng_seed}"
    write_metrics_log(cfg.path("logs", "idu.csv"), records, header)

    summary = {"checkpoint": checkpoint, "outer_iterations": schedule.outer_iterations, "d": schedule.d, "n": schedule.n}
    if records and "edit_alignment" in records[-1]:
        summary["edit_alignment"] = records[-1]["edit_alignment"]
    return summary


def cmd_edit_baseline(cfg: PipelineConfig) -> dict:
    """Edit the whole scene instead of the object alone: reconstruct one field from the
    full-scene images and run the iterative dataset update on it with full-frame masks."""
    full = load_dataset(_require(cfg.path("data", "full"), "gen-data"))
    schedule = cfg.idu_schedule()
    train_cfg = cfg.object_train_config()

    dataset = IduDataset.from_multiview(full, full_frame=True)
    trainer = ObjectFieldTrainer(dataset.to_multiview(), train_cfg)
    trainer.run()
    save_field(trainer.field, cfg.path("checkpoints", "full.rcvf"))
    logger.info(f"Full-scene field reconstructed in {trainer.iteration} steps")

    # full masks never move, whatever the configured segmenter
    instruction = EditInstruction(cfg.editor.instruction, dict(cfg.editor.params))
    edited, dataset = idu_run(trainer.field, dataset, _editor(cfg), KnownMaskSegmenter(), schedule, train_cfg,
                              instruction, trainer=trainer)

    checkpoint = cfg.path("checkpoints", "full_edited.rcvf")
    save_field(edited, checkpoint)
    render_cfg = _render_config(cfg, full.background)
    out = cfg.path("renders_baseline")
    os.makedirs(out, exist_ok=True)
    for i, camera in enumerate(full.cameras):
        _write_png(os.path.join(out, f"{i:03d}.png"), render_view(edited, camera, render_cfg).rgb)

    logger.info(f"✅ Whole-scene edit rendered {len(full)} views to {out}")
    return {"checkpoint": checkpoint, "renders": out, "outer_iterations": schedule.outer_iterations}


# ---------------------------------------------------------------- compose

def _composition_fields(cfg: PipelineConfig):
    """(object field, background field) per `cfg.render.fields`."""
    if cfg.render.fields == "ground_truth":
        return (load_field(_require(cfg.path("ground_truth", "object.rcvf"), "gen-data")),
                load_field(_require(cfg.path("ground_truth", "background.rcvf"), "gen-data")))
    edited = cfg.path("checkpoints", "object_edited.rcvf")
    object_path = edited if os.path.exists(edited) else _require(cfg.path("checkpoints", "object.rcvf"), "train object")
    logger.info(f"Composing with object field {object_path}")
    return load_field(object_path), load_field(_require(cfg.path("checkpoints", "background.rcvf"), "train background"))


def build_transform(cfg: PipelineConfig, object_field) -> SrtTransform:
    t = cfg.transform
    centroid = t.centroid if t.centroid is not None else object_centroid(object_field)
    return SrtTransform.from_axis_angle(t.scale, t.axis, t.angle_degrees, t.translation, centroid)


def cmd_compose(cfg: PipelineConfig) -> dict:
    """Render every dataset camera through the depth-sorted merge of both fields."""
    object_field, background_field = _composition_fields(cfg)
    dataset = load_dataset(_require(cfg.path("data", "full"), "gen-data"))
    transform = build_transform(cfg, object_field)
    render_cfg = _render_config(cfg, dataset.background)

    out = cfg.path("renders")
    os.makedirs(os.path.join(out, "depth"), exist_ok=True)
    for i, camera in enumerate(dataset.cameras):
        rendered = render_merged(object_field, background_field, transform, camera, render_cfg)
        _write_png(os.path.join(out, f"{i:03d}.png"), rendered.rgb)
        write_pfm(os.path.join(out, "depth", f"{i:03d}.pfm"), rendered.depth)

    logger.info(f"✅ Rendered {len(dataset)} composed views to {out}")
    return {"renders": out, "views": len(dataset), "transform_identity": transform.is_identity}


# ---------------------------------------------------------------- eval

def _load_renders(directory: str, count: int, producer: str = "compose") -> list:
    frames = []
    for i in range(count):
        path = _require(os.path.join(directory, f"{i:03d}.png"), producer)
        with open(path, "rb") as f:
            frames.append(decode_png(f.read())[0])
    return frames


def _background_psnr(renders: list, views: list) -> Optional[float]:
    """Mean PSNR outside the object masks: how much of the scene an edit left untouched."""
    scores = [masked_psnr(render, view.rgb, view.mask.data == 0) for render, view in zip(renders, views)
              if view.mask is not None and (view.mask.data == 0).any()]
    return float(np.mean(scores)) if scores else None


def cmd_eval(cfg: PipelineConfig) -> dict:
    reference = load_dataset(_require(cfg.evaluation.reference or cfg.path("data", "full"), "gen-data"))
    renders = _load_renders(cfg.evaluation.renders or cfg.path("renders"), len(reference))

    per_view = [psnr(render, view.rgb) for render, view in zip(renders, reference.views)]
    report = {
        "psnr_per_view": per_view,
        "mean_psnr": float(np.mean(per_view)),
        "temporal_consistency": temporal_consistency(renders) if len(renders) > 1 else None,
        "leakage": None,
        "mask_iou": None,
    }

    # reconstruction quality is judged on the unedited object field
    if cfg.render.fields == "ground_truth":
        object_field = load_field(_require(cfg.path("ground_truth", "object.rcvf"), "gen-data"))
    else:
        object_field = load_field(_require(cfg.path("checkpoints", "object.rcvf"), "train object"))
    render_cfg = _render_config(cfg, None)
    masked = [v for v in reference.views if v.mask is not None]
    if masked:
        alphas = [render_object_only(object_field, None, v.camera, render_cfg).alpha for v in masked]
        leaks = [leakage(a, v.mask) for a, v in zip(alphas, masked) if (v.mask.data == 0).any()]
        report["leakage"] = float(np.mean(leaks)) if leaks else None
        report["mask_iou"] = float(np.mean([mask_iou(mask_from_alpha(a), v.mask) for a, v in zip(alphas, masked)]))
    else:
        logger.warning("⚠️ Reference dataset has no masks; skipping leakage and mask IoU")

    edited_path = cfg.path("checkpoints", "object_edited.rcvf")
    target = cfg.editor.params.get("target")
    if target is not None and os.path.exists(edited_path):
        rgbs, alphas = _object_renders(load_field(edited_path), reference.cameras, render_cfg)
        report["edit_alignment"] = edit_alignment(rgbs, alphas, target)
        colors = [c for c in (mean_masked_color(rgb, a) for rgb, a in zip(rgbs, alphas)) if c is not None]
        report["edited_mean_color"] = np.mean(colors, axis=0).tolist() if colors else None

    report["background_psnr"] = _background_psnr(renders, reference.views)
    baseline_dir = cfg.path("renders_baseline")
    if os.path.isdir(baseline_dir):
        baseline = _load_renders(baseline_dir, len(reference), "edit-baseline")
        summary = {
            "mean_psnr": float(np.mean([psnr(r, v.rgb) for r, v in zip(baseline, reference.views)])),
            "background_psnr": _background_psnr(baseline, reference.views),
        }
        if target is not None and masked:
            covered = [r for r, v in zip(baseline, reference.views) if v.mask is not None]
            summary["edit_alignment"] = edit_alignment(covered, [v.mask.data for v in masked], target)
        report["baseline"] = summary

    path = cfg.path("report.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"✅ Report written to {path}: mean_psnr={report['mean_psnr']:.2f}")
    return report


# ---------------------------------------------------------------- pipeline

def cmd_pipeline(cfg: PipelineConfig) -> dict:
    logger.info(f"🚀 Full pipeline into {cfg.out_dir}")
    cmd_gen_data(cfg)
    cmd_inpaint(cfg)
    cmd_train(cfg, "object")
    cmd_train(cfg, "background")
    cmd_edit(cfg)
    if cfg.baseline:
        cmd_edit_baseline(cfg)
    cmd_compose(cfg)
    return cmd_eval(cfg)
