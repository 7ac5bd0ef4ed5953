"""
Pipeline configuration: one JSON document, nested dataclasses, dot-path overrides.

    {"seed": 3, "idu": {"d": 2}, "editor": {"kind": "recolor", "params": {"target": [0, 0, 1]}}}

Every field can be overridden from the command line as --section.field VALUE;
values are parsed as JSON and fall back to plain strings.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from field_engine.idu import IduSchedule
from field_engine.optimizer import FIELD_DENSITY_LR_SCALE, TrainConfig
from services.synth_service import SceneSpec, SceneSpecError

logger = logging.getLogger(__name__)

# offsets added to the global seed per stage
SCENE_SEED = 0
RENDER_SEED = 1
OBJECT_TRAIN_SEED = 2
BACKGROUND_TRAIN_SEED = 3
IDU_SEED = 4

EDITOR_KINDS = ("identity", "recolor", "hue_shift", "brighten", "remote")
SEGMENTER_KINDS = ("known_mask", "alpha_threshold")
INPAINTER_KINDS = ("oracle", "remote")


class ConfigError(ValueError):
    pass


@dataclass
class RemoteConfig:
    base_url: str
    timeout: float = 30.0
    max_retries: int = 3
    auth_token: Optional[str] = None


@dataclass
class EditorConfig:
    kind: str = "recolor"
    params: dict = field(default_factory=lambda: {"target": [0.1, 0.2, 0.9], "strength": 1.0})
    instruction: str = "recolor 0.1 0.2 0.9 1.0"
    remote: Optional[RemoteConfig] = None


@dataclass
class InpaintConfig:
    kind: str = "oracle"
    remote: Optional[RemoteConfig] = None


@dataclass
class TransformConfig:
    scale: float = 1.0
    axis: tuple = (0.0, 0.0, 1.0)
    angle_degrees: float = 0.0
    translation: tuple = (0.0, 0.0, 0.0)
    centroid: Optional[tuple] = None


@dataclass
class RenderSettings:
    samples_per_ray: Optional[int] = None    # None: the scene's own setting
    fields: str = "trained"                  # "trained" or "ground_truth"


@dataclass
class EvalConfig:
    renders: Optional[str] = None            # default <out>/renders
    reference: Optional[str] = None          # default <out>/data/full


def _object_train() -> TrainConfig:
    return TrainConfig(iterations=1000, resolution=(96, 96, 96), samples_per_ray=96,
                       density_lr_scale=FIELD_DENSITY_LR_SCALE)


def _background_train() -> TrainConfig:
    return TrainConfig(iterations=1000, resolution=(96, 96, 96), samples_per_ray=96, depth_loss_weight=0.05,
                       random_background=False, density_lr_scale=FIELD_DENSITY_LR_SCALE)


@dataclass
class PipelineConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    object_train: TrainConfig = field(default_factory=_object_train)
    background_train: TrainConfig = field(default_factory=_background_train)
    idu: IduSchedule = field(default_factory=IduSchedule)
    editor: EditorConfig = field(default_factory=EditorConfig)
    segmenter: str = "known_mask"
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)
    transform: TransformConfig = field(default_factory=TransformConfig)
    render: RenderSettings = field(default_factory=RenderSettings)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    baseline: bool = False                   # also edit the whole scene with full masks
    out_dir: str = "out"
    seed: int = 0

    def validate(self) -> None:
        if self.editor.kind not in EDITOR_KINDS:
            raise ConfigError(f"editor.kind must be one of {EDITOR_KINDS}, got {self.editor.kind!r}")
        if (self.editor.kind == "remote") != (self.editor.remote is not None):
            raise ConfigError("exactly one editor must be selected: set editor.remote only with editor.kind 'remote'")
        if self.segmenter not in SEGMENTER_KINDS:
            raise ConfigError(f"segmenter must be one of {SEGMENTER_KINDS}, got {self.segmenter!r}")
        if self.inpaint.kind not in INPAINTER_KINDS:
            raise ConfigError(f"inpaint.kind must be one of {INPAINTER_KINDS}, got {self.inpaint.kind!r}")
        if self.inpaint.kind == "remote" and self.inpaint.remote is None:
            raise ConfigError("inpaint.kind 'remote' needs inpaint.remote")
        if self.render.fields not in ("trained", "ground_truth"):
            raise ConfigError(f"render.fields must be 'trained' or 'ground_truth', got {self.render.fields!r}")
        if not isinstance(self.baseline, bool):
            raise ConfigError(f"baseline must be true or false, got {self.baseline!r}")
        if self.transform.scale <= 0:
            raise ConfigError("transform.scale must be > 0")
        try:
            self.scene.validate()
        except SceneSpecError as e:
            raise ConfigError(str(e)) from e

    def stage_seed(self, offset: int) -> int:
        return self.seed + offset

    def object_train_config(self) -> TrainConfig:
        return replace(self.object_train, rng_seed=self.stage_seed(OBJECT_TRAIN_SEED))

    def background_train_config(self) -> TrainConfig:
        return replace(self.background_train, rng_seed=self.stage_seed(BACKGROUND_TRAIN_SEED))

    def idu_schedule(self) -> IduSchedule:
        return replace(self.idu, rng_seed=self.stage_seed(IDU_SEED))

    def path(self, *parts: str) -> str:
        return os.path.join(self.out_dir, *parts)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- building

def _build(cls, data, where: str):
    """Recursively build dataclass `cls` from a dict, rejecting unknown keys."""
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    if cls is SceneSpec:
        try:
            return SceneSpec.from_dict(data)
        except (SceneSpecError, TypeError) as e:
            raise ConfigError(f"{where}: {e}") from e

    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown field(s) {sorted(unknown)}")

    kwargs = {}
    for name, value in data.items():
        nested = _NESTED.get((cls, name))
        if nested is not None and value is not None:
            value = _build(nested, value, f"{where}.{name}".lstrip("."))
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


_NESTED = {
    (PipelineConfig, "scene"): SceneSpec,
    (PipelineConfig, "object_train"): TrainConfig,
    (PipelineConfig, "background_train"): TrainConfig,
    (PipelineConfig, "idu"): IduSchedule,
    (PipelineConfig, "editor"): EditorConfig,
    (PipelineConfig, "inpaint"): InpaintConfig,
    (PipelineConfig, "transform"): TransformConfig,
    (PipelineConfig, "render"): RenderSettings,
    (PipelineConfig, "evaluation"): EvalConfig,
    (EditorConfig, "remote"): RemoteConfig,
    (InpaintConfig, "remote"): RemoteConfig,
}


def _defaults_dict() -> dict:
    return asdict(PipelineConfig())


def _merge(base: dict, update: dict) -> dict:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict) and key != "params":
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(args: list) -> dict:
    """['--idu.d', '2', '--editor.kind=identity'] -> {'idu.d': 2, 'editor.kind': 'identity'}"""
    overrides = {}
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--") or len(arg) == 2:
            raise ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, text = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"override {arg} needs a value")
            text = args[i + 1]
            i += 2
        overrides[key] = parse_value(text)
    return overrides


def apply_overrides(data: dict, overrides: dict) -> dict:
    data = json.loads(json.dumps(data))
    for dotted, value in overrides.items():
        keys = dotted.split(".")
        node = data
        for key in keys[:-1]:
            if node.get(key) is None:
                node[key] = {}
            node = node[key]
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted}: {key} is not a section")
        node[keys[-1]] = value
    return data


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> PipelineConfig:
    data = _defaults_dict()
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: malformed JSON ({e})") from e
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: expected a JSON object, got {type(user).__name__}")
        if isinstance(user.get("scene"), str):
            user["scene"] = _load_scene_file(user["scene"], os.path.dirname(path))
        data = _merge(data, user)
    if overrides:
        data = apply_overrides(data, overrides)

    cfg = _build(PipelineConfig, data, "")
    cfg.validate()
    logger.info(f"Config loaded (seed={cfg.seed}, out={cfg.out_dir})")
    return cfg


def _load_scene_file(path: str, base_dir: str) -> dict:
    full = path if os.path.isabs(path) else os.path.join(base_dir, path)
    if not os.path.exists(full):
        raise ConfigError(f"scene file not found: {full}")
    with open(full, "r", encoding="utf-8") as f:
        return json.load(f)
