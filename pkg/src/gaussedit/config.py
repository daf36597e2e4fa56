"""Pipeline configuration: YAML loading, strict validation, manifests.

A single YAML file drives every command. Sections mirror the stage configs;
CLI flags override file values, and the guidance endpoint can also come from
the GAUSSEDIT_GUIDANCE_URL environment variable (flag beats env beats file).

Each command writes a `<stage>_manifest.json` next to its outputs recording
the resolved-config hash, the seed, and content hashes of inputs and outputs.
Later stages refuse to run until their prerequisite manifest exists, and the
manifests contain no timestamps, so reruns are bit-identical.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .cameras import OrbitSpec
from .edit import EditConfig, PromptPair, TimestepSchedule
from .errors import FormatError, PreconditionError, ValidationError
from .guidance import AlternationSchedule, MockGuidance, Prompt, RemoteGuidance
from .pngio import load_png
from .refine import RefineConfig
from .roi import Aabb, InitPolicy

ENV_GUIDANCE = "GAUSSEDIT_GUIDANCE_URL"

STAGE_FILES = {
    "init": "init.ply",
    "edit": "edited.ply",
    "refine": "refined.ply",
}


def _take(section: dict, allowed: set, where: str) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ValidationError(f"config section {where!r} must be a mapping")
    unknown = set(section) - allowed
    if unknown:
        raise ValidationError(
            f"unknown keys in {where!r}: {', '.join(sorted(unknown))}")
    return section


def _pair(value, where: str) -> tuple[float, float]:
    try:
        lo, hi = value
        return float(lo), float(hi)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where} must be a [lo, hi] pair") from exc


@dataclass
class OrbitSettings:
    """Orbit shape relative to the ROI: radii scale with the box diagonal."""

    elevation_range_deg: tuple[float, float] = (-10.0, 45.0)
    radius_scale: tuple[float, float] = (1.2, 1.8)
    width: int = 64
    height: int = 64
    fov_y_deg: float = 50.0


@dataclass
class EvalSettings:
    mode: str | None = None  # "text" | "image"; None infers from inputs
    caption_before: str | None = None
    caption_after: str | None = None
    reference_image: str | None = None
    n_views: int = 8
    elevation_deg: float = 15.0
    radius_scale: float = 1.5
    width: int = 64
    height: int = 64


@dataclass
class RenderSettings:
    width: int = 512
    height: int = 512
    azimuth_deg: float = 30.0
    elevation_deg: float = 20.0
    radius: float | None = None  # absolute; default radius_scale x diagonal
    radius_scale: float = 1.5
    fov_y_deg: float = 50.0
    stage: str = "latest"  # input | init | edit | refine | latest


@dataclass
class PipelineConfig:
    scene_path: str
    output_dir: str
    seed: int = 0
    guidance_spec: str = "mock"
    guidance_gain: float | None = None
    box: Aabb | None = None
    init_policy: InitPolicy = field(default_factory=InitPolicy)
    clamp_samples: bool = False
    prompts: PromptPair = None
    orbit: OrbitSettings = field(default_factory=OrbitSettings)
    edit: EditConfig = field(default_factory=EditConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    eval_settings: EvalSettings = field(default_factory=EvalSettings)
    render_settings: RenderSettings = field(default_factory=RenderSettings)
    resolved: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        payload = json.dumps(self.resolved, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _parse_box(section) -> Aabb | None:
    if section is None:
        return None
    data = _take(section, {"min", "max"}, "box")
    if "min" not in data or "max" not in data:
        raise ValidationError("box needs both min and max")
    return Aabb(np.asarray(data["min"], dtype=np.float64),
                np.asarray(data["max"], dtype=np.float64))


def _parse_init(section, seed: int) -> tuple[InitPolicy, bool]:
    data = _take(section, {"n_samples", "scale_mode", "color_seed",
                           "opacity_logit", "clamp_samples"}, "init")
    policy = InitPolicy(
        n_samples=int(data.get("n_samples", InitPolicy.n_samples)),
        scale_mode=data.get("scale_mode", "UnitScale"),
        color_seed=int(data.get("color_seed", seed)),
        opacity_logit_init=float(data.get("opacity_logit",
                                          InitPolicy.opacity_logit_init)),
    )
    return policy, bool(data.get("clamp_samples", False))


def _parse_prompts(section) -> PromptPair:
    if section is None:
        return PromptPair(
            local=Prompt("a photo of OBJECT", "object", "object"),
            global_=Prompt("a scene containing OBJECT", "object", "object"),
        )
    data = _take(section, {"local_template", "global_template", "object_term",
                           "category_term", "negative"}, "prompts")
    for key in ("local_template", "global_template", "object_term",
                "category_term"):
        if key not in data:
            raise ValidationError(f"prompts section is missing {key!r}")
    negative = data.get("negative", "")
    return PromptPair(
        local=Prompt(data["local_template"], data["object_term"],
                     data["category_term"], negative),
        global_=Prompt(data["global_template"], data["object_term"],
                       data["category_term"], negative),
    )


def _parse_orbit(section) -> OrbitSettings:
    data = _take(section, {"elevation_range", "radius_scale", "width",
                           "height", "fov_y"}, "orbit")
    out = OrbitSettings()
    if "elevation_range" in data:
        out.elevation_range_deg = _pair(data["elevation_range"],
                                        "orbit.elevation_range")
    if "radius_scale" in data:
        out.radius_scale = _pair(data["radius_scale"], "orbit.radius_scale")
    out.width = int(data.get("width", out.width))
    out.height = int(data.get("height", out.height))
    out.fov_y_deg = float(data.get("fov_y", out.fov_y_deg))
    return out


def _parse_edit(section, seed: int) -> EditConfig:
    data = _take(section, {"p", "iterations", "lr_mu", "lr_scale", "lr_rot",
                           "lr_opacity", "lr_sh0", "t_schedule", "w_t",
                           "cfg_scale", "seed", "alternation",
                           "checkpoint_every", "max_consecutive_failures",
                           "background"}, "edit")
    kwargs = {}
    for key in ("p", "lr_mu", "lr_scale", "lr_rot", "lr_opacity", "lr_sh0",
                "cfg_scale"):
        if key in data:
            kwargs[key] = float(data[key])
    for key in ("iterations", "checkpoint_every", "max_consecutive_failures"):
        if key in data:
            kwargs[key] = int(data[key])
    if "w_t" in data:
        kwargs["w_t"] = str(data["w_t"])
    if "t_schedule" in data:
        ts = _take(data["t_schedule"], {"early", "late", "switch_at"},
                   "edit.t_schedule")
        kwargs["t_schedule"] = TimestepSchedule(
            early=_pair(ts.get("early", TimestepSchedule.early),
                        "edit.t_schedule.early"),
            late=_pair(ts.get("late", TimestepSchedule.late),
                       "edit.t_schedule.late"),
            switch_at=int(ts.get("switch_at", TimestepSchedule.switch_at)),
        )
    if "alternation" in data:
        try:
            m, n = data["alternation"]
        except (TypeError, ValueError) as exc:
            raise ValidationError("edit.alternation must be [m, n]") from exc
        kwargs["alternation"] = AlternationSchedule(int(m), int(n))
    if "background" in data:
        bg = data["background"]
        if not (isinstance(bg, (list, tuple)) and len(bg) == 3):
            raise ValidationError("edit.background must be [r, g, b]")
        kwargs["background"] = tuple(float(v) for v in bg)
    kwargs["seed"] = int(data.get("seed", seed))
    return EditConfig(**kwargs)


def _parse_refine(section, seed: int) -> RefineConfig:
    data = _take(section, {"iterations", "strength_t", "lambda",
                           "views_per_round", "color_only", "refresh_every",
                           "lr_sh0", "lr_opacity", "lr_mu", "lr_scale",
                           "lr_rot", "seed"}, "refine")
    kwargs = {}
    for key in ("strength_t", "lr_sh0", "lr_opacity", "lr_mu", "lr_scale",
                "lr_rot"):
        if key in data:
            kwargs[key] = float(data[key])
    for key in ("iterations", "views_per_round", "refresh_every"):
        if key in data:
            kwargs[key] = int(data[key])
    if "lambda" in data:
        kwargs["lambda_rec"] = float(data["lambda"])
    if "color_only" in data:
        kwargs["color_only"] = bool(data["color_only"])
    kwargs["seed"] = int(data.get("seed", seed))
    return RefineConfig(**kwargs)


def _parse_eval(section) -> EvalSettings:
    data = _take(section, {"mode", "caption_before", "caption_after",
                           "reference_image", "n_views", "elevation",
                           "radius_scale", "width", "height"}, "eval")
    out = EvalSettings()
    if "mode" in data:
        mode = str(data["mode"])
        if mode not in ("text", "image"):
            raise ValidationError("eval.mode must be 'text' or 'image'")
        out.mode = mode
    for key_src, key_dst in (("caption_before", "caption_before"),
                             ("caption_after", "caption_after"),
                             ("reference_image", "reference_image")):
        if key_src in data and data[key_src] is not None:
            setattr(out, key_dst, str(data[key_src]))
    out.n_views = int(data.get("n_views", out.n_views))
    if out.n_views < 1:
        raise ValidationError("eval.n_views must be >= 1")
    out.elevation_deg = float(data.get("elevation", out.elevation_deg))
    out.radius_scale = float(data.get("radius_scale", out.radius_scale))
    out.width = int(data.get("width", out.width))
    out.height = int(data.get("height", out.height))
    return out


def _parse_render(section) -> RenderSettings:
    data = _take(section, {"width", "height", "azimuth", "elevation",
                           "radius", "radius_scale", "fov_y", "stage"},
                 "render")
    out = RenderSettings()
    out.width = int(data.get("width", out.width))
    out.height = int(data.get("height", out.height))
    out.azimuth_deg = float(data.get("azimuth", out.azimuth_deg))
    out.elevation_deg = float(data.get("elevation", out.elevation_deg))
    if data.get("radius") is not None:
        out.radius = float(data["radius"])
    out.radius_scale = float(data.get("radius_scale", out.radius_scale))
    out.fov_y_deg = float(data.get("fov_y", out.fov_y_deg))
    stage = str(data.get("stage", out.stage))
    if stage not in ("input", "init", "edit", "refine", "latest"):
        raise ValidationError(f"render.stage {stage!r} is not a stage name")
    out.stage = stage
    return out


_TOP_KEYS = {"scene", "output_dir", "seed", "guidance", "guidance_gain",
             "box", "init", "prompts", "orbit", "edit", "refine", "eval",
             "render"}


def build_config(data: dict, base_dir: str = ".") -> PipelineConfig:
    """Validate a resolved config mapping and construct the typed config.

    Relative paths are taken relative to base_dir (the config file's
    directory). Referenced files must exist.
    """
    data = _take(data, _TOP_KEYS, "config")
    if "scene" not in data:
        raise ValidationError("config is missing 'scene'")
    if "output_dir" not in data:
        raise ValidationError("config is missing 'output_dir'")

    def _resolve(p):
        p = os.fspath(p)
        return p if os.path.isabs(p) else os.path.join(base_dir, p)

    seed = int(data.get("seed", 0))
    init_policy, clamp = _parse_init(data.get("init"), seed)
    cfg = PipelineConfig(
        scene_path=_resolve(data["scene"]),
        output_dir=_resolve(data["output_dir"]),
        seed=seed,
        guidance_spec=str(data.get("guidance", "mock")),
        guidance_gain=(float(data["guidance_gain"])
                       if data.get("guidance_gain") is not None else None),
        box=_parse_box(data.get("box")),
        init_policy=init_policy,
        clamp_samples=clamp,
        prompts=_parse_prompts(data.get("prompts")),
        orbit=_parse_orbit(data.get("orbit")),
        edit=_parse_edit(data.get("edit"), seed),
        refine=_parse_refine(data.get("refine"), seed),
        eval_settings=_parse_eval(data.get("eval")),
        render_settings=_parse_render(data.get("render")),
        resolved=copy.deepcopy(data),
    )

    if cfg.eval_settings.reference_image is not None:
        cfg.eval_settings.reference_image = _resolve(
            cfg.eval_settings.reference_image)

    # referenced files must exist up front
    if not os.path.exists(cfg.scene_path):
        raise ValidationError(f"scene file not found: {cfg.scene_path}")
    target = mock_target_path(cfg.guidance_spec)
    if target is not None and not os.path.exists(_resolve(target)):
        raise ValidationError(f"mock guidance target not found: {target}")
    if cfg.eval_settings.reference_image is not None and \
            not os.path.exists(cfg.eval_settings.reference_image):
        raise ValidationError(
            f"eval reference image not found: {cfg.eval_settings.reference_image}")
    if target is not None:
        cfg.guidance_spec = "mock:" + _resolve(target)
    return cfg


def load_config(path: str | os.PathLike) -> PipelineConfig:
    path = os.fspath(path)
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as exc:
        raise ValidationError(f"cannot read config file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise FormatError(f"config file is not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise FormatError("config file must contain a mapping")
    return build_config(data, base_dir=os.path.dirname(os.path.abspath(path)))


# --- guidance construction --------------------------------------------------

def mock_target_path(spec: str) -> str | None:
    """The target image path of a 'mock:<png>' spec, else None."""
    if spec.startswith("mock:") and spec != "mock:":
        return spec[len("mock:"):]
    return None


def build_guidance(cfg: PipelineConfig):
    spec = cfg.guidance_spec
    if spec in ("mock", "mock:"):
        return MockGuidance()
    target = mock_target_path(spec)
    if target is not None:
        image = load_png(target)
        gain = cfg.guidance_gain
        if gain is None:
            gain = 2.0 / image.size  # gradient of mean squared error
        return MockGuidance(target=image, gain=gain)
    if spec.startswith(("http://", "https://")):
        return RemoteGuidance(spec)
    raise ValidationError(
        f"guidance must be 'mock', 'mock:<target.png>' or an http(s) URL, "
        f"got {spec!r}")


# --- orbit/geometry resolution ----------------------------------------------

def box_diagonal(box: Aabb) -> float:
    return float(np.linalg.norm(box.max - box.min))


def roi_center(box: Aabb) -> np.ndarray:
    return (box.min + box.max) / 2.0


def resolve_orbit(cfg: PipelineConfig) -> OrbitSpec:
    """Absolute orbit around the ROI: radii are radius_scale x box diagonal."""
    if cfg.box is None:
        raise ValidationError("an ROI box is required to build the camera orbit")
    diag = box_diagonal(cfg.box)
    if diag <= 0:
        raise ValidationError("ROI box has zero diagonal")
    lo, hi = cfg.orbit.radius_scale
    return OrbitSpec(
        target=roi_center(cfg.box),
        elevation_range_deg=cfg.orbit.elevation_range_deg,
        radius_range=(lo * diag, hi * diag),
        width=cfg.orbit.width,
        height=cfg.orbit.height,
        fov_y_deg=cfg.orbit.fov_y_deg,
    )


# --- manifests ----------------------------------------------------------------

def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(out_dir: str, stage: str) -> str:
    return os.path.join(out_dir, f"{stage}_manifest.json")


def write_manifest(cfg: PipelineConfig, stage: str, inputs: dict,
                   outputs: dict, details: dict) -> str:
    """Record what a command consumed and produced, with content hashes."""
    manifest = {
        "stage": stage,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "inputs": {name: {"path": os.path.basename(os.fspath(p)),
                          "sha256": sha256_file(p)}
                   for name, p in inputs.items()},
        "outputs": {name: {"path": os.path.basename(os.fspath(p)),
                           "sha256": sha256_file(p)}
                    for name, p in outputs.items()},
        "details": details,
    }
    path = manifest_path(cfg.output_dir, stage)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


def require_stage(out_dir: str, stage: str) -> dict:
    """Load a prerequisite stage manifest or fail naming the absent stage."""
    path = manifest_path(out_dir, stage)
    if not os.path.exists(path):
        raise PreconditionError(stage)
    with open(path) as f:
        return json.load(f)


def stage_scene_path(out_dir: str, stage: str) -> str:
    return os.path.join(out_dir, STAGE_FILES[stage])
