"""Command-line surface: init -> edit -> refine -> eval -> render.

Each command is a pure function of (config, seed, input files). Commands are
chained through stage manifests in the output directory; running a stage
whose prerequisite manifest is absent fails with a precondition error naming
the missing stage. Exit codes: 0 ok, 2 validation, 3 service, 4 numerical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import yaml

from . import config as cfgmod
from .cameras import orbit_camera
from .config import (
    ENV_GUIDANCE,
    PipelineConfig,
    build_guidance,
    manifest_path,
    require_stage,
    resolve_orbit,
    stage_scene_path,
    write_manifest,
)
from .edit import run_edit
from .errors import (
    NumericalError,
    PreconditionError,
    ServiceError,
    ValidationError,
)
from .guidance import OBJECT_TERM, substitute
from .metrics import evaluate_scene
from .pngio import load_png, save_png
from .ply import load_ply, save_ply
from .refine import run_refinement
from .render import SUBSET_ALL, render
from .roi import reinitialize_region
from .scene import GaussianScene


def _ensure_out_dir(cfg: PipelineConfig) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def _scene_with_editable_range(path: str, manifest: dict) -> GaussianScene:
    scene = load_ply(path)
    start, total = manifest["details"]["editable_range"]
    if total != len(scene):
        raise ValidationError(
            f"manifest records {total} Gaussians but {path} holds {len(scene)}")
    scene.editable_start = int(start)
    return scene


def _scene_frame(cfg: PipelineConfig, scene: GaussianScene):
    """(look-at target, size scale) from the box, else from scene extent."""
    if cfg.box is not None:
        diag = cfgmod.box_diagonal(cfg.box)
        if diag > 0:
            return cfgmod.roi_center(cfg.box), diag
    lo = scene.mu.min(axis=0)
    hi = scene.mu.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    return (lo + hi) / 2.0, diag if diag > 0 else 1.0


def cmd_init(cfg: PipelineConfig) -> dict:
    """Partition by the ROI box, resample it, write init.ply + manifest."""
    if cfg.box is None:
        raise ValidationError("init requires an ROI box")
    out_dir = _ensure_out_dir(cfg)
    scene = load_ply(cfg.scene_path)
    initialized = reinitialize_region(scene, cfg.box, cfg.init_policy,
                                      clamp_samples=cfg.clamp_samples)
    out_path = stage_scene_path(out_dir, "init")
    save_ply(initialized, out_path)
    details = {
        "editable_range": [initialized.editable_start, len(initialized)],
        "editable_count": initialized.n_editable,
        "frozen_count": initialized.editable_start,
        "input_count": len(scene),
        "box": {"min": cfg.box.min.tolist(), "max": cfg.box.max.tolist()},
        "policy": {
            "n_samples": cfg.init_policy.n_samples,
            "scale_mode": cfg.init_policy.scale_mode,
            "color_seed": cfg.init_policy.color_seed,
            "opacity_logit": cfg.init_policy.opacity_logit_init,
            "clamp_samples": cfg.clamp_samples,
        },
    }
    write_manifest(cfg, "init", inputs={"scene": cfg.scene_path},
                   outputs={"scene": out_path}, details=details)
    return details


def cmd_edit(cfg: PipelineConfig) -> dict:
    out_dir = _ensure_out_dir(cfg)
    init_manifest = require_stage(out_dir, "init")
    in_path = stage_scene_path(out_dir, "init")
    if not os.path.exists(in_path):
        raise PreconditionError("init")
    scene = _scene_with_editable_range(in_path, init_manifest)

    edit_cfg = cfg.edit
    edit_cfg.orbit = resolve_orbit(cfg)
    guidance = build_guidance(cfg)
    edited, trace = run_edit(scene, edit_cfg, cfg.prompts, guidance,
                             out_dir=out_dir)

    out_path = stage_scene_path(out_dir, "edit")
    trace_path = os.path.join(out_dir, "edit_trace.json")
    details = {
        "editable_range": [edited.editable_start, len(edited)],
        "iterations": edit_cfg.iterations,
        "steps_ok": sum(1 for r in trace if r.status == "ok"),
        "steps_skipped": sum(1 for r in trace if r.status == "skipped"),
        "steps_aborted": sum(1 for r in trace if r.status == "aborted"),
        "guidance": cfg.guidance_spec,
    }
    write_manifest(cfg, "edit", inputs={"scene": in_path},
                   outputs={"scene": out_path, "trace": trace_path},
                   details=details)
    return details


def cmd_refine(cfg: PipelineConfig) -> dict:
    out_dir = _ensure_out_dir(cfg)
    edit_manifest = require_stage(out_dir, "edit")
    in_path = stage_scene_path(out_dir, "edit")
    if not os.path.exists(in_path):
        raise PreconditionError("edit")
    scene = _scene_with_editable_range(in_path, edit_manifest)

    refine_cfg = cfg.refine
    refine_cfg.orbit = resolve_orbit(cfg)
    guidance = build_guidance(cfg)
    prompt_text = substitute(cfg.prompts.local, OBJECT_TERM)
    refined, rounds = run_refinement(scene, refine_cfg, prompt_text, guidance,
                                     out_dir=out_dir)

    out_path = stage_scene_path(out_dir, "refine")
    trace_path = os.path.join(out_dir, "refine_trace.json")
    details = {
        "editable_range": [refined.editable_start, len(refined)],
        "iterations": refine_cfg.iterations,
        "rounds": len(rounds),
        "color_only": refine_cfg.color_only,
        "prompt": prompt_text,
    }
    write_manifest(cfg, "refine", inputs={"scene": in_path},
                   outputs={"scene": out_path, "trace": trace_path},
                   details=details)
    return details


def cmd_eval(cfg: PipelineConfig) -> dict:
    out_dir = _ensure_out_dir(cfg)
    require_stage(out_dir, "edit")
    after_stage = "refine" if os.path.exists(manifest_path(out_dir, "refine")) \
        else "edit"
    after_path = stage_scene_path(out_dir, after_stage)
    if not os.path.exists(after_path):
        raise PreconditionError(after_stage)

    settings = cfg.eval_settings
    if settings.mode == "text" and (settings.caption_before is None
                                    or settings.caption_after is None):
        raise ValidationError(
            "eval mode 'text' needs both caption_before and caption_after")
    if settings.mode == "image" and settings.reference_image is None:
        raise ValidationError("eval mode 'image' needs reference_image")

    caption_before = settings.caption_before
    caption_after = settings.caption_after
    reference = settings.reference_image
    if settings.mode == "text":
        reference = None
    if settings.mode == "image":
        caption_before = caption_after = None

    before = load_ply(cfg.scene_path)
    after = load_ply(after_path)
    target, diag = _scene_frame(cfg, after)
    radius = settings.radius_scale * diag
    cameras = [
        orbit_camera(i * 360.0 / settings.n_views, settings.elevation_deg,
                     radius, target, width=settings.width,
                     height=settings.height)
        for i in range(settings.n_views)
    ]
    provider = build_guidance(cfg)
    reference_image = load_png(reference) if reference is not None else None
    report = evaluate_scene(
        before, after, cameras, provider,
        caption_before=caption_before, caption_after=caption_after,
        reference_image=reference_image,
    )
    report["scenes"] = {"before": os.path.basename(cfg.scene_path),
                        "after": os.path.basename(after_path)}

    report_path = os.path.join(out_dir, "eval_report.json")
    with open(report_path, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
    inputs = {"before": cfg.scene_path, "after": after_path}
    if reference is not None:
        inputs["reference"] = reference
    write_manifest(cfg, "eval", inputs=inputs,
                   outputs={"report": report_path},
                   details={"after_stage": after_stage,
                            "n_views": settings.n_views,
                            "modes": report["modes"]})
    return report


def cmd_render(cfg: PipelineConfig) -> str:
    out_dir = _ensure_out_dir(cfg)
    settings = cfg.render_settings
    stage = settings.stage
    if stage == "latest":
        stage = "input"
        for candidate in ("init", "edit", "refine"):
            if os.path.exists(manifest_path(out_dir, candidate)):
                stage = candidate
    if stage == "input":
        scene_path = cfg.scene_path
    else:
        require_stage(out_dir, stage)
        scene_path = stage_scene_path(out_dir, stage)
        if not os.path.exists(scene_path):
            raise PreconditionError(stage)
    scene = load_ply(scene_path)

    target, diag = _scene_frame(cfg, scene)
    radius = settings.radius if settings.radius is not None \
        else settings.radius_scale * diag
    cam = orbit_camera(settings.azimuth_deg, settings.elevation_deg, radius,
                       target, width=settings.width, height=settings.height,
                       fov_y_deg=settings.fov_y_deg)
    image = render(scene, cam, subset=SUBSET_ALL)
    out_path = os.path.join(out_dir, f"render_{stage}.png")
    save_png(image.pixels, out_path)
    write_manifest(cfg, "render", inputs={"scene": scene_path},
                   outputs={"image": out_path},
                   details={"stage": stage, "width": settings.width,
                            "height": settings.height,
                            "azimuth": settings.azimuth_deg,
                            "elevation": settings.elevation_deg,
                            "radius": radius})
    return out_path


COMMANDS = {
    "init": cmd_init,
    "edit": cmd_edit,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "render": cmd_render,
}


def _parse_xyz(text: str, flag: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise ValidationError(f"{flag} needs three comma-separated numbers")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ValidationError(f"{flag} needs numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gaussedit",
        description="Scene editing for 3D Gaussian splats: "
                    "init | edit | refine | eval | render",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--scene")
        p.add_argument("--output-dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--guidance")
        p.add_argument("--box-min")
        p.add_argument("--box-max")
        if name in ("edit", "refine"):
            p.add_argument("--iterations", type=int)
        if name == "eval":
            p.add_argument("--caption-before")
            p.add_argument("--caption-after")
            p.add_argument("--reference-image")
            p.add_argument("--mode")
            p.add_argument("--n-views", type=int)
        if name == "render":
            p.add_argument("--width", type=int)
            p.add_argument("--height", type=int)
            p.add_argument("--azimuth", type=float)
            p.add_argument("--elevation", type=float)
            p.add_argument("--radius", type=float)
            p.add_argument("--stage")
    return parser


def _apply_overrides(data: dict, args: argparse.Namespace) -> dict:
    """Merge CLI flags (absolute-path resolved) over the config mapping."""
    if args.scene is not None:
        data["scene"] = os.path.abspath(args.scene)
    if args.output_dir is not None:
        data["output_dir"] = os.path.abspath(args.output_dir)
    if args.seed is not None:
        data["seed"] = args.seed
    guidance = args.guidance
    if guidance is None and ENV_GUIDANCE in os.environ:
        guidance = os.environ[ENV_GUIDANCE]
    if guidance is not None:
        data["guidance"] = guidance
    if args.box_min is not None or args.box_max is not None:
        if args.box_min is None or args.box_max is None:
            raise ValidationError("--box-min and --box-max go together")
        data["box"] = {"min": _parse_xyz(args.box_min, "--box-min"),
                       "max": _parse_xyz(args.box_max, "--box-max")}
    if getattr(args, "iterations", None) is not None:
        section = data.setdefault(args.command, {})
        section["iterations"] = args.iterations
    if args.command == "eval":
        section = data.setdefault("eval", {})
        for flag, key in (("caption_before", "caption_before"),
                          ("caption_after", "caption_after"),
                          ("reference_image", "reference_image"),
                          ("mode", "mode"), ("n_views", "n_views")):
            value = getattr(args, flag)
            if value is not None:
                if key == "reference_image":
                    value = os.path.abspath(value)
                section[key] = value
    if args.command == "render":
        section = data.setdefault("render", {})
        for flag, key in (("width", "width"), ("height", "height"),
                          ("azimuth", "azimuth"), ("elevation", "elevation"),
                          ("radius", "radius"), ("stage", "stage")):
            value = getattr(args, flag)
            if value is not None:
                section[key] = value
    return data


def load_config_with_overrides(args: argparse.Namespace) -> PipelineConfig:
    path = os.fspath(args.config)
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except OSError as exc:
        raise ValidationError(f"cannot read config file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ValidationError(f"config file is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError("config file must contain a mapping")
    data = _apply_overrides(data, args)
    return cfgmod.build_config(
        data, base_dir=os.path.dirname(os.path.abspath(path)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config_with_overrides(args)
        result = COMMANDS[args.command](cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ServiceError as exc:
        print(f"service error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    if args.command == "render":
        print(result)
    else:
        print(f"{args.command}: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
