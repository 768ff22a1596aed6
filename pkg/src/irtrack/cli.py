"""Command line: generate -> track -> eval, plus the ablation table.

Exit codes: 0 ok, 2 config error, 3 input mismatch, 4 schema violation.
Log level comes from the IRTRACK_LOG environment variable.
"""
from __future__ import annotations

import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import click
import jsonschema
import numpy as np

from . import formats
from .experiments import recovery_suite
from .fitting import FitConfig, with_variant
from .geometry import InvalidArgument
from .metrics import EvalFrame, dumps_report, evaluate, format_table, report
from .pipeline import overlay_image, track_sequence
from .renderer import RenderSettings, read_ppm, write_ppm
from .synth import ScenarioConfig, corrupt_detections, render_sequence, sample_scene
from .tracker import AffinityConfig, TrackerConfig

log = logging.getLogger("irtrack")

EXIT_OK, EXIT_CONFIG, EXIT_MISMATCH, EXIT_SCHEMA = 0, 2, 3, 4
VARIANTS = ("full", "no-L_embed", "no-L_RGB", "no-L_perceptual", "no-schedule", "w_z=0")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config

_OBJ = {"type": "object"}
CONFIG_SCHEMAS = {
    "generate": {
        "type": "object",
        "required": ["output"],
        "additionalProperties": False,
        "properties": {"output": {"type": "string"}, "scenario": _OBJ,
                       "n_scenes": {"type": "integer", "minimum": 1}, "seed": {"type": "integer"}},
    },
    "track": {
        "type": "object",
        "required": ["input", "output"],
        "additionalProperties": False,
        "properties": {"input": {"type": "string"}, "output": {"type": "string"}, "fit": _OBJ,
                       "tracker": _OBJ, "render": _OBJ, "seed": {"type": "integer"}},
    },
    "ablate": {
        "type": "object",
        "required": ["seeds"],
        "additionalProperties": False,
        "properties": {"seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
                       "scenario": _OBJ, "fit": _OBJ, "tracker": _OBJ,
                       "variants": {"type": "array", "items": {"enum": list(VARIANTS)}},
                       "recovery_seeds": {"type": "array", "items": {"type": "integer"}},
                       "output": {"type": "string"}, "seed": {"type": "integer"}},
    },
}


def load_config(path, command: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: cannot read config ({exc.strerror})")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}")
    err = jsonschema.exceptions.best_match(
        jsonschema.Draft202012Validator(CONFIG_SCHEMAS[command]).iter_errors(cfg))
    if err is not None:
        where = "/" + "/".join(str(p) for p in err.absolute_path)
        raise CliError(EXIT_CONFIG, f"{path}: {where}: {err.message}")
    return cfg


def _build(kind, cls, d, path):
    try:
        return cls.from_dict(d) if hasattr(cls, "from_dict") else cls(**d)
    except (TypeError, InvalidArgument, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"{path}: /{kind}: {exc}")


def render_settings(d: dict, path="config") -> RenderSettings:
    d = dict(d)
    for key in ("light_dir", "patch"):
        if key in d:
            d[key] = tuple(d[key])
    return _build("render", RenderSettings, d, path)


# ---------------------------------------------------------------------------
# workers (top level so they pickle)

def _generate_one(args):
    scfg_dict, out_dir = args
    scfg = ScenarioConfig.from_dict(scfg_dict)
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    scene = sample_scene(scfg)
    frames = render_sequence(scene)
    dets = corrupt_detections(scene)
    formats.write_text(out / "scene.ndjson", formats.scene_to_text(scene))
    formats.write_text(out / "detections.ndjson",
                       formats.detections_to_text(dets, formats.config_hash(scfg.to_dict())))
    for k, img in enumerate(frames):
        write_ppm(out / "frames" / f"{k:06d}.ppm", img)
    return str(out)


def _scene_dirs(root: Path):
    if (root / "scene.ndjson").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "scene.ndjson").exists()) if root.is_dir() else []
    if not dirs:
        raise CliError(EXIT_MISMATCH, f"{root}: no scene.ndjson found")
    return dirs


def _read_scene(path: Path):
    try:
        return formats.scene_from_text(path.read_text())
    except formats.SchemaError as exc:
        raise CliError(EXIT_SCHEMA, f"{path}: {exc}")


def _track_one(args):
    scene_dir, out_dir, fit_d, trk_d, render_d, overlay = args
    scene_dir, out_dir = Path(scene_dir), Path(out_dir)
    scene = _read_scene(scene_dir / "scene.ndjson")
    try:
        _, dets = formats.detections_from_text((scene_dir / "detections.ndjson").read_text())
    except formats.SchemaError as exc:
        raise CliError(EXIT_SCHEMA, f"{scene_dir / 'detections.ndjson'}: {exc}")
    frame_files = sorted((scene_dir / "frames").glob("*.ppm"))
    if len(frame_files) != len(dets):
        raise CliError(EXIT_MISMATCH, f"{scene_dir}: {len(frame_files)} frames but {len(dets)} detection records")
    frames = [read_ppm(p) for p in frame_files]
    cam = scene.camera
    for k, img in enumerate(frames):
        if img.shape[:2] != (cam.height, cam.width):
            raise CliError(EXIT_MISMATCH, f"{frame_files[k]}: size {img.shape[1]}x{img.shape[0]} "
                                          f"differs from camera {cam.width}x{cam.height}")
    fit_cfg = FitConfig.from_dict(fit_d)
    trk_cfg = TrackerConfig.from_dict(trk_d)
    settings = render_settings(render_d)
    records = track_sequence(frames, dets, cam, fit_cfg, trk_cfg, settings=settings)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_cfg = {"fit": fit_cfg.to_dict(), "tracker": trk_cfg.to_dict(), "render": render_d,
               "scene_hash": formats.config_hash(scene.config.to_dict())}
    formats.write_text(out_dir / "tracks.ndjson", formats.tracks_to_text(records, run_cfg))
    if overlay:
        (out_dir / "overlay").mkdir(exist_ok=True)
        for k, (img, recs) in enumerate(zip(frames, records)):
            write_ppm(out_dir / "overlay" / f"{k:06d}.ppm", overlay_image(img, recs, cam, settings=settings))
    return str(out_dir / "tracks.ndjson")


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# commands

def cmd_generate(config: str, seed=None, jobs: int = 1):
    cfg = load_config(config, "generate")
    scen = dict(cfg.get("scenario", {}))
    base_seed = seed if seed is not None else cfg.get("seed", scen.get("seed", 0))
    scen["seed"] = base_seed
    _build("scenario", ScenarioConfig, scen, config)
    n = cfg.get("n_scenes", 1)
    out = Path(cfg["output"])
    if n == 1:
        jobs_list = [(scen, str(out))]
    else:
        jobs_list = [({**scen, "seed": base_seed + i}, str(out / f"scene_{i:03d}")) for i in range(n)]
    return _map(_generate_one, jobs_list, jobs)


def cmd_track(config: str, overlay: bool = False, seed=None, jobs: int = 1):
    cfg = load_config(config, "track")
    fit_d = cfg.get("fit", {})
    trk_d = cfg.get("tracker", {})
    render_d = cfg.get("render", {})
    _build("fit", FitConfig, fit_d, config)
    _build("tracker", TrackerConfig, trk_d, config)
    render_settings(render_d, config)
    root = Path(cfg["input"])
    if not root.exists():
        raise CliError(EXIT_CONFIG, f"{config}: /input: path {root} does not exist")
    dirs = _scene_dirs(root)
    out = Path(cfg["output"])
    items = [(str(d), str(out if len(dirs) == 1 else out / d.name), fit_d, trk_d, render_d, overlay)
             for d in dirs]
    return _map(_track_one, items, jobs)


def _eval_pair(track_path: Path, scene_path: Path):
    scene = _read_scene(scene_path)
    try:
        _, tracks = formats.tracks_from_text(track_path.read_text())
    except formats.SchemaError as exc:
        raise CliError(EXIT_SCHEMA, f"{track_path}: {exc}")
    if tracks and len(tracks) != scene.n_frames:
        raise CliError(EXIT_MISMATCH, f"{track_path}: {len(tracks)} frames, scene has {scene.n_frames}")
    if not tracks:
        tracks = [[] for _ in range(scene.n_frames)]
    return [EvalFrame(scene.boxes(k), tracks[k]) for k in range(scene.n_frames)]


def cmd_eval(tracks: str, scene: str, output=None, radius: float = 2.0):
    tp, sp = Path(tracks), Path(scene)
    if tp.is_dir():
        pairs = {}
        for d in _scene_dirs(sp):
            t = tp / d.name / "tracks.ndjson" if (tp / d.name).exists() else tp / "tracks.ndjson"
            pairs[d.name] = _eval_pair(t, d / "scene.ndjson")
    else:
        spath = sp / "scene.ndjson" if sp.is_dir() else sp
        pairs = {spath.parent.name or "scene": _eval_pair(tp, spath)}
    rep, table = report(pairs, radius)
    if output:
        out = Path(output)
        out.mkdir(parents=True, exist_ok=True)
        formats.write_text(out / "report.json", dumps_report(rep))
        formats.write_text(out / "report.txt", table)
    return rep, table


def _ablate_scene(args):
    seed, scen, fit_d, trk_d, variant = args
    sc = ScenarioConfig.from_dict({**scen, "seed": seed})
    scene = sample_scene(sc)
    frames = render_sequence(scene)
    dets = corrupt_detections(scene)
    fit_cfg = with_variant(FitConfig.from_dict(fit_d), variant)
    trk_cfg = TrackerConfig.from_dict(trk_d)
    if variant == "w_z=0":
        trk_cfg = replace(trk_cfg, affinity=replace(trk_cfg.affinity, w_z=0.0))
    recs = track_sequence(frames, dets, scene.camera, fit_cfg, trk_cfg,
                          settings=RenderSettings(sharpness=sc.sharpness))
    return [EvalFrame(scene.boxes(k), recs[k]) for k in range(scene.n_frames)]


def _ablate_recovery(args):
    seeds, fit_d, variant = args
    fit_cfg = with_variant(FitConfig.from_dict(fit_d), variant)
    return recovery_suite(seeds, fit_cfg)["iou"]


def cmd_ablate(config: str, variants=None, seed=None, jobs: int = 1):
    cfg = load_config(config, "ablate")
    scen = cfg.get("scenario", {})
    fit_d = cfg.get("fit", {})
    trk_d = cfg.get("tracker", {})
    _build("scenario", ScenarioConfig, scen, config)
    _build("fit", FitConfig, fit_d, config)
    _build("tracker", TrackerConfig, trk_d, config)
    names = list(variants) if variants else list(cfg.get("variants", VARIANTS))
    for v in names:
        if v not in VARIANTS:
            raise CliError(EXIT_CONFIG, f"{config}: /variants: unknown variant {v!r}")
    seeds = list(cfg["seeds"])
    if seed is not None:
        seeds = [seed + s for s in seeds]
    rec_seeds = cfg.get("recovery_seeds", [])
    rows = {}
    for v in names:
        seqs = _map(_ablate_scene, [(s, scen, fit_d, trk_d, v) for s in seeds], jobs)
        m = evaluate(seqs)
        row = {k: m[k] for k in ("amota", "mota", "recall", "idsw")}
        if rec_seeds:
            row["mask_iou"] = _ablate_recovery((rec_seeds, fit_d, v))
        rows[v] = row
    cols = ["amota", "mota", "recall", "idsw"] + (["mask_iou"] if rec_seeds else [])
    width = max(len("variant"), *(len(v) for v in names))
    lines = ["variant".ljust(width) + "".join(c.upper().rjust(10) for c in cols)]
    lines.append("-" * len(lines[0]))
    for v in names:
        cells = "".join(("%10d" % rows[v][c]) if c == "idsw" else ("%10.4f" % rows[v][c]) for c in cols)
        lines.append(v.ljust(width) + cells)
    table = "\n".join(lines) + "\n"
    if cfg.get("output"):
        out = Path(cfg["output"])
        out.mkdir(parents=True, exist_ok=True)
        formats.write_text(out / "ablation.json", json.dumps(rows, indent=2, sort_keys=True) + "\n")
        formats.write_text(out / "ablation.txt", table)
    return rows, table


# ---------------------------------------------------------------------------
# click wiring

def _setup_logging():
    level = os.environ.get("IRTRACK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _run(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except CliError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.code)


@click.group()
def main():
    """Inverse-rendering 3D multi-object tracker on synthetic scenes."""
    _setup_logging()


@main.command()
@click.option("--config", "config", required=True, type=click.Path(), help="generate config (JSON)")
@click.option("--seed", type=int, default=None, help="overrides the config seed")
@click.option("--jobs", type=int, default=1, show_default=True)
def generate(config, seed, jobs):
    """Sample scenes, render frames and corrupt detections."""
    for path in _run(cmd_generate, config, seed, jobs):
        click.echo(path)


@main.command()
@click.option("--config", "config", required=True, type=click.Path())
@click.option("--overlay", is_flag=True, help="write fitted objects over faded input frames")
@click.option("--seed", type=int, default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
def track(config, overlay, seed, jobs):
    """Fit and track every scene under the configured input."""
    for path in _run(cmd_track, config, overlay, seed, jobs):
        click.echo(path)


@main.command("eval")
@click.option("--tracks", required=True, type=click.Path(exists=True))
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--output", type=click.Path(), default=None, help="directory for report.json / report.txt")
@click.option("--radius", type=float, default=2.0, show_default=True)
def eval_(tracks, scene, output, radius):
    """Score a TrackFile against its SceneFile."""
    _, table = _run(cmd_eval, tracks, scene, output, radius)
    click.echo(table, nl=False)


@main.command()
@click.option("--config", "config", required=True, type=click.Path())
@click.option("--variant", "variants", multiple=True, type=click.Choice(VARIANTS))
@click.option("--seed", type=int, default=None, help="offset added to every configured seed")
@click.option("--jobs", type=int, default=1, show_default=True)
def ablate(config, variants, seed, jobs):
    """Tabulate tracking metrics under loss/schedule/affinity variants."""
    _, table = _run(cmd_ablate, config, variants, seed, jobs)
    click.echo(table, nl=False)


if __name__ == "__main__":
    main()
