"""Command-line pipeline: synth, train, extract, render, eval.

Runs are driven by INI config files (sections ``dataset``, ``train``,
``model``, ``grid``, ``output``) with strict key checking: an unknown
section or key aborts before any compute. Every command writes a
``metadata.txt`` beside its outputs recording the tool version, seed
and a hash of the config it ran from. Exit codes: 0 success, 2
validation error, 3 runtime abort (diverged training).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from neuralterrain import __version__, raster_io
from neuralterrain.errors import ConfigError, TrainingDiverged
from neuralterrain.grids import GridSpec, error_stats, resample_grid
from neuralterrain.geometry import PinholeCamera, camera_from_dict, look_at_rotation

logger = logging.getLogger(__name__)

__all__ = ["main", "load_run_config", "RunConfig", "novel_view_camera"]


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text):
    return tuple(int(part) for part in text.replace(" ", "").split(",") if part)


def _parse_optional_int(text):
    return None if text.strip().lower() == "none" else int(text)


_SCHEMA = {
    "dataset": {"path": str},
    "train": {
        "iterations": int,
        "batch_size": int,
        "lr_fields": float,
        "lr_proposal": float,
        "seed": int,
        "eval_every": int,
        "checkpoint_every": int,
    },
    "model": {
        "n_samples": int,
        "use_sampler": _parse_bool,
        "proposal_samples": _parse_int_tuple,
        "interlevel_weight": float,
        "levels": int,
        "base_resolution": int,
        "max_resolution": int,
        "log2_table_size": int,
        "features_per_level": int,
        "height_hidden_dim": int,
        "height_layers": int,
        "height_skip_at": _parse_optional_int,
        "color_hidden_dim": int,
        "color_layers": int,
        "proposal_hidden_dim": int,
        "proposal_max_resolutions": _parse_int_tuple,
    },
    "grid": {
        "cell_size": float,
        "x_min": float,
        "y_min": float,
        "n_cols": int,
        "n_rows": int,
    },
    "output": {"directory": str},
}


@dataclass
class RunConfig:
    """Validated contents of a run config file."""

    dataset_path: str = None
    train: dict = None
    model: dict = None
    grid: dict = None
    out_dir: str = None
    config_hash: str = ""

    @property
    def seed(self):
        return self.train.get("seed", 0)

    def estimator_params(self):
        params = dict(self.train)
        params.update(self.model)
        return params

    def grid_spec(self, frame=None, cell_size=None):
        """Grid from the config (explicit or by cell size over the box)."""
        grid = dict(self.grid)
        if cell_size is not None:
            grid["cell_size"] = cell_size
        if {"x_min", "y_min", "n_cols", "n_rows"} <= grid.keys():
            return GridSpec(
                grid["x_min"], grid["y_min"], grid["cell_size"],
                grid["n_cols"], grid["n_rows"],
            )
        if "cell_size" not in grid:
            raise ConfigError("grid needs cell_size (or an explicit spec)")
        if frame is None:
            raise ConfigError("grid by cell_size needs a scene frame")
        return GridSpec.interior(
            frame.bbox_min[:2], frame.bbox_max[:2], grid["cell_size"]
        )


def load_run_config(path):
    """Parse and validate an INI run config; unknown keys are fatal."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc

    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"unknown config section [{section}]; expected one of "
                f"{sorted(_SCHEMA)}"
            )
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}]; expected one of "
                    f"{sorted(_SCHEMA[section])}"
                )
            try:
                values[section][key] = _SCHEMA[section][key](raw)
            except ValueError as exc:
                raise ConfigError(
                    f"bad value for {section}.{key}: {raw!r} ({exc})"
                ) from exc

    return RunConfig(
        dataset_path=values.get("dataset", {}).get("path"),
        train=values.get("train", {}),
        model=values.get("model", {}),
        grid=values.get("grid", {}),
        out_dir=values.get("output", {}).get("directory"),
        config_hash=hashlib.sha256(path.read_bytes()).hexdigest()[:16],
    )


def _write_metadata(directory, command, seed, config_hash="", extra=None):
    pairs = {
        "tool": "neuralterrain",
        "tool_version": __version__,
        "command": command,
        "seed": seed,
        "config_hash": config_hash,
    }
    if extra:
        pairs.update(extra)
    raster_io.write_sidecar(Path(directory) / "metadata.txt", metadata=pairs)


def _out_dir(args, config=None):
    out = args.out or (config.out_dir if config else None)
    if not out:
        raise ConfigError("no output directory (use --out or [output])")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def novel_view_camera(frame, off_nadir_deg=30.0, fov_deg=10.0, size=256,
                      channels=3, azimuth_deg=90.0):
    """Perspective camera looking at the scene center from off-nadir.

    The camera sits where the full box comfortably fits in the field of
    view, offset from the vertical by ``off_nadir_deg`` toward the
    compass ``azimuth_deg`` (default east).
    """
    extent = float(np.max(frame.extent[:2]))
    center = 0.5 * (frame.bbox_min + frame.bbox_max)
    distance = 0.65 * extent / math.tan(math.radians(fov_deg) / 2.0)
    tilt = math.radians(off_nadir_deg)
    azimuth = math.radians(azimuth_deg)
    offset = distance * np.array(
        [math.sin(tilt) * math.sin(azimuth), math.sin(tilt) * math.cos(azimuth),
         math.cos(tilt)]
    )
    position = center + offset
    return PinholeCamera(
        position=position,
        rotation=look_at_rotation(position, center),
        fov_deg=fov_deg,
        width=size,
        height=size,
        channels=channels,
    )


def cmd_synth(args):
    from neuralterrain.synthetic import synthesize_dataset

    out = _out_dir(args)
    dataset = synthesize_dataset(args.preset, seed=args.seed)
    dataset.save(out)
    _write_metadata(out, "synth", args.seed, extra={"preset": args.preset})
    print(f"wrote {dataset.n_views} views to {out}")
    return 0


def cmd_train(args):
    import torch

    from neuralterrain.estimator import NeuralTerrainMap

    config = load_run_config(args.config)
    if not config.dataset_path:
        raise ConfigError("config is missing [dataset] path")
    if not (Path(config.dataset_path) / "manifest.json").is_file():
        raise ConfigError(f"no dataset manifest in {config.dataset_path}")
    out = _out_dir(args, config)
    params = config.estimator_params()
    if args.seed is not None:
        params["seed"] = args.seed
    torch.set_num_threads(max(1, args.threads))

    estimator = NeuralTerrainMap(**params)
    checkpoint_dir = out / "checkpoints"
    try:
        estimator.fit(
            config.dataset_path,
            metrics_path=out / "metrics.csv",
            checkpoint_dir=(
                checkpoint_dir if params.get("checkpoint_every") else None
            ),
        )
    except TrainingDiverged as exc:
        # Salvage whatever state exists for diagnosis before aborting.
        snapshot_path = out / "divergence.json"
        with open(snapshot_path, "w") as f:
            json.dump(exc.snapshot, f, indent=2, default=str)
        logger.error("training diverged: %s (snapshot at %s)", exc, snapshot_path)
        raise
    estimator.save(out / "checkpoint.pt")
    _write_metadata(
        out, "train", params.get("seed", 0), config.config_hash,
        extra={"iterations": estimator.n_iterations_},
    )
    print(f"trained {estimator.n_iterations_} iterations; wrote {out}/checkpoint.pt")
    return 0


def cmd_extract(args):
    from neuralterrain.estimator import NeuralTerrainMap

    estimator = NeuralTerrainMap.load(args.checkpoint)
    config = load_run_config(args.config) if args.config else RunConfig(grid={})
    out = _out_dir(args, config if args.config else None)
    spec = config.grid_spec(frame=estimator.frame_, cell_size=args.cell_size)
    grid = estimator.extract_dtm(spec=spec, clip=not args.no_clip)

    raster_io.write_asc(out / "dtm.asc", grid)
    suffix = "pgm" if estimator.channels_ == 1 else "ppm"
    texture = np.where(grid.valid[..., None], grid.colors, 0.0)
    # Image rows run top to bottom; grid rows run south to north.
    raster_io.write_image(out / f"texture.{suffix}", texture[::-1])
    raster_io.write_sidecar(
        out / f"texture.{suffix}.txt", spec,
        metadata={"row0": "north", "masked_value": "black"},
    )
    _write_metadata(
        out, "extract", estimator.get_params()["seed"], config.config_hash,
        extra={"n_valid": grid.n_valid, "n_cells": grid.valid.size},
    )
    print(f"wrote {out}/dtm.asc ({grid.n_valid}/{grid.valid.size} cells valid)")
    return 0


def cmd_render(args):
    from neuralterrain.estimator import NeuralTerrainMap

    estimator = NeuralTerrainMap.load(args.checkpoint)
    out = _out_dir(args)
    if args.camera:
        with open(args.camera) as f:
            camera = camera_from_dict(json.load(f))
    else:
        camera = novel_view_camera(
            estimator.frame_, off_nadir_deg=args.off_nadir, fov_deg=args.fov,
            size=args.size, channels=estimator.channels_,
        )
    result = estimator.render(camera)

    suffix = "pgm" if estimator.channels_ == 1 else "ppm"
    raster_io.write_image(out / f"view.{suffix}", result["image"])
    depth = result["depth_m"]
    finite = np.isfinite(depth)
    lo = float(depth[finite].min()) if finite.any() else 0.0
    hi = float(depth[finite].max()) if finite.any() else 1.0
    span = hi - lo if hi > lo else 1.0
    raster_io.write_image(
        out / "depth.pgm", np.where(finite, (depth - lo) / span, 1.0)
    )
    raster_io.write_sidecar(
        out / "depth.pgm.txt",
        metadata={
            "depth_min_m": lo,
            "depth_max_m": hi,
            "invalid_value": "white",
        },
    )
    _write_metadata(out, "render", estimator.get_params()["seed"])
    print(f"wrote {out}/view.{suffix} and {out}/depth.pgm")
    return 0


def cmd_eval(args):
    dtm = raster_io.read_asc(args.dtm)
    reference = raster_io.read_asc(args.reference)
    if dtm.spec != reference.spec:
        logger.info("resampling DTM onto the reference grid")
        dtm = resample_grid(dtm, reference.spec)
    report = error_stats(dtm, reference, trim=args.trim)

    out = _out_dir(args)
    raster_io.write_histogram_csv(
        out / "histogram_trimmed.csv", report.bin_edges, report.bin_counts
    )
    raster_io.write_histogram_csv(
        out / "histogram_untrimmed.csv",
        report.untrimmed_bin_edges, report.untrimmed_bin_counts,
    )
    summary = report.summary()
    (out / "report.txt").write_text(summary + "\n")
    _write_metadata(out, "eval", 0, extra={"trim": args.trim})
    print(summary)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="neuralterrain",
        description="Learn and evaluate textured terrain maps from orbital imagery.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a dataset from a preset")
    p.add_argument("--preset", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="sample the DTM and texture to rasters")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--cell-size", type=float, default=None)
    p.add_argument("--no-clip", action="store_true",
                   help="skip footprint-union masking")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("render", help="render a novel view of the model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--camera", default=None,
                   help="camera JSON; default is an off-nadir view")
    p.add_argument("--off-nadir", type=float, default=30.0)
    p.add_argument("--fov", type=float, default=10.0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="compare a DTM raster to a reference")
    p.add_argument("--dtm", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--trim", type=float, default=0.02)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
