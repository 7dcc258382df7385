"""On-disk and in-memory multi-view terrain datasets.

A dataset bundles the scene frame, the cameras, one image per view and
optionally a ground-truth height grid. The disk layout is a directory
with ``manifest.json`` (frame, cameras, relative file names), an
``images/`` folder of 8-bit PPM/PGM files, and ``truth_dtm.asc``.
Saving quantizes images to 8 bits, so pixel values round-trip to within
half a quantization step rather than bitwise; a fixed input produces a
bitwise-identical directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from neuralterrain import raster_io
from neuralterrain.geometry import SceneFrame, camera_from_dict

__all__ = ["TerrainDataset", "MANIFEST_NAME"]

MANIFEST_NAME = "manifest.json"
_FORMAT = "terrain-multiview"


@dataclass
class TerrainDataset:
    """Multi-view imagery of one scene with its acquisition geometry."""

    frame: SceneFrame
    cameras: list
    images: list
    channels: int
    truth_dtm: object = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("need exactly one image per camera")
        if not self.cameras:
            raise ValueError("dataset needs at least one view")
        for camera, image in zip(self.cameras, self.images):
            expected = (camera.height, camera.width, self.channels)
            if image.shape != expected:
                raise ValueError(
                    f"image shape {image.shape} does not match camera "
                    f"{expected}"
                )

    @property
    def n_views(self):
        return len(self.cameras)

    @property
    def n_pixels(self):
        return sum(im.shape[0] * im.shape[1] for im in self.images)

    def save(self, directory):
        """Write manifest, images and the ground-truth grid (if any)."""
        directory = Path(directory)
        (directory / "images").mkdir(parents=True, exist_ok=True)
        suffix = "pgm" if self.channels == 1 else "ppm"
        image_names = []
        for i, image in enumerate(self.images):
            name = f"images/view_{i:03d}.{suffix}"
            raster_io.write_image(directory / name, image)
            image_names.append(name)
        truth_name = None
        if self.truth_dtm is not None:
            truth_name = "truth_dtm.asc"
            raster_io.write_asc(directory / truth_name, self.truth_dtm)
        manifest = {
            "format": _FORMAT,
            "version": 1,
            "channels": self.channels,
            "scene_frame": self.frame.to_dict(),
            "cameras": [camera.to_dict() for camera in self.cameras],
            "images": image_names,
            "truth_dtm": truth_name,
            "info": self.info,
        }
        with open(directory / MANIFEST_NAME, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest_path = directory / MANIFEST_NAME
        if not manifest_path.is_file():
            raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
        with open(manifest_path) as f:
            manifest = json.load(f)
        if manifest.get("format") != _FORMAT:
            raise ValueError(
                f"{manifest_path} is not a {_FORMAT} manifest"
            )
        frame = SceneFrame.from_dict(manifest["scene_frame"])
        cameras = [camera_from_dict(d) for d in manifest["cameras"]]
        images = [
            raster_io.read_image(directory / name).astype(np.float32)
            for name in manifest["images"]
        ]
        truth = None
        if manifest.get("truth_dtm"):
            truth = raster_io.read_asc(directory / manifest["truth_dtm"])
        return cls(
            frame=frame,
            cameras=cameras,
            images=images,
            channels=int(manifest["channels"]),
            truth_dtm=truth,
            info=manifest.get("info", {}),
        )
