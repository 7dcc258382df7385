"""Textured digital terrain models from multi-view orbital imagery.

The package learns a continuous 2D height field and a matching color
field from a set of posed orbital images by differentiable volume
rendering, then samples both onto regular grids for export and
evaluation against reference terrain.
"""

from neuralterrain.errors import ConfigError, TrainingDiverged
from neuralterrain.estimator import NeuralTerrainMap
from neuralterrain.geometry import (
    Locus,
    LinescanCamera,
    PinholeCamera,
    SceneFrame,
    clip_to_box,
    look_at_rotation,
)
from neuralterrain.grids import TerrainGrid, error_stats, footprint_union_mask
from neuralterrain.synthetic import AnalyticTerrain, synthesize_dataset
from neuralterrain.datasets import TerrainDataset

__version__ = "0.1.0"

__all__ = [
    "AnalyticTerrain",
    "ConfigError",
    "LinescanCamera",
    "Locus",
    "NeuralTerrainMap",
    "PinholeCamera",
    "SceneFrame",
    "TerrainDataset",
    "TerrainGrid",
    "TrainingDiverged",
    "clip_to_box",
    "error_stats",
    "footprint_union_mask",
    "look_at_rotation",
    "synthesize_dataset",
    "__version__",
]
