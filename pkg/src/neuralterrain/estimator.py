"""Scikit-learn style front end for the full map-building pipeline.

``NeuralTerrainMap`` bundles model construction, training, height and
color queries, novel-view rendering, grid extraction and checkpointing
behind a fit/predict interface. Constructor arguments are stored
verbatim (``get_params``/``set_params`` work as usual); everything
learned lives in trailing-underscore attributes after :meth:`fit`.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from neuralterrain import training
from neuralterrain.datasets import TerrainDataset
from neuralterrain.encoding import HashEncodingSpec
from neuralterrain.fields import ColorField, HeightField, OpacityScale
from neuralterrain.geometry import SceneFrame
from neuralterrain.grids import (
    GridSpec,
    TerrainGrid,
    extract_colors,
    extract_heights,
    footprint_union_mask,
)
from neuralterrain.rendering import ProposalSampler, render_rays

__all__ = ["NeuralTerrainMap", "CHECKPOINT_FORMAT"]

CHECKPOINT_FORMAT = "neuralterrain-checkpoint"


class NeuralTerrainMap(BaseEstimator):
    """Learn a textured height map from posed multi-view orbital imagery.

    Parameters mirror the training and architecture defaults of the
    method: a multi-resolution hash encoding feeding small MLP height
    and color fields, a learnable surface sharpness, and a two-stage
    proposal sampler, optimized with Adam on an L1 photometric loss.

    Args:
        iterations: Optimization steps.
        batch_size: Pixels per step.
        lr_fields: Learning rate for height/color/sharpness parameters.
        lr_proposal: Learning rate for proposal density proxies.
        seed: Seed for initialization, batching and sample jitter.
        eval_every: Metrics cadence (iterations).
        checkpoint_every: Checkpoint cadence in :meth:`fit` when a
            checkpoint directory is given; 0 disables periodic saves.
        n_samples: Render sample pairs per ray.
        proposal_samples: Pairs per proposal stage.
        interlevel_weight: Weight of the sampler consistency loss.
        use_sampler: Train with the proposal sampler; False renders
            from stratified uniform samples instead.
        levels, base_resolution, max_resolution, log2_table_size,
        features_per_level: Hash encoding shape shared by both fields.
        height_hidden_dim, height_layers, height_skip_at: Height MLP.
        color_hidden_dim, color_layers: Color MLP.
        proposal_hidden_dim, proposal_max_resolutions: Proxy shape.
    """

    def __init__(
        self,
        iterations=100000,
        batch_size=2048,
        lr_fields=3e-4,
        lr_proposal=1e-2,
        seed=0,
        eval_every=100,
        checkpoint_every=0,
        n_samples=32,
        proposal_samples=(64, 32),
        interlevel_weight=1.0,
        use_sampler=True,
        levels=16,
        base_resolution=8,
        max_resolution=5000,
        log2_table_size=19,
        features_per_level=2,
        height_hidden_dim=128,
        height_layers=8,
        height_skip_at=4,
        color_hidden_dim=128,
        color_layers=4,
        proposal_hidden_dim=16,
        proposal_max_resolutions=(64, 128),
    ):
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr_fields = lr_fields
        self.lr_proposal = lr_proposal
        self.seed = seed
        self.eval_every = eval_every
        self.checkpoint_every = checkpoint_every
        self.n_samples = n_samples
        self.proposal_samples = proposal_samples
        self.interlevel_weight = interlevel_weight
        self.use_sampler = use_sampler
        self.levels = levels
        self.base_resolution = base_resolution
        self.max_resolution = max_resolution
        self.log2_table_size = log2_table_size
        self.features_per_level = features_per_level
        self.height_hidden_dim = height_hidden_dim
        self.height_layers = height_layers
        self.height_skip_at = height_skip_at
        self.color_hidden_dim = color_hidden_dim
        self.color_layers = color_layers
        self.proposal_hidden_dim = proposal_hidden_dim
        self.proposal_max_resolutions = proposal_max_resolutions

    def _train_config(self):
        return training.TrainConfig(
            iterations=self.iterations,
            batch_size=self.batch_size,
            lr_fields=self.lr_fields,
            lr_proposal=self.lr_proposal,
            seed=self.seed,
            eval_every=self.eval_every,
            checkpoint_every=self.checkpoint_every,
            n_samples=self.n_samples,
            proposal_samples=tuple(self.proposal_samples),
            interlevel_weight=self.interlevel_weight,
        )

    def _build_modules(self, frame, channels):
        generator = torch.Generator().manual_seed(int(self.seed))
        spec = HashEncodingSpec(
            input_dims=2,
            levels=self.levels,
            base_resolution=self.base_resolution,
            max_resolution=self.max_resolution,
            log2_table_size=self.log2_table_size,
            features_per_level=self.features_per_level,
            domain=frame.norm_scale,
        )
        box_height = float(frame.normalize_height(frame.bbox_max[2]))
        height_field = HeightField(
            spec=spec,
            hidden_dim=self.height_hidden_dim,
            n_hidden=self.height_layers,
            skip_at=self.height_skip_at,
            height_offset=box_height / 2.0,
            generator=generator,
        )
        color_field = ColorField(
            spec=spec,
            channels=channels,
            hidden_dim=self.color_hidden_dim,
            n_hidden=self.color_layers,
            generator=generator,
        )
        opacity = OpacityScale.for_box_height(box_height)
        sampler = None
        if self.use_sampler:
            sampler = ProposalSampler(
                n_per_stage=tuple(self.proposal_samples),
                domain=frame.norm_scale,
                hidden_dim=self.proposal_hidden_dim,
                max_resolutions=tuple(self.proposal_max_resolutions),
                generator=generator,
            )
        return height_field, color_field, opacity, sampler

    @staticmethod
    def _as_dataset(X):
        if isinstance(X, TerrainDataset):
            return X
        if isinstance(X, (str, Path)):
            return TerrainDataset.load(X)
        raise TypeError(
            "fit expects a TerrainDataset or a dataset directory path, "
            f"got {type(X).__name__}"
        )

    def fit(self, X, y=None, metrics_path=None, checkpoint_dir=None):
        """Train on a :class:`TerrainDataset` (or dataset directory).

        Args:
            X: Dataset or path to one.
            y: Ignored (estimator API compatibility).
            metrics_path: Optional CSV path for the metrics stream.
            checkpoint_dir: Optional directory for periodic checkpoints
                (cadence ``checkpoint_every``) and the abort checkpoint
                on divergence.

        Returns:
            self
        """
        dataset = self._as_dataset(X)
        config = self._train_config()
        height_field, color_field, opacity, sampler = self._build_modules(
            dataset.frame, dataset.channels
        )
        self.frame_ = dataset.frame
        self.channels_ = dataset.channels
        self.height_field_ = height_field
        self.color_field_ = color_field
        self.opacity_ = opacity
        self.sampler_ = sampler
        z_mid = 0.5 * float(dataset.frame.bbox_min[2] + dataset.frame.bbox_max[2])
        self.footprints_ = [
            camera.footprint(plane_z=z_mid) for camera in dataset.cameras
        ]

        checkpoint_fn = None
        if checkpoint_dir is not None:
            checkpoint_dir = Path(checkpoint_dir)
            checkpoint_dir.mkdir(parents=True, exist_ok=True)

            def checkpoint_fn(state, iteration):
                self.n_iterations_ = state.iteration
                self.save(checkpoint_dir / f"checkpoint_{iteration:06d}.pt")

        state = training.train_loop(
            config,
            dataset,
            state=training.init_state(
                config,
                dataset,
                height_field=height_field,
                color_field=color_field,
                opacity=opacity,
                sampler=sampler if sampler is not None else "none",
            ),
            metrics_path=metrics_path,
            checkpoint_fn=checkpoint_fn,
        )
        self.history_ = state.history
        self.metrics_rows_ = state.history_rows
        self.n_iterations_ = state.iteration
        return self

    def _query(self, module, X, width):
        check_is_fitted(self, "height_field_")
        points = np.asarray(X, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2:
            raise ValueError("expected points of shape [n, 2] (world meters)")
        lifted = np.column_stack([points, np.zeros(points.shape[0])])
        normalized = self.frame_.normalize_points(lifted)[:, :2]
        out = np.empty((points.shape[0], width), dtype=np.float64)
        with torch.no_grad():
            for start in range(0, points.shape[0], 65536):
                sl = slice(start, start + 65536)
                chunk = torch.from_numpy(normalized[sl]).to(torch.float32)
                result = module(chunk)
                out[sl] = result.reshape(chunk.shape[0], width).numpy()
        return out

    def predict(self, X):
        """Terrain heights in meters at world ``[n, 2]`` (x, y) points."""
        check_is_fitted(self, "height_field_")
        heights = self._query(self.height_field_, X, 1)[:, 0]
        return self.frame_.denormalize_height(heights)

    def predict_color(self, X):
        """Surface colors in [0, 1] at world ``[n, 2]`` points."""
        check_is_fitted(self, "height_field_")
        return self._query(self.color_field_, X, self.channels_)

    def render(self, camera, n_samples=None, chunk=4096):
        """Render a camera view of the learned scene.

        Returns:
            Dict with ``image [h, w, channels]``, ``depth_m [h, w]``
            (nan where nothing accumulated), ``accumulation [h, w]``
            and ``valid [h, w]`` (rays that met the scene box).
        """
        check_is_fitted(self, "height_field_")
        from neuralterrain.geometry import clip_to_box

        n_samples = n_samples or self.n_samples
        loci = camera.all_pixel_loci()
        clipped, valid = clip_to_box(
            loci, self.frame_.bbox_min, self.frame_.bbox_max
        )
        normalized = self.frame_.normalize_locus(clipped)
        shape = (camera.height, camera.width)
        origins = torch.from_numpy(
            normalized.origins.reshape(-1, 3)
        ).to(torch.float32)
        directions = torch.from_numpy(
            normalized.directions.reshape(-1, 3)
        ).to(torch.float32)
        t_near = torch.from_numpy(normalized.t_near.reshape(-1)).to(torch.float32)
        t_far = torch.from_numpy(normalized.t_far.reshape(-1)).to(torch.float32)

        n = origins.shape[0]
        image = np.zeros((n, self.channels_), dtype=np.float64)
        depth = np.zeros(n, dtype=np.float64)
        accumulation = np.zeros(n, dtype=np.float64)
        flat_valid = valid.reshape(-1)
        # Rays that miss the box have collapsed spans; render the rest.
        hit_ids = np.flatnonzero(flat_valid)
        with torch.no_grad():
            for start in range(0, hit_ids.size, chunk):
                sel = hit_ids[start:start + chunk]
                ids = torch.from_numpy(sel)
                out = render_rays(
                    origins[ids],
                    directions[ids],
                    t_near[ids],
                    t_far[ids],
                    self.height_field_,
                    self.color_field_,
                    self.opacity_(),
                    n_samples=n_samples,
                    jitter=False,
                    sampler=self.sampler_,
                )
                image[sel] = out["color"].numpy()
                depth[sel] = out["depth"].numpy()
                accumulation[sel] = out["accumulation"].numpy()

        depth_m = np.where(
            flat_valid & (accumulation > 1e-6), depth / self.frame_.metric_scale,
            np.nan,
        )
        return {
            "image": image.reshape(*shape, self.channels_),
            "depth_m": depth_m.reshape(shape),
            "accumulation": accumulation.reshape(shape),
            "valid": valid.reshape(shape),
        }

    def grid_spec(self, cell_size):
        """Largest scene-box grid at ``cell_size`` meters.

        Cell centers all fall inside the box (extraction requires it),
        so up to one trailing cell per axis is dropped rather than
        letting the grid overhang the box.
        """
        check_is_fitted(self, "height_field_")
        return GridSpec.interior(
            self.frame_.bbox_min[:2], self.frame_.bbox_max[:2], cell_size
        )

    def extract_dtm(self, spec=None, cell_size=None, clip=True,
                    with_colors=True):
        """Sample the learned fields over a regular grid.

        Either ``spec`` or ``cell_size`` selects the grid. With
        ``clip=True`` cells outside the union of the training image
        footprints are masked invalid.

        Returns:
            :class:`TerrainGrid` with heights (and colors).
        """
        check_is_fitted(self, "height_field_")
        if spec is None:
            if cell_size is None:
                raise ValueError("pass either spec or cell_size")
            spec = self.grid_spec(cell_size)
        grid = extract_heights(self.predict, self.frame_, spec)
        colors = None
        if with_colors:
            colors = extract_colors(self.predict_color, self.frame_, spec)
        grid = TerrainGrid(spec, grid.heights, grid.valid, colors)
        if clip:
            grid = grid.masked(footprint_union_mask(self.footprints_, spec))
        return grid

    def save(self, path):
        """Write a checkpoint: constructor params, frame and weights."""
        check_is_fitted(self, "height_field_")
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "params": self.get_params(),
            "frame": self.frame_.to_dict(),
            "channels": self.channels_,
            "iteration": getattr(self, "n_iterations_", 0),
            "footprints": [np.asarray(f) for f in self.footprints_],
            "modules": {
                "height_field": self.height_field_.state_dict(),
                "color_field": self.color_field_.state_dict(),
                "opacity": self.opacity_.state_dict(),
                "sampler": (
                    self.sampler_.state_dict()
                    if self.sampler_ is not None
                    else None
                ),
            },
        }
        torch.save(payload, path)

    @classmethod
    def load(cls, path):
        """Rebuild a fitted estimator from :meth:`save` output."""
        payload = torch.load(path, weights_only=False)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        estimator = cls(**payload["params"])
        frame = SceneFrame.from_dict(payload["frame"])
        channels = int(payload["channels"])
        height_field, color_field, opacity, sampler = estimator._build_modules(
            frame, channels
        )
        modules = payload["modules"]
        height_field.load_state_dict(modules["height_field"])
        color_field.load_state_dict(modules["color_field"])
        opacity.load_state_dict(modules["opacity"])
        if sampler is not None and modules["sampler"] is not None:
            sampler.load_state_dict(modules["sampler"])
        estimator.frame_ = frame
        estimator.channels_ = channels
        estimator.height_field_ = height_field
        estimator.color_field_ = color_field
        estimator.opacity_ = opacity
        estimator.sampler_ = sampler
        estimator.footprints_ = [np.asarray(f) for f in payload["footprints"]]
        estimator.n_iterations_ = int(payload["iteration"])
        estimator.history_ = []
        estimator.metrics_rows_ = []
        return estimator
