"""Batch construction, photometric loss and the optimization loop.

Training draws random pixel batches from all views, renders their rays
through the current height/color fields and takes one Adam step on an
L1 photometric loss plus the proposal-sampler consistency objective.
Field parameters and the opacity sharpness train at one learning rate,
proposal density proxies at another. Everything runs in float32 on a
seeded torch generator; with a fixed seed and thread count two runs
produce identical loss traces and parameters.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from neuralterrain.errors import TrainingDiverged
from neuralterrain.fields import ColorField, HeightField, OpacityScale
from neuralterrain.geometry import clip_to_box
from neuralterrain.rendering import (
    ProposalSampler,
    interlevel_consistency,
    render_rays,
)

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "RayPool",
    "PixelBatch",
    "build_ray_pool",
    "sample_batch",
    "l1_loss",
    "TrainState",
    "default_modules",
    "init_state",
    "train_step",
    "train_loop",
    "METRICS_COLUMNS",
]

METRICS_COLUMNS = ("iteration", "loss", "s", "mean_accumulation", "wall_time_s")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters.

    ``n_samples``, ``proposal_samples`` and ``interlevel_weight``
    control per-ray rendering during training; the rest is the loop
    itself. Adam runs with its standard moment constants.
    """

    iterations: int = 100000
    batch_size: int = 2048
    lr_fields: float = 3e-4
    lr_proposal: float = 1e-2
    seed: int = 0
    eval_every: int = 100
    checkpoint_every: int = 0
    n_samples: int = 32
    proposal_samples: tuple = (64, 32)
    interlevel_weight: float = 1.0

    def __post_init__(self):
        for name in ("iterations", "batch_size", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive count")
        for name in ("lr_fields", "lr_proposal"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")


@dataclass
class RayPool:
    """Every valid training ray of a dataset, normalized and flattened."""

    origins: torch.Tensor
    directions: torch.Tensor
    t_near: torch.Tensor
    t_far: torch.Tensor
    targets: torch.Tensor
    view_ids: torch.Tensor

    @property
    def n_rays(self):
        return self.origins.shape[0]


@dataclass
class PixelBatch:
    """One training batch: rays, their target colors and source views."""

    origins: torch.Tensor
    directions: torch.Tensor
    t_near: torch.Tensor
    t_far: torch.Tensor
    targets: torch.Tensor
    view_ids: torch.Tensor
    pixel_ids: torch.Tensor


def build_ray_pool(dataset, dtype=torch.float32):
    """Precompute the normalized ray pool for a dataset.

    Rays are clipped to the scene box in world coordinates, expressed in
    the normalized frame, and rays that miss the box are dropped (logged
    when any are). Targets outside [0, 1] are rejected.
    """
    frame = dataset.frame
    parts = {k: [] for k in ("o", "d", "tn", "tf", "c", "v")}
    dropped = 0
    for view_id, (camera, image) in enumerate(zip(dataset.cameras, dataset.images)):
        loci = camera.all_pixel_loci()
        clipped, valid = clip_to_box(loci, frame.bbox_min, frame.bbox_max)
        normalized = frame.normalize_locus(clipped)
        keep = valid.reshape(-1)
        dropped += int((~keep).sum())
        parts["o"].append(normalized.origins.reshape(-1, 3)[keep])
        parts["d"].append(normalized.directions.reshape(-1, 3)[keep])
        parts["tn"].append(normalized.t_near.reshape(-1)[keep])
        parts["tf"].append(normalized.t_far.reshape(-1)[keep])
        targets = np.asarray(image, dtype=np.float64).reshape(-1, dataset.channels)
        parts["c"].append(targets[keep])
        parts["v"].append(np.full(int(keep.sum()), view_id, dtype=np.int64))
    if dropped:
        logger.info("ray pool: dropped %d rays outside the scene box", dropped)
    pool = RayPool(
        origins=torch.from_numpy(np.concatenate(parts["o"])).to(dtype),
        directions=torch.from_numpy(np.concatenate(parts["d"])).to(dtype),
        t_near=torch.from_numpy(np.concatenate(parts["tn"])).to(dtype),
        t_far=torch.from_numpy(np.concatenate(parts["tf"])).to(dtype),
        targets=torch.from_numpy(np.concatenate(parts["c"])).to(dtype),
        view_ids=torch.from_numpy(np.concatenate(parts["v"])),
    )
    if pool.n_rays == 0:
        raise ValueError("no training rays intersect the scene box")
    if float(pool.targets.min()) < 0.0 or float(pool.targets.max()) > 1.0:
        raise ValueError("target colors must lie in [0, 1]")
    return pool


def sample_batch(pool, batch_size, generator=None, exhaustive=False):
    """Uniform pixel batch over the pool (or every pixel once).

    ``exhaustive=True`` returns all rays in index order, for tests and
    full evaluations; otherwise indices are drawn uniformly with
    replacement from the seeded generator.
    """
    if exhaustive:
        ids = torch.arange(pool.n_rays)
    else:
        ids = torch.randint(pool.n_rays, (batch_size,), generator=generator)
    return PixelBatch(
        origins=pool.origins[ids],
        directions=pool.directions[ids],
        t_near=pool.t_near[ids],
        t_far=pool.t_far[ids],
        targets=pool.targets[ids],
        view_ids=pool.view_ids[ids],
        pixel_ids=ids,
    )


def l1_loss(predicted, target):
    """Mean over the batch of per-pixel L1 color norms."""
    if predicted.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(predicted.shape)} vs {tuple(target.shape)}"
        )
    return (predicted - target).abs().sum(dim=-1).mean()


@dataclass
class TrainState:
    """Everything one optimization stream owns."""

    config: TrainConfig
    frame: object
    pool: RayPool
    height_field: HeightField
    color_field: ColorField
    opacity: OpacityScale
    sampler: ProposalSampler
    opt_fields: torch.optim.Optimizer
    opt_proposal: torch.optim.Optimizer
    generator: torch.Generator
    iteration: int = 0
    history: list = field(default_factory=list)
    history_rows: list = field(default_factory=list)


def default_modules(frame, channels, generator, dtype=torch.float32):
    """Full-size height/color fields, opacity scale and sampler.

    The height field starts as a flat plane at mid-box and the opacity
    sharpness starts with its logistic transition as wide as the
    normalized scene box height, so early gradients reach the terrain
    from anywhere in the box.
    """
    box_height = float(frame.normalize_height(frame.bbox_max[2]))
    return dict(
        height_field=HeightField(
            height_offset=box_height / 2.0, generator=generator, dtype=dtype
        ),
        color_field=ColorField(channels=channels, generator=generator, dtype=dtype),
        opacity=OpacityScale.for_box_height(box_height, dtype=dtype),
        sampler=ProposalSampler(generator=generator, dtype=dtype),
    )


def init_state(config, dataset, height_field=None, color_field=None,
               opacity=None, sampler=None, pool=None):
    """Build a :class:`TrainState`: modules, optimizers, ray pool, RNG.

    Any module left as None comes from :func:`default_modules` (with
    ``sampler`` the explicit string ``"none"`` disables proposal
    sampling entirely and rays are sampled uniformly).
    """
    generator = torch.Generator().manual_seed(config.seed)
    if pool is None:
        pool = build_ray_pool(dataset)
    defaults = None
    if height_field is None or color_field is None or opacity is None or (
        sampler is None
    ):
        defaults = default_modules(dataset.frame, dataset.channels, generator)
    height_field = height_field or defaults["height_field"]
    color_field = color_field or defaults["color_field"]
    opacity = opacity or defaults["opacity"]
    if sampler == "none":
        sampler = None
    elif sampler is None:
        sampler = defaults["sampler"]

    field_params = (
        list(height_field.parameters())
        + list(color_field.parameters())
        + list(opacity.parameters())
    )
    opt_fields = torch.optim.Adam(field_params, lr=config.lr_fields)
    opt_proposal = (
        torch.optim.Adam(sampler.parameters(), lr=config.lr_proposal)
        if sampler is not None
        else None
    )
    return TrainState(
        config=config,
        frame=dataset.frame,
        pool=pool,
        height_field=height_field,
        color_field=color_field,
        opacity=opacity,
        sampler=sampler,
        opt_fields=opt_fields,
        opt_proposal=opt_proposal,
        generator=generator,
    )


def _render_batch(state, batch, grad=True, generator=None):
    config = state.config
    ctx = torch.enable_grad() if grad else torch.no_grad()
    with ctx:
        out = render_rays(
            batch.origins,
            batch.directions,
            batch.t_near,
            batch.t_far,
            state.height_field,
            state.color_field,
            state.opacity(),
            n_samples=config.n_samples,
            jitter=True,
            generator=generator if generator is not None else state.generator,
            sampler=state.sampler,
        )
        photometric = l1_loss(out["color"], batch.targets)
        loss = photometric
        if out["proposal_stages"]:
            loss = loss + config.interlevel_weight * interlevel_consistency(
                out["t_bounds"], out["weights"], out["proposal_stages"]
            )
    return out, photometric, loss


def train_step(state, batch):
    """One optimization step; returns a metrics dict.

    Raises:
        TrainingDiverged: On a non-finite loss, with a snapshot of the
            iteration, batch pixel ids and current sharpness.
    """
    state.opt_fields.zero_grad(set_to_none=True)
    if state.opt_proposal is not None:
        state.opt_proposal.zero_grad(set_to_none=True)
    out, photometric, loss = _render_batch(state, batch)
    if not torch.isfinite(loss):
        snapshot = {
            "iteration": state.iteration,
            "pixel_ids": batch.pixel_ids.tolist(),
            "s": state.opacity.value,
            "loss": float(loss.detach()),
        }
        raise TrainingDiverged(
            f"non-finite loss at iteration {state.iteration}", snapshot
        )
    loss.backward()
    state.opt_fields.step()
    if state.opt_proposal is not None:
        state.opt_proposal.step()
    state.iteration += 1
    return {
        "loss": float(photometric.detach()),
        "total_loss": float(loss.detach()),
        "s": state.opacity.value,
        "mean_accumulation": float(out["accumulation"].detach().mean()),
    }


class _MetricsWriter:
    def __init__(self, path):
        self.rows = []
        self._file = open(path, "w", newline="") if path else None
        self._writer = None
        if self._file:
            self._writer = csv.writer(self._file)
            self._writer.writerow(METRICS_COLUMNS)

    def write(self, iteration, metrics, wall_time):
        self.rows.append(
            (
                iteration,
                metrics["loss"],
                metrics["s"],
                metrics["mean_accumulation"],
                wall_time,
            )
        )
        if self._writer:
            self._writer.writerow(
                (
                    iteration,
                    f"{metrics['loss']:.17g}",
                    f"{metrics['s']:.17g}",
                    f"{metrics['mean_accumulation']:.17g}",
                    f"{wall_time:.3f}",
                )
            )
            self._file.flush()

    def close(self):
        if self._file:
            self._file.close()


def train_loop(config, dataset, state=None, metrics_path=None,
               checkpoint_fn=None, progress=None):
    """Run the optimization loop and return the final state.

    Metrics rows land at iteration 0 (an evaluation-only row drawn from
    an independent generator, so the training stream is untouched) and
    after every ``eval_every`` steps: ``iterations / eval_every + 1``
    rows for divisible counts. ``checkpoint_fn(state, iteration)`` is
    invoked every ``checkpoint_every`` steps and once at the end; on a
    divergence abort the checkpoint callback also runs, then the error
    propagates.

    The wall_time_s column is informational and exempt from any
    bitwise-reproducibility expectation; all other columns are
    deterministic for a fixed seed and thread count.
    """
    if state is None:
        state = init_state(config, dataset)
    writer = _MetricsWriter(metrics_path)
    start = time.monotonic()

    # The iteration-0 row draws batch and jitter from a side generator so
    # the training stream starts identically with or without it.
    eval_generator = torch.Generator().manual_seed(config.seed + 0x9E37)
    eval_batch = sample_batch(state.pool, config.batch_size, eval_generator)
    out, photometric, _ = _render_batch(
        state, eval_batch, grad=False, generator=eval_generator
    )
    writer.write(
        0,
        {
            "loss": float(photometric),
            "s": state.opacity.value,
            "mean_accumulation": float(out["accumulation"].mean()),
        },
        time.monotonic() - start,
    )

    try:
        for k in range(1, config.iterations + 1):
            batch = sample_batch(state.pool, config.batch_size, state.generator)
            metrics = train_step(state, batch)
            if k % config.eval_every == 0 or k == config.iterations:
                writer.write(k, metrics, time.monotonic() - start)
                state.history.append({"iteration": k, **metrics})
            if progress is not None:
                progress(k, metrics)
            if (
                checkpoint_fn is not None
                and config.checkpoint_every
                and k % config.checkpoint_every == 0
            ):
                checkpoint_fn(state, k)
    except TrainingDiverged:
        if checkpoint_fn is not None:
            checkpoint_fn(state, state.iteration)
        raise
    finally:
        writer.close()
    already_saved = (
        config.checkpoint_every
        and config.iterations % config.checkpoint_every == 0
    )
    if checkpoint_fn is not None and not already_saved:
        checkpoint_fn(state, state.iteration)
    state.history_rows = writer.rows
    return state
