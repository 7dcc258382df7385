"""Analytic terrains and exact synthetic data generation.

This module is the ground-truth oracle for the learned pipeline: terrain
heights are closed-form, ray intersections are found by marching plus
bisection to near machine precision, and whole acquisition passes
(frame-camera orbit strips, linescan swaths) are rendered directly from
the analytic scene. Everything here is numpy/float64 and independent of
the torch rendering stack, so the two paths can check each other.

Coordinates are world meters (see ``geometry`` for conventions).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from neuralterrain.errors import ConfigError
from neuralterrain.geometry import (
    LinescanCamera,
    PinholeCamera,
    SceneFrame,
    clip_to_box,
    look_at_rotation,
)
from neuralterrain.validation import ensure_array

logger = logging.getLogger(__name__)

__all__ = [
    "AnalyticTerrain",
    "ray_terrain_intersect",
    "render_ground_truth",
    "generate_pinhole_pass",
    "generate_linescan_pass",
    "nominal_gsd",
    "synthesize_dataset",
    "PRESET_NAMES",
]


def _lattice_hash(ix, iy, seed):
    # Deterministic pseudo-random values in [0, 1) on an integer lattice.
    v = np.sin(ix * 127.1 + iy * 311.7 + seed * 74.7) * 43758.5453
    return v - np.floor(v)


def _value_noise(x, y, seed):
    ix, iy = np.floor(x), np.floor(y)
    fx, fy = x - ix, y - iy
    sx = fx * fx * (3.0 - 2.0 * fx)
    sy = fy * fy * (3.0 - 2.0 * fy)
    v00 = _lattice_hash(ix, iy, seed)
    v10 = _lattice_hash(ix + 1, iy, seed)
    v01 = _lattice_hash(ix, iy + 1, seed)
    v11 = _lattice_hash(ix + 1, iy + 1, seed)
    return (v00 * (1 - sx) + v10 * sx) * (1 - sy) + (
        v01 * (1 - sx) + v11 * sx
    ) * sy


def _fractal_noise(x, y, seed, octaves=4):
    total = np.zeros_like(x)
    amplitude, norm = 1.0, 0.0
    for octave in range(octaves):
        total += amplitude * _value_noise(
            x * (2.0**octave), y * (2.0**octave), seed + 17.23 * octave
        )
        norm += amplitude
        amplitude *= 0.5
    return total / norm


@dataclass(frozen=True)
class AnalyticTerrain:
    """Closed-form terrain with a procedural texture.

    Kinds:
        ``plane``: constant height ``base_height``.
        ``gaussian_hills``: ``base_height`` plus a sum of Gaussian bumps
            ``(cx, cy, amplitude, width)`` (amplitude may be negative).
        ``crater``: parabolic bowl of ``crater_depth`` inside
            ``crater_radius`` plus a raised-cosine rim of height
            ``crater_rim_height`` and width ``crater_radius / 2``; the
            height at the centre is exactly ``base_height - crater_depth``.

    Textures (evaluated at the hit point's ``(x, y)``): ``checker``
    with ``texture_scale`` period, ``fractal`` value noise with base
    cell ``texture_scale``, or ``height_shaded`` gray by elevation.
    """

    kind: str = "plane"
    base_height: float = 0.0
    hills: tuple = ()
    crater_center: tuple = (0.0, 0.0)
    crater_radius: float = 1000.0
    crater_depth: float = 100.0
    crater_rim_height: float = 0.0
    texture: str = "fractal"
    texture_scale: float = 1000.0
    texture_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("plane", "gaussian_hills", "crater"):
            raise ValueError(f"unknown terrain kind {self.kind!r}")
        if self.texture not in ("checker", "fractal", "height_shaded"):
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.kind == "gaussian_hills":
            for hill in self.hills:
                if len(hill) != 4:
                    raise ValueError(
                        "each hill must be (cx, cy, amplitude, width)"
                    )
                if hill[3] <= 0:
                    raise ValueError("hill width must be positive")
        if self.kind == "crater" and self.crater_radius <= 0:
            raise ValueError("crater_radius must be positive")
        if self.texture_scale <= 0:
            raise ValueError("texture_scale must be positive")

    def height(self, points):
        """Heights in meters at ``points`` of shape ``[..., 2]``."""
        points = ensure_array(points, "points", last_dim=2)
        x, y = points[..., 0], points[..., 1]
        h = np.full(x.shape, float(self.base_height))
        if self.kind == "gaussian_hills":
            for cx, cy, amplitude, width in self.hills:
                r2 = (x - cx) ** 2 + (y - cy) ** 2
                h = h + amplitude * np.exp(-r2 / (2.0 * width**2))
        elif self.kind == "crater":
            r = np.hypot(x - self.crater_center[0], y - self.crater_center[1])
            bowl = np.clip(1.0 - (r / self.crater_radius) ** 2, 0.0, None)
            h = h - self.crater_depth * bowl
            rim_width = self.crater_radius / 2.0
            band = np.abs(r - self.crater_radius) <= rim_width
            rim = np.zeros_like(r)
            rim[band] = self.crater_rim_height * np.cos(
                np.pi * (r[band] - self.crater_radius) / (2.0 * rim_width)
            ) ** 2
            h = h + rim
        return h

    @property
    def height_range(self):
        """Conservative ``(min, max)`` bounds on the height function."""
        base = float(self.base_height)
        if self.kind == "plane":
            return base, base
        if self.kind == "gaussian_hills":
            lo = base + sum(min(h[2], 0.0) for h in self.hills)
            hi = base + sum(max(h[2], 0.0) for h in self.hills)
            return lo, hi
        return base - self.crater_depth, base + max(self.crater_rim_height, 0.0)

    @property
    def min_feature_width(self):
        """Narrowest horizontal feature, for marching step selection."""
        if self.kind == "gaussian_hills" and self.hills:
            return min(h[3] for h in self.hills)
        if self.kind == "crater":
            return self.crater_radius / 2.0
        return math.inf

    def color(self, points, channels=3):
        """Texture colors in ``[0, 1]`` at ``points``, shape ``[..., channels]``."""
        points = ensure_array(points, "points", last_dim=2)
        x, y = points[..., 0], points[..., 1]
        if self.texture == "checker":
            parity = (
                np.floor(x / self.texture_scale) + np.floor(y / self.texture_scale)
            ) % 2
            value = np.where(parity == 0, 0.25, 0.75)
            return np.repeat(value[..., None], channels, axis=-1)
        if self.texture == "height_shaded":
            lo, hi = self.height_range
            span = max(hi - lo, 1e-12)
            value = 0.2 + 0.6 * (self.height(points) - lo) / span
            return np.repeat(value[..., None], channels, axis=-1)
        bands = []
        for c in range(channels):
            noise = _fractal_noise(
                x / self.texture_scale,
                y / self.texture_scale,
                self.texture_seed + 101.3 * c,
            )
            bands.append(0.15 + 0.7 * noise)
        return np.stack(bands, axis=-1)

    def to_dict(self):
        return {
            "kind": self.kind,
            "base_height_m": self.base_height,
            "hills": [list(h) for h in self.hills],
            "crater_center_m": list(self.crater_center),
            "crater_radius_m": self.crater_radius,
            "crater_depth_m": self.crater_depth,
            "crater_rim_height_m": self.crater_rim_height,
            "texture": self.texture,
            "texture_scale_m": self.texture_scale,
            "texture_seed": self.texture_seed,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            kind=data["kind"],
            base_height=float(data["base_height_m"]),
            hills=tuple(tuple(h) for h in data.get("hills", [])),
            crater_center=tuple(data.get("crater_center_m", (0.0, 0.0))),
            crater_radius=float(data.get("crater_radius_m", 1000.0)),
            crater_depth=float(data.get("crater_depth_m", 100.0)),
            crater_rim_height=float(data.get("crater_rim_height_m", 0.0)),
            texture=data.get("texture", "fractal"),
            texture_scale=float(data.get("texture_scale_m", 1000.0)),
            texture_seed=int(data.get("texture_seed", 0)),
        )


def ray_terrain_intersect(terrain, locus, step=None, bisections=60):
    """First ray-terrain intersection parameter per ray.

    Marches each span at a fixed step (a tenth of the narrowest terrain
    feature by default), detects the first sign change of
    ``z(t) - height(x(t), y(t))`` and refines it by bisection.

    Args:
        terrain: :class:`AnalyticTerrain`.
        locus: Ray bundle with finite spans (clip before calling).
        step: Marching step in meters; defaults to
            ``terrain.min_feature_width / 10`` (span/16 for planes).
        bisections: Refinement iterations after the sign change.

    Returns:
        Tuple ``(t, hit)``: parameters shaped like the batch with
        ``nan`` where the ray misses, and the boolean hit mask.
    """
    spans = locus.t_far - locus.t_near
    if not np.all(np.isfinite(spans)):
        raise ValueError("ray spans must be finite; clip the locus first")
    max_span = float(np.max(spans, initial=0.0))
    if max_span == 0.0:
        nan = np.full(locus.shape, np.nan)
        return nan, np.zeros(locus.shape, dtype=bool)

    if step is None:
        step = terrain.min_feature_width / 10.0
        if not math.isfinite(step):
            step = max_span / 16.0
    n_steps = int(np.clip(math.ceil(max_span / step), 4, 65536))

    origins = locus.origins.reshape(-1, 3)
    directions = locus.directions.reshape(-1, 3)
    t_near = locus.t_near.reshape(-1)
    t_far = locus.t_far.reshape(-1)
    n = origins.shape[0]
    t_hit = np.full(n, np.nan)
    hit = np.zeros(n, dtype=bool)

    chunk = max(1, 8_388_608 // (n_steps + 1))
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        o, d = origins[sl], directions[sl]
        tn, tf = t_near[sl], t_far[sl]
        # [m, k+1] march parameters, per-ray step <= the requested step.
        ts = tn[:, None] + (tf - tn)[:, None] * np.linspace(0.0, 1.0, n_steps + 1)
        pts = o[:, None, :] + ts[..., None] * d[:, None, :]
        f = pts[..., 2] - terrain.height(pts[..., :2])

        sign_change = (f[:, :-1] * f[:, 1:]) <= 0.0
        any_hit = sign_change.any(axis=1)
        first = np.argmax(sign_change, axis=1)
        rows = np.flatnonzero(any_hit)
        if rows.size == 0:
            continue
        lo = ts[rows, first[rows]]
        hi = ts[rows, first[rows] + 1]
        f_lo = f[rows, first[rows]]
        o_r, d_r = o[rows], d[rows]
        for _ in range(bisections):
            mid = 0.5 * (lo + hi)
            p_mid = o_r + mid[:, None] * d_r
            f_mid = p_mid[:, 2] - terrain.height(p_mid[:, :2])
            take_left = f_lo * f_mid <= 0.0
            hi = np.where(take_left, mid, hi)
            lo = np.where(take_left, lo, mid)
            f_lo = np.where(take_left, f_lo, f_mid)
        result = 0.5 * (lo + hi)
        t_chunk = t_hit[sl]
        h_chunk = hit[sl]
        t_chunk[rows] = result
        h_chunk[rows] = True

    return t_hit.reshape(locus.shape), hit.reshape(locus.shape)


def _terrain_slab(terrain, pad=1.0):
    lo, hi = terrain.height_range
    extra = 0.05 * max(hi - lo, 1.0) + pad
    return lo - extra, hi + extra

_HUGE = 1e12


def render_ground_truth(terrain, camera, shading=None, sun_direction=(0.4, 0.2, 0.9)):
    """Render an image, depth raster and hit mask from the analytic scene.

    Colors come straight from the terrain texture at each ray's exact
    hit point (no shading by default; ``shading="lambert"`` modulates by
    a fixed-sun Lambert factor). Depth is the ray parameter ``t`` in
    meters; missing pixels carry ``nan`` depth, zero color and a False
    mask entry.

    Returns:
        Tuple ``(image [h, w, channels], depth [h, w], hit [h, w])``.
    """
    if shading not in (None, "lambert"):
        raise ValueError(f"unknown shading mode {shading!r}")
    loci = camera.all_pixel_loci()
    z_lo, z_hi = _terrain_slab(terrain)
    clipped, valid = clip_to_box(
        loci, [-_HUGE, -_HUGE, z_lo], [_HUGE, _HUGE, z_hi]
    )
    t, hit = ray_terrain_intersect(terrain, clipped)
    hit &= valid

    image = np.zeros((camera.height, camera.width, camera.channels))
    depth = np.full((camera.height, camera.width), np.nan)
    if hit.any():
        points = clipped.point_at(np.where(hit, t, 0.0))
        ground = points[..., :2]
        colors = terrain.color(ground, camera.channels)
        if shading == "lambert":
            sun = np.asarray(sun_direction, dtype=np.float64)
            sun = sun / np.linalg.norm(sun)
            eps = terrain.min_feature_width
            eps = eps / 100.0 if math.isfinite(eps) else 1.0
            gx = (
                terrain.height(ground + [eps, 0.0])
                - terrain.height(ground - [eps, 0.0])
            ) / (2 * eps)
            gy = (
                terrain.height(ground + [0.0, eps])
                - terrain.height(ground - [0.0, eps])
            ) / (2 * eps)
            normal = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
            normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
            lambert = np.clip(normal @ sun, 0.15, 1.0)
            colors = colors * lambert[..., None]
        image[hit] = colors[hit]
        depth[hit] = t[hit]
    return image, depth, hit


def _scene_frame_from_footprints(cameras, terrain, bbox=None, z_range=None,
                                 norm_scale=10.0):
    z_lo, z_hi = z_range if z_range is not None else _terrain_slab(terrain)
    lo, hi = terrain.height_range
    if not (z_lo <= lo and hi <= z_hi):
        raise ValueError(
            f"terrain heights [{lo}, {hi}] leave the requested z range "
            f"[{z_lo}, {z_hi}]"
        )
    corners = np.concatenate([cam.footprint(plane_z=z_lo) for cam in cameras])
    xy_min = corners.min(axis=0)
    xy_max = corners.max(axis=0)
    margin = 0.02 * (xy_max - xy_min)
    bbox_min = np.array([*(xy_min - margin), z_lo])
    bbox_max = np.array([*(xy_max + margin), z_hi])
    if bbox is not None:
        want_min = np.asarray(bbox[0], dtype=np.float64)
        want_max = np.asarray(bbox[1], dtype=np.float64)
        if np.any(bbox_min[:2] < want_min[:2]) or np.any(
            bbox_max[:2] > want_max[:2]
        ):
            raise ValueError(
                "acquisition track footprints leave the requested scene box"
            )
        bbox_min, bbox_max = want_min, want_max
    return SceneFrame(bbox_min, bbox_max, norm_scale)


def _check_texture_contrast(images):
    variance = float(np.var(np.stack([im.ravel() for im in images])))
    if variance < 1e-4:
        logger.warning(
            "texture variance %.2e is very low; height is weakly "
            "observable from such imagery",
            variance,
        )


def generate_pinhole_pass(
    terrain,
    n_views=31,
    track_length=175e3,
    altitude=250e3,
    fov_deg=5.0,
    image_size=400,
    channels=3,
    look_at_subject=True,
    shading=None,
    bbox=None,
    z_range=None,
):
    """Frame-camera orbit strip: cameras along a west-east track.

    Cameras sit at ``z = altitude``, evenly spaced on a track of
    ``track_length`` centered on the scene origin, either aimed at the
    subject (default) or held nadir. Returns ``(frame, cameras, images)``
    with the scene frame derived from the footprint union unless an
    explicit ``bbox`` (min, max) is supplied; ``z_range`` overrides just
    the vertical slab (it must contain the terrain's height range).
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    z_mid = 0.5 * sum(terrain.height_range)
    xs = (
        np.linspace(-track_length / 2.0, track_length / 2.0, n_views)
        if n_views > 1
        else np.array([0.0])
    )
    cameras = []
    for x in xs:
        position = np.array([x, 0.0, float(altitude)])
        if look_at_subject:
            rotation = look_at_rotation(position, [0.0, 0.0, z_mid])
        else:
            rotation = look_at_rotation(position, position - [0.0, 0.0, 1.0])
        cameras.append(
            PinholeCamera(
                position=position,
                rotation=rotation,
                fov_deg=fov_deg,
                width=image_size,
                height=image_size,
                channels=channels,
            )
        )
    frame = _scene_frame_from_footprints(cameras, terrain, bbox, z_range)
    images = [render_ground_truth(terrain, cam, shading)[0] for cam in cameras]
    _check_texture_contrast(images)
    return frame, cameras, images


def _linescan_rotation(backward_angle_deg=0.0):
    # Detector line cross-track (camera x = north), boresight down,
    # optionally pitched backward (west) about the detector axis.
    nadir = np.column_stack(
        [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]]
    )
    phi = math.radians(backward_angle_deg)
    pitch = np.array(
        [
            [1.0, 0.0, 0.0],
            [0.0, math.cos(phi), -math.sin(phi)],
            [0.0, math.sin(phi), math.cos(phi)],
        ]
    )
    return nadir @ pitch


def generate_linescan_pass(
    terrain,
    fov_deg=5.7,
    width=64,
    rows=96,
    track_length=45e3,
    altitude=300e3,
    channels=1,
    backward_angle_deg=None,
    shading=None,
    bbox=None,
    z_range=None,
):
    """Pushbroom swath along a west-east track, optionally double-look.

    A single nadir strip by default. With ``backward_angle_deg`` set, a
    second camera pitched backward by that angle images the same ground
    in the same pass (its track is shifted forward so the center rows of
    both strips view the scene center). Returns
    ``(frame, cameras, images)``.
    """
    if rows < 2 or width < 1:
        raise ValueError("need rows >= 2 and width >= 1")
    half = track_length / 2.0
    times = np.array([0.0, 1.0])
    row_times = (np.arange(rows) + 0.5) / rows

    def strip(angle_deg, shift):
        positions = np.array(
            [[-half + shift, 0.0, altitude], [half + shift, 0.0, altitude]]
        )
        rotation = _linescan_rotation(angle_deg)
        return LinescanCamera(
            path_times=times,
            path_positions=positions,
            path_rotations=np.stack([rotation, rotation]),
            row_times=row_times,
            fov_deg=fov_deg,
            width=width,
            height=rows,
            channels=channels,
        )

    cameras = [strip(0.0, 0.0)]
    if backward_angle_deg is not None:
        if not 0 < backward_angle_deg < 60:
            raise ValueError("backward_angle_deg must be in (0, 60)")
        z_mid = 0.5 * sum(terrain.height_range)
        shift = (altitude - z_mid) * math.tan(math.radians(backward_angle_deg))
        cameras.append(strip(backward_angle_deg, shift))
    frame = _scene_frame_from_footprints(cameras, terrain, bbox, z_range)
    images = [render_ground_truth(terrain, cam, shading)[0] for cam in cameras]
    _check_texture_contrast(images)
    return frame, cameras, images


def nominal_gsd(camera, ground_z=0.0):
    """Nadir ground sample distance in meters for an orbit camera."""
    if isinstance(camera, PinholeCamera):
        altitude = float(camera.position[2])
    else:
        altitude = float(camera.path_positions[0, 2])
    swath = 2.0 * (altitude - ground_z) * math.tan(
        math.radians(camera.fov_deg) / 2.0
    )
    return swath / camera.width


def _smoke_terrain(texture_seed):
    return AnalyticTerrain(
        kind="gaussian_hills",
        base_height=500.0,
        hills=(
            (-6000.0, 2500.0, 1500.0, 3500.0),
            (4500.0, -3000.0, 1100.0, 2800.0),
            (500.0, 5500.0, -700.0, 3000.0),
            (8000.0, 4000.0, 800.0, 2500.0),
            (-3000.0, -5500.0, -500.0, 3200.0),
        ),
        texture="fractal",
        texture_scale=2500.0,
        texture_seed=texture_seed,
    )


def _preset_flat_smoke(seed):
    terrain = AnalyticTerrain(
        kind="plane", base_height=100.0, texture="checker",
        texture_scale=2000.0, texture_seed=seed,
    )
    # Full-length track: height observability scales with the parallax
    # spread, and a short track cannot pin heights to a few GSD. The
    # slab is kept thin on purpose: the opacity sharpness initializes to
    # one transition width per slab, and a tall slab starts the sigmoid
    # soft enough that heights can drift above the box into the flat
    # tail of the opacity where their gradient dies.
    return terrain, generate_pinhole_pass(
        terrain, n_views=4, track_length=250e3, image_size=128, channels=1,
        z_range=(-900.0, 1100.0),
    )


def _preset_ges_smoke(seed):
    terrain = _smoke_terrain(seed)
    return terrain, generate_pinhole_pass(
        terrain, n_views=8, track_length=175e3, image_size=64, channels=3,
    )


def _preset_ges_full(seed):
    terrain = _smoke_terrain(seed)
    return terrain, generate_pinhole_pass(
        terrain, n_views=31, track_length=175e3, image_size=400, channels=3,
    )


def _preset_ctx_like(seed):
    terrain = _smoke_terrain(seed)
    return terrain, generate_linescan_pass(
        terrain, fov_deg=5.7, width=64, rows=96, track_length=45e3,
        altitude=300e3, channels=1,
    )


def _preset_aster_like(seed):
    terrain = _smoke_terrain(seed)
    return terrain, generate_linescan_pass(
        terrain, fov_deg=5.7, width=64, rows=96, track_length=45e3,
        altitude=300e3, channels=1, backward_angle_deg=27.6,
    )


_PRESETS = {
    "flat-smoke": _preset_flat_smoke,
    "ges-smoke": _preset_ges_smoke,
    "ges-full": _preset_ges_full,
    "ctx-like": _preset_ctx_like,
    "aster-like": _preset_aster_like,
}

PRESET_NAMES = tuple(sorted(_PRESETS))


def synthesize_dataset(preset, seed=0, truth_cell_size=None):
    """Build a complete in-memory dataset from a named preset.

    Args:
        preset: One of :data:`PRESET_NAMES`.
        seed: Texture seed (scene geometry is fixed per preset).
        truth_cell_size: Cell size of the bundled ground-truth height
            grid, meters; defaults to roughly one GSD.

    Returns:
        :class:`neuralterrain.datasets.TerrainDataset` with the ground
        truth grid attached.
    """
    from neuralterrain.datasets import TerrainDataset
    from neuralterrain.grids import GridSpec, TerrainGrid

    if preset not in _PRESETS:
        raise ConfigError(
            f"unknown preset {preset!r}; available: {', '.join(PRESET_NAMES)}"
        )
    terrain, (frame, cameras, images) = _PRESETS[preset](seed)

    if truth_cell_size is None:
        truth_cell_size = nominal_gsd(cameras[0])
    # Same interior-grid rule the extraction side uses, so a DTM pulled
    # from a trained model at this cell size is congruent with truth.
    spec = GridSpec.interior(
        frame.bbox_min[:2], frame.bbox_max[:2], float(truth_cell_size)
    )
    truth = TerrainGrid(spec, terrain.height(spec.center_grid()))

    return TerrainDataset(
        frame=frame,
        cameras=cameras,
        images=[im.astype(np.float32) for im in images],
        channels=cameras[0].channels,
        truth_dtm=truth,
        info={"preset": preset, "seed": int(seed), "terrain": terrain.to_dict()},
    )
