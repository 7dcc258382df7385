"""Camera models, ray bundles and scene geometry.

Conventions used throughout the package:

* World frame: right-handed and metric. ``x`` points east, ``y`` points
  north, ``z`` points up. Terrain heights are world ``z`` in metres.
* Camera frame: ``x`` right, ``y`` down, ``z`` forward along the
  boresight. Rotations are stored as 3x3 matrices whose columns are the
  camera axes expressed in world coordinates, so a camera-frame vector
  ``v`` maps to the world as ``R @ v``.
* Pixels: continuous image coordinates ``(x, y)`` in pixel units with
  the origin at the top-left image corner. ``x`` grows to the right
  (columns), ``y`` grows downward (rows). The centre of the pixel in
  column ``i``, row ``j`` is ``(i + 0.5, j + 0.5)``. The field of view
  is the full angle subtended across the image width.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from neuralterrain.validation import ensure_array, ensure_finite, ensure_positive

logger = logging.getLogger(__name__)

__all__ = [
    "Locus",
    "SceneFrame",
    "PinholeCamera",
    "LinescanCamera",
    "look_at_rotation",
    "interpolate_poses",
    "clip_to_box",
    "camera_from_dict",
]

_WORLD_UP = np.array([0.0, 0.0, 1.0])
_WORLD_NORTH = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class Locus:
    """A bundle of rays with per-ray parameter spans.

    Points along ray ``i`` are ``origins[i] + t * directions[i]`` for
    ``t`` in ``[t_near[i], t_far[i]]``. Directions are unit length, so
    ``t`` measures metric distance in whatever units the origins use.
    ``t_far`` may be ``inf`` for rays that have not been clipped yet.

    Attributes:
        origins: ``[..., 3]`` ray start points.
        directions: ``[..., 3]`` unit direction vectors.
        t_near: ``[...]`` span start, finite and ``>= 0``.
        t_far: ``[...]`` span end, ``>= t_near``; ``inf`` allowed.
    """

    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray

    def __post_init__(self):
        origins = ensure_array(self.origins, "origins", last_dim=3)
        directions = ensure_array(self.directions, "directions", last_dim=3)
        batch = origins.shape[:-1]
        t_near = np.broadcast_to(
            ensure_array(self.t_near, "t_near", dtype=np.float64), batch
        ).copy()
        t_far = np.broadcast_to(
            ensure_array(self.t_far, "t_far", dtype=np.float64), batch
        ).copy()
        if directions.shape != origins.shape:
            raise ValueError(
                f"directions shape {directions.shape} must match origins "
                f"shape {origins.shape}"
            )
        ensure_finite(origins, "origins")
        ensure_finite(directions, "directions")
        ensure_finite(t_near, "t_near")
        norms = np.linalg.norm(directions, axis=-1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("directions must be unit vectors")
        if np.any(t_near < 0):
            raise ValueError("t_near must be >= 0")
        if np.any(t_far < t_near):
            raise ValueError("t_far must be >= t_near")
        object.__setattr__(self, "origins", origins)
        object.__setattr__(self, "directions", directions)
        object.__setattr__(self, "t_near", t_near)
        object.__setattr__(self, "t_far", t_far)

    @property
    def shape(self):
        """Batch shape of the bundle (origins without the vector axis)."""
        return self.origins.shape[:-1]

    def point_at(self, t):
        """World points at parameter ``t`` (broadcast against the batch)."""
        t = np.asarray(t, dtype=np.float64)
        return self.origins + t[..., None] * self.directions

    def reshape(self, *shape):
        return Locus(
            self.origins.reshape(*shape, 3),
            self.directions.reshape(*shape, 3),
            self.t_near.reshape(shape),
            self.t_far.reshape(shape),
        )

    def select(self, index):
        """Subset of the bundle under any numpy fancy index or mask."""
        return Locus(
            self.origins[index],
            self.directions[index],
            self.t_near[index],
            self.t_far[index],
        )


@dataclass(frozen=True)
class SceneFrame:
    """Axis-aligned reconstruction volume and its normalization.

    Model fields operate on normalized coordinates: the box is shifted
    to the origin and scaled uniformly so its longest edge spans
    ``norm_scale`` units. The same factor applies to all axes, so unit
    directions and angles are preserved and a metric length ``L`` maps
    to ``L * metric_scale`` normalized units.
    """

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    norm_scale: float = 10.0

    def __post_init__(self):
        bbox_min = ensure_array(self.bbox_min, "bbox_min", shape=(3,))
        bbox_max = ensure_array(self.bbox_max, "bbox_max", shape=(3,))
        ensure_finite(bbox_min, "bbox_min")
        ensure_finite(bbox_max, "bbox_max")
        ensure_positive(self.norm_scale, "norm_scale")
        if not np.all(bbox_max > bbox_min):
            raise ValueError("bbox_max must exceed bbox_min on every axis")
        object.__setattr__(self, "bbox_min", bbox_min)
        object.__setattr__(self, "bbox_max", bbox_max)

    @property
    def extent(self):
        return self.bbox_max - self.bbox_min

    @property
    def metric_scale(self):
        """Normalized units per metre."""
        return self.norm_scale / float(np.max(self.extent))

    def normalize_points(self, points):
        points = ensure_array(points, "points", last_dim=3)
        return (points - self.bbox_min) * self.metric_scale

    def denormalize_points(self, points):
        points = ensure_array(points, "points", last_dim=3)
        return points / self.metric_scale + self.bbox_min

    def normalize_height(self, height_m):
        """World ``z`` in metres to normalized ``z``."""
        return (np.asarray(height_m, dtype=np.float64) - self.bbox_min[2]) * (
            self.metric_scale
        )

    def denormalize_height(self, height_n):
        return np.asarray(height_n, dtype=np.float64) / self.metric_scale + (
            self.bbox_min[2]
        )

    def normalize_locus(self, locus):
        """Express a metric ray bundle in normalized coordinates.

        Origins shift and scale, directions are unchanged (the scaling
        is uniform) and parameter spans scale by ``metric_scale``.
        """
        k = self.metric_scale
        return Locus(
            self.normalize_points(locus.origins),
            locus.directions,
            locus.t_near * k,
            locus.t_far * k,
        )

    def to_dict(self):
        return {
            "bbox_min_m": self.bbox_min.tolist(),
            "bbox_max_m": self.bbox_max.tolist(),
            "norm_scale": self.norm_scale,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            np.asarray(data["bbox_min_m"], dtype=np.float64),
            np.asarray(data["bbox_max_m"], dtype=np.float64),
            float(data.get("norm_scale", 10.0)),
        )


def _normalize(v, name="vector"):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError(f"{name} has near-zero length")
    return v / n


def look_at_rotation(position, target, up=None):
    """Rotation of a camera at ``position`` whose boresight hits ``target``.

    The camera ``x`` axis is chosen perpendicular to ``up`` (world up by
    default). For near-vertical boresights, where world up is
    degenerate, north is used instead; the resulting nadir view has
    image ``x`` toward east and image ``y`` toward south, i.e. north at
    the top of the image.

    Returns:
        ``[3, 3]`` rotation matrix with columns = camera axes in world
        coordinates.
    """
    position = ensure_array(position, "position", shape=(3,))
    target = ensure_array(target, "target", shape=(3,))
    forward = _normalize(target - position, "target - position")
    if up is None:
        up = _WORLD_UP
        if abs(np.dot(forward, up)) > 0.999:
            up = _WORLD_NORTH
    up = _normalize(up, "up")
    x_axis = np.cross(forward, up)
    if np.linalg.norm(x_axis) < 1e-8:
        raise ValueError("up is parallel to the boresight")
    x_axis = _normalize(x_axis)
    y_axis = np.cross(forward, x_axis)
    return np.column_stack([x_axis, y_axis, forward])


def interpolate_poses(times, positions, rotations, query_times):
    """Interpolate a pose path: linear positions, slerp orientations.

    Args:
        times: ``[K]`` strictly increasing knot times in seconds.
        positions: ``[K, 3]`` platform positions at the knots.
        rotations: ``[K, 3, 3]`` rotation matrices at the knots.
        query_times: ``[...]`` times to evaluate, all within the span.

    Returns:
        Tuple ``(positions, rotations)`` with shapes ``[..., 3]`` and
        ``[..., 3, 3]``.
    """
    times = ensure_array(times, "times", shape=(-1,))
    positions = ensure_array(positions, "positions", shape=(len(times), 3))
    rotations = ensure_array(rotations, "rotations", shape=(len(times), 3, 3))
    if len(times) < 1:
        raise ValueError("times must not be empty")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    query = np.asarray(query_times, dtype=np.float64)
    if np.any(query < times[0] - 1e-9) or np.any(query > times[-1] + 1e-9):
        raise ValueError("query_times fall outside the pose path time span")
    query_clamped = np.clip(query, times[0], times[-1])

    flat = np.atleast_1d(query_clamped).ravel()
    if len(times) == 1:
        pos = np.broadcast_to(positions[0], flat.shape + (3,)).copy()
        rot = np.broadcast_to(rotations[0], flat.shape + (3, 3)).copy()
    else:
        pos = np.stack(
            [np.interp(flat, times, positions[:, i]) for i in range(3)], axis=-1
        )
        rot = Slerp(times, Rotation.from_matrix(rotations))(flat).as_matrix()
    pos = pos.reshape(query.shape + (3,))
    rot = rot.reshape(query.shape + (3, 3))
    return pos, rot


def _check_pixels(pixels, width, height):
    pixels = ensure_array(pixels, "pixels", last_dim=2)
    ensure_finite(pixels, "pixels")
    x, y = pixels[..., 0], pixels[..., 1]
    if np.any(x < 0) or np.any(x > width) or np.any(y < 0) or np.any(y > height):
        raise ValueError(
            f"pixels must lie within [0, {width}] x [0, {height}] "
            "(continuous image coordinates)"
        )
    return pixels


def _pixel_grid(width, height):
    # Pixel-centre coordinates for a full image, shape [height, width, 2].
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def _footprint_from_loci(locus, plane_z):
    # Intersect each ray with the horizontal plane z = plane_z.
    dz = locus.directions[..., 2]
    if np.any(np.abs(dz) < 1e-12):
        raise ValueError("footprint ray parallel to the ground plane")
    t = (plane_z - locus.origins[..., 2]) / dz
    if np.any(t <= 0):
        raise ValueError("footprint ray does not reach the ground plane")
    return locus.point_at(t)[..., :2]


@dataclass(frozen=True)
class PinholeCamera:
    """Frame camera with a square pixel grid and no distortion.

    Attributes:
        position: ``[3]`` optical centre in world metres.
        rotation: ``[3, 3]`` columns = camera axes in world coordinates.
        fov_deg: Full field of view across the image width, degrees.
        width: Image width in pixels.
        height: Image height in pixels.
        channels: Color channel count of the imagery (1 or 3).
    """

    position: np.ndarray
    rotation: np.ndarray
    fov_deg: float
    width: int
    height: int
    channels: int = 3

    def __post_init__(self):
        position = ensure_array(self.position, "position", shape=(3,))
        rotation = ensure_array(self.rotation, "rotation", shape=(3, 3))
        ensure_finite(position, "position")
        ensure_finite(rotation, "rotation")
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-8):
            raise ValueError("rotation must be orthonormal")
        if np.linalg.det(rotation) < 0:
            raise ValueError("rotation must be right-handed")
        if not 0 < self.fov_deg < 180:
            raise ValueError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        for name in ("width", "height"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def focal_px(self):
        """Focal length in pixel units, from the horizontal field of view."""
        return (self.width / 2.0) / np.tan(np.radians(self.fov_deg) / 2.0)

    def pixel_locus(self, pixels):
        """Rays through continuous pixel coordinates.

        Args:
            pixels: ``[..., 2]`` image coordinates ``(x, y)`` within
                ``[0, width] x [0, height]``.

        Returns:
            Unclipped :class:`Locus` (``t_near = 0``, ``t_far = inf``)
            with one ray per pixel, in world metres.
        """
        pixels = _check_pixels(pixels, self.width, self.height)
        f = self.focal_px
        cam_dirs = np.stack(
            [
                (pixels[..., 0] - self.width / 2.0) / f,
                (pixels[..., 1] - self.height / 2.0) / f,
                np.ones(pixels.shape[:-1]),
            ],
            axis=-1,
        )
        world_dirs = _normalize(cam_dirs @ self.rotation.T)
        origins = np.broadcast_to(self.position, world_dirs.shape).copy()
        zeros = np.zeros(world_dirs.shape[:-1])
        return Locus(origins, world_dirs, zeros, np.full_like(zeros, np.inf))

    def all_pixel_loci(self):
        """Rays through every pixel centre, shape ``[height, width]``."""
        return self.pixel_locus(_pixel_grid(self.width, self.height))

    def footprint(self, plane_z=0.0):
        """Ground quadrilateral seen by the image at ``z = plane_z``.

        Returns:
            ``[4, 2]`` polygon of the image-corner ground points in
            world ``(x, y)``, ordered around the image boundary.
        """
        w, h = float(self.width), float(self.height)
        corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
        return _footprint_from_loci(self.pixel_locus(corners), plane_z)

    def to_dict(self):
        return {
            "type": "pinhole",
            "position_m": self.position.tolist(),
            "quaternion_xyzw": Rotation.from_matrix(self.rotation)
            .as_quat()
            .tolist(),
            "fov_deg": self.fov_deg,
            "width_px": self.width,
            "height_px": self.height,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            position=np.asarray(data["position_m"], dtype=np.float64),
            rotation=Rotation.from_quat(data["quaternion_xyzw"]).as_matrix(),
            fov_deg=float(data["fov_deg"]),
            width=int(data["width_px"]),
            height=int(data["height_px"]),
            channels=int(data.get("channels", 3)),
        )


@dataclass(frozen=True)
class LinescanCamera:
    """Pushbroom camera: one sensor line swept along a platform path.

    The detector line lies along the camera ``x`` axis, so a pixel
    ``(x, y)`` looks along ``[(x - width/2) / f, 0, 1]`` in the camera
    frame of the pose interpolated at that row's acquisition time.
    Row ``j`` (centre ``y = j + 0.5``) is acquired at ``row_times[j]``;
    fractional rows interpolate acquisition times linearly.

    Attributes:
        path_times: ``[K]`` strictly increasing knot times, seconds.
        path_positions: ``[K, 3]`` platform positions at the knots.
        path_rotations: ``[K, 3, 3]`` camera orientations at the knots.
        row_times: ``[height]`` per-row acquisition times, within the
            knot span.
        fov_deg: Full field of view across the detector line, degrees.
        width: Detector length in pixels (image width).
        height: Number of acquired lines (image height).
        channels: Color channel count of the imagery (1 or 3).
    """

    path_times: np.ndarray
    path_positions: np.ndarray
    path_rotations: np.ndarray
    row_times: np.ndarray
    fov_deg: float
    width: int
    height: int
    channels: int = 3

    def __post_init__(self):
        path_times = ensure_array(self.path_times, "path_times", shape=(-1,))
        k = len(path_times)
        path_positions = ensure_array(
            self.path_positions, "path_positions", shape=(k, 3)
        )
        path_rotations = ensure_array(
            self.path_rotations, "path_rotations", shape=(k, 3, 3)
        )
        row_times = ensure_array(self.row_times, "row_times", shape=(-1,))
        ensure_finite(path_times, "path_times")
        ensure_finite(path_positions, "path_positions")
        ensure_finite(path_rotations, "path_rotations")
        ensure_finite(row_times, "row_times")
        if np.any(np.diff(path_times) <= 0):
            raise ValueError("path_times must be strictly increasing")
        if len(row_times) != int(self.height):
            raise ValueError(
                f"row_times must have one entry per row, expected "
                f"{self.height}, got {len(row_times)}"
            )
        if np.any(row_times < path_times[0]) or np.any(row_times > path_times[-1]):
            raise ValueError("row_times must lie within the pose path time span")
        if not 0 < self.fov_deg < 180:
            raise ValueError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        for name in ("width", "height"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        object.__setattr__(self, "path_times", path_times)
        object.__setattr__(self, "path_positions", path_positions)
        object.__setattr__(self, "path_rotations", path_rotations)
        object.__setattr__(self, "row_times", row_times)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def focal_px(self):
        return (self.width / 2.0) / np.tan(np.radians(self.fov_deg) / 2.0)

    def row_time_at(self, y):
        """Acquisition time for continuous row coordinate ``y``."""
        y = np.asarray(y, dtype=np.float64)
        centers = np.arange(self.height, dtype=np.float64) + 0.5
        return np.interp(y, centers, self.row_times)

    def pixel_locus(self, pixels):
        """Rays through continuous pixel coordinates (see class docs)."""
        pixels = _check_pixels(pixels, self.width, self.height)
        times = self.row_time_at(pixels[..., 1])
        pos, rot = interpolate_poses(
            self.path_times, self.path_positions, self.path_rotations, times
        )
        f = self.focal_px
        cam_dirs = np.stack(
            [
                (pixels[..., 0] - self.width / 2.0) / f,
                np.zeros(pixels.shape[:-1]),
                np.ones(pixels.shape[:-1]),
            ],
            axis=-1,
        )
        # [..., 3] = [..., 3, 3] @ [..., 3]
        world_dirs = _normalize(np.einsum("...ij,...j->...i", rot, cam_dirs))
        zeros = np.zeros(world_dirs.shape[:-1])
        return Locus(pos, world_dirs, zeros, np.full_like(zeros, np.inf))

    def all_pixel_loci(self):
        """Rays through every pixel centre, shape ``[height, width]``."""
        return self.pixel_locus(_pixel_grid(self.width, self.height))

    def footprint(self, plane_z=0.0):
        """Ground polygon swept by the sensor line at ``z = plane_z``.

        Returns:
            ``[2 * height, 2]`` polygon: left image edge walked top to
            bottom, then the right edge walked back up.
        """
        ys = np.arange(self.height, dtype=np.float64) + 0.5
        left = np.stack([np.zeros_like(ys), ys], axis=-1)
        right = np.stack([np.full_like(ys, float(self.width)), ys], axis=-1)
        ground_left = _footprint_from_loci(self.pixel_locus(left), plane_z)
        ground_right = _footprint_from_loci(self.pixel_locus(right), plane_z)
        return np.concatenate([ground_left, ground_right[::-1]], axis=0)

    def to_dict(self):
        return {
            "type": "linescan",
            "path_times_s": self.path_times.tolist(),
            "path_positions_m": self.path_positions.tolist(),
            "path_quaternions_xyzw": Rotation.from_matrix(self.path_rotations)
            .as_quat()
            .tolist(),
            "row_times_s": self.row_times.tolist(),
            "fov_deg": self.fov_deg,
            "width_px": self.width,
            "height_px": self.height,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            path_times=np.asarray(data["path_times_s"], dtype=np.float64),
            path_positions=np.asarray(data["path_positions_m"], dtype=np.float64),
            path_rotations=Rotation.from_quat(
                data["path_quaternions_xyzw"]
            ).as_matrix(),
            row_times=np.asarray(data["row_times_s"], dtype=np.float64),
            fov_deg=float(data["fov_deg"]),
            width=int(data["width_px"]),
            height=int(data["height_px"]),
            channels=int(data.get("channels", 3)),
        )


def camera_from_dict(data):
    """Rebuild a camera from its ``to_dict`` form, dispatching on type."""
    kinds = {"pinhole": PinholeCamera, "linescan": LinescanCamera}
    kind = data.get("type")
    if kind not in kinds:
        raise ValueError(
            f"unknown camera type {kind!r}, expected one of {sorted(kinds)}"
        )
    return kinds[kind].from_dict(data)


def clip_to_box(locus, bbox_min, bbox_max):
    """Clip ray spans to an axis-aligned box (slab method).

    Each ray's ``[t_near, t_far]`` is intersected with its box-entry and
    box-exit parameters. Rays that miss the box, only graze a face, or
    have an empty span afterwards are flagged invalid; their spans are
    left collapsed (``t_near == t_far``) so downstream code can carry
    the mask without special cases.

    Args:
        locus: Ray bundle in the same units as the box.
        bbox_min: ``[3]`` box lower corner.
        bbox_max: ``[3]`` box upper corner.

    Returns:
        Tuple ``(clipped, valid)`` where ``clipped`` is a new
        :class:`Locus` and ``valid`` is a boolean mask over the batch.
    """
    bbox_min = ensure_array(bbox_min, "bbox_min", shape=(3,))
    bbox_max = ensure_array(bbox_max, "bbox_max", shape=(3,))
    if not np.all(bbox_max > bbox_min):
        raise ValueError("bbox_max must exceed bbox_min on every axis")

    o, d = locus.origins, locus.directions
    near = locus.t_near.copy()
    far = locus.t_far.copy()
    for axis in range(3):
        da, oa = d[..., axis], o[..., axis]
        parallel = np.abs(da) < 1e-15
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (bbox_min[axis] - oa) / da
            t1 = (bbox_max[axis] - oa) / da
        lo = np.where(parallel, -np.inf, np.minimum(t0, t1))
        hi = np.where(parallel, np.inf, np.maximum(t0, t1))
        # A parallel ray outside the slab never enters the box; one that
        # only grazes a face counts as a miss too, hence strict bounds.
        inside = (oa > bbox_min[axis]) & (oa < bbox_max[axis])
        lo = np.where(parallel & ~inside, np.inf, lo)
        hi = np.where(parallel & ~inside, -np.inf, hi)
        near = np.maximum(near, lo)
        far = np.minimum(far, hi)

    valid = near < far
    near = np.where(valid, near, 0.0)
    far = np.where(valid, far, 0.0)
    return Locus(o, d, near, far), valid
