"""Multi-resolution hash encoding of low-dimensional coordinates.

Each level overlays a regular grid on the input domain; a point is
encoded per level by bilinear (2D) or trilinear (3D) interpolation of
learned feature vectors stored at the grid vertices, and the per-level
features are concatenated. Coarse levels store vertices directly; fine
levels fold vertices into a fixed-size table with a spatial hash.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

__all__ = ["HashEncodingSpec", "HashEncoding"]

# One prime per axis; the first is 1 so consecutive x cells stay
# consecutive in the table, as in the reference hash-grid scheme.
_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class HashEncodingSpec:
    """Shape of a hash encoding.

    Attributes:
        input_dims: Coordinate dimensionality (2 for planar fields,
            3 for volumetric proxies).
        levels: Number of resolution levels.
        base_resolution: Cells per axis at the coarsest level.
        max_resolution: Cells per axis at the finest level.
        log2_table_size: Log2 of the per-level vertex budget.
        features_per_level: Feature vector width at each vertex.
        domain: Inputs are expected in ``[0, domain]`` per axis.
    """

    input_dims: int = 2
    levels: int = 16
    base_resolution: int = 8
    max_resolution: int = 5000
    log2_table_size: int = 19
    features_per_level: int = 2
    domain: float = 10.0

    def __post_init__(self):
        if self.input_dims not in (2, 3):
            raise ValueError(f"input_dims must be 2 or 3, got {self.input_dims}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not 1 <= self.base_resolution <= self.max_resolution:
            raise ValueError(
                "need 1 <= base_resolution <= max_resolution, got "
                f"{self.base_resolution} and {self.max_resolution}"
            )
        if not 1 <= self.log2_table_size <= 24:
            raise ValueError("log2_table_size must be in [1, 24]")
        if self.features_per_level < 1:
            raise ValueError("features_per_level must be >= 1")
        if not self.domain > 0:
            raise ValueError("domain must be positive")

    @property
    def level_resolutions(self):
        """Cells per axis at each level (geometric progression)."""
        if self.levels == 1:
            return (self.base_resolution,)
        growth = (self.max_resolution / self.base_resolution) ** (
            1.0 / (self.levels - 1)
        )
        return tuple(
            int(round(self.base_resolution * growth**level))
            for level in range(self.levels)
        )

    @property
    def table_size(self):
        return 1 << self.log2_table_size

    @property
    def output_dim(self):
        return self.levels * self.features_per_level

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class HashEncoding(nn.Module):
    """Trainable multi-resolution feature grid (see module docs).

    Levels whose full vertex grid fits in the table budget are stored
    densely (every vertex has its own row, no collisions); finer levels
    hash vertex coordinates into ``2**log2_table_size`` rows. All levels
    share one flat parameter tensor.

    Inputs outside ``[0, domain]`` are clamped, which extrapolates the
    boundary value. Gradients flow to the table entries and, through the
    interpolation weights, to the input coordinates.
    """

    def __init__(self, spec=None, generator=None, dtype=torch.float32):
        super().__init__()
        self.spec = spec or HashEncodingSpec()
        dims = self.spec.input_dims
        n_corners = 1 << dims

        resolutions = torch.tensor(self.spec.level_resolutions, dtype=torch.int64)
        vertex_counts = (resolutions + 1) ** dims
        dense = vertex_counts <= self.spec.table_size
        rows = torch.where(
            dense, vertex_counts, torch.tensor(self.spec.table_size)
        )
        offsets = torch.cumsum(rows, dim=0) - rows

        # Row-major strides for dense levels: axis 0 varies fastest.
        strides = (resolutions[:, None] + 1) ** torch.arange(dims)[None, :]
        corners = (
            torch.arange(n_corners)[:, None] >> torch.arange(dims)[None, :]
        ) & 1

        self.register_buffer("_resolutions", resolutions, persistent=False)
        self.register_buffer("_dense", dense, persistent=False)
        self.register_buffer("_strides", strides, persistent=False)
        self.register_buffer("_offsets", offsets, persistent=False)
        self.register_buffer("_corners", corners, persistent=False)
        self.register_buffer(
            "_primes", torch.tensor(_PRIMES[:dims], dtype=torch.int64),
            persistent=False,
        )

        table = torch.empty(
            int(rows.sum()), self.spec.features_per_level, dtype=dtype
        )
        table.uniform_(-1e-4, 1e-4, generator=generator)
        self.table = nn.Parameter(table)

    @property
    def output_dim(self):
        return self.spec.output_dim

    def forward(self, points):
        """Encode ``points`` of shape ``[n, input_dims]`` to ``[n, output_dim]``."""
        spec = self.spec
        if points.ndim != 2 or points.shape[-1] != spec.input_dims:
            raise ValueError(
                f"points must have shape [n, {spec.input_dims}], "
                f"got {tuple(points.shape)}"
            )
        scale = (self._resolutions.to(points.dtype) / spec.domain)[None, :, None]
        u = points.clamp(0.0, spec.domain)[:, None, :] * scale  # [n, L, D]

        cell = u.floor().long()
        cell = torch.minimum(cell, (self._resolutions - 1)[None, :, None])
        cell = cell.clamp(min=0)
        frac = u - cell.to(u.dtype)  # [n, L, D], d(frac)/d(points) = scale

        # Integer vertex coordinates of each cell corner: [n, L, C, D].
        vertex = cell[:, :, None, :] + self._corners[None, None, :, :]

        dense_index = (vertex * self._strides[None, :, None, :]).sum(-1)
        hashed = vertex * self._primes[None, None, None, :]
        hash_index = hashed[..., 0]
        for axis in range(1, spec.input_dims):
            hash_index = hash_index ^ hashed[..., axis]
        hash_index = hash_index & (spec.table_size - 1)

        index = torch.where(self._dense[None, :, None], dense_index, hash_index)
        index = index + self._offsets[None, :, None]

        feats = self.table[index.reshape(-1)].reshape(*index.shape, -1)
        frac_c = frac[:, :, None, :]
        weights = torch.where(
            self._corners[None, None, :, :].bool(), frac_c, 1.0 - frac_c
        ).prod(-1)
        out = (feats * weights[..., None]).sum(2)  # [n, L, F]
        return out.reshape(points.shape[0], spec.output_dim)
