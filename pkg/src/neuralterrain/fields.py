"""Trainable terrain representation: height field, color field, opacity scale.

Both fields map planar coordinates ``(x, y)`` in the normalized scene
frame to their outputs through independent hash encodings followed by
small MLPs. Heights are in normalized ``z`` units; colors are per
channel in ``(0, 1)``. The opacity scale is the learnable sharpness of
the sigmoid surface transition used by the renderer.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from neuralterrain.encoding import HashEncoding, HashEncodingSpec

__all__ = [
    "HeightField",
    "ColorField",
    "OpacityScale",
    "logistic_cdf",
    "logistic_pdf",
]


def logistic_cdf(x, s):
    """Sigmoid transition ``1 / (1 + exp(-s x))``, stable for large ``|s x|``."""
    return torch.sigmoid(s * x)


def logistic_pdf(x, s):
    """Derivative of :func:`logistic_cdf` with respect to ``x``.

    Evaluated as ``s * sigmoid(s x) * sigmoid(-s x)``, which is the
    stable form of ``s exp(-s x) / (1 + exp(-s x))**2``.
    """
    return s * torch.sigmoid(s * x) * torch.sigmoid(-s * x)


def _init_linear(layer, generator):
    # Fan-in scaled uniform, same family as the default Linear init but
    # drawn from an explicit generator for reproducibility.
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        layer.bias.uniform_(-bound, bound, generator=generator)


class _EncodedMlp(nn.Module):
    """Hash encoding followed by a softplus MLP with one optional skip.

    ``skip_at = k`` concatenates the encoding onto the activations
    entering hidden layer ``k`` (0-based), i.e. between layers ``k`` and
    ``k + 1`` in 1-based counting. ``skip_at = None`` disables it.
    """

    def __init__(
        self,
        spec,
        out_dim,
        hidden_dim,
        n_hidden,
        skip_at,
        generator,
        dtype,
    ):
        super().__init__()
        self.encoding = HashEncoding(spec, generator=generator, dtype=dtype)
        self.skip_at = skip_at
        enc_dim = self.encoding.output_dim
        layers = []
        for i in range(n_hidden):
            in_dim = enc_dim if i == 0 else hidden_dim
            if i == skip_at and i > 0:
                in_dim += enc_dim
            layers.append(nn.Linear(in_dim, hidden_dim, dtype=dtype))
        self.hidden = nn.ModuleList(layers)
        self.head = nn.Linear(hidden_dim, out_dim, dtype=dtype)
        for layer in [*self.hidden, self.head]:
            _init_linear(layer, generator)

    def forward(self, points):
        encoded = self.encoding(points)
        h = encoded
        for i, layer in enumerate(self.hidden):
            if i == self.skip_at and i > 0:
                h = torch.cat([h, encoded], dim=-1)
            h = F.softplus(layer(h))
        return self.head(h)


class HeightField(nn.Module):
    """Scalar terrain height over the normalized ``(x, y)`` plane.

    The output head starts near zero and the result is shifted by a
    constant ``height_offset``, so the initial terrain is a flat plane
    at the offset (typically mid-box), which keeps early rays from being
    all-transparent or all-opaque.
    """

    def __init__(
        self,
        spec=None,
        hidden_dim=128,
        n_hidden=8,
        skip_at=4,
        height_offset=0.0,
        generator=None,
        dtype=torch.float32,
    ):
        super().__init__()
        spec = spec or HashEncodingSpec(input_dims=2)
        if spec.input_dims != 2:
            raise ValueError("height field encoding must have input_dims=2")
        self.net = _EncodedMlp(
            spec, 1, hidden_dim, n_hidden, skip_at, generator, dtype
        )
        with torch.no_grad():
            self.net.head.weight.uniform_(-1e-4, 1e-4, generator=generator)
            self.net.head.bias.zero_()
        self.register_buffer(
            "height_offset", torch.tensor(float(height_offset), dtype=dtype)
        )

    @property
    def spec(self):
        return self.net.encoding.spec

    def forward(self, points):
        """Heights (normalized z) at ``points`` of shape ``[n, 2]`` -> ``[n]``."""
        return self.net(points).squeeze(-1) + self.height_offset


class ColorField(nn.Module):
    """Per-channel color in ``(0, 1)`` over the normalized ``(x, y)`` plane."""

    def __init__(
        self,
        spec=None,
        channels=3,
        hidden_dim=128,
        n_hidden=4,
        generator=None,
        dtype=torch.float32,
    ):
        super().__init__()
        spec = spec or HashEncodingSpec(input_dims=2)
        if spec.input_dims != 2:
            raise ValueError("color field encoding must have input_dims=2")
        if channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {channels}")
        self.channels = channels
        self.net = _EncodedMlp(
            spec, channels, hidden_dim, n_hidden, None, generator, dtype
        )

    @property
    def spec(self):
        return self.net.encoding.spec

    def forward(self, points):
        """Colors at ``points`` of shape ``[n, 2]`` -> ``[n, channels]``."""
        return torch.sigmoid(self.net(points))


class OpacityScale(nn.Module):
    """Learnable sharpness ``s`` of the surface sigmoid, kept positive.

    Stored as ``rho`` with ``s = exp(rho)``, so any optimizer trajectory
    keeps ``s > 0``. The transition width of the sigmoid is roughly
    ``4 / s`` in normalized z units.
    """

    def __init__(self, initial_s=80.0, dtype=torch.float32):
        super().__init__()
        if not initial_s > 0:
            raise ValueError(f"initial_s must be positive, got {initial_s}")
        self.rho = nn.Parameter(
            torch.tensor(math.log(float(initial_s)), dtype=dtype)
        )

    @classmethod
    def for_box_height(cls, normalized_box_height, dtype=torch.float32):
        """Scale whose transition width matches the normalized box height."""
        if not normalized_box_height > 0:
            raise ValueError("normalized_box_height must be positive")
        return cls(4.0 / float(normalized_box_height), dtype=dtype)

    def forward(self):
        return torch.exp(self.rho)

    @property
    def value(self):
        return float(self.forward().detach())
