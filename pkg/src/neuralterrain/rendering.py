"""Differentiable volume rendering along ray bundles.

All functions operate on torch tensors in normalized scene units with a
leading ray batch dimension. The surface compositor works on interval
boundaries: ``n + 1`` ordered parameters per ray define ``n`` sample
pairs; heights are evaluated at the boundary points, per-pair opacity
from consecutive boundary altitudes, and colors at the pair midpoints
so color and opacity stay aligned.

Rays are assumed valid (clipped, ``t_far > t_near``); callers drop
invalid rays before rendering.
"""

from __future__ import annotations

import logging

import torch
from torch import nn
import torch.nn.functional as F

from neuralterrain.encoding import HashEncoding, HashEncodingSpec
from neuralterrain.fields import logistic_cdf

logger = logging.getLogger(__name__)

__all__ = [
    "sample_uniform",
    "resample_pdf",
    "surface_opacity",
    "product_transmittance",
    "composite",
    "density_weights",
    "render_rays",
    "ProposalSampler",
    "interlevel_consistency",
]

# Below this, the sigmoid at the pair's upper altitude has underflowed:
# the sample is buried so deep that its contribution is defined as zero.
_CDF_UNDERFLOW = 1e-30

_ACCUMULATION_EPS = 1e-10


def sample_uniform(t_near, t_far, n, jitter=False, generator=None):
    """Stratified samples in ``[t_near, t_far]`` per ray.

    The span is split into ``n`` equal bins; without jitter each bin
    contributes its midpoint, with jitter one uniform draw per bin.

    Args:
        t_near: ``[r]`` span starts.
        t_far: ``[r]`` span ends, elementwise greater than ``t_near``.
        n: Samples per ray, at least 2.
        jitter: Randomize within bins.
        generator: Torch generator for the jitter draws.

    Returns:
        ``[r, n]`` increasing sample parameters.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if not (torch.isfinite(t_near).all() and torch.isfinite(t_far).all()):
        raise ValueError("ray spans must be finite")
    if not (t_far > t_near).all():
        raise ValueError("t_far must exceed t_near for every ray")
    r = t_near.shape[0]
    if jitter:
        offsets = torch.rand(r, n, generator=generator, dtype=t_near.dtype)
    else:
        offsets = torch.full((r, n), 0.5, dtype=t_near.dtype)
    u = (torch.arange(n, dtype=t_near.dtype)[None, :] + offsets) / n
    return t_near[:, None] + u * (t_far - t_near)[:, None]


def resample_pdf(bounds, weights, n, jitter=False, generator=None):
    """Draw ``n`` samples from a per-ray piecewise-constant PDF.

    The PDF over each ray's span is proportional to ``weights`` on the
    intervals defined by ``bounds``. Sampling inverts the CDF at
    stratified positions, so outputs are ordered. Rays whose weights sum
    to ~0 fall back to uniform sampling (logged, not an error).

    Args:
        bounds: ``[r, p+1]`` interval boundaries, increasing.
        weights: ``[r, p]`` nonnegative interval masses.
        n: Samples per ray.
        jitter: Randomize the stratified CDF positions.
        generator: Torch generator for the jitter draws.

    Returns:
        ``[r, n]`` non-decreasing sample parameters.
    """
    weights = weights.detach()
    total = weights.sum(dim=-1, keepdim=True)
    degenerate = total < 1e-12
    if degenerate.any():
        logger.warning(
            "resample_pdf: %d rays with all-zero weights fell back to uniform",
            int(degenerate.sum()),
        )
        weights = torch.where(
            degenerate, torch.ones_like(weights), weights
        )
        total = weights.sum(dim=-1, keepdim=True)

    pdf = weights / total
    cdf = torch.cat(
        [torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf, dim=-1)], dim=-1
    )

    r = bounds.shape[0]
    if jitter:
        offsets = torch.rand(r, n, generator=generator, dtype=bounds.dtype)
    else:
        offsets = torch.full((r, n), 0.5, dtype=bounds.dtype)
    u = (torch.arange(n, dtype=bounds.dtype)[None, :] + offsets) / n

    index = torch.searchsorted(cdf, u.contiguous(), right=True) - 1
    index = index.clamp(0, weights.shape[-1] - 1)
    cdf_lo = torch.gather(cdf, -1, index)
    cdf_hi = torch.gather(cdf, -1, index + 1)
    span = cdf_hi - cdf_lo
    frac = (u - cdf_lo) / torch.where(span > 1e-12, span, torch.ones_like(span))
    lo = torch.gather(bounds, -1, index)
    hi = torch.gather(bounds, -1, index + 1)
    return lo + frac * (hi - lo)


def surface_opacity(z_hi, z_lo, s):
    """Per-pair opacity from altitudes above terrain at pair boundaries.

    ``alpha = max((cdf(z_hi) - cdf(z_lo)) / cdf(z_hi), 0)`` with
    ``cdf = logistic_cdf(., s)``. A descending ray crossing the surface
    has ``z_hi > 0 > z_lo`` and gets positive opacity; pairs with
    non-decreasing altitude clamp to zero. When ``cdf(z_hi)`` has
    underflowed (sample buried far below the surface) the opacity is
    defined as zero.

    Args:
        z_hi: ``[...]`` altitude at the pair's first boundary.
        z_lo: ``[...]`` altitude at the pair's second boundary.
        s: Positive sigmoid sharpness (scalar or broadcastable tensor).

    Returns:
        Opacities in ``[0, 1]`` with the shape of the inputs.
    """
    cdf_hi = logistic_cdf(z_hi, s)
    cdf_lo = logistic_cdf(z_lo, s)
    # Safe denominator everywhere: torch.where still propagates NaN
    # gradients from an untaken branch if the raw division blows up.
    denom = cdf_hi.clamp_min(_CDF_UNDERFLOW)
    ratio = (cdf_hi - cdf_lo) / denom
    alpha = torch.where(cdf_hi > _CDF_UNDERFLOW, ratio, torch.zeros_like(ratio))
    return alpha.clamp_min(0.0)


def product_transmittance(alpha):
    """Fraction of light surviving to each sample: ``T_i = prod_{j<i}(1 - a_j)``.

    Args:
        alpha: ``[r, n]`` per-sample opacities in ``[0, 1]``.

    Returns:
        ``[r, n]`` transmittances; ``T_1 = 1`` and ``T`` is non-increasing.
    """
    survive = 1.0 - alpha
    shifted = torch.cumprod(survive, dim=-1)[..., :-1]
    return torch.cat([torch.ones_like(alpha[..., :1]), shifted], dim=-1)


def composite(colors, alpha, transmittance, t_mid):
    """Blend per-sample colors into pixel color, depth and accumulation.

    Args:
        colors: ``[r, n, d]`` sample colors.
        alpha: ``[r, n]`` opacities.
        transmittance: ``[r, n]`` transmittances.
        t_mid: ``[r, n]`` sample parameters used for the depth estimate.

    Returns:
        Dict with ``color [r, d]``, ``depth [r]`` (weight-normalized
        expected termination distance), ``accumulation [r]`` and
        ``weights [r, n]``.
    """
    weights = transmittance * alpha
    color = (weights[..., None] * colors).sum(dim=-2)
    accumulation = weights.sum(dim=-1)
    depth = (weights * t_mid).sum(dim=-1) / accumulation.clamp_min(
        _ACCUMULATION_EPS
    )
    return {
        "color": color,
        "depth": depth,
        "accumulation": accumulation,
        "weights": weights,
    }


def density_weights(sigma, delta):
    """Classic density compositing weights (baseline renderer).

    ``w_i = T_i (1 - exp(-sigma_i delta_i))`` with
    ``T_i = exp(-sum_{j<i} sigma_j delta_j)``.

    Args:
        sigma: ``[r, n]`` nonnegative densities.
        delta: ``[r, n]`` positive sample spacings.

    Returns:
        ``[r, n]`` weights with ``sum w <= 1`` per ray.
    """
    if (sigma < 0).any():
        raise ValueError("sigma must be nonnegative")
    optical = sigma * delta
    accumulated = torch.cumsum(optical, dim=-1) - optical  # sum over j < i
    transmittance = torch.exp(-accumulated)
    return transmittance * (1.0 - torch.exp(-optical))


def render_rays(
    origins,
    directions,
    t_near,
    t_far,
    height_fn,
    color_fn,
    s,
    n_samples=32,
    jitter=False,
    generator=None,
    sampler=None,
):
    """Render a bundle of valid rays against height and color fields.

    Pipeline: sample interval boundaries (uniform, or via ``sampler``),
    evaluate heights at the boundary points, form per-pair opacities
    from the altitudes ``z' = z - h``, accumulate transmittance and
    composite midpoint colors. Unfilled accumulation composites over a
    black background implicitly.

    Args:
        origins: ``[r, 3]`` ray origins, normalized units.
        directions: ``[r, 3]`` unit directions.
        t_near: ``[r]`` span starts.
        t_far: ``[r]`` span ends.
        height_fn: ``[m, 2] -> [m]`` height field (normalized z).
        color_fn: ``[m, 2] -> [m, d]`` color field.
        s: Opacity sharpness (scalar tensor for gradient flow).
        n_samples: Pairs per ray (``n_samples + 1`` boundaries).
        jitter: Stratified jitter for sampling.
        generator: Torch generator for all random draws.
        sampler: Optional :class:`ProposalSampler`; if given it chooses
            the boundaries and its stage histograms are returned for the
            consistency objective.

    Returns:
        The :func:`composite` dict plus ``t_bounds [r, n+1]``,
        ``heights [r, n+1]`` and ``proposal_stages`` (list of
        ``(bounds, weights)`` tuples, empty without a sampler).
    """
    if sampler is not None:
        t_bounds, stages = sampler.sample(
            origins, directions, t_near, t_far, n_samples + 1, jitter, generator
        )
    else:
        t_bounds = sample_uniform(t_near, t_far, n_samples + 1, jitter, generator)
        stages = []

    points = origins[:, None, :] + t_bounds[..., None] * directions[:, None, :]
    r, n_bounds = t_bounds.shape
    heights = height_fn(points[..., :2].reshape(-1, 2)).reshape(r, n_bounds)
    altitude = points[..., 2] - heights  # z' at the boundaries

    alpha = surface_opacity(altitude[..., :-1], altitude[..., 1:], s)
    transmittance = product_transmittance(alpha)

    t_mid = 0.5 * (t_bounds[..., :-1] + t_bounds[..., 1:])
    mid_points = origins[:, None, :] + t_mid[..., None] * directions[:, None, :]
    colors = color_fn(mid_points[..., :2].reshape(-1, 2)).reshape(r, n_bounds - 1, -1)

    out = composite(colors, alpha, transmittance, t_mid)
    out["t_bounds"] = t_bounds
    out["heights"] = heights
    out["proposal_stages"] = stages
    return out


class _DensityProxy(nn.Module):
    """Small volumetric density field guiding one proposal stage."""

    def __init__(self, spec, hidden_dim, generator, dtype):
        super().__init__()
        self.encoding = HashEncoding(spec, generator=generator, dtype=dtype)
        self.layer1 = nn.Linear(self.encoding.output_dim, hidden_dim, dtype=dtype)
        self.layer2 = nn.Linear(hidden_dim, 1, dtype=dtype)
        for layer in (self.layer1, self.layer2):
            bound = 1.0 / layer.in_features**0.5
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.uniform_(-bound, bound, generator=generator)

    def forward(self, points):
        h = F.softplus(self.layer1(self.encoding(points)))
        return F.softplus(self.layer2(h)).squeeze(-1)


class ProposalSampler(nn.Module):
    """Iterative importance sampler guided by trained density proxies.

    Stage ``k`` renders its density proxy on the previous stage's
    boundaries (uniform for the first stage) and resamples the next
    boundaries from the induced histogram; the final resampling feeds
    the main fields. Proxies are plain density fields trained with the
    interlevel consistency objective against the fine weights.
    """

    def __init__(
        self,
        n_per_stage=(64, 32),
        domain=10.0,
        hidden_dim=16,
        max_resolutions=(64, 128),
        generator=None,
        dtype=torch.float32,
    ):
        super().__init__()
        if len(n_per_stage) < 1:
            raise ValueError("need at least one proposal stage")
        if len(max_resolutions) != len(n_per_stage):
            raise ValueError("max_resolutions must match n_per_stage")
        self.n_per_stage = tuple(int(n) for n in n_per_stage)
        self.proxies = nn.ModuleList(
            _DensityProxy(
                HashEncodingSpec(
                    input_dims=3,
                    levels=5,
                    base_resolution=4,
                    max_resolution=max_res,
                    log2_table_size=17,
                    features_per_level=2,
                    domain=domain,
                ),
                hidden_dim,
                generator,
                dtype,
            )
            for max_res in max_resolutions
        )

    def sample(self, origins, directions, t_near, t_far, n_bounds, jitter,
               generator=None):
        """Choose ``n_bounds`` boundaries per ray (see class docs).

        Returns:
            ``(bounds [r, n_bounds], stages)`` where ``stages`` is a
            list of ``(stage_bounds, stage_weights)`` with live
            gradients into the proxies.
        """
        stages = []
        bounds = None
        for proxy, n in zip(self.proxies, self.n_per_stage):
            if bounds is None:
                bounds = sample_uniform(t_near, t_far, n + 1, jitter, generator)
            else:
                bounds = resample_pdf(bounds, weights, n + 1, jitter, generator)
            t_mid = 0.5 * (bounds[..., :-1] + bounds[..., 1:])
            points = (
                origins[:, None, :] + t_mid[..., None] * directions[:, None, :]
            )
            sigma = proxy(points.reshape(-1, 3)).reshape(t_mid.shape)
            delta = bounds[..., 1:] - bounds[..., :-1]
            weights = density_weights(sigma, delta.clamp_min(1e-12))
            stages.append((bounds, weights))
        final = resample_pdf(bounds, weights, n_bounds, jitter, generator)
        return final, stages


def interlevel_consistency(t_fine, w_fine, stages):
    """Consistency objective tying proposal histograms to fine weights.

    For every fine interval, a proposal stage must place at least as
    much mass on the overlapping region (outer measure); any shortfall
    is penalized. Fine weights are detached: the objective trains the
    proxies, not the fields.

    Args:
        t_fine: ``[r, n+1]`` fine interval boundaries.
        w_fine: ``[r, n]`` fine weights.
        stages: List of ``(bounds [r, p+1], weights [r, p])``.

    Returns:
        Scalar loss (zero when every stage upper-bounds the fine mass).
    """
    w_fine = w_fine.detach()
    t_fine = t_fine.detach()
    total = t_fine.new_zeros(())
    for bounds, weights in stages:
        bounds = bounds.detach()
        cum = torch.cat(
            [torch.zeros_like(weights[:, :1]), torch.cumsum(weights, dim=-1)],
            dim=-1,
        )
        p = weights.shape[-1]
        idx_lo = (
            torch.searchsorted(bounds, t_fine[..., :-1].contiguous(), right=True)
            - 1
        ).clamp(0, p)
        idx_hi = torch.searchsorted(
            bounds, t_fine[..., 1:].contiguous(), right=False
        ).clamp(0, p)
        outer = torch.gather(cum, -1, idx_hi) - torch.gather(cum, -1, idx_lo)
        shortfall = (w_fine - outer).clamp_min(0.0)
        total = total + (shortfall**2 / (w_fine + 1e-7)).mean()
    return total
