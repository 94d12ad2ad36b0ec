"""Parsing feature maps into located, sparsely expressed parts.

A part is modeled by one template kernel per (scale, channel). Parsing
a feature map runs, per part: match scores everywhere on the grid ->
temperature softmax into a location distribution -> soft location by
expectation -> per-scale expression coefficients read out at that
location and hard-thresholded. Every step stays differentiable; the
hard argmax location is carried only as a diagnostic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# cells farther than this (Chebyshev) from the bump center get zero weight
BUMP_TRUNCATION_RADIUS = 3

# kernels whose norm falls below this are considered collapsed
DEGENERATE_KERNEL_NORM = 1e-6


@dataclass(frozen=True)
class ParserConfig:
    """Sizes and constants for the part parser.

    Attributes:
        k_parts: number of parts K.
        channels: feature channels C.
        grid: feature map side G.
        scales: template sides, odd and strictly increasing.
        temperature: softmax temperature for location distributions.
        threshold: expression magnitudes below this are zeroed.
        sparsity: score offset constant; each channel's offset is
            sparsity / kernel norm.
        delta_variance: variance of the Gaussian bump standing in for a
            point mass at the soft location.
    """

    k_parts: int
    channels: int
    grid: int
    scales: tuple = (1, 3, 5)
    temperature: float = 0.01
    threshold: float = 0.05
    sparsity: float = 0.0
    delta_variance: float = 0.5

    def __post_init__(self):
        if self.k_parts < 1:
            raise ValueError(f"k_parts must be >= 1, got {self.k_parts}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.grid < 1:
            raise ValueError(f"grid must be >= 1, got {self.grid}")
        scales = tuple(int(s) for s in self.scales)
        if not scales:
            raise ValueError("scales must be non-empty")
        if any(s % 2 == 0 or s < 1 for s in scales):
            raise ValueError(f"scales must be positive odd integers, got {scales}")
        if any(s > self.grid for s in scales):
            raise ValueError(f"scale exceeds grid side {self.grid}: {scales}")
        if list(scales) != sorted(set(scales)):
            raise ValueError(f"scales must be strictly increasing, got {scales}")
        object.__setattr__(self, "scales", scales)
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.threshold < 0.0:
            raise ValueError(f"threshold must be >= 0, got {self.threshold}")
        if self.delta_variance <= 0.0:
            raise ValueError(f"delta_variance must be positive, got {self.delta_variance}")


class PartDictionary:
    """Learnable template kernels, one per (part, scale, channel).

    ``kernels[i]`` is a (K, C, s_i, s_i) leaf tensor aligned with
    ``scales[i]``. Match templates are the kernels scaled to unit norm;
    they are recomputed from the raw kernels on every use so optimizer
    updates flow through.
    """

    def __init__(self, scales, kernels):
        self.scales = tuple(scales)
        self.kernels = list(kernels)

    @classmethod
    def init_random(cls, config: ParserConfig, rng: np.random.Generator) -> "PartDictionary":
        kernels = []
        for s in config.scales:
            raw = rng.standard_normal((config.k_parts, config.channels, s, s))
            norms = np.sqrt((raw ** 2).sum(axis=(2, 3), keepdims=True))
            kernels.append(ad.parameter(raw / norms))
        return cls(config.scales, kernels)

    def parameters(self) -> list:
        return list(self.kernels)

    def unit_templates(self, scale_index: int):
        """Unit-norm templates and raw norms for one scale, tracked.

        Returns:
            (theta, norms): theta is (K, C, s, s) with each kernel at
            unit norm, norms is (K, C).
        """
        d = self.kernels[scale_index]
        norms = ad.sqrt((d * d).sum(axis=(2, 3)))
        k, c = norms.shape
        theta = d / norms.reshape(k, c, 1, 1)
        return theta, norms

    def reseed_degenerate(self, rng: np.random.Generator) -> int:
        """Replace collapsed kernels with fresh unit-norm draws.

        Returns the number of kernels replaced.
        """
        replaced = 0
        for t in self.kernels:
            flat = t.data.reshape(t.data.shape[0] * t.data.shape[1], -1)
            norms = np.sqrt((flat ** 2).sum(axis=1))
            for i in np.nonzero(norms < DEGENERATE_KERNEL_NORM)[0]:
                draw = rng.standard_normal(flat.shape[1])
                flat[i] = draw / np.sqrt((draw ** 2).sum())
                replaced += 1
        return replaced


@dataclass
class ParseOutput:
    """Differentiable parse of one feature map.

    Attributes:
        scores: (K, G, G) match scores.
        distribution: (K, G, G) location distributions.
        location: (K, 2) soft (row, col) locations.
        hard_location: (K, 2) int argmax cells, diagnostics only.
        entropy: (K,) location entropies.
        raw_expression: (K, n_scales, C) pre-threshold coefficients.
        expression: (K, n_scales, C) thresholded coefficients.
    """

    scores: Tensor
    distribution: Tensor
    location: Tensor
    hard_location: np.ndarray
    entropy: Tensor
    raw_expression: Tensor
    expression: Tensor

    def validate(self, config: ParserConfig, tol: float = 1e-6) -> None:
        """Raise if any structural invariant is broken."""
        g = config.grid
        sums = self.distribution.data.sum(axis=(1, 2))
        if not np.all(np.abs(sums - 1.0) <= tol):
            raise ValueError(f"location distributions do not sum to 1: {sums}")
        if np.any(self.distribution.data < 0.0):
            raise ValueError("location distribution has negative mass")
        # one-hot distributions summing to 1 +/- eps can push the
        # expectation past the edge by float dust
        loc = self.location.data
        if np.any(loc < -tol) or np.any(loc > g - 1 + tol):
            raise ValueError(f"soft location outside the grid: {loc}")
        hmax = 2.0 * np.log(g)
        if np.any(self.entropy.data < -tol) or np.any(self.entropy.data > hmax + tol):
            raise ValueError(f"entropy outside [0, 2 ln G]: {self.entropy.data}")
        z = self.expression.data
        small = (z != 0.0) & (np.abs(z) < config.threshold)
        if np.any(small):
            raise ValueError("thresholded expression has nonzero entries below threshold")


_GRID_CACHE = {}


def _grid_coords(g: int):
    if g not in _GRID_CACHE:
        rows, cols = np.meshgrid(np.arange(g, dtype=np.float64),
                                 np.arange(g, dtype=np.float64), indexing="ij")
        _GRID_CACHE[g] = (rows, cols)
    return _GRID_CACHE[g]


def _channel_first(phi) -> Tensor:
    t = phi if isinstance(phi, Tensor) else ad.tensor(phi)
    if t.data.ndim != 3:
        raise ValueError(f"feature map must be rank 3 (G, G, C), got shape {t.data.shape}")
    return ad.transpose(t, (2, 0, 1))


def _score_pieces(phi, dictionary: PartDictionary, config: ParserConfig):
    """Shared forward pieces: score maps plus per-scale correlations and norms."""
    if tuple(dictionary.scales) != tuple(config.scales):
        raise ValueError(
            f"dictionary scales {dictionary.scales} do not match config scales {config.scales}"
        )
    phi_cf = _channel_first(phi)
    if phi_cf.data.shape != (config.channels, config.grid, config.grid):
        raise ValueError(
            f"feature map shape {phi_cf.data.shape[::-1]} does not match config "
            f"(G={config.grid}, C={config.channels})"
        )
    corr_by_scale = []
    norm_by_scale = []
    total = None
    for i in range(len(config.scales)):
        theta, norms = dictionary.unit_templates(i)
        corr = ad.depthwise_correlate(phi_cf, theta)
        corr_by_scale.append(corr)
        norm_by_scale.append(norms)
        if config.sparsity != 0.0:
            k, c = norms.shape
            offsets = (config.sparsity / norms).reshape(k, c, 1, 1)
            diff = corr - offsets
        else:
            diff = corr
        contrib = (diff * diff).sum(axis=1)
        total = contrib if total is None else total + contrib
    return total, corr_by_scale, norm_by_scale


def location_scores(phi, dictionary: PartDictionary, config: ParserConfig) -> Tensor:
    """Per-part match score maps, (K, G, G).

    The score at a cell is the sum over scales and channels of the
    squared offset-corrected correlation between the feature map and
    the unit-norm template centered there.
    """
    scores, _, _ = _score_pieces(phi, dictionary, config)
    return scores


def location_distribution(scores: Tensor, temperature: float) -> Tensor:
    """Temperature softmax of each part's score map over the grid."""
    k, g, g2 = scores.data.shape
    flat = ad.reshape(scores, (k, g * g2))
    return ad.reshape(ad.softmax(flat, temperature=temperature), (k, g, g2))


def estimate_location(distribution: Tensor):
    """Soft locations (expected grid coordinates) plus hard argmax cells.

    Ties in the hard argmax resolve to the smallest row-major index.
    The hard cells are diagnostics; gradients flow only through the
    soft locations.

    Returns:
        (soft, hard): soft is a (K, 2) tensor, hard a (K, 2) int array.
    """
    k, g, _ = distribution.data.shape
    rows, cols = _grid_coords(g)
    soft_r = (distribution * rows).sum(axis=(1, 2))
    soft_c = (distribution * cols).sum(axis=(1, 2))
    soft = ad.stack([soft_r, soft_c], axis=1)
    flat_arg = distribution.data.reshape(k, -1).argmax(axis=1)
    hard = np.stack(np.divmod(flat_arg, g), axis=1).astype(np.int64)
    return soft, hard


def location_entropy(distribution) -> Tensor:
    """Shannon entropy (nats) of each part's location distribution.

    Accepts (K, G, G) or a single distribution of any shape; zero cells
    contribute zero. Returns (K,) in the stacked case, a scalar
    otherwise.
    """
    t = distribution if isinstance(distribution, Tensor) else ad.tensor(distribution)
    if t.data.ndim == 3:
        p = ad.reshape(t, (t.data.shape[0], -1))
        axis = 1
    else:
        p = ad.reshape(t, (-1,))
        axis = 0
    pd = p.data
    mask = pd > 0.0
    plogp = np.zeros_like(pd)
    np.log(pd, out=plogp, where=mask)
    plogp *= pd
    out_data = -plogp.sum(axis=axis)

    def fn(g):
        g_exp = np.expand_dims(g, axis) if t.data.ndim == 3 else g
        dlog = np.zeros_like(pd)
        np.log(pd, out=dlog, where=mask)
        return (-(dlog + 1.0) * mask * g_exp,)

    out = ad.make_op(out_data, (p,), fn)
    return out


def gaussian_bumps(location: Tensor, grid: int, variance: float) -> Tensor:
    """Unit-sum truncated Gaussian maps centered on soft locations.

    Each part's map is exp(-d^2 / (2 variance)) on cells within
    Chebyshev radius 3 of the nearest cell to its location, normalized
    to sum 1 over the in-grid support; differentiable in the locations.
    """
    k = location.data.shape[0]
    rows, cols = _grid_coords(grid)
    mu_r = ad.reshape(location[:, 0], (k, 1, 1))
    mu_c = ad.reshape(location[:, 1], (k, 1, 1))
    dr = ad.tensor(rows.reshape(1, grid, grid)) - mu_r
    dc = ad.tensor(cols.reshape(1, grid, grid)) - mu_c
    d2 = dr * dr + dc * dc
    # constant shift by the per-part minimum cancels in normalization
    # but keeps the exponent in range for tiny variances
    shift = d2.data.min(axis=(1, 2), keepdims=True)
    raw = ad.exp((d2 - ad.tensor(shift)) * (-0.5 / variance))
    center = np.round(location.data)
    cheb = np.maximum(
        np.abs(rows.reshape(1, grid, grid) - center[:, 0].reshape(k, 1, 1)),
        np.abs(cols.reshape(1, grid, grid) - center[:, 1].reshape(k, 1, 1)),
    )
    mask = (cheb <= BUMP_TRUNCATION_RADIUS).astype(np.float64)
    masked = raw * mask
    return masked / masked.sum(axis=(1, 2), keepdims=True)


def threshold_expression(raw: Tensor, threshold: float) -> Tensor:
    """Zero entries with magnitude below the threshold.

    The backward rule is straight-through: gradients pass unchanged, as
    if no thresholding had happened.
    """
    keep = np.abs(raw.data) >= threshold
    return ad.make_op(np.where(keep, raw.data, 0.0), (raw,), lambda g: (g,))


def part_expression(phi, dictionary: PartDictionary, location: Tensor,
                    config: ParserConfig) -> Tensor:
    """Pre-threshold expression coefficients at given locations, (K, n_scales, C).

    The coefficient for (part, scale, channel) is the Gaussian-weighted
    correlation response around the part's location, divided by the
    squared kernel norm.
    """
    _, corr_by_scale, norm_by_scale = _score_pieces(phi, dictionary, config)
    return _expressions_from_pieces(corr_by_scale, norm_by_scale, location, config)


def _expressions_from_pieces(corr_by_scale, norm_by_scale, location, config):
    k = location.data.shape[0]
    bumps = gaussian_bumps(location, config.grid, config.delta_variance)
    weights = ad.reshape(bumps, (k, 1, config.grid, config.grid))
    per_scale = []
    for corr, norms in zip(corr_by_scale, norm_by_scale):
        weighted = (corr * weights).sum(axis=(2, 3))
        per_scale.append(weighted / norms)
    return ad.stack(per_scale, axis=1)


def parse(phi, dictionary: PartDictionary, config: ParserConfig) -> ParseOutput:
    """Full differentiable parse of one (G, G, C) feature map."""
    scores, corr_by_scale, norm_by_scale = _score_pieces(phi, dictionary, config)
    dist = location_distribution(scores, config.temperature)
    soft, hard = estimate_location(dist)
    entropy = location_entropy(dist)
    raw = _expressions_from_pieces(corr_by_scale, norm_by_scale, soft, config)
    expr = threshold_expression(raw, config.threshold)
    return ParseOutput(
        scores=scores,
        distribution=dist,
        location=soft,
        hard_location=hard,
        entropy=entropy,
        raw_expression=raw,
        expression=expr,
    )
