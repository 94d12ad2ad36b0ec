"""Matching parsed samples: geometry embedding, entropy-driven
reweighting, the part-based distance, and the episode losses.

Distances compare a query parse against each class: fused support
expressions weighted per part, plus a geometry term over pairwise
part-layout embeddings. The discriminative loss is the negative log
posterior of the true class under a softmax over negated distances;
the divergence loss pushes each sample's part distributions to be
peaked and mutually distinct.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# floor for norms and normalizers that may legitimately reach zero
_NORM_FLOOR = 1e-9
_RHO_SHIFT = 1e-6


# -- geometry ----------------------------------------------------------


def geometry_embed(locations: Tensor, grid: int) -> Tensor:
    """Translation- and rotation-invariant embedding of part locations.

    Concatenates, in lexicographic part order: the K(K-1)/2 pairwise
    distances divided by the grid diagonal, then for every part triple
    its three interior angles (radians) at the vertices in index order.
    Coincident points give distance 0 and angle 0.

    Args:
        locations: (K, 2) part coordinates.
        grid: grid side used for the diagonal normalizer.

    Returns:
        Rank-1 tensor of length K(K-1)/2 + 3 * C(K, 3); empty for K < 2.
    """
    k = locations.data.shape[0]
    diag = max(float(grid - 1) * np.sqrt(2.0), _NORM_FLOOR)
    pieces = []
    sq_norms = {}
    for i, j in combinations(range(k), 2):
        delta = locations[i] - locations[j]
        sq = (delta * delta).sum()
        sq_norms[(i, j)] = sq
        pieces.append(ad.sqrt(sq) * (1.0 / diag))
    for i, j, kk in combinations(range(k), 3):
        for vertex, left, right in ((i, j, kk), (j, i, kk), (kk, i, j)):
            u = locations[left] - locations[vertex]
            v = locations[right] - locations[vertex]
            nu = ad.sqrt((u * u).sum())
            nv = ad.sqrt((v * v).sum())
            if nu.item() < _NORM_FLOOR or nv.item() < _NORM_FLOOR:
                pieces.append(ad.tensor(0.0))
                continue
            denom = nu * nv
            cos = ad.clip((u * v).sum() / ad.clip(denom, _NORM_FLOOR, np.inf), -1.0, 1.0)
            pieces.append(ad.arccos(cos))
    if not pieces:
        return ad.tensor(np.zeros(0))
    return ad.stack(pieces)


# -- reweighting -------------------------------------------------------


@dataclass
class ReweightParams:
    """Learnable entropy-to-weight maps.

    rho maps one entropy to one nonnegative support weight. alpha maps
    the M support entropies plus the query entropy of a part to a part
    logit; its input width pins the support size per run.
    """

    rho_weight: Tensor
    rho_bias: Tensor
    alpha_weight: Tensor
    alpha_bias: Tensor

    @classmethod
    def init(cls, support_size: int) -> "ReweightParams":
        # zero alpha gives exactly uniform part weights at the start;
        # rho bias 1 starts uniform while keeping ReLU gradients alive
        return cls(
            rho_weight=ad.parameter(0.0),
            rho_bias=ad.parameter(1.0),
            alpha_weight=ad.parameter(np.zeros(support_size + 1)),
            alpha_bias=ad.parameter(0.0),
        )

    @property
    def support_size(self) -> int:
        return self.alpha_weight.data.shape[0] - 1

    def parameters(self) -> list:
        return [self.rho_weight, self.rho_bias, self.alpha_weight, self.alpha_bias]


def rho_weights(entropies: Tensor, params: ReweightParams) -> Tensor:
    """Per-example fusion weights from support entropies.

    Args:
        entropies: (M, K) entropies of the class's support parses.

    Returns:
        (M, K) nonnegative weights summing to 1 over the M axis.
    """
    raw = ad.relu(entropies * params.rho_weight + params.rho_bias) + _RHO_SHIFT
    return raw / raw.sum(axis=0, keepdims=True)


def _fusion_weights(entropies: Tensor, params: ReweightParams,
                    use_rho: bool) -> Tensor:
    if use_rho:
        return rho_weights(entropies, params)
    return ad.tensor(np.full(entropies.data.shape, 1.0 / entropies.data.shape[0]))


def fuse_class(expressions: list, entropies: Tensor, params: ReweightParams,
               use_rho: bool = True) -> Tensor:
    """Weighted fusion of a class's support expressions.

    Args:
        expressions: M tensors of shape (K, S, C).
        entropies: (M, K) support entropies.

    Returns:
        (K, S, C) fused expressions; with one support example the
        result equals that example's expressions exactly.
    """
    m = len(expressions)
    stacked = ad.stack(expressions, axis=0)
    w = _fusion_weights(entropies, params, use_rho)
    k = w.data.shape[1]
    flat_tail = (1,) * (stacked.ndim - 2)
    return (stacked * ad.reshape(w, (m, k) + flat_tail)).sum(axis=0)


def alpha_weights(support_entropies: Tensor, query_entropy: Tensor,
                  params: ReweightParams, use_alpha: bool = True) -> Tensor:
    """Per-part weights from the support and query entropies of one
    (query, class) pairing.

    Args:
        support_entropies: (M, K).
        query_entropy: (K,).

    Returns:
        (K,) softmax-normalized part weights.
    """
    m, k = support_entropies.data.shape
    if not use_alpha:
        return ad.tensor(np.full(k, 1.0 / k))
    if params.support_size != m:
        raise ValueError(
            f"entropy vector length {m + 1} does not match alpha input width "
            f"{params.support_size + 1}"
        )
    per_part = ad.concat([support_entropies, ad.reshape(query_entropy, (1, k))], axis=0)
    logits = ad.transpose(per_part) @ params.alpha_weight + params.alpha_bias
    return ad.softmax(logits)


# -- distances ---------------------------------------------------------


@dataclass
class DistanceBreakdown:
    """Additive pieces of one query-to-class distance."""

    expression_terms: np.ndarray
    alpha: np.ndarray
    geometry_terms: np.ndarray
    beta: float
    total: float
    rho: np.ndarray | None = None

    def lines(self) -> list:
        out = [f"total = {self.total:.6f}"]
        for p, (term, a) in enumerate(zip(self.expression_terms, self.alpha)):
            out.append(f"part {p}: expression = {term:.6f}, alpha = {a:.6f}")
        for i, geo in enumerate(self.geometry_terms):
            out.append(f"support {i}: geometry = {geo:.6f} (beta = {self.beta})")
        if self.rho is not None:
            for i, row in enumerate(self.rho):
                vals = " ".join(f"{v:.6f}" for v in row)
                out.append(f"support {i}: rho = {vals}")
        return out


def distance(fused_expression: Tensor, query_expression: Tensor,
             support_embeddings: list, query_embedding: Tensor,
             alpha: Tensor, beta: float):
    """Part-weighted expression distance plus the geometry term.

    Returns:
        (total, breakdown): the scalar tensor
        sum_p alpha_p * ||fused_p - query_p||^2
        + beta * sum_i ||psi_i - psi_q||^2 and its recorded pieces.
    """
    diff = fused_expression - query_expression
    per_part = (diff * diff).sum(axis=tuple(range(1, diff.ndim)))
    total = (alpha * per_part).sum()
    geo_vals = []
    for emb in support_embeddings:
        gd = emb - query_embedding
        geo = (gd * gd).sum()
        total = total + geo * beta
        geo_vals.append(geo.item())
    breakdown = DistanceBreakdown(
        expression_terms=per_part.data.copy(),
        alpha=alpha.data.copy(),
        geometry_terms=np.asarray(geo_vals),
        beta=beta,
        total=total.item(),
    )
    return total, breakdown


@dataclass
class FusedClass:
    """Support-side quantities of one class, ready for query matching."""

    expression: Tensor
    entropies: Tensor
    embeddings: list
    rho: np.ndarray | None = None


def fuse_support(support_parses: list, reweight: ReweightParams, grid: int,
                 use_rho: bool = True) -> FusedClass:
    """Fuse one class's support parses (list of ParseOutput)."""
    m = len(support_parses)
    entropies = ad.stack([p.entropy for p in support_parses], axis=0)
    stacked = ad.stack([p.expression for p in support_parses], axis=0)
    w = _fusion_weights(entropies, reweight, use_rho)
    k = w.data.shape[1]
    flat_tail = (1,) * (stacked.ndim - 2)
    fused = (stacked * ad.reshape(w, (m, k) + flat_tail)).sum(axis=0)
    embeddings = [geometry_embed(p.location, grid) for p in support_parses]
    return FusedClass(expression=fused, entropies=entropies,
                      embeddings=embeddings, rho=w.data.copy())


def query_distances(query_parse, classes: list, reweight: ReweightParams,
                    beta: float, grid: int, use_alpha: bool = True,
                    want_breakdown: bool = False):
    """Distances from one query parse to every fused class.

    Returns:
        (distances, breakdowns): a (N,) tensor and, when requested, the
        per-class breakdown list.
    """
    q_emb = geometry_embed(query_parse.location, grid)
    totals = []
    breakdowns = [] if want_breakdown else None
    for cls in classes:
        a = alpha_weights(cls.entropies, query_parse.entropy, reweight,
                          use_alpha=use_alpha)
        total, bd = distance(cls.expression, query_parse.expression,
                             cls.embeddings, q_emb, a, beta)
        totals.append(total)
        if want_breakdown:
            bd.rho = cls.rho
            breakdowns.append(bd)
    return ad.stack(totals), breakdowns


def _neg_log_posterior(distances: Tensor, true_index: int) -> Tensor:
    """-log softmax(-d)[true] with a constant max shift."""
    shift = float((-distances.data).max())
    lse = ad.log(ad.exp(-distances - shift).sum()) + shift
    return distances[true_index] + lse


def episode_loss(support_parses: list, query_parses: list,
                 reweight: ReweightParams, beta: float, grid: int,
                 use_rho: bool = True, use_alpha: bool = True):
    """Discriminative loss of one episode, summed over queries.

    Args:
        support_parses: per-class lists of support ParseOutputs.
        query_parses: per-class lists of query ParseOutputs; the list
            index is the true class.

    Returns:
        (loss, predictions, distance_matrix): scalar tensor, flat int
        predictions in class-major query order, and the matching
        (n_queries, N) float distance matrix.
    """
    classes = [fuse_support(sp, reweight, grid, use_rho=use_rho)
               for sp in support_parses]
    loss = None
    preds = []
    rows = []
    for true_idx, queries in enumerate(query_parses):
        for qp in queries:
            dists, _ = query_distances(qp, classes, reweight, beta, grid,
                                       use_alpha=use_alpha)
            term = _neg_log_posterior(dists, true_idx)
            loss = term if loss is None else loss + term
            preds.append(int(dists.data.argmin()))
            rows.append(dists.data.copy())
    return loss, np.asarray(preds), np.asarray(rows)


# -- distribution overlap and the divergence loss ----------------------


def bhattacharyya(p, q):
    """Bhattacharyya coefficient and Hellinger distance of two
    distributions over the same support.

    Returns:
        (coefficient, distance) scalar tensors; the coefficient is
        sum_i sqrt(p_i q_i) and the distance sqrt(1 - coefficient).
    """
    pt = p if isinstance(p, Tensor) else ad.tensor(p)
    qt = q if isinstance(q, Tensor) else ad.tensor(q)
    if pt.data.shape != qt.data.shape:
        raise ValueError(f"distribution shapes differ: {pt.data.shape} vs {qt.data.shape}")
    for name, t in (("first", pt), ("second", qt)):
        if np.any(t.data < 0.0) or abs(t.data.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} argument is not a probability distribution")
    coeff = _bc_coefficient(pt, qt)
    dist = ad.sqrt(ad.clip(1.0 - coeff, 0.0, np.inf))
    return coeff, dist


def _bc_coefficient(pt: Tensor, qt: Tensor) -> Tensor:
    root = np.sqrt(pt.data * qt.data)

    def fn(g):
        safe = np.maximum(2.0 * root, _NORM_FLOOR)
        dp = np.where(root > 0.0, qt.data / safe, 0.0) * g
        dq = np.where(root > 0.0, pt.data / safe, 0.0) * g
        return dp, dq

    return ad.make_op(root.sum(), (pt, qt), fn)


def divergence_loss(distribution: Tensor, eta: float) -> Tensor:
    """Peakedness-plus-overlap penalty of one sample's part distributions.

    For (K, G, G) distributions: the negative log of each part's
    self-mass sum_u Pr^2, plus eta times the Bhattacharyya coefficient
    summed over ordered part pairs.
    """
    k = distribution.data.shape[0]
    flat = ad.reshape(distribution, (k, -1))
    self_mass = (flat * flat).sum(axis=1)
    loss = -ad.log(self_mass).sum()
    if k > 1 and eta != 0.0:
        overlap = None
        for i, j in combinations(range(k), 2):
            coeff = _bc_coefficient(flat[i], flat[j])
            overlap = coeff if overlap is None else overlap + coeff
        # ordered pairs double the unordered sum
        loss = loss + overlap * (2.0 * eta)
    return loss
