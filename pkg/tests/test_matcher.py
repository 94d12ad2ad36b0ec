"""Matcher: geometry embedding, reweighting, distances, divergence."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dopm import autodiff as ad
from dopm import matcher
from dopm.matcher import (ReweightParams, alpha_weights, bhattacharyya,
                          divergence_loss, episode_loss, distance,
                          fuse_class, fuse_support, geometry_embed,
                          query_distances, rho_weights)
from dopm.parsing import ParserConfig, PartDictionary, parse
from oracles import reference_geometry


# -- geometry ------------------------------------------------------------


def test_geometry_345_triangle():
    locs = ad.tensor(np.array([[0.0, 0.0], [3.0, 0.0], [3.0, 4.0]]))
    emb = geometry_embed(locs, grid=5).data
    diag = 4.0 * np.sqrt(2.0)
    want = [3.0 / diag, 5.0 / diag, 4.0 / diag,
            np.arccos(0.6), np.pi / 2.0, np.arccos(0.8)]
    np.testing.assert_allclose(emb, want, atol=1e-12)


def test_geometry_translation_and_rotation_invariance():
    rng = np.random.default_rng(0)
    locs = rng.uniform(0.0, 7.0, size=(4, 2))
    base = geometry_embed(ad.tensor(locs), grid=8).data
    shifted = geometry_embed(ad.tensor(locs + [1.25, -2.0]), grid=8).data
    np.testing.assert_allclose(shifted, base, atol=1e-9)
    th = 0.6
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    rotated = geometry_embed(ad.tensor(locs @ rot.T), grid=8).data
    np.testing.assert_allclose(rotated, base, atol=1e-9)


def test_geometry_matches_reference():
    rng = np.random.default_rng(1)
    for _ in range(20):
        locs = rng.uniform(0.0, 9.0, size=(3, 2))
        got = geometry_embed(ad.tensor(locs), grid=10).data
        np.testing.assert_allclose(got, reference_geometry(locs, 10), atol=1e-10)


def test_geometry_coincident_points():
    locs = ad.tensor(np.array([[2.0, 2.0], [2.0, 2.0], [5.0, 1.0]]))
    emb = geometry_embed(locs, grid=8).data
    assert emb[0] == 0.0
    assert emb[3] == 0.0 and emb[4] == 0.0


def test_geometry_small_k():
    assert geometry_embed(ad.tensor(np.zeros((1, 2))), grid=8).data.size == 0
    emb = geometry_embed(ad.tensor(np.array([[0.0, 0.0], [7.0, 7.0]])), grid=8)
    np.testing.assert_allclose(emb.data, [1.0], atol=1e-12)


def test_geometry_gradients():
    rng = np.random.default_rng(2)
    locs = ad.parameter(rng.uniform(1.0, 6.0, size=(3, 2)))
    w = rng.standard_normal(6)

    def f():
        return (geometry_embed(locs, grid=8) * ad.tensor(w)).sum()

    err = ad.grad_check(f, [locs], rng=np.random.default_rng(3))
    assert err < 1e-4


# -- reweighting -----------------------------------------------------------


def test_init_reweight_is_uniform():
    params = ReweightParams.init(support_size=3)
    ent = ad.tensor(np.random.default_rng(4).uniform(0.0, 2.0, size=(3, 2)))
    w = rho_weights(ent, params)
    np.testing.assert_allclose(w.data, 1.0 / 3.0, atol=1e-6)
    a = alpha_weights(ent, ad.tensor(np.array([0.3, 0.9])), params)
    np.testing.assert_allclose(a.data, 0.5, atol=1e-12)


def test_rho_weights_hand_map():
    params = ReweightParams(
        rho_weight=ad.tensor(2.0), rho_bias=ad.tensor(0.1),
        alpha_weight=ad.tensor(np.zeros(2)), alpha_bias=ad.tensor(0.0))
    ent = np.array([[0.5, 1.0], [0.0, 2.0]])
    raw = np.maximum(2.0 * ent + 0.1, 0.0) + 1e-6
    want = raw / raw.sum(axis=0, keepdims=True)
    got = rho_weights(ad.tensor(ent), params).data
    np.testing.assert_allclose(got, want, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_reweight_normalization(seed):
    rng = np.random.default_rng(seed)
    m, k = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    params = ReweightParams(
        rho_weight=ad.tensor(rng.standard_normal()),
        rho_bias=ad.tensor(rng.standard_normal()),
        alpha_weight=ad.tensor(rng.standard_normal(m + 1)),
        alpha_bias=ad.tensor(rng.standard_normal()))
    ent = ad.tensor(rng.uniform(0.0, 2.0 * np.log(8), size=(m, k)))
    w = rho_weights(ent, params).data
    assert np.all(w >= 0.0)
    np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-9)
    a = alpha_weights(ent, ad.tensor(rng.uniform(0.0, 2.0, size=k)), params).data
    assert np.all(a > 0.0)
    np.testing.assert_allclose(a.sum(), 1.0, atol=1e-9)


def test_alpha_width_mismatch_raises():
    params = ReweightParams.init(support_size=1)
    ent = ad.tensor(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        alpha_weights(ent, ad.tensor(np.zeros(3)), params)


def test_disabled_paths_are_exactly_uniform():
    rng = np.random.default_rng(5)
    params = ReweightParams(
        rho_weight=ad.tensor(3.0), rho_bias=ad.tensor(-0.2),
        alpha_weight=ad.tensor(rng.standard_normal(3)),
        alpha_bias=ad.tensor(1.0))
    ent = ad.tensor(rng.uniform(0.0, 1.0, size=(2, 4)))
    a = alpha_weights(ent, ad.tensor(rng.uniform(0.0, 1.0, size=4)),
                      params, use_alpha=False)
    np.testing.assert_array_equal(a.data, 0.25)
    exprs = [ad.tensor(rng.standard_normal((4, 2, 3))) for _ in range(2)]
    fused = fuse_class(exprs, ent, params, use_rho=False)
    want = 0.5 * (exprs[0].data + exprs[1].data)
    np.testing.assert_allclose(fused.data, want, atol=1e-12)


def test_fuse_single_support_is_identity():
    rng = np.random.default_rng(6)
    expr = ad.tensor(rng.standard_normal((3, 2, 4)))
    ent = ad.tensor(rng.uniform(0.0, 2.0, size=(1, 3)))
    fused = fuse_class([expr], ent, ReweightParams.init(1))
    np.testing.assert_allclose(fused.data, expr.data, atol=1e-12)


# -- distance -----------------------------------------------------------


def test_distance_hand_example():
    fused = ad.tensor(np.array([[[1.0, 0.0]], [[0.5, 0.5]]]))
    query = ad.tensor(np.array([[[0.0, 0.0]], [[0.5, 0.0]]]))
    alpha = ad.tensor(np.array([0.3, 0.7]))
    s_emb = [ad.tensor(np.array([0.2, 0.4]))]
    q_emb = ad.tensor(np.array([0.2, 0.1]))
    total, bd = distance(fused, query, s_emb, q_emb, alpha, beta=0.5)
    want = 0.3 * 1.0 + 0.7 * 0.25 + 0.5 * 0.09
    assert abs(total.item() - want) < 1e-12
    np.testing.assert_allclose(bd.expression_terms, [1.0, 0.25], atol=1e-12)
    np.testing.assert_allclose(bd.geometry_terms, [0.09], atol=1e-12)


def test_breakdown_is_additive_and_printable():
    rng = np.random.default_rng(7)
    fused = ad.tensor(rng.standard_normal((3, 2, 2)))
    query = ad.tensor(rng.standard_normal((3, 2, 2)))
    alpha = ad.tensor(np.array([0.2, 0.5, 0.3]))
    s_emb = [ad.tensor(rng.standard_normal(6)) for _ in range(2)]
    q_emb = ad.tensor(rng.standard_normal(6))
    total, bd = distance(fused, query, s_emb, q_emb, alpha, beta=0.01)
    rebuilt = float((bd.alpha * bd.expression_terms).sum()
                    + bd.beta * bd.geometry_terms.sum())
    assert abs(bd.total - rebuilt) < 1e-9
    assert abs(total.item() - bd.total) < 1e-12
    text = bd.lines()
    assert text[0].startswith("total = ")
    assert len(text) == 1 + 3 + 2


# -- episode loss ----------------------------------------------------------


def episode_parses(seed, n_classes=3, m=1, q=2, identical=False):
    cfg = ParserConfig(k_parts=2, channels=2, grid=5, scales=(1, 3))
    rng = np.random.default_rng(seed)
    d = PartDictionary.init_random(cfg, rng)
    base = rng.standard_normal((5, 5, 2))

    def draw():
        phi = base if identical else rng.standard_normal((5, 5, 2))
        return parse(phi, d, cfg)

    support = [[draw() for _ in range(m)] for _ in range(n_classes)]
    query = [[draw() for _ in range(q)] for _ in range(n_classes)]
    return support, query, cfg


def test_identical_classes_give_log_n_loss():
    support, query, cfg = episode_parses(8, identical=True)
    loss, preds, dmat = episode_loss(support, query, ReweightParams.init(1),
                                     beta=0.01, grid=cfg.grid)
    assert abs(loss.item() - 6 * np.log(3)) < 1e-9
    np.testing.assert_array_equal(preds, 0)
    assert dmat.shape == (6, 3)
    assert np.ptp(dmat, axis=1).max() < 1e-12


def test_episode_loss_prefers_true_class():
    """Same-sample support/query must be classified correctly."""
    support, _, cfg = episode_parses(9)
    query = [[sp[0]] for sp in support]
    loss, preds, dmat = episode_loss(support, query, ReweightParams.init(1),
                                     beta=0.01, grid=cfg.grid)
    np.testing.assert_array_equal(preds, [0, 1, 2])
    assert np.allclose(np.diag(dmat), 0.0, atol=1e-9)
    assert loss.item() < 6 * np.log(3)


def test_query_distances_breakdown_count():
    support, query, cfg = episode_parses(10)
    classes = [fuse_support(sp, ReweightParams.init(1), cfg.grid)
               for sp in support]
    dists, bds = query_distances(query[0][0], classes, ReweightParams.init(1),
                                 beta=0.01, grid=cfg.grid, want_breakdown=True)
    assert dists.data.shape == (3,)
    assert len(bds) == 3
    assert bds[0].rho is not None


# -- bhattacharyya and divergence -------------------------------------------


def test_bhattacharyya_known_values():
    coeff, dist = bhattacharyya(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    assert abs(coeff.item() - np.sqrt(0.5)) < 1e-12
    assert abs(dist.item() - np.sqrt(1.0 - np.sqrt(0.5))) < 1e-12
    p = np.array([0.2, 0.3, 0.5])
    coeff, dist = bhattacharyya(p, p)
    assert abs(coeff.item() - 1.0) < 1e-12
    assert abs(dist.item()) < 1e-6


def test_bhattacharyya_validation():
    with pytest.raises(ValueError):
        bhattacharyya(np.array([0.5, 0.5]), np.array([0.5, 0.5, 0.0]))
    with pytest.raises(ValueError):
        bhattacharyya(np.array([0.7, 0.4]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        bhattacharyya(np.array([-0.1, 1.1]), np.array([0.5, 0.5]))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000))
def test_bhattacharyya_bounds(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    p = rng.random(n)
    q = rng.random(n)
    p[rng.random(n) < 0.2] = 0.0
    q[rng.random(n) < 0.2] = 0.0
    if p.sum() == 0.0 or q.sum() == 0.0:
        return
    p /= p.sum()
    q /= q.sum()
    coeff, dist = bhattacharyya(p, q)
    assert -1e-12 <= coeff.item() <= 1.0 + 1e-9
    assert -1e-12 <= dist.item() <= 1.0 + 1e-9


def test_bc_gradients_through_softmax():
    rng = np.random.default_rng(11)
    a = ad.parameter(rng.standard_normal(6))
    b = ad.parameter(rng.standard_normal(6))

    def f():
        coeff, _ = bhattacharyya(ad.softmax(a), ad.softmax(b))
        return coeff

    err = ad.grad_check(f, [a, b], rng=np.random.default_rng(12))
    assert err < 1e-4


def test_divergence_identical_one_hots():
    d = np.zeros((2, 4, 4))
    d[:, 1, 2] = 1.0
    eta = 0.7
    loss = divergence_loss(ad.tensor(d), eta)
    assert abs(loss.item() - 2.0 * eta) < 1e-12
    assert abs(divergence_loss(ad.tensor(d), 0.0).item()) < 1e-12


def test_divergence_uniform_peakedness():
    d = np.full((1, 4, 4), 1.0 / 16.0)
    loss = divergence_loss(ad.tensor(d), 1.0)
    assert abs(loss.item() - np.log(16.0)) < 1e-12


def test_divergence_descent_separates_parts():
    """50 gradient steps on the divergence drive down the mean overlap."""
    rng = np.random.default_rng(13)
    logits = ad.parameter(rng.standard_normal((3, 16)) * 0.1)

    def overlap_now():
        with ad.no_grad():
            p = ad.softmax(logits, axis=1).data
        total = 0.0
        for i in range(3):
            for j in range(i + 1, 3):
                total += np.sqrt(p[i] * p[j]).sum()
        return total / 3.0

    before = overlap_now()
    for _ in range(50):
        logits.zero_grad()
        p = ad.softmax(logits, axis=1)
        loss = divergence_loss(ad.reshape(p, (3, 4, 4)), eta=1.0)
        ad.backward(loss)
        logits.data -= 0.5 * logits.grad
    after = overlap_now()
    assert after < before - 0.05
