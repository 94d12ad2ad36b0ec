"""Part parser: scores, distributions, locations, expressions."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dopm import autodiff as ad
from dopm import parsing
from dopm.parsing import (ParserConfig, PartDictionary, gaussian_bumps,
                          location_distribution, location_entropy,
                          location_scores, estimate_location, parse,
                          threshold_expression)
from oracles import (best_fit_locations, fit_objectives, reference_entropy,
                     reference_expression, reference_softmax)


def tiny_config(**overrides):
    base = dict(k_parts=2, channels=3, grid=7, scales=(1, 3),
                temperature=0.01, threshold=0.05, delta_variance=0.5)
    base.update(overrides)
    return ParserConfig(**base)


def planted_dictionary(config, rng):
    """Unit-norm random dictionary, the same shape the parser trains."""
    return PartDictionary.init_random(config, rng)


def plant(config, dictionary, part, coefs, cells):
    """Feature map expressing `part`'s templates at given cells.

    coefs[(scale_index, channel)] = coefficient; cells is (K, 2) int.
    """
    g = config.grid
    phi = np.zeros((config.channels, g, g))
    for (si, c), a in coefs.items():
        s = config.scales[si]
        r = s // 2
        ker = dictionary.kernels[si].data[part, c]
        ker = ker / np.sqrt((ker ** 2).sum())
        i, j = cells[part]
        phi[c, i - r:i + r + 1, j - r:j + r + 1] += a * ker
    return phi.transpose(1, 2, 0)


# -- scores ------------------------------------------------------------


def test_planted_template_scores_strict_max():
    cfg = tiny_config()
    rng = np.random.default_rng(0)
    d = planted_dictionary(cfg, rng)
    cells = np.array([[3, 4], [1, 1]])
    phi = plant(cfg, d, 0, {(1, 0): 1.0}, cells)
    with ad.no_grad():
        scores = location_scores(phi, d, cfg).data
    flat = scores[0].ravel()
    top = flat.argmax()
    assert np.unravel_index(top, (7, 7)) == (3, 4)
    rest = np.delete(flat, top)
    assert flat[top] > rest.max() + 1e-9


def test_scores_invariant_to_kernel_rescale():
    """Match templates are unit-normalized, so at zero sparsity the raw
    kernel magnitudes cannot move the scores."""
    cfg = tiny_config(sparsity=0.0)
    rng = np.random.default_rng(1)
    d = planted_dictionary(cfg, rng)
    phi = rng.standard_normal((7, 7, 3))
    with ad.no_grad():
        base = location_scores(phi, d, cfg).data.copy()
        scaled = PartDictionary(
            cfg.scales, [ad.tensor(k.data * 7.5) for k in d.kernels])
        after = location_scores(phi, scaled, cfg).data
    np.testing.assert_allclose(after, base, atol=1e-10)


def test_sparsity_offset_changes_scores():
    cfg = tiny_config()
    cfg_sparse = tiny_config(sparsity=0.2)
    rng = np.random.default_rng(2)
    d = planted_dictionary(cfg, rng)
    phi = rng.standard_normal((7, 7, 3))
    with ad.no_grad():
        a = location_scores(phi, d, cfg).data
        b = location_scores(phi, d, cfg_sparse).data
    assert np.abs(a - b).max() > 1e-6


def test_scores_match_brute_force_objective():
    """Softmax argmax at zero sparsity equals the brute-force best-fit
    cell (score maximization == residual minimization)."""
    cfg = tiny_config()
    rng = np.random.default_rng(3)
    d = planted_dictionary(cfg, rng)
    for trial in range(20):
        phi = rng.standard_normal((7, 7, 3))
        with ad.no_grad():
            out = parse(phi, d, cfg)
        kernels_by_scale = [k.data for k in d.kernels]
        want = best_fit_locations(phi, kernels_by_scale)
        np.testing.assert_array_equal(out.hard_location, want)
        obj = fit_objectives(phi, kernels_by_scale)
        np.testing.assert_allclose(out.scores.data, -obj, atol=1e-9)


def test_score_shape_errors():
    cfg = tiny_config()
    d = planted_dictionary(cfg, np.random.default_rng(4))
    with pytest.raises(ValueError):
        location_scores(np.zeros((7, 7)), d, cfg)
    with pytest.raises(ValueError):
        location_scores(np.zeros((6, 6, 3)), d, cfg)
    other = tiny_config(scales=(1, 3, 5))
    with pytest.raises(ValueError):
        location_scores(np.zeros((7, 7, 3)), d, other)


# -- distributions and locations ----------------------------------------


def test_constant_scores_give_uniform():
    cfg = tiny_config()
    scores = ad.tensor(np.full((2, 7, 7), 3.3))
    dist = location_distribution(scores, cfg.temperature)
    np.testing.assert_allclose(dist.data, 1.0 / 49.0, atol=1e-12)
    soft, hard = estimate_location(dist)
    np.testing.assert_allclose(soft.data, 3.0, atol=1e-9)
    np.testing.assert_array_equal(hard, [[0, 0], [0, 0]])


def test_dominant_cell_takes_mass():
    t = 0.01
    scores = np.zeros((1, 7, 7))
    scores[0, 2, 5] = 10.0 * t
    dist = location_distribution(ad.tensor(scores), t)
    assert dist.data[0, 2, 5] > 0.99


def test_distribution_matches_reference_softmax():
    rng = np.random.default_rng(5)
    scores = rng.standard_normal((3, 5, 5))
    for t in (1.0, 0.1, 0.01):
        dist = location_distribution(ad.tensor(scores), t).data
        want = np.stack([
            reference_softmax(scores[k].ravel() / t).reshape(5, 5)
            for k in range(3)
        ])
        np.testing.assert_allclose(dist, want, atol=1e-12)


def test_one_hot_distribution_locates_exactly():
    dist = np.zeros((1, 5, 5))
    dist[0, 4, 1] = 1.0
    soft, hard = estimate_location(ad.tensor(dist))
    np.testing.assert_allclose(soft.data, [[4.0, 1.0]], atol=1e-12)
    np.testing.assert_array_equal(hard, [[4, 1]])


def test_argmax_tie_resolves_row_major():
    dist = np.zeros((1, 5, 5))
    dist[0, 1, 3] = 0.5
    dist[0, 2, 0] = 0.5
    _, hard = estimate_location(ad.tensor(dist))
    np.testing.assert_array_equal(hard, [[1, 3]])


def test_cold_softmax_approaches_argmax():
    rng = np.random.default_rng(6)
    scores = rng.standard_normal((2, 7, 7))
    dist = location_distribution(ad.tensor(scores), 1e-4)
    soft, hard = estimate_location(dist)
    assert np.abs(soft.data - hard).max() < 0.01


def test_soft_location_sharpens_monotonically():
    rng = np.random.default_rng(7)
    scores = rng.standard_normal((2, 7, 7))
    devs = []
    for t in (1.0, 0.1, 0.01, 1e-4):
        dist = location_distribution(ad.tensor(scores), t)
        soft, hard = estimate_location(dist)
        devs.append(np.abs(soft.data - hard).max())
    assert all(a >= b - 1e-12 for a, b in zip(devs, devs[1:]))


# -- entropy -------------------------------------------------------------


def test_entropy_known_values():
    one_hot = np.zeros((1, 5, 5))
    one_hot[0, 2, 2] = 1.0
    assert abs(location_entropy(ad.tensor(one_hot)).data[0]) < 1e-12
    uniform = np.full((1, 5, 5), 1.0 / 25.0)
    assert abs(location_entropy(ad.tensor(uniform)).data[0] - np.log(25)) < 1e-12
    coin = location_entropy(ad.tensor(np.array([0.5, 0.5])))
    assert abs(coin.data - np.log(2)) < 1e-12


def test_entropy_matches_reference_on_random_distributions():
    rng = np.random.default_rng(8)
    for _ in range(50):
        p = rng.random(30)
        p[rng.random(30) < 0.3] = 0.0
        if p.sum() == 0.0:
            continue
        p /= p.sum()
        got = location_entropy(ad.tensor(p)).data
        assert abs(got - reference_entropy(p)) < 1e-12


# -- gaussian bumps -------------------------------------------------------


def test_bumps_are_unit_sum_and_truncated():
    loc = ad.tensor(np.array([[2.3, 4.7], [0.0, 0.0]]))
    bumps = gaussian_bumps(loc, 9, 0.5)
    np.testing.assert_allclose(bumps.data.sum(axis=(1, 2)), 1.0, atol=1e-12)
    rows, cols = np.meshgrid(np.arange(9), np.arange(9), indexing="ij")
    cheb = np.maximum(np.abs(rows - 2), np.abs(cols - 5))
    assert np.all(bumps.data[0][cheb > parsing.BUMP_TRUNCATION_RADIUS] == 0.0)


def test_bumps_survive_tiny_variance():
    loc = ad.tensor(np.array([[3.0, 3.0]]))
    bumps = gaussian_bumps(loc, 7, 1e-6)
    assert np.isfinite(bumps.data).all()
    assert abs(bumps.data[0, 3, 3] - 1.0) < 1e-9


def test_bump_gradients():
    loc = ad.parameter(np.array([[2.2, 3.4]]))

    def f():
        b = gaussian_bumps(loc, 7, 0.5)
        w = ad.tensor(np.linspace(0.0, 1.0, 49).reshape(1, 7, 7))
        return (b * w).sum()

    err = ad.grad_check(f, [loc], rng=np.random.default_rng(9))
    assert err < 1e-4


# -- expressions -----------------------------------------------------------


def test_planted_coefficient_reads_back():
    """A part expressing a·template at its cell reads z = a when the
    bump collapses to that cell."""
    cfg = tiny_config(delta_variance=1e-9, temperature=1e-3)
    rng = np.random.default_rng(10)
    d = planted_dictionary(cfg, rng)
    cells = np.array([[3, 4], [5, 1]])
    a = 0.62
    phi = plant(cfg, d, 0, {(1, 2): a}, cells)
    with ad.no_grad():
        out = parse(phi, d, cfg)
    assert abs(out.raw_expression.data[0, 1, 2] - a) < 1e-6


def test_threshold_dichotomy_example():
    raw = ad.tensor(np.array([0.04, 0.05, -0.04, -0.06]))
    z = threshold_expression(raw, 0.05)
    np.testing.assert_array_equal(z.data, [0.0, 0.05, 0.0, -0.06])


def test_threshold_backward_is_straight_through():
    raw = ad.parameter(np.array([0.04, 0.3]))
    z = threshold_expression(raw, 0.05)
    ad.backward((z * ad.tensor(np.array([2.0, 3.0]))).sum())
    np.testing.assert_array_equal(raw.grad, [2.0, 3.0])


def test_expression_matches_explicit_sum():
    cfg = tiny_config()
    rng = np.random.default_rng(11)
    d = planted_dictionary(cfg, rng)
    phi = rng.standard_normal((7, 7, 3))
    with ad.no_grad():
        out = parse(phi, d, cfg)
    want = reference_expression(
        phi, [k.data for k in d.kernels], out.location.data,
        cfg.delta_variance)
    np.testing.assert_allclose(out.raw_expression.data, want, atol=1e-10)


def test_zero_feature_map_degenerates_cleanly():
    cfg = tiny_config()
    d = planted_dictionary(cfg, np.random.default_rng(12))
    with ad.no_grad():
        out = parse(np.zeros((7, 7, 3)), d, cfg)
    np.testing.assert_allclose(out.distribution.data, 1.0 / 49.0, atol=1e-12)
    np.testing.assert_allclose(out.location.data, 3.0, atol=1e-9)
    np.testing.assert_allclose(out.entropy.data, 2.0 * np.log(7), atol=1e-9)
    np.testing.assert_array_equal(out.expression.data, 0.0)
    out.validate(cfg)


# -- parse output invariants ----------------------------------------------


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10_000))
def test_parse_output_invariants(seed):
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    d = planted_dictionary(cfg, rng)
    phi = rng.standard_normal((7, 7, 3)) * rng.uniform(0.1, 3.0)
    with ad.no_grad():
        out = parse(phi, d, cfg)
    out.validate(cfg)
    assert out.hard_location.shape == (2, 2)
    assert out.raw_expression.data.shape == (2, 2, 3)


def test_validate_rejects_broken_output():
    cfg = tiny_config()
    d = planted_dictionary(cfg, np.random.default_rng(13))
    with ad.no_grad():
        out = parse(np.random.default_rng(14).standard_normal((7, 7, 3)), d, cfg)
    out.distribution.data[0] *= 0.5
    with pytest.raises(ValueError):
        out.validate(cfg)


# -- gradients through the full parse --------------------------------------


def test_parse_gradients_wrt_features_and_kernels():
    """End-to-end check at zero threshold; the straight-through rule
    makes the thresholded forward non-differentiable."""
    cfg = tiny_config(threshold=0.0)
    rng = np.random.default_rng(15)
    d = planted_dictionary(cfg, rng)
    phi = ad.parameter(rng.standard_normal((7, 7, 3)))
    target = rng.standard_normal((2, 2, 3))

    def f():
        out = parse(phi, d, cfg)
        diff = out.expression - ad.tensor(target)
        return (diff * diff).sum() + 0.1 * out.entropy.sum()

    err = ad.grad_check(f, [phi] + d.parameters(),
                        rng=np.random.default_rng(16), max_coords=40)
    assert err < 1e-3


# -- dictionary maintenance -------------------------------------------------


def test_unit_templates_have_unit_norm():
    cfg = tiny_config()
    d = planted_dictionary(cfg, np.random.default_rng(17))
    d.kernels[1].data *= 3.0
    theta, norms = d.unit_templates(1)
    got = np.sqrt((theta.data ** 2).sum(axis=(2, 3)))
    np.testing.assert_allclose(got, 1.0, atol=1e-12)
    np.testing.assert_allclose(norms.data, 3.0, atol=1e-12)


def test_reseed_degenerate_replaces_collapsed_kernels():
    cfg = tiny_config()
    d = planted_dictionary(cfg, np.random.default_rng(18))
    d.kernels[0].data[1, 2] = 0.0
    d.kernels[1].data[0, 0] *= 1e-9
    before = d.kernels[1].data[1, 1].copy()
    n = d.reseed_degenerate(np.random.default_rng(19))
    assert n == 2
    assert np.sqrt((d.kernels[0].data[1, 2] ** 2).sum()) > 0.99
    assert np.sqrt((d.kernels[1].data[0, 0] ** 2).sum()) > 0.99
    np.testing.assert_array_equal(d.kernels[1].data[1, 1], before)
    assert d.reseed_degenerate(np.random.default_rng(20)) == 0


def test_init_random_unit_norms():
    cfg = tiny_config()
    d = PartDictionary.init_random(cfg, np.random.default_rng(21))
    for k in d.kernels:
        norms = np.sqrt((k.data ** 2).sum(axis=(2, 3)))
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)


# -- config validation -------------------------------------------------------


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        tiny_config(scales=(2, 3))
    with pytest.raises(ValueError):
        tiny_config(scales=(3, 1))
    with pytest.raises(ValueError):
        tiny_config(scales=(1, 9))
    with pytest.raises(ValueError):
        tiny_config(scales=())
    with pytest.raises(ValueError):
        tiny_config(temperature=0.0)
    with pytest.raises(ValueError):
        tiny_config(threshold=-0.1)
    with pytest.raises(ValueError):
        tiny_config(delta_variance=0.0)
    with pytest.raises(ValueError):
        tiny_config(k_parts=0)


# -- planted recovery under noise ---------------------------------------------


def test_planted_recovery_under_mild_noise():
    """Oracle templates recover >= 95% of planted locations exactly at
    sigma = 0.05 over 200 fresh renders."""
    from dopm.synth import SyntheticConfig, generate_dataset, render_sample

    ds = generate_dataset(SyntheticConfig(), seed=3)
    pcfg = ds.oracle_parser_config()
    d = ds.oracle_dictionary()
    rng = np.random.default_rng(22)
    classes = list(ds.splits["train"])
    hits = 0
    with ad.no_grad():
        for i in range(200):
            s = render_sample(ds, classes[i % len(classes)], rng, sigma=0.05)
            out = parse(ad.tensor(s.data), d, pcfg)
            hits += int(np.array_equal(out.hard_location, s.locations))
    assert hits >= 190
