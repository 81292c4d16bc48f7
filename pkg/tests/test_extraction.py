import numpy as np
import pytest

from lora_subspace.errors import DimensionError, InvalidInput
from lora_subspace.extraction import (
    irls_extract,
    objective,
    truncated_factorization,
    update_weights,
    weighted_mixture,
)
from lora_subspace.linalg import FactoredMatrix
from lora_subspace.model import ExtractionConfig, LoraAdapter
from lora_subspace.synth import PlantedSpec, planted_adapters, recovery_error

from conftest import random_adapters, rel_err


def dense_mixture(adapters, w):
    w = np.asarray(w, dtype=float)
    return sum(wi * ad.a @ ad.b.T for wi, ad in zip(w, adapters)) / w.sum()


def test_mixture_identical_adapters(rng):
    (ad,) = random_adapters(rng, 7, 5, 1, 2)
    c = weighted_mixture([ad, ad], [1, 1])
    assert np.max(np.abs(c.dense() - ad.a @ ad.b.T)) <= 1e-12


@pytest.mark.parametrize("w1", [0.3, 1.0, 17.0])
def test_mixture_single(w1, rng):
    (ad,) = random_adapters(rng, 7, 5, 1, 2)
    np.testing.assert_allclose(weighted_mixture([ad], [w1]).dense(), ad.a @ ad.b.T, rtol=1e-14)


def test_mixture_matches_dense(rng):
    ads = random_adapters(rng, 9, 6, 3, 2)
    c = weighted_mixture(ads, [1, 2, 3])
    assert rel_err(c.dense(), dense_mixture(ads, [1, 2, 3])) <= 1e-12
    assert c.inner_dim == 6


def test_mixture_errors(rng):
    ads = random_adapters(rng, 9, 6, 2, 2)
    with pytest.raises(InvalidInput):
        weighted_mixture(ads, [0, 0])
    with pytest.raises(InvalidInput):
        weighted_mixture(ads, [1, -1])
    with pytest.raises(DimensionError):
        weighted_mixture(ads + random_adapters(rng, 8, 6, 1, 2), [1, 1, 1])


def test_truncation_exact_rank(rng):
    c = FactoredMatrix(rng.standard_normal((12, 2)), rng.standard_normal((9, 2)))
    a, b, sigma = truncated_factorization(c, 2)
    assert np.linalg.norm(c.dense() - a @ b.T) <= 1e-10 * np.linalg.norm(c.dense())
    np.testing.assert_allclose(a.T @ a, np.diag(sigma), atol=1e-12 * sigma[0])
    np.testing.assert_allclose(b.T @ b, np.diag(sigma), atol=1e-12 * sigma[0])


def test_truncation_rejects_zero_dim(rng):
    c = FactoredMatrix(rng.standard_normal((4, 2)), rng.standard_normal((3, 2)))
    with pytest.raises(DimensionError):
        truncated_factorization(c, 0)
    with pytest.raises(DimensionError):
        truncated_factorization(c, 4)


def test_truncation_matches_dense_svd():
    rng = np.random.default_rng(7)
    c = FactoredMatrix(rng.standard_normal((64, 40)), rng.standard_normal((96, 40)))
    a, b, sigma = truncated_factorization(c, 4)
    full = np.linalg.svd(c.dense(), compute_uv=False)
    assert np.max(np.abs(sigma - full[:4]) / full[:4]) <= 1e-9
    resid = np.linalg.norm(c.dense() - a @ b.T) ** 2
    expected = np.sum(full[4:] ** 2)
    assert abs(resid - expected) / expected <= 1e-9


def test_truncation_beyond_rank_gives_zero_columns(rng):
    c = FactoredMatrix(rng.standard_normal((10, 2)), rng.standard_normal((8, 2)))
    a, b, sigma = truncated_factorization(c, 5)
    assert np.all(sigma[2:] == 0.0)
    assert np.all(a[:, 2:] == 0.0) and np.all(b[:, 2:] == 0.0)


def test_weights_alpha_two():
    np.testing.assert_array_equal(update_weights([0.0, 3.0, 100.0], 2.0, 0.1), [1.0, 1.0, 1.0])


def test_weights_direct_formula():
    np.testing.assert_allclose(update_weights([1.0, 4.0], 1.0, 0.0), [1.0, 0.5])
    np.testing.assert_allclose(update_weights([0.0], 1.0, 1.0), [1.0])


def test_weights_monotone():
    res = np.linspace(0, 10, 50)
    for alpha in (0.5, 1.0, 1.5):
        w = update_weights(res, alpha, 1e-3)
        assert np.all(w > 0) and np.all(np.diff(w) <= 0)


def test_weights_reject_negative():
    with pytest.raises(InvalidInput):
        update_weights([1.0, -1e-3], 1.0, 1.0)


def test_objective_zero_factors(rng):
    ads = random_adapters(rng, 8, 6, 3, 2)
    got = objective(np.zeros((8, 1)), np.zeros((6, 1)), ads, 2.0)
    expected = sum(np.linalg.norm(ad.a @ ad.b.T) ** 2 for ad in ads)
    assert got == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
def test_objective_exact_fit(alpha, rng):
    (ad,) = random_adapters(rng, 8, 6, 1, 2)
    assert objective(ad.a, ad.b, [ad] * 4, alpha) == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.7, 2.0])
def test_objective_matches_dense(alpha, rng):
    ads = random_adapters(rng, 11, 7, 4, 3)
    a, b = rng.standard_normal((11, 2)), rng.standard_normal((7, 2))
    dense = sum(np.linalg.norm(a @ b.T - ad.a @ ad.b.T) ** alpha for ad in ads)
    assert abs(objective(a, b, ads, alpha) - dense) / dense <= 1e-9


def test_objective_shape_mismatch(rng):
    ads = random_adapters(rng, 11, 7, 2, 3)
    with pytest.raises(DimensionError):
        objective(np.ones((10, 1)), np.ones((7, 1)), ads, 1.0)


def test_irls_single_member(rng):
    (ad,) = random_adapters(rng, 20, 15, 1, 4)
    sub = irls_extract([ad], ExtractionConfig(4))
    assert rel_err(sub.dense(), ad.a @ ad.b.T) <= 1e-9


@pytest.mark.parametrize("alpha", [1.0, 2.0])
def test_irls_identical_members(alpha, rng):
    (ad,) = random_adapters(rng, 20, 15, 1, 4)
    single = irls_extract([ad], ExtractionConfig(4, alpha=alpha))
    many = irls_extract([ad] * 10, ExtractionConfig(4, alpha=alpha))
    assert rel_err(many.dense(), single.dense()) <= 1e-9
    np.testing.assert_allclose(many.sigma, single.sigma, rtol=1e-9)


def test_irls_canonical_form(rng):
    sub = irls_extract(random_adapters(rng, 30, 20, 5, 4), ExtractionConfig(6))
    scale = sub.sigma[0]
    np.testing.assert_allclose(sub.a.T @ sub.a, np.diag(sub.sigma), atol=1e-8 * scale)
    np.testing.assert_allclose(sub.b.T @ sub.b, np.diag(sub.sigma), atol=1e-8 * scale)
    assert np.all(np.diff(sub.sigma) <= 0)


def test_irls_alpha_two_is_one_svd(rng):
    ads = random_adapters(rng, 30, 20, 6, 3)
    sub = irls_extract(ads, ExtractionConfig(5, alpha=2.0))
    assert sub.iterations == 1
    np.testing.assert_array_equal(sub.weights, np.ones(6))
    a, b, sigma = truncated_factorization(weighted_mixture(ads, np.ones(6)), 5)
    assert np.array_equal(sub.a, a) and np.array_equal(sub.b, b) and np.array_equal(sub.sigma, sigma)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5, 2.0])
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_irls_monotone(alpha, seed):
    ads, _ = planted_adapters(PlantedSpec(40, 30, 8, 6, 3, noise_gamma=0.3, outliers=2, seed=seed))
    trace = np.array(irls_extract(ads, ExtractionConfig(3, alpha=alpha)).objective_trace)
    assert np.all(np.diff(trace) <= 1e-10)


def test_irls_eckart_young_for_fixed_weights(rng):
    ads = random_adapters(rng, 25, 18, 6, 3)
    w = rng.uniform(0.2, 2.0, size=6)
    a, b, _ = truncated_factorization(weighted_mixture(ads, w), 4)

    def weighted_value(x, y):
        return sum(wi * np.linalg.norm(x @ y.T - ad.a @ ad.b.T) ** 2 for wi, ad in zip(w, ads))

    best = weighted_value(a, b)
    for _ in range(100):
        scale = 10.0 ** rng.uniform(-6, 0)
        x = a + scale * rng.standard_normal(a.shape)
        y = b + scale * rng.standard_normal(b.shape)
        assert weighted_value(x, y) >= best - 1e-10 * best


def test_irls_permutation_equivariant(rng):
    ads, _ = planted_adapters(PlantedSpec(40, 30, 8, 6, 3, noise_gamma=0.2, outliers=1, seed=9))
    perm = rng.permutation(len(ads))
    cfg = ExtractionConfig(3, alpha=1.0)
    base = irls_extract(ads, cfg)
    shuffled = irls_extract([ads[i] for i in perm], cfg)
    assert rel_err(shuffled.dense(), base.dense()) <= 1e-9
    np.testing.assert_allclose(shuffled.weights, base.weights[perm], rtol=1e-7)


@pytest.mark.parametrize("alpha", [1.0, 2.0])
def test_irls_scale_behaviour(alpha):
    ads, _ = planted_adapters(PlantedSpec(40, 30, 8, 6, 3, noise_gamma=0.2, seed=4))
    cfg = ExtractionConfig(3, alpha=alpha)
    base = irls_extract(ads, cfg)
    scaled = irls_extract([ad.scaled(3.5) for ad in ads], cfg)
    np.testing.assert_allclose(scaled.sigma, 3.5 * base.sigma, rtol=1e-8)
    from lora_subspace.orthogonality import subspace_overlap

    # columns spaces agree: every direction is shared, so all lambdas vanish
    report = subspace_overlap(base, scaled)
    assert np.max(report.lambdas) < 1e-8


def test_irls_planted_recovery():
    ads, truth = planted_adapters(PlantedSpec(128, 96, 10, 16, 8, noise_gamma=0.05, seed=42))
    sub = irls_extract(ads, ExtractionConfig(8, alpha=2.0))
    assert recovery_error(sub, truth) < 0.01


def test_irls_outliers_favour_robust_alpha():
    ads, truth = planted_adapters(PlantedSpec(128, 96, 10, 16, 8, noise_gamma=0.05, outliers=2, seed=42))
    robust = recovery_error(irls_extract(ads, ExtractionConfig(8, alpha=1.0)), truth)
    plain = recovery_error(irls_extract(ads, ExtractionConfig(8, alpha=2.0)), truth)
    assert robust < plain


def test_irls_flags_rank_deficiency(rng):
    (ad,) = random_adapters(rng, 12, 10, 1, 2)
    sub = irls_extract([ad, ad], ExtractionConfig(4))
    assert sub.rank_deficient
    assert np.all(sub.a[:, 2:] == 0.0)


def test_irls_rejects_large_dim(rng):
    with pytest.raises(DimensionError):
        irls_extract(random_adapters(rng, 5, 4, 2, 2), ExtractionConfig(5))
