import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crosscycle.config import InvalidArgument
from crosscycle.data import SynthSpec, generate_synthetic, make_overfit_fixture
from crosscycle.metrics import (
    BinModel,
    FeatureExtractor,
    content_distance,
    diversity_from_features,
    extract_features,
    fid,
    fit_bins,
    frechet_distance,
    jensen_shannon,
    ndb_jsd,
    perceptual_diversity,
    read_features_csv,
    two_proportion_pvalue,
    write_features_csv,
)

from oracles import brute_force_jsd, monte_carlo_pvalue


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic(SynthSpec(k=2, n_per_domain=60, image_size=32, seed=11))


# feature extraction -------------------------------------------------------------------

def test_features_deterministic_and_sized():
    ext = FeatureExtractor(seed=3, dim=32)
    imgs = make_overfit_fixture(32).images[0]
    a = extract_features(ext, imgs)
    b = extract_features(FeatureExtractor(seed=3, dim=32), torch.stack([imgs[0], imgs[0], imgs[1]]))
    assert a.shape == (2, 32)
    assert np.array_equal(a[0], b[0]) and np.array_equal(b[0], b[1])
    assert not np.array_equal(a[0], a[1])


def test_features_empty():
    with pytest.raises(InvalidArgument):
        extract_features(FeatureExtractor(), [])


def test_external_features_roundtrip(tmp_path):
    ext = FeatureExtractor(seed=1, dim=8)
    imgs = make_overfit_fixture(32).images[0]
    feats = extract_features(ext, imgs)
    write_features_csv(tmp_path / "f.csv", ["a", "b"], feats, ext)
    names, rows, meta = read_features_csv(tmp_path / "f.csv")
    assert names == ["a", "b"] and meta["extractor"] == "seeded-random-conv" and meta["seed"] == 1
    external = FeatureExtractor.from_csv(tmp_path / "f.csv")
    assert np.allclose(extract_features(external, None, names=["b", "a"]), feats[::-1])


# Frechet distance ----------------------------------------------------------------------

def test_frechet_identical_zero():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(50, 4))
    mu, cov = a.mean(0), np.cov(a, rowvar=False)
    assert frechet_distance(mu, cov, mu, cov) == pytest.approx(0, abs=1e-8)


def test_frechet_1d():
    assert abs(frechet_distance([0.0], [[1.0]], [3.0], [[4.0]]) - 10.0) < 1e-9


def test_frechet_diagonal_decomposes():
    mu1, mu2 = np.array([0.0, 1.0, -2.0]), np.array([1.0, 1.5, 0.0])
    v1, v2 = np.array([1.0, 2.0, 0.5]), np.array([4.0, 0.5, 0.5])
    expected = sum((a - b) ** 2 + (math.sqrt(s) - math.sqrt(t)) ** 2 for a, b, s, t in zip(mu1, mu2, v1, v2))
    assert frechet_distance(mu1, np.diag(v1), mu2, np.diag(v2)) == pytest.approx(expected, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_frechet_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    c1, c2 = a @ a.T, b @ b.T
    m1, m2 = rng.normal(size=3), rng.normal(size=3)
    assert frechet_distance(m1, c1, m2, c2) == pytest.approx(frechet_distance(m2, c2, m1, c1), abs=1e-8)


def test_frechet_errors():
    with pytest.raises(InvalidArgument):
        frechet_distance([0.0, 0.0], np.eye(2), [0.0], [[1.0]])
    with pytest.raises(InvalidArgument):
        frechet_distance([np.nan], [[1.0]], [0.0], [[1.0]])


# FID ------------------------------------------------------------------------------------

def test_fid_same_set(synth):
    ext = FeatureExtractor(dim=16)
    assert fid(synth.images[0], synth.images[0], ext) < 1e-6


def test_fid_palette_gap_exceeds_split_half(synth):
    ext = FeatureExtractor(dim=16)
    d0 = synth.images[0]
    within = fid(d0[:30], d0[30:], ext)
    across = fid(d0, synth.images[1], ext)
    assert across > within


def test_fid_order_invariant(synth):
    ext = FeatureExtractor(dim=16)
    perm = torch.randperm(60, generator=torch.Generator().manual_seed(0))
    a = fid(synth.images[0], synth.images[1], ext)
    b = fid(synth.images[0][perm], synth.images[1], ext)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


def test_fid_mixture_monotone(synth):
    ext = FeatureExtractor(dim=16)
    real = synth.images[0][:30]
    pool_real, pool_other = synth.images[0][30:], synth.images[1][:30]
    values = []
    for frac in (0.0, 0.5, 1.0):
        n_real = int(round(frac * 30))
        gen = torch.cat([pool_real[:n_real], pool_other[: 30 - n_real]])
        values.append(fid(real, gen, ext))
    assert values[0] >= values[1] >= values[2]


def test_fid_needs_two():
    with pytest.raises(InvalidArgument):
        fid(torch.zeros(1, 3, 32, 32), torch.zeros(3, 3, 32, 32), FeatureExtractor())


# diversity ------------------------------------------------------------------------------

def test_diversity_identical_zero():
    feats = np.tile(np.arange(1.0, 5.0), (4, 1))
    assert diversity_from_features(feats) == 0


def test_diversity_duplication_pair_counting():
    # {a, b} has one pair at distance d; {a, b, a, b} has 4 of its 6 pairs at d -> 2d/3
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(2, 8))
    d = diversity_from_features(feats)
    assert diversity_from_features(np.concatenate([feats, feats])) == pytest.approx(2 * d / 3, rel=1e-12)


def test_diversity_permutation_invariant(synth):
    ext = FeatureExtractor(dim=16)
    imgs = list(synth.images[0][:6])
    assert perceptual_diversity(imgs, ext) == pytest.approx(perceptual_diversity(imgs[::-1], ext), rel=1e-12)


def test_diversity_needs_two():
    with pytest.raises(InvalidArgument):
        diversity_from_features(np.zeros((1, 3)))


# bins ----------------------------------------------------------------------------------

def test_fit_bins_single():
    x = np.random.default_rng(0).normal(size=(40, 3))
    bins = fit_bins(x, K=1)
    assert np.allclose(bins.centroids[0], x.mean(0))
    assert bins.train_proportions.tolist() == [1.0]


def test_fit_bins_two_blobs():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(0, 0.1, size=(300, 2)), rng.normal(10, 0.1, size=(100, 2))])
    props = sorted(fit_bins(x, K=2, seed=4).train_proportions)
    assert props == pytest.approx([0.25, 0.75], abs=1e-12)


def test_fit_bins_deterministic():
    x = np.random.default_rng(2).normal(size=(200, 4))
    a, b = fit_bins(x, K=5, seed=9), fit_bins(x, K=5, seed=9)
    assert np.array_equal(a.centroids, b.centroids)
    assert abs(a.train_proportions.sum() - 1) < 1e-9


def test_fit_bins_too_few():
    with pytest.raises(InvalidArgument):
        fit_bins(np.zeros((3, 2)), K=4)


def test_fit_bins_duplicate_points_reseed():
    x = np.concatenate([np.zeros((10, 2)), np.ones((10, 2))])
    bins = fit_bins(x, K=3, seed=0)
    assert np.all(np.isfinite(bins.centroids))
    assert bins.n_train == 20


def test_ndb_jsd_identical():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(300, 3))
    bins = fit_bins(x, K=5, seed=0)
    ndb, ratio, jsd = ndb_jsd(bins, x)
    assert ndb == 0 and ratio == 0 and jsd == 0


def test_ndb_jsd_all_in_one_bin():
    centroids = np.array([[0.0], [10.0]])
    bins = BinModel(centroids, np.array([500.0, 500.0]))
    ndb, ratio, jsd = ndb_jsd(bins, np.zeros((1000, 1)))
    assert ndb == 2 and ratio == 1.0
    assert jsd == pytest.approx(brute_force_jsd([0.5, 0.5], [1.0, 0.0]), abs=1e-12)
    assert jsd == pytest.approx(0.2158, abs=1e-4)


def test_ndb_empty_gen():
    with pytest.raises(InvalidArgument):
        ndb_jsd(BinModel(np.zeros((1, 1)), np.array([1.0])), np.zeros((0, 1)))


def test_ndb_nonincreasing_in_alpha_jsd_constant():
    rng = np.random.default_rng(4)
    train = rng.normal(size=(500, 2))
    gen = rng.normal(0.3, 1.2, size=(400, 2))
    bins = fit_bins(train, K=8, seed=1)
    results = [ndb_jsd(bins, gen, alpha=a) for a in (0.2, 0.05, 0.01, 0.001)]
    ndbs = [r[0] for r in results]
    assert all(a >= b for a, b in zip(ndbs, ndbs[1:]))
    assert len({r[2] for r in results}) == 1


def test_ndb_order_invariant():
    rng = np.random.default_rng(5)
    train, gen = rng.normal(size=(300, 2)), rng.normal(size=(200, 2))
    bins = fit_bins(train, K=6, seed=2)
    assert ndb_jsd(bins, gen) == ndb_jsd(bins, gen[::-1])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_jsd_bounded(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(5) * 0.3), rng.dirichlet(np.ones(5) * 0.3)
    value = jensen_shannon(p, q)
    assert 0 <= value <= math.log(2) + 1e-12
    assert value == pytest.approx(brute_force_jsd(p, q), abs=1e-12)


@pytest.mark.parametrize("c1,c2", [(500, 540), (480, 530), (300, 340)])
def test_ztest_matches_binomial_monte_carlo(c1, c2):
    z_p = float(two_proportion_pvalue(c1, 1000, c2, 1000))
    assert abs(z_p - monte_carlo_pvalue(c1, 1000, c2, 1000)) < 0.01


# content distance ------------------------------------------------------------------------

def test_content_distance_values():
    assert content_distance(np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]])) == 3.0
    a = np.random.default_rng(0).normal(size=(5, 7))
    assert content_distance(a, a) == 0


def test_content_distance_errors():
    with pytest.raises(InvalidArgument):
        content_distance(np.zeros((0, 2)), np.zeros((1, 2)))
    with pytest.raises(InvalidArgument):
        content_distance(np.zeros((1, 2)), np.zeros((1, 3)))
