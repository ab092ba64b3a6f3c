import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import cdo.metrics as metrics_mod
from cdo import ScoredSet, aupro, auroc_pixel, dd_stats, validate_report
from cdo.metrics import AggregateStat

from oracles import aupro_bruteforce, auroc_pairwise, normal_overlap_analytic


def _single(scores, mask):
    return ScoredSet([(np.asarray(scores, dtype=np.float64), np.asarray(mask, dtype=np.uint8))])


def _random_instance(rng, h=8, w=8, n_regions=2):
    """Scores plus a mask with approximately n_regions blobs."""
    mask = np.zeros((h, w), dtype=np.uint8)
    for _ in range(n_regions):
        ci, cj = rng.integers(0, h), rng.integers(0, w)
        ri, rj = rng.integers(1, 3), rng.integers(1, 3)
        mask[max(ci - ri, 0) : ci + ri, max(cj - rj, 0) : cj + rj] = 1
    if mask.all():
        mask[0, 0] = 0
    if not mask.any():
        mask[h // 2, w // 2] = 1
    scores = rng.random((h, w)) + mask * rng.random() * 1.5
    return scores, mask


def test_auroc_perfect_and_inverted():
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[1:3, 1:3] = 1
    assert auroc_pixel(_single(mask.astype(float), mask)) == pytest.approx(1.0)
    assert auroc_pixel(_single(1.0 - mask, mask)) == pytest.approx(0.0)


def test_auroc_matches_pairwise_oracle(rng):
    for _ in range(30):
        scores = rng.integers(0, 6, size=20).astype(np.float64)  # force ties
        labels = (rng.random(20) > 0.6).astype(np.uint8)
        if labels.sum() in (0, 20):
            labels[0] = 1 - labels[0]
        got = auroc_pixel(_single(scores.reshape(4, 5), labels.reshape(4, 5)))
        ref = auroc_pairwise(scores, labels)
        assert got == pytest.approx(ref, abs=1e-9)


def test_auroc_single_class_is_error():
    ones = np.ones((3, 3), dtype=np.uint8)
    with pytest.raises(ValueError):
        ScoredSet([(np.random.rand(3, 3), ones)])


def test_aupro_perfect_scores():
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[2:5, 2:5] = 1
    assert aupro(_single(mask.astype(float), mask)) == pytest.approx(1.0)


def test_aupro_full_cover_at_zero_fpr():
    # one region fully covered while no negative fires: PRO = 1 over [0, limit]
    mask = np.zeros((6, 6), dtype=np.uint8)
    mask[1:3, 1:4] = 1
    scores = np.where(mask > 0, 5.0, np.arange(36).reshape(6, 6) * 0.01)
    assert aupro(_single(scores, mask)) == pytest.approx(1.0)


def test_aupro_matches_bruteforce_oracle(rng):
    for _ in range(40):
        pairs = [
            _random_instance(rng, n_regions=int(rng.integers(1, 4)))
            for _ in range(int(rng.integers(1, 3)))
        ]
        got = aupro(ScoredSet(pairs))
        ref = aupro_bruteforce(pairs)
        assert got == pytest.approx(ref, abs=1e-6)


def test_aupro_fpr_limit_validation(rng):
    scores, mask = _random_instance(rng)
    with pytest.raises(ValueError):
        aupro(_single(scores, mask), fpr_limit=0.0)
    with pytest.raises(ValueError):
        aupro(_single(scores, mask), fpr_limit=1.5)


def test_aupro_grid_agrees_with_exact(rng, monkeypatch):
    pairs = [_random_instance(rng, h=16, w=16, n_regions=2) for _ in range(2)]
    exact = aupro(ScoredSet(pairs))
    monkeypatch.setattr(metrics_mod, "EXACT_THRESHOLD_PIXEL_CAP", 0)
    grid = aupro(ScoredSet(pairs))
    assert grid == pytest.approx(exact, abs=1e-3)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    scores, mask = _random_instance(rng)
    transformed = np.exp(2.0 * scores) + 1.0  # strictly increasing
    a1 = auroc_pixel(_single(scores, mask))
    a2 = auroc_pixel(_single(transformed, mask))
    assert a1 == pytest.approx(a2, abs=1e-9)
    p1 = aupro(_single(scores, mask))
    p2 = aupro(_single(transformed, mask))
    assert p1 == pytest.approx(p2, abs=1e-9)


def test_dd_stats_identical_distributions(rng):
    d = rng.random(500)
    stats = dd_stats(d, d.copy())
    assert stats.margin == pytest.approx(0.0)
    assert stats.overlap == pytest.approx(1.0, abs=1e-9)


def test_dd_stats_disjoint_supports(rng):
    a = rng.random(300)
    b = rng.random(300) + 10.0
    stats = dd_stats(a, b)
    assert stats.overlap == pytest.approx(0.0, abs=1e-9)
    assert stats.margin == pytest.approx(abs(b.mean() - a.mean()), abs=1e-9)


def test_dd_stats_constant_vectors():
    stats = dd_stats(np.full(10, 2.0), np.full(10, 2.0))
    assert stats.overlap == pytest.approx(1.0)
    assert stats.margin == 0.0


def test_dd_stats_two_gaussians_analytic(rng):
    # overlap of N(0,1) vs N(5,1) ~ 2 Phi(-2.5), Monte-Carlo tolerance 0.01
    a = rng.normal(0.0, 1.0, 10_000)
    b = rng.normal(5.0, 1.0, 10_000)
    stats = dd_stats(a, b)
    assert stats.overlap == pytest.approx(normal_overlap_analytic(0.0, 5.0, 1.0), abs=0.01)


def test_dd_stats_symmetric(rng):
    a = rng.random(400)
    b = rng.random(300) * 2.0
    assert dd_stats(a, b).overlap == pytest.approx(dd_stats(b, a).overlap, abs=1e-12)
    assert dd_stats(a, b).margin == pytest.approx(dd_stats(b, a).margin, abs=1e-12)


def test_dd_stats_empty_is_error():
    with pytest.raises(ValueError):
        dd_stats(np.array([]), np.array([1.0]))


def test_aggregate_stat_against_numpy(rng):
    values = rng.random(5).tolist()
    agg = AggregateStat(values)
    assert agg.mean == pytest.approx(float(np.mean(values)))
    assert agg.std == pytest.approx(float(np.std(values)))
    assert AggregateStat([0.5]).std == 0.0
    assert AggregateStat([0.4, 0.4, 0.4]).std == 0.0


def test_report_schema_validation(rng):
    agg = AggregateStat(rng.random(3).tolist()).to_dict()
    good = {
        "auroc": agg,
        "aupro": agg,
        "margin": agg,
        "overlap": agg,
        "fpr_limit": 0.3,
        "k_requested": 5,
        "k_used": 3,
        "flagged": True,
        "config_hash": "0" * 64,
    }
    validate_report(good)
    import jsonschema

    bad = dict(good)
    del bad["aupro"]
    with pytest.raises(jsonschema.ValidationError):
        validate_report(bad)
