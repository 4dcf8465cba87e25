"""
Quantile sketches, the pooled mixture CDF and candidate thresholds
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sketch import (
    QuantileSketch,
    build_sketch,
    candidate_thresholds,
    empirical_cdf,
    eval_local_cdf,
    eval_pooled_cdf,
    invert_pooled_cdf,
    partition_disagreement,
    pool_sketches,
    rank_error,
)
from split_engine import exact_midpoints

DISJOINT = pool_sketches([QuantileSketch((0.0, 1.0), 10), QuantileSketch((2.0, 3.0), 10)])


def test_linear_rule_interpolates_the_median():
    assert build_sketch([1, 2, 3, 4], 2, rule="linear").breakpoints == (1.0, 2.5, 4.0)


def test_constant_values_give_constant_breakpoints():
    assert build_sketch([7.0] * 9, 4).breakpoints == (7.0,) * 5


def test_single_level_sketch_is_min_and_max():
    assert build_sketch([3.0, -1.0, 8.0], 1).breakpoints == (-1.0, 8.0)


def test_inverted_cdf_rule_picks_order_statistics():
    sketch = build_sketch(np.arange(1, 101), 4)
    assert sketch.breakpoints == (1.0, 25.0, 50.0, 75.0, 100.0)
    assert sketch.count == 100


def test_empty_or_non_finite_input_is_rejected():
    with pytest.raises(ValueError):
        build_sketch([], 4)
    with pytest.raises(ValueError):
        build_sketch([1.0, np.nan], 4)


def test_local_cdf_knots_and_segments():
    sketch = QuantileSketch((1.0, 2.5, 4.0), 4)
    assert eval_local_cdf(sketch, 2.5) == pytest.approx(0.5)
    assert eval_local_cdf(sketch, 1.75) == pytest.approx(0.25)
    assert eval_local_cdf(sketch, 0.0) == 0.0
    assert eval_local_cdf(sketch, 9.0) == 1.0


def test_pooled_cdf_of_one_component_is_the_local_cdf():
    sketch = build_sketch(np.linspace(0, 1, 50), 8)
    grid = np.linspace(-0.5, 1.5, 41)
    np.testing.assert_allclose(eval_pooled_cdf(pool_sketches([sketch]), grid), eval_local_cdf(sketch, grid))


def test_disjoint_supports():
    assert eval_pooled_cdf(DISJOINT, 1.5) == pytest.approx(0.5)
    assert eval_pooled_cdf(DISJOINT, 10.0) == pytest.approx(1.0)
    assert invert_pooled_cdf(DISJOINT, 0.5) == 1.0


def test_inversion_recovers_knots():
    sketch = QuantileSketch((0.0, 1.0, 2.0, 3.0, 4.0), 40)
    cdf = pool_sketches([sketch])
    for b in range(1, 4):
        assert invert_pooled_cdf(cdf, b / 4) == pytest.approx(float(b))


def test_inversion_levels_must_be_interior():
    with pytest.raises(ValueError):
        invert_pooled_cdf(DISJOINT, 1.0)


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.floats(min_value=-1e3, max_value=1e3, allow_nan=False), min_size=1, max_size=40),
    st.floats(min_value=0.01, max_value=0.99),
)
def test_generalized_inverse_reaches_the_level(values, p):
    cdf = pool_sketches([build_sketch(values, 6)])
    assert eval_pooled_cdf(cdf, invert_pooled_cdf(cdf, p)) >= p - 1e-12


def test_quartile_candidates():
    cdf = pool_sketches([build_sketch(np.arange(1, 101), 4)])
    np.testing.assert_array_equal(candidate_thresholds(cdf, 4), [25.0, 50.0, 75.0])


def test_constant_feature_has_no_candidates():
    cdf = pool_sketches([build_sketch([2.0] * 10, 8)])
    assert candidate_thresholds(cdf, 8).size == 0


def test_without_dedup_every_level_yields_a_threshold():
    cdf = pool_sketches([build_sketch([2.0] * 10, 8)])
    assert candidate_thresholds(cdf, 8, dedup=False).size == 7


def test_identical_clients_match_one_client():
    sketch = build_sketch(np.random.default_rng(1).normal(size=200), 16)
    one = candidate_thresholds(pool_sketches([sketch]), 16)
    two = candidate_thresholds(pool_sketches([sketch, sketch]), 16)
    np.testing.assert_allclose(one, two, rtol=0, atol=1e-12)


def test_candidate_generation_needs_two_levels():
    with pytest.raises(ValueError):
        candidate_thresholds(DISJOINT, 1)


# ─── rank error ──────────────────────────────────────────────────────────────

@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(min_value=-30, max_value=30), min_size=2, max_size=120),
    st.integers(min_value=1, max_value=5),
    st.sampled_from([2, 4, 8, 16, 32]),
)
def test_rank_error_is_bounded_by_one_over_b(values, n_clients, B):
    pooled = np.asarray(values, dtype=np.float64)
    parts = [p for p in np.array_split(pooled, n_clients) if p.size]
    cdf = pool_sketches([build_sketch(p, B) for p in parts])
    assert rank_error(cdf, pooled) <= 1.0 / B + 1e-9


@pytest.mark.parametrize("B", [4, 16, 64])
def test_rank_error_on_shifted_clients(B):
    rng = np.random.default_rng(B)
    parts = [rng.normal(loc=3.0 * k, size=150 + 20 * k) for k in range(4)]
    cdf = pool_sketches([build_sketch(p, B) for p in parts])
    assert rank_error(cdf, np.concatenate(parts)) <= 1.0 / B + 1e-9


@pytest.mark.parametrize("B", [4, 8, 32])
def test_pooled_thresholds_partition_like_centralized_quantiles(B):
    rng = np.random.default_rng(100 + B)
    parts = [rng.normal(loc=k, size=300) for k in range(3)]
    pooled = np.concatenate(parts)
    cdf = pool_sketches([build_sketch(p, B) for p in parts])
    federated = candidate_thresholds(cdf, B, dedup=False)
    centralized = candidate_thresholds(pool_sketches([build_sketch(pooled, B)]), B, dedup=False)
    for t_fed, t_cen in zip(federated, centralized):
        assert partition_disagreement(pooled, t_fed, t_cen) <= 3.0 / (2 * B) + 1e-9


@settings(max_examples=100, deadline=None)
@given(
    st.integers(min_value=0, max_value=2**32 - 1),
    st.integers(min_value=1, max_value=5),
    st.sampled_from([4, 16, 64]),
    st.floats(min_value=0.0, max_value=4.0),
)
def test_every_centralized_midpoint_has_a_close_candidate(seed, n_clients, B, shift):
    rng = np.random.default_rng(seed)
    parts = [
        rng.normal(loc=shift * k, scale=1.0 + 0.5 * k, size=int(rng.integers(50, 200))) for k in range(n_clients)
    ]
    pooled = np.concatenate(parts)
    candidates = candidate_thresholds(pool_sketches([build_sketch(p, B) for p in parts]), B)
    midpoints = exact_midpoints(pooled)
    # {x <= a} and {x <= b} disagree on exactly |F(a) - F(b)| of the pooled rows
    gaps = np.abs(empirical_cdf(pooled, midpoints)[:, None] - empirical_cdf(pooled, candidates)[None, :])
    nearest = gaps.argmin(axis=1)
    worst = int(gaps.min(axis=1).argmax())
    assert gaps[worst, nearest[worst]] <= 3.0 / (2 * B) + 1e-9
    assert partition_disagreement(pooled, midpoints[worst], candidates[nearest[worst]]) == pytest.approx(
        gaps[worst, nearest[worst]], abs=1e-12
    )


def test_empirical_cdf():
    assert empirical_cdf([1, 2, 3, 4], 2.5) == 0.5
    assert partition_disagreement([1, 2, 3, 4], 1.5, 3.5) == 0.5
