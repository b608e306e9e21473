import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _toy import TOY_EXPERT, toy_problem
from palmfl.errors import ConfigurationError, DegenerateInputError
from palmfl.numeric import finite_diff_grad, make_rng
from palmfl.pipeline import Head, head_templates
from palmfl.teim import BlendParams, FeaturePool, blend, enhance, route, route_batch, score_candidates


def _pool(features):
    return FeaturePool(list(enumerate(features)))


def test_orthogonal_candidates_score_zero():
    cands = _pool([[0, 1, 0], [0, 0, 2]])
    assert [d for _, d in score_candidates(np.array([1.0, 0, 0]), cands)] == [0.0, 0.0]


def test_scaled_anchor_scores_one():
    a = np.array([0.3, -1.2, 2.0])
    ((_, d),) = score_candidates(a, _pool([2 * a]))
    assert d == pytest.approx(1.0, abs=1e-15)


def test_zero_candidate_rejected():
    with pytest.raises(DegenerateInputError):
        score_candidates(np.ones(3), _pool([np.zeros(3)]))


def test_scores_match_pairwise_recompute():
    rng = make_rng(11)
    anchor = rng.normal(size=12)
    feats = rng.normal(size=(7, 12))
    for (eid, d), f in zip(score_candidates(anchor, _pool(feats)), feats):
        expected = sum(a * b for a, b in zip(anchor, f)) / (
            np.sqrt(sum(a * a for a in anchor)) * np.sqrt(sum(b * b for b in f))
        )
        assert d == pytest.approx(expected, abs=1e-12)


def test_route_example():
    feats = {"A": np.array([1.0, 0]), "B": np.array([0, 1.0]), "C": np.array([2.0, 2]), "D": np.array([4.0, 0])}
    pool = FeaturePool(list(feats.items()))
    res = route([("A", 0.9), ("B", 0.2), ("C", 0.5), ("D", 0.7)], 3, pool)
    assert res.ranked_ids[:3] == ["A", "D", "C"]
    np.testing.assert_allclose(res.side_feature, (feats["A"] + feats["D"] + feats["C"]) / 3, atol=1e-15)
    assert res.similarities == sorted(res.similarities, reverse=True)


def test_route_all_candidates_is_mean():
    rng = make_rng(2)
    feats = rng.normal(size=(5, 4))
    pool = _pool(feats)
    res = route(score_candidates(rng.normal(size=4), pool), 5, pool)
    np.testing.assert_allclose(res.side_feature, feats.mean(axis=0), atol=1e-14)


def test_route_ties_by_ascending_id():
    pool = _pool(np.eye(4))
    res = route([(3, 0.5), (1, 0.5), (2, 0.5), (0, 0.1)], 2, pool)
    assert res.ranked_ids == [1, 2, 3, 0]


@pytest.mark.parametrize("k", [0, 5])
def test_route_k_out_of_range(k):
    pool = _pool(np.eye(4))
    with pytest.raises(ConfigurationError):
        route(score_candidates(np.ones(4), pool), k, pool)


def test_route_matches_sort_oracle():
    rng = make_rng(5)
    n = 6
    pool = _pool(rng.normal(size=(n, 3)))
    for trial in range(100):
        # coarse scores so ties actually occur
        d = np.round(rng.uniform(-1, 1, n), 1)
        scores = list(enumerate(d.tolist()))
        for k in (1, 3, n - 1):
            res = route(scores, k, pool)
            oracle = []
            remaining = list(range(n))
            while remaining:
                best = remaining[0]
                for i in remaining[1:]:
                    if d[i] > d[best]:
                        best = i
                oracle.append(best)
                remaining.remove(best)
            assert res.ranked_ids[:k] == oracle[:k]


def test_route_batch_matches_single_sample_route():
    rng = make_rng(8)
    b, c, d = 20, 5, 6
    anchor = rng.normal(size=(b, d))
    cands = rng.normal(size=(c, b, d))
    cands[3, :4] = 2 * cands[1, :4]  # tied similarities
    selected, side = route_batch(anchor, cands, 3)
    for i in range(b):
        pool = _pool(cands[:, i])
        res = route(score_candidates(anchor[i], pool), 3, pool)
        assert selected[:, i].tolist() == res.ranked_ids[:3]
        np.testing.assert_array_equal(side[i], res.side_feature)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_routing_scale_invariant(seed, c):
    rng = make_rng(seed)
    anchor = rng.normal(size=5)
    feats = rng.normal(size=(6, 5))
    ranked = route(score_candidates(anchor, _pool(feats)), 1, _pool(feats)).ranked_ids
    scaled = route(score_candidates(anchor, _pool(c * feats)), 1, _pool(c * feats)).ranked_ids
    assert ranked == scaled


def test_blend_examples():
    a, s = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    np.testing.assert_array_equal(blend(a, s, BlendParams(1, 0)), a)
    np.testing.assert_array_equal(blend(a, s, BlendParams(0, 1)), s)
    np.testing.assert_allclose(blend(a, s, BlendParams(0.7, 0.3)), [0.7, 0.3], atol=1e-15)


def test_blend_gradients_by_finite_difference():
    rng = make_rng(3)
    a, s, w = rng.normal(size=(3, 4))

    def f(t):
        return float(w @ blend(a, s, BlendParams(t[0], t[1])))

    g = finite_diff_grad(f, np.array([0.4, -0.8]))
    np.testing.assert_allclose(g, [w @ a, w @ s], rtol=1e-6)


def test_enhance_identical_pool():
    f = np.array([0.5, -1.0, 2.0])
    pool = _pool([f] * 4)
    for k in (1, 2, 3):
        np.testing.assert_allclose(enhance(0, pool, k, BlendParams(0.6, 0.9)), 1.5 * f, atol=1e-14)


def test_enhance_beta_zero_ignores_pool():
    rng = make_rng(4)
    pool = _pool(rng.normal(size=(5, 3)))
    np.testing.assert_array_equal(enhance(2, pool, 3, BlendParams(1.3, 0.0)), 1.3 * pool.feature(2))


def test_enhance_pool_too_small():
    with pytest.raises(ConfigurationError):
        enhance(0, _pool(np.eye(3)), 3, BlendParams())


def test_enhance_is_composition():
    rng = make_rng(9)
    pool = _pool(rng.normal(size=(6, 5)))
    bp = BlendParams(0.8, 0.45)
    cands = pool.without(4)
    res = route(score_candidates(pool.feature(4), cands), 3, cands)
    manual = blend(pool.feature(4), res.side_feature, bp)
    np.testing.assert_array_equal(enhance(4, pool, 3, bp), manual)


def test_unique_ids_required():
    with pytest.raises(ConfigurationError):
        FeaturePool([(0, np.ones(2)), (0, np.ones(2))])


def test_identity_blend_is_bitwise_noop_in_pipeline():
    p = toy_problem(3, 2)
    emb = p["embeddings"][0].copy()
    emb["alpha"], emb["beta"] = 1.0, 0.0
    off = head_templates(p["experts"], TOY_EXPERT, Head(0, emb), p["images"], 2)
    on = head_templates(p["experts"], TOY_EXPERT, Head(0, emb, (1, 2)), p["images"], 2)
    assert off.tobytes() == on.tobytes()
