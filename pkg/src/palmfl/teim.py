"""Textural expert interaction: similarity scoring, top-K routing, blending.

Single-sample functions (``score_candidates``, ``route``, ``blend``,
``enhance``) operate on a :class:`FeaturePool`. ``route_batch`` is the
vectorised path used during training and deployment; it applies the same
ordering rule (similarity descending, ties by ascending expert id).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .numeric import cosine_rows, cosine_similarity


@dataclass
class FeaturePool:
    entries: list  # [(expert_id, feature)]

    def __post_init__(self):
        ids = [eid for eid, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("expert ids in a feature pool must be unique")
        lengths = {np.size(f) for _, f in self.entries}
        if len(lengths) > 1:
            raise DimensionError("all features in a pool must share one length")

    def feature(self, expert_id):
        for eid, f in self.entries:
            if eid == expert_id:
                return np.asarray(f, dtype=np.float64)
        raise KeyError(expert_id)

    def without(self, expert_id):
        return FeaturePool([(eid, f) for eid, f in self.entries if eid != expert_id])

    def __len__(self):
        return len(self.entries)


@dataclass
class BlendParams:
    alpha: float = 1.0
    beta: float = 0.0


@dataclass
class RouteResult:
    ranked_ids: list
    similarities: list
    side_feature: np.ndarray


def score_candidates(anchor, candidates):
    """Cosine similarity of ``anchor`` to every candidate in pool order."""
    return [(eid, cosine_similarity(anchor, f)) for eid, f in candidates.entries]


def route(scores, k, candidates):
    """Rank candidates by similarity and average the top ``k`` features."""
    if not 1 <= k <= len(scores):
        raise ConfigurationError(f"K={k} outside [1, {len(scores)}]")
    ranked = sorted(scores, key=lambda item: (-item[1], item[0]))
    side = candidates.feature(ranked[0][0]).copy()
    for eid, _ in ranked[1:k]:
        side += candidates.feature(eid)
    side /= k
    return RouteResult([eid for eid, _ in ranked], [d for _, d in ranked], side)


def blend(anchor, side, bp):
    anchor = np.asarray(anchor, dtype=np.float64)
    side = np.asarray(side, dtype=np.float64)
    if anchor.shape != side.shape:
        raise DimensionError("anchor and side feature lengths differ")
    return bp.alpha * anchor + bp.beta * side


def enhance(anchor_id, pool, k, bp):
    if k + 1 > len(pool):
        raise ConfigurationError(f"pool of {len(pool)} cannot supply K={k} candidates besides the anchor")
    anchor = pool.feature(anchor_id)
    candidates = pool.without(anchor_id)
    result = route(score_candidates(anchor, candidates), k, candidates)
    return blend(anchor, result.side_feature, bp)


def route_batch(anchor, candidates, k):
    """Per-sample top-``k`` selection over a candidate stack.

    ``anchor`` is (B, d); ``candidates`` is (C, B, d) ordered by ascending
    expert id. Returns (selected (K, B) candidate positions, side (B, d)).
    """
    n_cand = candidates.shape[0]
    if not 1 <= k <= n_cand:
        raise ConfigurationError(f"K={k} outside [1, {n_cand}]")
    sims = cosine_rows(anchor, candidates)
    order = np.argsort(-sims, axis=0, kind="stable")
    selected = order[:k]
    batch = np.arange(anchor.shape[0])
    side = candidates[selected[0], batch].copy()
    for j in range(1, k):
        side += candidates[selected[j], batch]
    return selected, side / k
