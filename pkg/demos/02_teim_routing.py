"""Routing a textural feature through its most similar experts."""

import numpy as np

from palmfl.numeric import make_rng
from palmfl.teim import BlendParams, FeaturePool, enhance, route, score_candidates

rng = make_rng(1)
anchor = rng.normal(size=6)

# Four candidate experts; two of them see something close to the anchor.
candidates = FeaturePool([
    (0, anchor + 0.1 * rng.normal(size=6)),
    (1, rng.normal(size=6)),
    (2, 2.0 * anchor + 0.5 * rng.normal(size=6)),
    (3, -anchor),
])
scores = score_candidates(anchor, candidates)
for eid, d in scores:
    print(f"expert {eid}: cosine {d:+.3f}")

res = route(scores, k=2, candidates=candidates)
print("ranked:", res.ranked_ids, "side feature = mean of", res.ranked_ids[:2])

# alpha=1, beta=0 is how training starts: the side feature is ignored.
pool = FeaturePool([(9, anchor)] + candidates.entries)
print("identity blend changes nothing:", np.array_equal(enhance(9, pool, 2, BlendParams()), anchor))
print("blended:", np.round(enhance(9, pool, 2, BlendParams(0.7, 0.3)), 3))
