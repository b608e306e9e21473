"""EER, ROC and rank-1 accuracy on hand-made scores."""

import numpy as np

from palmfl.evaluation import ScoreSet, compute_eer, compute_roc, identification_acc
from palmfl.numeric import make_rng

rng = make_rng(2)
s = ScoreSet(rng.normal(1.5, 1.0, 300), rng.normal(0.0, 1.0, 3000))
eer, thr = compute_eer(s)
roc = compute_roc(s)
print(f"EER {eer:.4f} at threshold {thr:.3f}, AUC {roc.auc:.4f}")

# Rank statistics: a monotone rescoring changes nothing.
t = ScoreSet(np.exp(s.genuine), np.exp(s.impostor))
print("EER after exp():", compute_eer(t)[0] == eer, " AUC:", compute_roc(t).auc == roc.auc)

print("separated:", compute_eer(ScoreSet([0.9, 0.8], [0.1]))[0])
print("indistinguishable:", compute_eer(ScoreSet([0.3, 0.5], [0.5, 0.3]))[0])

for far in (0.001, 0.01, 0.1):
    i = np.searchsorted(roc.points[:, 0], far, side="right") - 1
    print(f"GAR at FAR {far:g}: {roc.points[i, 1]:.3f}")

gallery = np.eye(4)
query = gallery[[0, 1, 2, 3]] + 0.3 * rng.normal(size=(4, 4))
print("rank-1 accuracy:", identification_acc(gallery, [0, 1, 2, 3], query, [0, 1, 2, 3]))
