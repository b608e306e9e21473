"""A learnable Gabor bank as a textural expert, and a gradient check on it."""

import os
import sys

import numpy as np

from palmfl.data import SynthConfig, generate_synthetic
from palmfl.models import ExpertConfig, constrained_gabor, expert_forward, gabor_bank, init_expert
from palmfl.numeric import gradient_mismatches, make_rng

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))
from _toy import check_gradients  # noqa: E402

cfg = ExpertConfig()  # 8 filters, 9x9 kernels, stride 2, 4x4 pooling
expert = init_expert(cfg, make_rng(0))

# Stored values are unconstrained; softplus maps them to valid shapes.
theta, lam, sigma, psi, gamma = constrained_gabor(expert)
print("orientations (deg):", np.round(np.degrees(theta), 1))
print("wavelengths:", np.round(lam, 2))
print("sigma:", np.round(sigma, 2), "gamma:", np.round(gamma, 3))

kernels, _ = gabor_bank(expert, cfg.kernel_size)
print("kernel bank", kernels.shape, "centre taps", kernels[:, 4, 4])

ds = generate_synthetic(SynthConfig(n_clients=1, identities_per_client=2, samples_per_identity=2))
feats = np.stack([expert_forward(expert, cfg, img) for img in ds.images])
print("feature length", feats.shape[1])

unit = feats / np.linalg.norm(feats, axis=1, keepdims=True)
print("cosine between raw expert features (rows: id0 s0, id0 s1, id1 s0, id1 s1)")
print(np.round(unit @ unit.T, 3))

# Hand-derived gradients vs central differences on a toy problem.
analytic, numeric, labels = check_gradients(seed=0, phase=2)
print(f"{analytic.size} coordinates checked, {gradient_mismatches(analytic, numeric).size} mismatches")
big = np.abs(analytic) > 1e-8
print("worst relative error %.2e" % np.max(np.abs(analytic - numeric)[big] / np.abs(analytic[big])))
