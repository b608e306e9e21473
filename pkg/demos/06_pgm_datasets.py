"""Writing a dataset to PGM files, loading it back, and replaying its split."""

import os
import tempfile

import numpy as np

from palmfl import SynthConfig, generate_synthetic, load_image_directory, make_benchmark_split
from palmfl.data import read_manifest, split_from_manifest, write_image_directory, write_manifest

ds = generate_synthetic(SynthConfig(n_clients=2, identities_per_client=3, samples_per_identity=3))
root = tempfile.mkdtemp(prefix="palmfl-pgm-")
write_image_directory(root, ds)
print(sorted(os.listdir(root)))

back = load_image_directory(root)
print("max pixel error", np.max(np.abs(back.images - ds.images)), "<= 1/255 =", 1 / 255)

split = make_benchmark_split(ds, 2, seed=5)
write_manifest(os.path.join(root, "manifest.json"), split.to_manifest(ds))
replayed = split_from_manifest(back, read_manifest(os.path.join(root, "manifest.json")))
print("shards:", [[back.identity_names[i] for i in s] for s in replayed.shard_identities])
print("open:", [back.identity_names[i] for i in replayed.open_identities])
