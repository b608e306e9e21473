import numpy as np
import pytest

from palmfl.data import (
    Dataset,
    SynthConfig,
    decode_pgm,
    encode_pgm,
    generate_synthetic,
    load_image_directory,
    make_benchmark_split,
    read_manifest,
    split_from_manifest,
    write_image_directory,
    write_manifest,
    write_pgm,
)
from palmfl.errors import ConfigurationError, DatasetError, PGMParseError


def small(**kw):
    base = dict(n_clients=2, identities_per_client=4, samples_per_identity=4, image_size=16)
    base.update(kw)
    return SynthConfig(**base)


def test_generation_deterministic():
    a = generate_synthetic(small())
    b = generate_synthetic(small())
    assert a.images.tobytes() == b.images.tobytes()
    assert a.sample_names == b.sample_names
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_no_noise_no_jitter_gives_identical_samples():
    ds = generate_synthetic(small(noise_sigma=0.0, jitter_px=0.0, jitter_rot=0.0))
    for i in range(ds.n_identities):
        imgs = ds.images[ds.identities == i]
        assert all(np.array_equal(imgs[0], im) for im in imgs[1:])


def test_within_identity_more_similar_than_between():
    ds = generate_synthetic(small(n_clients=4, identities_per_client=5, samples_per_identity=6, image_size=32))
    x = ds.images.reshape(len(ds), -1)
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    sims = x @ x.T
    same = ds.identities[:, None] == ds.identities[None, :]
    off = ~np.eye(len(ds), dtype=bool)
    assert ds.n_identities == 20
    assert sims[same & off].mean() > sims[~same].mean()


def test_invalid_synth_config():
    with pytest.raises(ConfigurationError):
        small(image_size=8)
    with pytest.raises(ConfigurationError):
        small(noise_sigma=-1.0)


def test_split_sixteen_identities_eight_clients():
    ds = generate_synthetic(small(n_clients=8, identities_per_client=2))
    split = make_benchmark_split(ds, 8, seed=0)
    assert [len(s) for s in split.shard_identities] == [1] * 8
    assert len(split.open_identities) == 8


def test_split_without_client_hints():
    ds = generate_synthetic(small(n_clients=8, identities_per_client=2))
    ds = Dataset(ds.images, ds.identities, ds.identity_names, ds.sample_names)
    split = make_benchmark_split(ds, 8, seed=3)
    assert [len(s) for s in split.shard_identities] == [1] * 8
    assert len(split.open_identities) == 8


def test_split_disjointness():
    ds = generate_synthetic(small(n_clients=4, identities_per_client=4, samples_per_identity=5))
    split = make_benchmark_split(ds, 4, seed=1)
    ids = ds.identities
    train = set()
    for c in range(4):
        shard = set(ids[split.train_shards[c]].tolist())
        assert not shard & train
        train |= shard
        assert set(ids[split.closed_query[c]].tolist()) == shard
        assert not set(split.closed_gallery[c].tolist()) & set(split.closed_query[c].tolist())
    open_ids = set(ids[split.open_gallery].tolist()) | set(ids[split.open_query].tolist())
    assert not open_ids & train
    assert not set(split.open_gallery.tolist()) & set(split.open_query.tolist())
    # every sample lands in exactly one role
    every = np.concatenate(split.closed_gallery + split.closed_query + [split.open_gallery, split.open_query])
    assert sorted(every.tolist()) == list(range(len(ds)))


def test_split_seed_determinism():
    ds = generate_synthetic(small(n_clients=4, identities_per_client=6))
    assignments = []
    for seed in range(5):
        a = make_benchmark_split(ds, 4, seed)
        b = make_benchmark_split(ds, 4, seed)
        assert a.shard_identities == b.shard_identities
        assert all(np.array_equal(x, y) for x, y in zip(a.closed_gallery, b.closed_gallery))
        assignments.append(tuple(map(tuple, a.shard_identities)))
    assert len(set(assignments)) == 5


def test_split_too_few_identities():
    ds = generate_synthetic(small(n_clients=2, identities_per_client=1))
    with pytest.raises(ConfigurationError):
        make_benchmark_split(ds, 2, 0)
    ds = generate_synthetic(small(samples_per_identity=1))
    with pytest.raises(ConfigurationError):
        make_benchmark_split(ds, 2, 0)


def test_manifest_round_trip(tmp_path):
    ds = generate_synthetic(small())
    split = make_benchmark_split(ds, 2, seed=4)
    write_manifest(tmp_path / "m.json", split.to_manifest(ds))
    again = split_from_manifest(ds, read_manifest(tmp_path / "m.json"))
    assert again.shard_identities == split.shard_identities
    assert again.open_identities == split.open_identities
    for a, b in zip(again.closed_gallery + again.closed_query, split.closed_gallery + split.closed_query):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(again.open_query, split.open_query)


def test_pgm_single_image_round_trip():
    img = np.arange(12, dtype=np.float64).reshape(3, 4) / 11.0
    back = decode_pgm(encode_pgm(img))
    assert back.shape == (3, 4)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_pgm_header_comments():
    blob = b"P5\n# a comment\n2 1\n# another\n255\n" + bytes([0, 255])
    np.testing.assert_array_equal(decode_pgm(blob), [[0.0, 1.0]])


def test_dataset_pgm_round_trip(tmp_path):
    ds = generate_synthetic(small())
    write_image_directory(tmp_path, ds)
    loaded = load_image_directory(tmp_path)
    assert loaded.identity_names == ds.identity_names
    assert loaded.sample_names == ds.sample_names
    np.testing.assert_array_equal(loaded.identities, ds.identities)
    assert np.max(np.abs(loaded.images - ds.images)) <= 1 / 255


def test_empty_root(tmp_path):
    ds = load_image_directory(tmp_path)
    assert len(ds) == 0 and ds.n_identities == 0


@pytest.mark.parametrize(
    "blob",
    [b"P2\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n2 x\n255\n\x00\x00", b"P5\n1 1\n65535\n\x00\x00", b"P5\n1"],
)
def test_malformed_pgm_reports_path(tmp_path, blob):
    folder = tmp_path / "id0"
    folder.mkdir()
    (folder / "bad.pgm").write_bytes(blob)
    with pytest.raises(PGMParseError) as info:
        load_image_directory(tmp_path)
    assert "bad.pgm" in str(info.value)


def test_inconsistent_dimensions(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    write_pgm(tmp_path / "a" / "0.pgm", np.zeros((4, 4)))
    write_pgm(tmp_path / "b" / "0.pgm", np.zeros((4, 5)))
    with pytest.raises(DatasetError):
        load_image_directory(tmp_path)
