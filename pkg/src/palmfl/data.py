"""Synthetic palm-texture data, identity-isolated benchmark splits, PGM I/O."""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, DatasetError, PGMParseError
from .numeric import STREAM_DATA, STREAM_SPLIT, make_rng


@dataclass
class Sample:
    image: np.ndarray
    identity: int
    client_hint: int = None


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W) in [0, 1]
    identities: np.ndarray  # (n,) dense identity index
    identity_names: list
    sample_names: list
    client_hints: np.ndarray = None  # (n,) origin client, optional

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        n = self.identities.shape[0]
        if self.images.shape[0] != n or len(self.sample_names) != n:
            raise DatasetError("images, identities and sample names must have equal length")
        if self.client_hints is not None:
            self.client_hints = np.asarray(self.client_hints, dtype=np.int64)

    def __len__(self):
        return self.identities.shape[0]

    def __getitem__(self, i):
        hint = None if self.client_hints is None else int(self.client_hints[i])
        return Sample(self.images[i], int(self.identities[i]), hint)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def n_identities(self):
        return len(self.identity_names)

    @property
    def image_shape(self):
        return self.images.shape[1:]


# ---------------------------------------------------------------------------
# Synthetic textures


@dataclass(frozen=True)
class SynthConfig:
    n_clients: int = 4
    identities_per_client: int = 8
    samples_per_identity: int = 10
    image_size: int = 32
    gratings: tuple = (3, 5)
    jitter_px: float = 2.5
    jitter_rot: float = 0.2
    noise_sigma: float = 0.15
    domain_strength: float = 0.8
    domains: tuple = None  # explicit per-client (gamma, contrast, blur)
    seed: int = 0

    def __post_init__(self):
        if min(self.n_clients, self.identities_per_client, self.samples_per_identity) < 1:
            raise ConfigurationError("client, identity and sample counts must be positive")
        if self.image_size < 16:
            raise ConfigurationError("image_size must be at least 16")
        lo, hi = self.gratings
        if not 1 <= lo <= hi:
            raise ConfigurationError("gratings must be an increasing (min, max) pair")
        if min(self.jitter_px, self.jitter_rot, self.noise_sigma, self.domain_strength) < 0:
            raise ConfigurationError("jitter, noise and domain strength must be non-negative")
        if self.domains is not None and len(self.domains) != self.n_clients:
            raise ConfigurationError("need one domain triple per client")


def client_domains(cfg):
    """Per-client (gamma, contrast, blur sigma) appearance transforms."""
    if cfg.domains is not None:
        return [tuple(float(v) for v in d) for d in cfg.domains]
    s = cfg.domain_strength
    out = []
    for c in range(cfg.n_clients):
        rng = make_rng(cfg.seed, STREAM_DATA, 0, c)
        gamma = float(np.exp(s * rng.uniform(-0.5, 0.5)))
        contrast = float(1.0 - s * rng.uniform(0.0, 0.5))
        blur = float(s * rng.uniform(0.0, 1.0))
        out.append((gamma, contrast, blur))
    return out


def _identity_texture(cfg, identity):
    rng = make_rng(cfg.seed, STREAM_DATA, 1, identity)
    n = int(rng.integers(cfg.gratings[0], cfg.gratings[1] + 1))
    return {
        "orient": rng.uniform(0.0, np.pi, n),
        "wavelength": rng.uniform(4.0, 12.0, n),
        "phase": rng.uniform(0.0, 2.0 * np.pi, n),
        "amp": rng.uniform(0.5, 1.0, n),
        "bg_dir": rng.uniform(0.0, 2.0 * np.pi),
        "bg_amp": rng.uniform(0.05, 0.15),
    }


def render_texture(tex, size, dx=0.0, dy=0.0, rot=0.0):
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    x, y = x - c - dx, y - c - dy
    xr = x * np.cos(rot) + y * np.sin(rot)
    yr = -x * np.sin(rot) + y * np.cos(rot)
    t = np.zeros((size, size))
    for o, lam, ph, a in zip(tex["orient"], tex["wavelength"], tex["phase"], tex["amp"]):
        t += a * np.cos(2.0 * np.pi * (xr * np.cos(o) + yr * np.sin(o)) / lam + ph)
    t /= tex["amp"].sum()
    bg = tex["bg_amp"] * (xr * np.cos(tex["bg_dir"]) + yr * np.sin(tex["bg_dir"])) / max(c, 1.0)
    return 0.5 + 0.35 * t + bg


def apply_domain(img, gamma, contrast, blur):
    img = np.clip(0.5 + contrast * (img - 0.5), 0.0, 1.0) ** gamma
    if blur > 0:
        img = gaussian_filter(img, blur, mode="nearest")
    return img


def generate_synthetic(cfg):
    """Deterministic dataset: identity-major order, names ``cXX_idYYY/sZZZ.pgm``."""
    domains = client_domains(cfg)
    images, ids, hints, id_names, names = [], [], [], [], []
    for client in range(cfg.n_clients):
        gamma, contrast, blur = domains[client]
        for local in range(cfg.identities_per_client):
            identity = client * cfg.identities_per_client + local
            name = f"c{client:02d}_id{local:03d}"
            id_names.append(name)
            tex = _identity_texture(cfg, identity)
            for j in range(cfg.samples_per_identity):
                rng = make_rng(cfg.seed, STREAM_DATA, 2, identity, j)
                dx, dy = rng.uniform(-cfg.jitter_px, cfg.jitter_px, 2) if cfg.jitter_px > 0 else (0.0, 0.0)
                rot = rng.uniform(-cfg.jitter_rot, cfg.jitter_rot) if cfg.jitter_rot > 0 else 0.0
                img = apply_domain(render_texture(tex, cfg.image_size, dx, dy, rot), gamma, contrast, blur)
                if cfg.noise_sigma > 0:
                    img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
                images.append(np.clip(img, 0.0, 1.0))
                ids.append(identity)
                hints.append(client)
                names.append(f"{name}/s{j:03d}.pgm")
    return Dataset(np.stack(images), np.array(ids), id_names, names, np.array(hints))


# ---------------------------------------------------------------------------
# Benchmark split


@dataclass
class BenchmarkSplit:
    n_clients: int
    shard_identities: list  # per client, sorted identity indices
    open_identities: list
    closed_gallery: list  # per client, sorted sample indices
    closed_query: list
    open_gallery: np.ndarray
    open_query: np.ndarray
    seed: int = None
    train_shards: list = field(init=False)

    def __post_init__(self):
        # Training data of a client is its closed-set gallery; query samples
        # are held out for closed-set evaluation.
        self.train_shards = self.closed_gallery

    def audit(self, dataset):
        """Raise DatasetError unless every isolation invariant holds."""
        ids = dataset.identities
        seen = set()
        for c in range(self.n_clients):
            shard = set(self.shard_identities[c])
            if shard & seen:
                raise DatasetError(f"client {c} shares identities with another client")
            seen |= shard
            for arr in (self.closed_gallery[c], self.closed_query[c]):
                if not set(ids[arr].tolist()) <= shard:
                    raise DatasetError(f"client {c} closed set leaks foreign identities")
            if set(self.closed_gallery[c].tolist()) & set(self.closed_query[c].tolist()):
                raise DatasetError(f"client {c} gallery and query share samples")
        open_ids = set(self.open_identities)
        if open_ids & seen:
            raise DatasetError("open-set identities overlap training identities")
        for arr in (self.open_gallery, self.open_query):
            if not set(ids[arr].tolist()) <= open_ids:
                raise DatasetError("open-set samples carry training identities")
        if set(self.open_gallery.tolist()) & set(self.open_query.tolist()):
            raise DatasetError("open gallery and query share samples")

    def to_manifest(self, dataset):
        identities = {}
        for c, shard in enumerate(self.shard_identities):
            for i in shard:
                identities[dataset.identity_names[i]] = f"shard:{c}"
        for i in self.open_identities:
            identities[dataset.identity_names[i]] = "open"
        samples = {}
        for arr, role in self._roles():
            for s in arr:
                samples[dataset.sample_names[s]] = role
        return {
            "n_clients": self.n_clients,
            "seed": self.seed,
            "identities": dict(sorted(identities.items())),
            "samples": dict(sorted(samples.items())),
        }

    def _roles(self):
        for c in range(self.n_clients):
            yield self.closed_gallery[c], "gallery"
            yield self.closed_query[c], "query"
        yield self.open_gallery, "gallery"
        yield self.open_query, "query"


def _halve(indices, rng):
    """Shuffle ``indices`` and split into (gallery, query); gallery gets the extra one."""
    perm = rng.permutation(indices)
    n_query = len(perm) // 2
    return perm[n_query:], perm[:n_query]


def make_benchmark_split(dataset, n_clients, seed):
    """Identity-isolated split into N training shards and an open-set pool.

    When every sample carries a client hint with exactly ``n_clients``
    distinct origins, each origin's identities are halved between that
    client's shard and the open pool, so per-client appearance (non-IID)
    follows the data. Otherwise identities are shuffled globally, half are
    dealt evenly across the shards and half go to the open pool.
    """
    n_ids = dataset.n_identities
    if n_ids < 2 * n_clients:
        raise ConfigurationError(f"{n_ids} identities cannot feed {n_clients} clients plus an open set")
    per_id = [np.flatnonzero(dataset.identities == i) for i in range(n_ids)]
    if min(len(p) for p in per_id) < 2:
        raise ConfigurationError("every identity needs at least two samples")
    rng = make_rng(seed, STREAM_SPLIT)

    hints = dataset.client_hints
    use_hints = hints is not None and len(set(hints.tolist())) == n_clients
    if use_hints:
        origin = {}
        for i in range(n_ids):
            origin.setdefault(int(hints[per_id[i][0]]), []).append(i)
        if any(len(v) < 2 for v in origin.values()):
            use_hints = False
    if use_hints:
        shard_ids, open_ids = [], []
        for c, client in enumerate(sorted(origin)):
            perm = rng.permutation(origin[client])
            n_train = len(perm) // 2
            shard_ids.append(sorted(perm[:n_train].tolist()))
            open_ids.extend(perm[n_train:].tolist())
    else:
        perm = rng.permutation(n_ids)
        n_train = n_ids // 2
        shard_ids = [sorted(part.tolist()) for part in np.array_split(perm[:n_train], n_clients)]
        open_ids = perm[n_train:].tolist()
    if any(len(s) == 0 for s in shard_ids):
        raise ConfigurationError("some client received no training identity")

    def halves(identity_list):
        gal, qry = [], []
        for i in sorted(identity_list):
            g, q = _halve(per_id[i], rng)
            gal.extend(g.tolist())
            qry.extend(q.tolist())
        return np.array(sorted(gal), dtype=np.int64), np.array(sorted(qry), dtype=np.int64)

    closed = [halves(s) for s in shard_ids]
    og, oq = halves(open_ids)
    split = BenchmarkSplit(
        n_clients=n_clients,
        shard_identities=shard_ids,
        open_identities=sorted(open_ids),
        closed_gallery=[g for g, _ in closed],
        closed_query=[q for _, q in closed],
        open_gallery=og,
        open_query=oq,
        seed=seed,
    )
    split.audit(dataset)
    return split


def split_from_manifest(dataset, manifest):
    n = int(manifest["n_clients"])
    name_to_id = {name: i for i, name in enumerate(dataset.identity_names)}
    shard_ids = [[] for _ in range(n)]
    open_ids = []
    for name, where in manifest["identities"].items():
        if name not in name_to_id:
            raise DatasetError(f"manifest identity {name!r} missing from dataset")
        if where == "open":
            open_ids.append(name_to_id[name])
        else:
            shard_ids[int(where.split(":")[1])].append(name_to_id[name])
    owner = {}
    for c, s in enumerate(shard_ids):
        for i in s:
            owner[i] = c
    gal = [[] for _ in range(n)]
    qry = [[] for _ in range(n)]
    og, oq = [], []
    index = {name: i for i, name in enumerate(dataset.sample_names)}
    for name, role in manifest["samples"].items():
        if name not in index:
            raise DatasetError(f"manifest sample {name!r} missing from dataset")
        s = index[name]
        c = owner.get(int(dataset.identities[s]))
        if c is None:
            (og if role == "gallery" else oq).append(s)
        else:
            (gal[c] if role == "gallery" else qry[c]).append(s)
    arr = lambda v: np.array(sorted(v), dtype=np.int64)  # noqa: E731
    split = BenchmarkSplit(
        n_clients=n,
        shard_identities=[sorted(s) for s in shard_ids],
        open_identities=sorted(open_ids),
        closed_gallery=[arr(g) for g in gal],
        closed_query=[arr(q) for q in qry],
        open_gallery=arr(og),
        open_query=arr(oq),
        seed=manifest.get("seed"),
    )
    split.audit(dataset)
    return split


def write_manifest(path, manifest):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# PGM (binary P5, 8-bit)


def encode_pgm(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DatasetError("PGM images must be 2-D")
    h, w = img.shape
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def decode_pgm(blob, path="<memory>"):
    """Parse a binary P5 PGM with maxval <= 255 into floats in [0, 1]."""
    tokens = []
    pos = 0
    n = len(blob)
    while len(tokens) < 4:
        while pos < n and blob[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise PGMParseError(path, "truncated header")
        if blob[pos : pos + 1] == b"#":
            while pos < n and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise PGMParseError(path, f"unsupported magic {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMParseError(path, "non-integer header field") from None
    if w <= 0 or h <= 0 or not 0 < maxval <= 255:
        raise PGMParseError(path, f"bad dimensions or maxval ({w}x{h}, {maxval})")
    pos += 1  # single whitespace after maxval
    data = blob[pos : pos + w * h]
    if len(data) != w * h:
        raise PGMParseError(path, f"expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, image):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(image))


def read_pgm(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read(), path)


def write_image_directory(root, dataset):
    for img, name in zip(dataset.images, dataset.sample_names):
        path = os.path.join(root, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        write_pgm(path, img)


def load_image_directory(root):
    """Load ``<root>/<identity>/<sample>.pgm``; identities sorted by name."""
    id_names = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    images, ids, names = [], [], []
    shape = None
    for i, ident in enumerate(id_names):
        folder = os.path.join(root, ident)
        for fname in sorted(f for f in os.listdir(folder) if f.lower().endswith(".pgm")):
            path = os.path.join(folder, fname)
            img = read_pgm(path)
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise DatasetError(f"{path}: size {img.shape} differs from {shape}")
            images.append(img)
            ids.append(i)
            names.append(f"{ident}/{fname}")
    if not images:
        return Dataset(np.zeros((0, 0, 0)), np.zeros(0, dtype=np.int64), id_names if ids else [], [])
    return Dataset(np.stack(images), np.array(ids), id_names, names)
