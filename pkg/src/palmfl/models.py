"""Verification model: learnable Gabor textural expert plus embedding layers.

A model is a pair (expert, embedding). The expert maps a grayscale image to
a textural feature vector; the embedding maps a (possibly enhanced) feature
to a unit-norm template and class logits. Gradients are written out by hand
and checked against finite differences in the test suite.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInputError, DimensionError, PalmFLError
from .numeric import ParamVector, inverse_softplus, sigmoid, softplus

SIGMA_FLOOR = 1e-3
GAMMA_FLOOR = 1e-3
LAMBDA_FLOOR = 1.0 + 1e-3  # keeps lambda strictly above 1 in floating point
EXPERT_SEGMENTS = ("theta", "lam_raw", "sigma_raw", "psi", "gamma_raw")


@dataclass(frozen=True)
class ExpertConfig:
    n_filters: int = 8
    kernel_size: int = 9
    stride: int = 2
    pool: int = 4

    def __post_init__(self):
        if self.kernel_size % 2 != 1 or self.kernel_size < 1:
            raise DimensionError("kernel_size must be a positive odd integer")
        if self.n_filters < 1 or self.stride < 1 or self.pool < 1:
            raise DimensionError("n_filters, stride and pool must be positive")

    @property
    def feature_dim(self):
        return self.n_filters * self.pool * self.pool

    def response_shape(self, height, width):
        k, s = self.kernel_size, self.stride
        if height < k or width < k:
            raise DimensionError(f"image {height}x{width} smaller than kernel {k}x{k}")
        ho = (height - k) // s + 1
        wo = (width - k) // s + 1
        if ho < self.pool or wo < self.pool:
            raise DimensionError(f"response map {ho}x{wo} smaller than pooling grid {self.pool}")
        return ho, wo


@dataclass(frozen=True)
class EmbeddingConfig:
    feature_dim: int
    n_classes: int
    hidden: int = 64
    template_dim: int = 32

    def __post_init__(self):
        if self.template_dim < 2:
            raise DimensionError("template_dim must be at least 2")
        if min(self.feature_dim, self.n_classes, self.hidden) < 1:
            raise DimensionError("embedding dimensions must be positive")


@dataclass
class Model:
    expert: ParamVector
    embedding: ParamVector
    expert_cfg: ExpertConfig

    def copy(self):
        return Model(self.expert.copy(), self.embedding.copy(), self.expert_cfg)


@dataclass
class ModelOutput:
    logits: np.ndarray
    template: np.ndarray
    textural_feature: np.ndarray


# ---------------------------------------------------------------------------
# Gabor bank


def constrained_gabor(expert):
    """Map stored (unconstrained) segments to (theta, lam, sigma, psi, gamma)."""
    return (
        expert["theta"],
        LAMBDA_FLOOR + softplus(expert["lam_raw"]),
        SIGMA_FLOOR + softplus(expert["sigma_raw"]),
        expert["psi"],
        GAMMA_FLOOR + softplus(expert["gamma_raw"]),
    )


def _grid(k):
    h = k // 2
    y, x = np.mgrid[-h : h + 1, -h : h + 1].astype(np.float64)
    return x, y


def gabor_kernel(theta, lam, sigma, psi, gamma, k):
    """Real Gabor kernel of odd size ``k``; rows index y, columns index x."""
    if k % 2 != 1:
        raise DimensionError("kernel size must be odd")
    x, y = _grid(k)
    xr = x * np.cos(theta) + y * np.sin(theta)
    yr = -x * np.sin(theta) + y * np.cos(theta)
    envelope = np.exp(-(xr**2 + gamma**2 * yr**2) / (2.0 * sigma**2))
    return envelope * np.cos(2.0 * np.pi * xr / lam + psi)


def gabor_bank(expert, k, with_grads=False):
    """Kernels (C, k, k) for every filter, plus d kernel / d stored segment.

    The returned gradient dict is keyed by segment name and already includes
    the softplus chain rule for the constrained parameters.
    """
    theta, lam, sigma, psi, gamma = (np.asarray(v, dtype=np.float64)[:, None, None] for v in constrained_gabor(expert))
    x, y = _grid(k)
    c, s = np.cos(theta), np.sin(theta)
    xr = x * c + y * s
    yr = -x * s + y * c
    quad = xr**2 + gamma**2 * yr**2
    env = np.exp(-quad / (2.0 * sigma**2))
    arg = 2.0 * np.pi * xr / lam + psi
    cos_a, sin_a = np.cos(arg), np.sin(arg)
    kernels = env * cos_a
    if not with_grads:
        return kernels, None

    d_xr = env * (-xr / sigma**2) * cos_a - env * sin_a * (2.0 * np.pi / lam)
    d_yr = env * (-(gamma**2) * yr / sigma**2) * cos_a
    grads = {
        # d xr / d theta = yr, d yr / d theta = -xr
        "theta": d_xr * yr - d_yr * xr,
        "lam_raw": env * sin_a * (2.0 * np.pi * xr / lam**2) * sigmoid(expert["lam_raw"])[:, None, None],
        "sigma_raw": kernels * quad / sigma**3 * sigmoid(expert["sigma_raw"])[:, None, None],
        "psi": -env * sin_a,
        "gamma_raw": kernels * (-gamma * yr**2 / sigma**2) * sigmoid(expert["gamma_raw"])[:, None, None],
    }
    return kernels, grads


def init_expert(cfg, rng, jitter=0.05):
    c = cfg.n_filters
    spacing = np.pi / c
    theta = np.arange(c) * spacing + rng.uniform(-jitter, jitter, c) * spacing
    lam = 6.0 * (1.0 + rng.uniform(-jitter, jitter, c))
    sigma = 3.0 * (1.0 + rng.uniform(-jitter, jitter, c))
    gamma = 1.0 * (1.0 + rng.uniform(-jitter, jitter, c))
    return ParamVector.from_arrays(
        {
            "theta": theta,
            "lam_raw": inverse_softplus(lam - LAMBDA_FLOOR),
            "sigma_raw": inverse_softplus(sigma - SIGMA_FLOOR),
            "psi": np.zeros(c),
            "gamma_raw": inverse_softplus(gamma - GAMMA_FLOOR),
        }
    )


def expert_layout(cfg):
    return tuple((name, (cfg.n_filters,)) for name in EXPERT_SEGMENTS)


# ---------------------------------------------------------------------------
# Expert forward / backward


def pooling_matrix(ho, wo, p):
    """(p*p, ho*wo) averaging matrix over a p x p grid of near-equal cells."""
    rows = np.floor(np.arange(p + 1) * ho / p).astype(int)
    cols = np.floor(np.arange(p + 1) * wo / p).astype(int)
    a = np.zeros((p * p, ho * wo))
    for i in range(p):
        for j in range(p):
            mask = np.zeros((ho, wo))
            mask[rows[i] : rows[i + 1], cols[j] : cols[j + 1]] = 1.0
            a[i * p + j] = mask.ravel() / mask.sum()
    return a


@dataclass
class ExpertCache:
    patches: np.ndarray  # (B, HW, k*k)
    active: np.ndarray  # (B, HW, C) bool, ReLU mask
    pool: np.ndarray  # (P*P, HW)
    kernel_grads: dict


def expert_forward_batch(expert, cfg, images, keep_cache=False):
    """Textural features (B, C*P*P) for a stack of images (B, H, W)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    b, h, w = images.shape
    ho, wo = cfg.response_shape(h, w)
    k, s = cfg.kernel_size, cfg.stride
    kernels, kgrads = gabor_bank(expert, k, with_grads=keep_cache)
    windows = sliding_window_view(images, (k, k), axis=(1, 2))[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    patches = windows.reshape(b, ho * wo, k * k)
    resp = patches @ kernels.reshape(cfg.n_filters, k * k).T  # (B, HW, C)
    active = resp > 0.0
    act = np.where(active, resp, 0.0)
    pool = pooling_matrix(ho, wo, cfg.pool)
    pooled = np.einsum("bhc,ph->bcp", act, pool)
    features = pooled.reshape(b, cfg.feature_dim)
    cache = ExpertCache(patches, active, pool, kgrads) if keep_cache else None
    return features, cache


def expert_backward(cfg, cache, d_features):
    """Gradient of the loss w.r.t. every expert segment, given dL/d features."""
    b = d_features.shape[0]
    k = cfg.kernel_size
    d_pooled = d_features.reshape(b, cfg.n_filters, cfg.pool * cfg.pool)
    d_act = np.einsum("bcp,ph->bhc", d_pooled, cache.pool)
    d_resp = np.where(cache.active, d_act, 0.0)
    d_kernels = np.einsum("bhc,bhk->ck", d_resp, cache.patches).reshape(cfg.n_filters, k, k)
    grad = ParamVector(expert_layout(cfg))
    for name in EXPERT_SEGMENTS:
        grad[name] = np.einsum("cuv,cuv->c", d_kernels, cache.kernel_grads[name])
    return grad


def expert_forward(expert, cfg, image):
    """Textural feature of a single H x W image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError("expert_forward expects one 2-D image")
    return expert_forward_batch(expert, cfg, image[None])[0][0]


# ---------------------------------------------------------------------------
# Embedding layers


def embedding_layout(cfg):
    return (
        ("W1", (cfg.hidden, cfg.feature_dim)),
        ("b1", (cfg.hidden,)),
        ("W2", (cfg.template_dim, cfg.hidden)),
        ("b2", (cfg.template_dim,)),
        ("Wc", (cfg.n_classes, cfg.hidden)),
        ("bc", (cfg.n_classes,)),
        ("alpha", ()),
        ("beta", ()),
    )


def init_embedding(cfg, rng, alpha=1.0, beta=0.0):
    """He-uniform weights, zero biases, blend pair (alpha, beta)."""
    pv = ParamVector(embedding_layout(cfg))
    for name, fan_in in (("W1", cfg.feature_dim), ("W2", cfg.hidden), ("Wc", cfg.hidden)):
        bound = np.sqrt(6.0 / fan_in)
        pv[name] = rng.uniform(-bound, bound, pv[name].shape)
    pv["alpha"] = alpha
    pv["beta"] = beta
    return pv


def embedding_config_of(embedding):
    shapes = dict(embedding.layout)
    hidden, feature_dim = shapes["W1"]
    return EmbeddingConfig(
        feature_dim=feature_dim,
        n_classes=shapes["Wc"][0],
        hidden=hidden,
        template_dim=shapes["W2"][0],
    )


@dataclass
class EmbeddingCache:
    features: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray
    template: np.ndarray
    norm: np.ndarray


def embed_batch(embedding, features, keep_cache=False):
    """Return (logits (B, M), templates (B, d_e)) for features (B, d_t)."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != embedding["W1"].shape[1]:
        raise DimensionError(f"feature length {features.shape[-1]} != {embedding['W1'].shape[1]}")
    pre = features @ embedding["W1"].T + embedding["b1"]
    hidden = np.maximum(pre, 0.0)
    raw = hidden @ embedding["W2"].T + embedding["b2"]
    norm = np.sqrt(np.einsum("bd,bd->b", raw, raw))
    if np.any(norm == 0.0):
        raise DegenerateInputError("template has zero norm before normalisation")
    template = raw / norm[:, None]
    logits = hidden @ embedding["Wc"].T + embedding["bc"]
    cache = EmbeddingCache(features, pre, hidden, template, norm) if keep_cache else None
    return logits, template, cache


def embed_backward(embedding, cache, d_logits, d_template):
    """Return (grad ParamVector, dL/d features). alpha/beta entries stay zero."""
    grad = embedding.zeros_like()
    z = cache.template
    d_raw = (d_template - z * np.einsum("bd,bd->b", z, d_template)[:, None]) / cache.norm[:, None]
    grad["W2"] = d_raw.T @ cache.hidden
    grad["b2"] = d_raw.sum(axis=0)
    grad["Wc"] = d_logits.T @ cache.hidden
    grad["bc"] = d_logits.sum(axis=0)
    d_hidden = d_raw @ embedding["W2"] + d_logits @ embedding["Wc"]
    d_pre = np.where(cache.hidden_pre > 0.0, d_hidden, 0.0)
    grad["W1"] = d_pre.T @ cache.features
    grad["b1"] = d_pre.sum(axis=0)
    return grad, d_pre @ embedding["W1"]


def model_forward(model, f_in):
    """Logits, unit template and the input feature for a single feature vector."""
    f_in = np.asarray(f_in, dtype=np.float64)
    logits, template, _ = embed_batch(model.embedding, f_in[None])
    return ModelOutput(logits[0], template[0], f_in)


def init_model(expert_cfg, embed_cfg, rng):
    expert = init_expert(expert_cfg, rng)
    return Model(expert, init_embedding(embed_cfg, rng), expert_cfg)


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout: b"PALMCKP1", u64 LE header length, UTF-8 JSON header, then the
# float64 LE payload of every group in header order. The header lists each
# group's segments as [name, shape] pairs plus a free-form "meta" object.

CHECKPOINT_MAGIC = b"PALMCKP1"


class CheckpointError(PalmFLError, ValueError):
    pass


def save_params(path, groups, meta=None):
    header = {
        "groups": [{"name": name, "segments": [[n, list(s)] for n, s in pv.layout]} for name, pv in groups.items()],
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for pv in groups.values():
            fh.write(pv.data.astype("<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    groups = {}
    for g in header["groups"]:
        layout = [(n, tuple(s)) for n, s in g["segments"]]
        size = sum(int(np.prod(s, dtype=np.int64)) for _, s in layout)
        end = offset + 8 * size
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated payload")
        data = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64)
        groups[g["name"]] = ParamVector(layout, data)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return groups, header["meta"]


def save_model(path, model, meta=None):
    meta = dict(meta or {})
    cfg = model.expert_cfg
    meta["expert_cfg"] = [cfg.n_filters, cfg.kernel_size, cfg.stride, cfg.pool]
    save_params(path, {"expert": model.expert, "embedding": model.embedding}, meta)


def load_model(path):
    groups, meta = load_params(path)
    cfg = ExpertConfig(*meta["expert_cfg"])
    return Model(groups["expert"], groups["embedding"], cfg), meta
