"""Dense-array helpers, seeded generators, and the finite-difference checker.

All arrays are float64 numpy arrays. Generators are numpy ``Generator``
objects over PCG64, seeded through ``SeedSequence`` so that a seed plus a
tuple of integer keys always yields the same stream on every platform.
"""

import hashlib

import numpy as np

from .errors import DegenerateInputError, DimensionError, NumericError

# Stream tags keep independent consumers of one seed apart.
STREAM_INIT_CLOSED = 1
STREAM_INIT_OPEN = 2
STREAM_CLIENT = 3
STREAM_DATA = 4
STREAM_SPLIT = 5


def make_rng(seed, *key):
    """Return a PCG64 generator keyed by ``seed`` and extra non-negative ints."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in key]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def as_dense(x):
    a = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError("array contains non-finite values")
    return a


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_rows(anchor, candidates):
    """Cosine between ``anchor`` (B, d) and each of ``candidates`` (C, B, d).

    Returns a (C, B) array. Row-wise version of :func:`cosine_similarity`.
    """
    na = np.sqrt(np.einsum("bd,bd->b", anchor, anchor))
    nc = np.sqrt(np.einsum("cbd,cbd->cb", candidates, candidates))
    if np.any(na == 0.0) or np.any(nc == 0.0):
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    dots = np.einsum("bd,cbd->cb", anchor, candidates)
    return np.clip(dots / (na[None, :] * nc), -1.0, 1.0)


def softplus(u):
    return np.logaddexp(0.0, u)


def sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


class ParamVector:
    """Flat float64 storage split into named, shaped segments.

    Segments are views into ``data``, so updating the flat vector (Adam,
    aggregation) updates every segment and vice versa.
    """

    __slots__ = ("layout", "data", "_index")

    def __init__(self, layout, data=None):
        self.layout = tuple((str(name), tuple(int(s) for s in shape)) for name, shape in layout)
        self._index = {}
        offset = 0
        for name, shape in self.layout:
            if name in self._index:
                raise DimensionError(f"duplicate segment name {name!r}")
            size = int(np.prod(shape, dtype=np.int64))
            self._index[name] = (offset, offset + size, shape)
            offset += size
        if data is None:
            data = np.zeros(offset)
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.shape != (offset,):
            raise DimensionError(f"flat data has shape {data.shape}, layout needs ({offset},)")
        self.data = data

    @classmethod
    def from_arrays(cls, arrays):
        layout = [(name, np.shape(a)) for name, a in arrays.items()]
        pv = cls(layout)
        for name, a in arrays.items():
            pv[name] = a
        return pv

    def __getitem__(self, name):
        start, stop, shape = self._index[name]
        return self.data[start:stop].reshape(shape)

    def __setitem__(self, name, value):
        start, stop, shape = self._index[name]
        self.data[start:stop] = np.broadcast_to(np.asarray(value, dtype=np.float64), shape).ravel()

    def __contains__(self, name):
        return name in self._index

    def __len__(self):
        return self.data.size

    @property
    def names(self):
        return [name for name, _ in self.layout]

    def segment_slice(self, name):
        start, stop, _ = self._index[name]
        return slice(start, stop)

    def copy(self):
        return ParamVector(self.layout, self.data.copy())

    def zeros_like(self):
        return ParamVector(self.layout)

    def same_layout(self, other):
        return self.layout == other.layout

    def digest(self):
        h = hashlib.sha256()
        h.update(repr(self.layout).encode())
        h.update(self.data.astype("<f8").tobytes())
        return h.hexdigest()

    def __repr__(self):
        segs = ", ".join(f"{n}{list(s)}" for n, s in self.layout)
        return f"ParamVector({segs})"


def finite_diff_grad(f, theta, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``theta``.

    ``theta`` may be a ParamVector (perturbed in place and restored) or an
    array. ``f`` receives the same object it was given.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if isinstance(theta, ParamVector):
        flat = theta.data
        target = theta
    else:
        flat = np.array(theta, dtype=np.float64)
        target = flat
    grad = np.zeros(flat.size)
    view = flat.reshape(-1)
    for i in range(view.size):
        orig = view[i]
        view[i] = orig + h
        fp = f(target)
        view[i] = orig - h
        fm = f(target)
        view[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite objective at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(flat.shape)


def gradient_mismatches(analytic, numeric, rel_tol=1e-3, abs_tol=1e-6, tiny=1e-8):
    """Indices where analytic and numeric gradients disagree.

    Coordinates with ``|analytic| < tiny`` are compared by absolute error,
    the rest by relative error against the larger magnitude.
    """
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    small = np.abs(a) < tiny
    denom = np.maximum(np.abs(a), np.abs(n))
    rel = np.abs(a - n) / np.where(denom > 0, denom, 1.0)
    bad = np.where(small, np.abs(a - n) >= abs_tol, rel >= rel_tol)
    return np.flatnonzero(bad)
