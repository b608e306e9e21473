"""Federated training: personalised closed-set models, a shared open-set model.

The server loop is synchronous and fail-stop. Every value that crosses the
client/server boundary is one of the message dataclasses below and is
appended to ``FederationResult.messages``, so tests can audit exactly what
left each client.

Methods:

``fedpalm``
    Each client trains a private closed model and a replica of the shared
    open model. Open models are aggregated by sample count every round.
    From the phase boundary on, closed experts are frozen and shared once,
    and both models read TEIM-enhanced features.
``fedavg``
    A single shared model, aggregated every round, no TEIM.
``local``
    Each client trains one private model in isolation (no messages).
"""

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ProtocolError
from .losses import LossWeights
from .models import EmbeddingConfig, ExpertConfig, Model, init_model
from .numeric import STREAM_CLIENT, STREAM_INIT_CLOSED, STREAM_INIT_OPEN, ParamVector, make_rng
from .optim import Adam
from .pipeline import Head, objective

METHODS = ("fedpalm", "fedavg", "local")
ROUND_LOG_HEADER = ["round", "client", "epoch", "loss_ce", "loss_con", "n_i"]


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 8
    rounds: int = 9
    local_epochs: int = 1
    k: int = 3
    lr: float = 0.01
    batch_size: int = 8
    tau: float = 0.07
    weights: LossWeights = LossWeights()
    seed: int = 0
    teim_from_start: bool = False
    expert: ExpertConfig = ExpertConfig()
    hidden: int = 64
    template_dim: int = 32
    augment_shift: int = 2
    augment_noise: float = 0.02
    workers: int = 1

    @property
    def phase_boundary(self):
        return 0 if self.teim_from_start else math.ceil(self.rounds / 3)

    def validate(self, method):
        if method not in METHODS:
            raise ConfigurationError(f"unknown method {method!r}")
        min_clients = 2 if method == "fedpalm" else 1
        if self.n_clients < min_clients:
            raise ConfigurationError(f"{method} needs at least {min_clients} clients")
        if self.rounds < 3:
            raise ConfigurationError("at least three communication rounds are required")
        if self.local_epochs < 1:
            raise ConfigurationError("local_epochs must be at least 1")
        if method == "fedpalm" and not 1 <= self.k <= self.n_clients:
            raise ConfigurationError(f"K={self.k} outside [1, {self.n_clients}]")
        if self.batch_size < 1 or self.tau <= 0 or self.lr < 0:
            raise ConfigurationError("batch_size, tau and lr must be positive (lr may be 0)")


# ---------------------------------------------------------------------------
# Messages


@dataclass(frozen=True)
class ModelBroadcast:
    """Server to every client: current open model."""

    round: int
    expert: ParamVector
    embedding: ParamVector


@dataclass(frozen=True)
class OpenModelUpdate:
    """Client to server after local training: open model and sample count."""

    client_id: int
    round: int
    expert: ParamVector
    embedding: ParamVector
    n_samples: int


@dataclass(frozen=True)
class ExpertUpload:
    """Client to server: a frozen closed-set textural expert (no embedding)."""

    client_id: int
    expert: ParamVector
    stage: str  # "phase_boundary" or "deployment"


@dataclass(frozen=True)
class ExpertRedistribution:
    """Server to every client: all uploaded experts keyed by client id."""

    experts: tuple  # ((client_id, ParamVector), ...)
    stage: str


SERVER_BOUND = (OpenModelUpdate, ExpertUpload)


# ---------------------------------------------------------------------------
# State


@dataclass
class ClientState:
    client_id: int
    images: np.ndarray
    labels: np.ndarray
    closed: Model = None
    open: Model = None
    received_experts: dict = field(default_factory=dict)
    optimizers: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return int(self.labels.shape[0])


@dataclass
class ServerState:
    round: int
    global_model: Model


@dataclass
class RoundRecord:
    round: int
    client: int
    epoch: int
    loss_ce: float
    loss_con: float
    n_i: int
    phase: int = 1
    closed_expert_digest: str = ""


@dataclass
class FederationResult:
    method: str
    config: FederationConfig
    clients: list
    global_model: Model
    log: list
    messages: list
    n_classes: int
    label_offsets: list
    boundary_models: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Aggregation


def aggregate(params, weights, client_ids=None):
    """Sample-weighted mean of ParamVectors, summed in ascending client order."""
    if not params:
        raise ProtocolError("nothing to aggregate")
    layout = params[0].layout
    if any(p.layout != layout for p in params):
        raise ProtocolError("parameter layouts differ between clients")
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise ProtocolError("total aggregation weight must be positive")
    order = np.argsort(client_ids, kind="stable") if client_ids is not None else range(len(params))
    out = np.zeros(params[0].data.size)
    for i in order:
        out += (w[i] / total) * params[i].data
    return ParamVector(layout, out)


# ---------------------------------------------------------------------------
# Local training


def label_offsets(split):
    offsets, acc = [], 0
    for shard in split.shard_identities:
        offsets.append(acc)
        acc += len(shard)
    return offsets, acc


def shard_labels(dataset, split, client_id, offsets):
    mapping = {ident: offsets[client_id] + j for j, ident in enumerate(split.shard_identities[client_id])}
    idx = split.train_shards[client_id]
    return np.array([mapping[int(i)] for i in dataset.identities[idx]], dtype=np.int64)


def augment(images, rng, max_shift, noise):
    """Random integer translation (edge padded) plus Gaussian pixel noise."""
    n, h, w = images.shape
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    out = np.empty_like(images)
    pad = max_shift
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    for i, (dy, dx) in enumerate(shifts):
        out[i] = padded[i, pad - dy : pad - dy + h, pad - dx : pad - dx + w]
    if noise > 0:
        out = out + rng.normal(0.0, noise, out.shape)
    return np.clip(out, 0.0, 1.0)


def contrastive_batch(images, labels, rng, cfg):
    """Stack each image with one augmented view: 2n images, 2n labels."""
    twins = augment(images, rng, cfg.augment_shift, cfg.augment_noise)
    return np.concatenate([images, twins]), np.concatenate([labels, labels])


def _optimizer(client, name, pv, cfg):
    opt = client.optimizers.get(name)
    if opt is None:
        opt = client.optimizers[name] = Adam(pv.data.size, lr=cfg.lr)
    return opt


def _training_setup(client, r, cfg, method):
    """Pool, heads and trainable (name, params, pool position or head index)."""
    if method == "fedpalm" and r >= cfg.phase_boundary:
        n = cfg.n_clients
        if len(client.received_experts) != n:
            raise ProtocolError(f"client {client.client_id} lacks the shared closed experts")
        pool = [client.received_experts[c] for c in range(n)] + [client.open.expert]
        pool[client.client_id] = client.closed.expert
        own = client.client_id
        heads = [
            Head(own, client.closed.embedding, tuple(c for c in range(n + 1) if c != own)),
            Head(n, client.open.embedding, tuple(range(n))),
        ]
        trainable = [
            ("closed.embedding", client.closed.embedding, ("head", 0)),
            ("open.expert", client.open.expert, ("expert", n)),
            ("open.embedding", client.open.embedding, ("head", 1)),
        ]
        return pool, heads, trainable, 2
    if method == "fedpalm":
        pool = [client.closed.expert, client.open.expert]
        heads = [Head(0, client.closed.embedding), Head(1, client.open.embedding)]
        trainable = [
            ("closed.expert", client.closed.expert, ("expert", 0)),
            ("closed.embedding", client.closed.embedding, ("head", 0)),
            ("open.expert", client.open.expert, ("expert", 1)),
            ("open.embedding", client.open.embedding, ("head", 1)),
        ]
        return pool, heads, trainable, 1
    model = client.open if method == "fedavg" else client.closed
    prefix = "open" if method == "fedavg" else "closed"
    trainable = [
        (f"{prefix}.expert", model.expert, ("expert", 0)),
        (f"{prefix}.embedding", model.embedding, ("head", 0)),
    ]
    return [model.expert], [Head(0, model.embedding)], trainable, 1


def local_training(client, r, broadcast, cfg, method="fedpalm"):
    """Run E local epochs for round ``r``; returns (update message or None, records)."""
    if not 0 <= r < cfg.rounds:
        raise ProtocolError(f"round {r} outside [0, {cfg.rounds})")
    if client.n_samples == 0:
        raise ProtocolError(f"client {client.client_id} has an empty shard")
    if broadcast is not None:
        if not (broadcast.expert.same_layout(client.open.expert) and broadcast.embedding.same_layout(client.open.embedding)):
            raise ProtocolError("broadcast layout does not match the local replica")
        client.open.expert.data[:] = broadcast.expert.data
        client.open.embedding.data[:] = broadcast.embedding.data

    rng = make_rng(cfg.seed, STREAM_CLIENT, client.client_id, r)
    pool, heads, trainable, phase = _training_setup(client, r, cfg, method)
    expert_positions = tuple(where[1] for _, _, where in trainable if where[0] == "expert")
    records = []
    n = client.n_samples
    for epoch in range(cfg.local_epochs):
        perm = rng.permutation(n)
        ce_sum = con_sum = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            images, labels = contrastive_batch(client.images[idx], client.labels[idx], rng, cfg)
            res = objective(pool, cfg.expert, heads, images, labels, cfg.k, cfg.tau, cfg.weights, expert_positions)
            for name, pv, (kind, pos) in trainable:
                grad = res.expert_grads[pos] if kind == "expert" else res.embedding_grads[pos]
                _optimizer(client, name, pv, cfg).step(pv.data, grad.data)
            ce_sum += sum(t.ce for t in res.terms)
            con_sum += sum(t.con for t in res.terms)
            n_batches += 1
        digest = client.closed.expert.digest() if client.closed is not None else ""
        records.append(RoundRecord(r, client.client_id, epoch, ce_sum / n_batches, con_sum / n_batches, n, phase, digest))

    update = None
    if method != "local":
        update = OpenModelUpdate(client.client_id, r, client.open.expert.copy(), client.open.embedding.copy(), n)
    return update, records


# ---------------------------------------------------------------------------
# Server loop


def _init_clients(cfg, dataset, split, method):
    if len(split.train_shards) != cfg.n_clients:
        raise ConfigurationError(f"split has {len(split.train_shards)} shards, config says {cfg.n_clients}")
    offsets, n_classes = label_offsets(split)
    embed_cfg = EmbeddingConfig(cfg.expert.feature_dim, n_classes, cfg.hidden, cfg.template_dim)
    open_init = init_model(cfg.expert, embed_cfg, make_rng(cfg.seed, STREAM_INIT_OPEN))
    closed_init = init_model(cfg.expert, embed_cfg, make_rng(cfg.seed, STREAM_INIT_CLOSED))
    clients = []
    for c in range(cfg.n_clients):
        state = ClientState(c, dataset.images[split.train_shards[c]], shard_labels(dataset, split, c, offsets))
        if method == "fedpalm":
            state.closed = closed_init.copy()
            state.open = open_init.copy()
        elif method == "fedavg":
            state.open = open_init.copy()
        else:
            state.closed = open_init.copy()
        clients.append(state)
    return clients, open_init.copy(), offsets, n_classes


def _share_experts(clients, messages, stage):
    uploads = [ExpertUpload(c.client_id, c.closed.expert.copy(), stage) for c in clients]
    messages.extend(uploads)
    dist = ExpertRedistribution(tuple((u.client_id, u.expert) for u in uploads), stage)
    messages.append(dist)
    for c in clients:
        c.received_experts = {cid: pv.copy() for cid, pv in dist.experts}


def _map_clients(fn, clients, workers):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, clients))
    return [fn(c) for c in clients]


def run_federation(cfg, dataset, split, method="fedpalm"):
    """Train with ``method`` in {fedpalm, fedavg, local}; see module docstring."""
    cfg.validate(method)
    split.audit(dataset)
    clients, global_model, offsets, n_classes = _init_clients(cfg, dataset, split, method)
    server = ServerState(0, global_model)
    messages, log = [], []
    boundary = {}

    for r in range(cfg.rounds):
        server.round = r
        if method == "fedpalm" and r == cfg.phase_boundary:
            _share_experts(clients, messages, "phase_boundary")
            boundary = {f"closed_{c.client_id}": c.closed.copy() for c in clients}
            boundary["open"] = server.global_model.copy()
        broadcast = None
        if method != "local":
            broadcast = ModelBroadcast(r, server.global_model.expert.copy(), server.global_model.embedding.copy())
            messages.append(broadcast)
        outcomes = _map_clients(lambda c: local_training(c, r, broadcast, cfg, method), clients, cfg.workers)
        for _, records in outcomes:
            log.extend(records)
        if method == "local":
            continue
        updates = [u for u, _ in outcomes]
        messages.extend(updates)
        ids = [u.client_id for u in updates]
        weights = [u.n_samples for u in updates]
        server.global_model.expert = aggregate([u.expert for u in updates], weights, ids)
        server.global_model.embedding = aggregate([u.embedding for u in updates], weights, ids)

    if method != "local":
        final = ModelBroadcast(cfg.rounds, server.global_model.expert.copy(), server.global_model.embedding.copy())
        messages.append(final)
        for c in clients:
            c.open.expert.data[:] = final.expert.data
            c.open.embedding.data[:] = final.embedding.data
    if method == "fedpalm":
        _share_experts(clients, messages, "deployment")

    return FederationResult(
        method=method,
        config=cfg,
        clients=clients,
        global_model=server.global_model if method != "local" else None,
        log=log,
        messages=messages,
        n_classes=n_classes,
        label_offsets=offsets,
        boundary_models=boundary,
    )


def run_fedavg_baseline(cfg, dataset, split):
    return run_federation(cfg, dataset, split, method="fedavg")


def run_local_baseline(cfg, dataset, split):
    return run_federation(cfg, dataset, split, method="local")


def write_round_log(path, log):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROUND_LOG_HEADER)
        for rec in log:
            writer.writerow([rec.round, rec.client, rec.epoch, repr(rec.loss_ce), repr(rec.loss_con), rec.n_i])
