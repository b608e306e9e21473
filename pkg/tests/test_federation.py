import dataclasses
from fractions import Fraction

import numpy as np
import pytest

from _toy import small_benchmark, small_config
from palmfl.errors import ConfigurationError, ProtocolError
from palmfl.federation import (
    SERVER_BOUND,
    ClientState,
    ExpertUpload,
    ModelBroadcast,
    OpenModelUpdate,
    aggregate,
    contrastive_batch,
    local_training,
    run_fedavg_baseline,
    run_federation,
    run_local_baseline,
    write_round_log,
)
from palmfl.models import EXPERT_SEGMENTS
from palmfl.numeric import STREAM_CLIENT, ParamVector, make_rng
from palmfl.pipeline import Head, objective


def _pv(values):
    return ParamVector.from_arrays({"w": np.asarray(values, dtype=np.float64)})


@pytest.fixture(scope="module")
def bench():
    return small_benchmark()


@pytest.fixture(scope="module")
def fedpalm_run(bench):
    ds, split = bench
    return run_federation(small_config(), ds, split)


def test_aggregate_examples():
    assert aggregate([_pv([0.0]), _pv([2.0])], [5, 5]).data.tolist() == [1.0]
    assert aggregate([_pv([0.0]), _pv([4.0])], [1, 3]).data.tolist() == [3.0]


def test_aggregate_matches_rational_reference():
    rng = make_rng(0)
    params = [_pv(rng.normal(size=6)) for _ in range(5)]
    weights = rng.integers(1, 50, size=5).tolist()
    got = aggregate(params, weights).data
    total = sum(weights)
    for j in range(6):
        ref = sum(Fraction(w, total) * Fraction(float(p.data[j])) for p, w in zip(params, weights))
        assert abs(got[j] - float(ref)) <= 1e-12


def test_aggregate_permutation_invariant():
    rng = make_rng(1)
    params = [_pv(rng.normal(size=10)) for _ in range(6)]
    weights = rng.integers(1, 20, size=6)
    ids = np.arange(6)
    base = aggregate(params, weights, ids)
    perm = rng.permutation(6)
    shuffled = aggregate([params[i] for i in perm], weights[perm], ids[perm])
    assert shuffled.data.tobytes() == base.data.tobytes()
    naive = aggregate([params[i] for i in perm], weights[perm])
    assert np.max(np.abs(naive.data - base.data)) <= 1e-12


def test_aggregate_errors():
    with pytest.raises(ProtocolError):
        aggregate([_pv([1.0]), _pv([1.0, 2.0])], [1, 1])
    with pytest.raises(ProtocolError):
        aggregate([_pv([1.0]), _pv([2.0])], [0, 0])


def test_config_validation():
    with pytest.raises(ConfigurationError):
        small_config(n_clients=1).validate("fedpalm")
    small_config(n_clients=1).validate("fedavg")
    with pytest.raises(ConfigurationError):
        small_config(rounds=2).validate("fedpalm")
    with pytest.raises(ConfigurationError):
        small_config(local_epochs=0).validate("fedpalm")
    with pytest.raises(ConfigurationError):
        small_config(k=3).validate("fedpalm")


def test_phase_boundary():
    assert small_config(rounds=9).phase_boundary == 3
    assert small_config(rounds=10).phase_boundary == 4
    assert small_config(rounds=9, teim_from_start=True).phase_boundary == 0


def test_round_nine_switches_at_three(bench):
    ds, split = bench
    res = run_federation(small_config(rounds=9), ds, split)
    phases = {rec.round: rec.phase for rec in res.log}
    assert phases == {r: 1 if r < 3 else 2 for r in range(9)}
    for c in range(2):
        digests = [rec.closed_expert_digest for rec in res.log if rec.client == c]
        assert len(set(digests[:3])) == 3  # still training in phase 1
        assert len(set(digests[2:])) == 1  # frozen from round 3 on
        assert res.boundary_models[f"closed_{c}"].expert.digest() == digests[-1]
        assert res.clients[c].closed.expert.digest() == digests[-1]


def test_round_log_covers_every_epoch(bench):
    ds, split = bench
    res = run_federation(small_config(local_epochs=2), ds, split)
    keys = [(rec.round, rec.client, rec.epoch) for rec in res.log]
    assert keys == [(r, c, e) for r in range(3) for c in range(2) for e in range(2)]
    assert all(rec.n_i == len(split.train_shards[rec.client]) for rec in res.log)


def test_rerun_is_bitwise_identical(bench, fedpalm_run, tmp_path):
    ds, split = bench
    again = run_federation(small_config(), ds, split)
    write_round_log(tmp_path / "a.csv", fedpalm_run.log)
    write_round_log(tmp_path / "b.csv", again.log)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert again.global_model.embedding.digest() == fedpalm_run.global_model.embedding.digest()


def test_threaded_matches_sequential(bench, fedpalm_run):
    ds, split = bench
    threaded = run_federation(small_config(workers=2), ds, split)
    assert threaded.global_model.expert.digest() == fedpalm_run.global_model.expert.digest()
    assert threaded.global_model.embedding.digest() == fedpalm_run.global_model.embedding.digest()
    for a, b in zip(threaded.clients, fedpalm_run.clients):
        assert a.closed.embedding.digest() == b.closed.embedding.digest()


def test_message_audit(fedpalm_run):
    closed_embeddings = {c.closed.embedding.data.tobytes() for c in fedpalm_run.clients}
    closed_layout = fedpalm_run.clients[0].closed.embedding.layout
    kinds = set()
    for msg in fedpalm_run.messages:
        kinds.add(type(msg).__name__)
        if not isinstance(msg, SERVER_BOUND):
            continue
        if isinstance(msg, ExpertUpload):
            assert list(msg.expert.names) == list(EXPERT_SEGMENTS)
            continue
        assert isinstance(msg, OpenModelUpdate)
        fields = {f.name for f in dataclasses.fields(msg)}
        assert fields == {"client_id", "round", "expert", "embedding", "n_samples"}
        assert msg.embedding.layout == closed_layout
        assert msg.embedding.data.tobytes() not in closed_embeddings
    assert kinds == {"ModelBroadcast", "OpenModelUpdate", "ExpertUpload", "ExpertRedistribution"}
    stages = [m.stage for m in fedpalm_run.messages if isinstance(m, ExpertUpload)]
    assert stages == ["phase_boundary"] * 2 + ["deployment"] * 2


def test_local_baseline_sends_nothing(bench):
    ds, split = bench
    assert run_local_baseline(small_config(), ds, split).messages == []


def test_fedavg_lr_zero_keeps_init(bench):
    ds, split = bench
    res = run_fedavg_baseline(small_config(lr=0.0), ds, split)
    first = next(m for m in res.messages if isinstance(m, ModelBroadcast))
    assert res.global_model.expert.data.tobytes() == first.expert.data.tobytes()
    assert res.global_model.embedding.data.tobytes() == first.embedding.data.tobytes()


def test_local_training_lr_zero_returns_broadcast(bench, fedpalm_run):
    ds, split = bench
    cfg = small_config(lr=0.0)
    client = fedpalm_run.clients[0]
    state = ClientState(0, client.images, client.labels, client.closed.copy(), client.open.copy())
    bc = ModelBroadcast(0, client.open.expert.copy(), client.open.embedding.copy())
    bc.expert.data[:] += 0.25
    update, _ = local_training(state, 0, bc, cfg)
    assert update.expert.data.tobytes() == bc.expert.data.tobytes()
    assert update.embedding.data.tobytes() == bc.embedding.data.tobytes()


def test_local_training_round_out_of_range(fedpalm_run):
    client = fedpalm_run.clients[0]
    with pytest.raises(ProtocolError):
        local_training(client, 3, None, small_config())


def test_phase_two_freezes_closed_expert(fedpalm_run):
    cfg = small_config()
    src = fedpalm_run.clients[1]
    state = ClientState(1, src.images, src.labels, src.closed.copy(), src.open.copy(), dict(src.received_experts))
    before = state.closed.expert.digest()
    before_emb = state.closed.embedding.digest()
    local_training(state, cfg.phase_boundary, None, cfg)
    assert state.closed.expert.digest() == before
    assert state.closed.embedding.digest() != before_emb


def test_single_step_matches_adam_oracle(bench):
    ds, split = bench
    cfg = small_config(batch_size=2)
    res = run_federation(dataclasses.replace(cfg, lr=0.0), ds, split)  # fresh init, nothing trained
    src = res.clients[0]
    images, labels = src.images[:2], src.labels[:2]
    state = ClientState(0, images, labels, src.closed.copy(), src.open.copy())
    start_open = state.open.copy()
    start_closed = state.closed.copy()
    local_training(state, 0, None, cfg)

    rng = make_rng(cfg.seed, STREAM_CLIENT, 0, 0)
    perm = rng.permutation(2)
    batch, batch_labels = contrastive_batch(images[perm], labels[perm], rng, cfg)
    pool = [start_closed.expert, start_open.expert]
    heads = [Head(0, start_closed.embedding), Head(1, start_open.embedding)]
    out = objective(pool, cfg.expert, heads, batch, batch_labels, cfg.k, cfg.tau, cfg.weights, (0, 1))
    # first Adam step: m_hat = g, v_hat = g^2
    for before, after, grad in [
        (start_open.expert, state.open.expert, out.expert_grads[1]),
        (start_open.embedding, state.open.embedding, out.embedding_grads[1]),
        (start_closed.expert, state.closed.expert, out.expert_grads[0]),
    ]:
        g = grad.data
        expected = -cfg.lr * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(after.data - before.data, expected, rtol=1e-9, atol=1e-15)


def test_identical_clients_aggregate_to_either(bench):
    ds, split = bench
    cfg = small_config()
    res = run_federation(dataclasses.replace(cfg, lr=0.0), ds, split)
    src = res.clients[0]
    updates = []
    for _ in range(2):
        state = ClientState(0, src.images, src.labels, src.closed.copy(), src.open.copy())
        update, _ = local_training(state, 0, None, cfg)
        updates.append(update)
    agg = aggregate([u.embedding for u in updates], [u.n_samples for u in updates])
    assert agg.data.tobytes() == updates[0].embedding.data.tobytes()


def test_phase_one_open_trajectory_matches_fedavg(bench):
    ds, split = bench
    cfg = small_config(rounds=9)
    palm = run_federation(cfg, ds, split)
    avg = run_fedavg_baseline(dataclasses.replace(cfg, rounds=cfg.phase_boundary), ds, split)
    snap = palm.boundary_models["open"]
    assert snap.expert.data.tobytes() == avg.global_model.expert.data.tobytes()
    assert snap.embedding.data.tobytes() == avg.global_model.embedding.data.tobytes()
    palm_open = [(r.round, r.client) for r in palm.log if r.round < 3]
    assert palm_open == [(r.round, r.client) for r in avg.log]


def test_single_client_local_equals_fedavg():
    ds, split = small_benchmark(n_clients=1, ids=4)
    cfg = small_config(n_clients=1)
    local = run_local_baseline(cfg, ds, split)
    avg = run_fedavg_baseline(cfg, ds, split)
    assert local.clients[0].closed.expert.data.tobytes() == avg.global_model.expert.data.tobytes()
    assert local.clients[0].closed.embedding.data.tobytes() == avg.global_model.embedding.data.tobytes()
    assert [(r.loss_ce, r.loss_con) for r in local.log] == [(r.loss_ce, r.loss_con) for r in avg.log]


def test_local_clients_with_identical_shards_match(bench):
    ds, split = bench
    cfg = small_config()
    res = run_federation(dataclasses.replace(cfg, lr=0.0), ds, split, method="local")
    src = res.clients[0]
    models = []
    for _ in range(2):
        state = ClientState(0, src.images, src.labels, src.closed.copy())
        for r in range(cfg.rounds):
            local_training(state, r, None, cfg, method="local")
        models.append(state.closed)
    assert models[0].embedding.digest() == models[1].embedding.digest()
    assert models[0].expert.digest() == models[1].expert.digest()


def test_local_loss_decreases_on_separable_shard():
    ds, split = small_benchmark(n_clients=1, ids=4, samples=4, noise_sigma=0.0, jitter_px=0.0, jitter_rot=0.0)
    cfg = small_config(n_clients=1, rounds=10, batch_size=64, augment_shift=0, augment_noise=0.0, lr=0.005)
    res = run_local_baseline(cfg, ds, split)
    losses = [0.8 * r.loss_ce + 0.2 * r.loss_con for r in res.log]
    assert len(losses) == 10
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
