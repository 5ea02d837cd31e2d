import numpy as np
import pytest

from fslgan import dataio, gan
from fslgan import fedorch as fo
from fslgan import nncore as nn
from fslgan import splitplan as sp
from fslgan import timesim as ts

ARCH = dict(image_size=16, n_blocks=2, base_channels=4, latent_dim=6)


def tiny_config(**kw):
    base = dict(num_clients=3, devices_per_client=4, epochs=2, g_steps_per_round=2,
                timing=ts.TimingConfig(batches_per_epoch=2, batch_size=4), **ARCH)
    base.update(kw)
    return fo.FederationConfig(**base)


def synthetic(n=60, seed=0):
    rng = np.random.default_rng(seed)
    pix = rng.integers(0, 256, size=(n, 12, 12), dtype=np.uint8)
    return dataio.Dataset(dataio.normalize(pix, 16), np.arange(n, dtype=np.uint8) % 10, pix)


def roomy(cid, n=3):
    return sp.ClientSpec(cid, tuple(sp.DeviceProfile(j, 1.0 + j, 1.0) for j in range(n)))


def test_fedavg_examples():
    v = np.array([0.1, -3.0, 7.25])
    assert np.array_equal(fo.fedavg([v, v.copy(), v.copy()], [1, 2, 3]), v)
    assert np.array_equal(fo.fedavg([np.array([0.0]), np.array([2.0])], [1, 1]), [1.0])
    assert np.array_equal(fo.fedavg([v], [6144]), v)
    a, b, c = np.array([1.0]), np.array([2.0]), np.array([4.0])
    assert fo.fedavg([a, b, c], [6144] * 3)[0] == pytest.approx(7 / 3, rel=1e-15)


def test_fedavg_order_independent_bitwise():
    rng = np.random.default_rng(0)
    vecs = [rng.normal(size=50) for _ in range(5)]
    w = list(rng.uniform(1, 10, size=5))
    ids = [4, 0, 3, 1, 2]
    ref = fo.fedavg(vecs, w, ids)
    perm = [2, 4, 0, 1, 3]
    assert np.array_equal(fo.fedavg([vecs[i] for i in perm], [w[i] for i in perm], [ids[i] for i in perm]), ref)
    assert np.allclose(ref, np.average(vecs, axis=0, weights=w), rtol=1e-13)


def test_fedavg_errors():
    with pytest.raises(ValueError):
        fo.fedavg([], [])
    with pytest.raises(ValueError):
        fo.fedavg([np.zeros(2), np.zeros(3)], [1, 1])
    with pytest.raises(ValueError):
        fo.fedavg([np.zeros(2)], [1, 1])
    with pytest.raises(ValueError):
        fo.fedavg([np.zeros(2), np.zeros(2)], [0, 0])
    with pytest.raises(ValueError):
        fo.fedavg([np.zeros(2), np.zeros(2)], [1, -1])


def monolithic(disc, real, fake):
    loss = gan.discriminator_grads(disc, real, fake)
    return loss, [g.copy() for _, _, g in disc.network.named_params()]


@pytest.mark.parametrize("devices", [(0, 0, 0), (0, 1, 2), (1, 1, 0)])
def test_split_matches_monolithic(devices):
    disc = gan.build_discriminator(3)
    portions = sp.partition(disc)
    rng = np.random.default_rng(1)
    real, fake = np.tanh(rng.normal(size=(2, 4, 1, 32, 32)))
    state = nn.serialize_params(disc.network, include_buffers=True)
    ref_loss, ref_grads = monolithic(disc, real, fake)
    after_mono = nn.serialize_params(disc.network, include_buffers=True)
    nn.deserialize_params(disc.network, state, include_buffers=True)
    loss, grads, ex = fo.split_forward_backward(sp.AssignmentPlan(devices), portions, disc, real, fake)
    assert loss == ref_loss
    assert all(np.array_equal(a, b) for a, b in zip(grads, ref_grads))
    assert np.array_equal(nn.serialize_params(disc.network, include_buffers=True), after_mono)
    cuts = sp.AssignmentPlan(devices).cut_count
    # two forward passes and two backward passes per discriminator update
    assert len(ex.transfers) == 4 * cuts


def test_transfer_shapes_match_partition_interfaces():
    disc = gan.build_discriminator(0)
    portions = sp.partition(disc)
    rng = np.random.default_rng(2)
    real, fake = np.tanh(rng.normal(size=(2, 3, 1, 32, 32)))
    _, _, ex = fo.split_forward_backward(sp.AssignmentPlan((0, 1, 2)), portions, disc, real, fake)
    for t in ex.transfers:
        assert t.shape == (3,) + disc.network.shapes[portions[t.boundary].start]
    assert {(t.src, t.dst) for t in ex.transfers if t.direction == "fwd"} == {(0, 1), (1, 2)}
    assert {(t.src, t.dst) for t in ex.transfers if t.direction == "bwd"} == {(1, 0), (2, 1)}


def test_split_executor_rejects_mismatch():
    disc = gan.build_discriminator(0)
    portions = sp.partition(disc)
    with pytest.raises(ValueError):
        fo.SplitExecutor(disc.network, portions, sp.AssignmentPlan((0, 1)))
    with pytest.raises(ValueError):
        fo.SplitExecutor(disc.network, portions[:2], sp.AssignmentPlan((0, 1)))


def test_make_clients_seeded():
    pool = fo.DevicePoolSpec(seed=3)
    a, b = fo.make_clients(5, 4, pool), fo.make_clients(5, 4, pool)
    assert a == b
    for c in a:
        assert len(c.devices) == 4
        assert all(1 <= d.time_factor <= 8 and d.capacity in (1, 2, 3, 4) for d in c.devices)
    explicit = fo.DevicePoolSpec(explicit=(((1.0, 2.0),), ((3.0, 4.0), (1.5, 1.0))))
    cs = fo.make_clients(2, 4, explicit)
    assert cs[1].devices[1] == sp.DeviceProfile(1, 1.5, 1.0)
    with pytest.raises(ValueError):
        fo.make_clients(3, 4, explicit)


def test_memory_unit():
    p = [sp.PortionSpec(0, 0, 1, 1.0, 2.0), sp.PortionSpec(1, 1, 2, 1.0, 6.0)]
    assert fo.memory_unit(p, "max_portion") == 6.0
    assert fo.memory_unit(p, "total") == 8.0
    assert fo.memory_unit(p, 4) == 4.0


class SharedStreams(fo.Federation):
    """Every client sees the same random streams."""

    def stream_key(self, epoch, client_id, batch, what):
        return super().stream_key(epoch, 0, batch, what)


def test_identical_clients_make_fedavg_a_no_op():
    ds = synthetic()
    idx = np.arange(len(ds))
    shards = [dataio.Shard(c, idx) for c in range(3)]
    clients = [sp.ClientSpec(0, roomy(0).devices), roomy(1),
               sp.ClientSpec(2, (sp.DeviceProfile(0, 2.0, 10.0),))]
    fed = SharedStreams(tiny_config(), ds, clients=clients, shards=shards)
    state = nn.serialize_params(fed.server_disc.network, include_buffers=True)
    per_client = []
    for c in fed.clients:
        fed.train_client(c, 1, state)
        per_client.append(nn.serialize_params(c.disc.network, include_buffers=True))
    assert all(np.array_equal(per_client[0], v) for v in per_client[1:])
    avg = fo.fedavg(per_client, [8, 8, 8], [0, 1, 2])
    assert np.array_equal(avg, per_client[0])


def replay_oracle(cfg, ds, clients, epochs):
    """Re-execution of the round protocol straight from the building blocks."""
    fed = fo.Federation(cfg, ds, clients=clients)  # only for setup and key derivation
    gen, server = fed.gen, fed.server_disc
    discs = [(c.spec.client_id, c.shard, c.disc, c.opt) for c in fed.clients]
    for epoch in range(1, epochs + 1):
        state = nn.serialize_params(server.network, include_buffers=True)
        vecs = []
        for cid, shard_, disc, opt in discs:
            nn.deserialize_params(disc.network, state, include_buffers=True)
            batches = dataio.sample_batches(shard_, cfg.timing.batch_size, cfg.timing.batches_per_epoch,
                                            fed.stream_key(epoch, cid, 0, "real"))
            for b, idx in enumerate(batches):
                z = np.random.default_rng(fed.stream_key(epoch, cid, b, "fake")).standard_normal(
                    (cfg.timing.batch_size, cfg.latent_dim))
                fake = gen.forward(z, update_stats=False).copy()
                gan.discriminator_step(disc, ds.images[idx], fake, opt)
            vecs.append(nn.serialize_params(disc.network, include_buffers=True))
        nn.deserialize_params(server.network, fo.fedavg(vecs, [1] * len(vecs), [d[0] for d in discs]),
                              include_buffers=True)
        for s in range(cfg.g_steps_per_round):
            z = np.random.default_rng(fed.stream_key(epoch, 0, s, "latent")).standard_normal(
                (cfg.timing.batch_size, cfg.latent_dim))
            gan.generator_step(gen, server, z, fed.gen_opt)
    return nn.serialize_params(server.network, include_buffers=True), nn.serialize_params(gen.network)


def test_round_matches_replay_oracle():
    ds = synthetic()
    cfg = tiny_config()
    clients = [roomy(0), roomy(1), sp.ClientSpec(2, (sp.DeviceProfile(0, 1.0, 1.0), sp.DeviceProfile(1, 1.0, 0.7)))]
    fed = fo.Federation(cfg, ds, clients=clients)
    assert any(c.plan.cut_count for c in fed.clients)
    fed.run(2)
    d_ref, g_ref = replay_oracle(cfg, ds, clients, 2)
    assert np.array_equal(nn.serialize_params(fed.server_disc.network, include_buffers=True), d_ref)
    assert np.array_equal(nn.serialize_params(fed.gen.network), g_ref)


def test_full_run_determinism():
    streams = []
    for _ in range(2):
        fed = fo.Federation(tiny_config(), synthetic())
        streams.append(fo.metrics_csv(fed.run()))
    assert streams[0] == streams[1]
    assert streams[0].splitlines()[0] == "epoch,g_loss,d_loss_mean,bottleneck_s,eligible_count"
    assert len(streams[0].splitlines()) == 3


def test_round_metrics_contents():
    fed = fo.Federation(tiny_config(), synthetic())
    m = fed.run_round(1)
    assert m.g_loss >= 0 and set(m.d_loss) == set(m.epoch_time) == set(m.eligible_client_ids)
    assert m.bottleneck_time == max(m.epoch_time.values())
    assert fed.ledger.epochs() == [1]


def test_single_client_is_baseline():
    ds = synthetic()
    fed = fo.Federation(tiny_config(num_clients=1), ds)
    assert len(fed.shards) == 1 and len(fed.shards[0]) == len(ds)
    before = nn.serialize_params(fed.server_disc.network, include_buffers=True)
    fed.run_round(1)
    # with one client the aggregate is that client's own discriminator
    assert np.array_equal(nn.serialize_params(fed.server_disc.network, include_buffers=True),
                          nn.serialize_params(fed.clients[0].disc.network, include_buffers=True))
    assert not np.array_equal(before, nn.serialize_params(fed.server_disc.network, include_buffers=True))


def test_ineligible_clients_are_excluded():
    tiny = sp.ClientSpec(1, (sp.DeviceProfile(0, 1.0, 0.5), sp.DeviceProfile(1, 1.0, 0.5)))
    clients = [roomy(0), tiny, roomy(2)]
    fed = fo.Federation(tiny_config(), synthetic(), clients=clients)
    assert fed.eligible_ids == [0, 2]
    assert [i.client_id for i in fed.ineligible] == [1]
    m = fed.run_round(1)
    assert set(m.d_loss) == {0, 2}
    assert {t.client_id for _, t in fed.ledger.rows} == {0, 2}


def test_all_ineligible_aborts():
    tiny = [sp.ClientSpec(c, (sp.DeviceProfile(0, 1.0, 0.1),)) for c in range(3)]
    with pytest.raises(fo.FederationAbort):
        fo.Federation(tiny_config(), synthetic(), clients=tiny)


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(num_clients=0)
    with pytest.raises(ValueError):
        tiny_config(strategy="fastest")


def test_nearest_neighbor_distance():
    ref = np.zeros((2, 1, 2, 2))
    ref[1] = 1.0
    s = np.full((2, 1, 2, 2), 0.9)
    s[0] = 0.1
    assert fo.nearest_neighbor_distance(s, ref) == pytest.approx(0.2)
