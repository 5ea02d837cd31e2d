"""Acceptance criteria, each at its stated tolerance.

Every test records a PASS/FAIL line that is printed in the pytest terminal summary.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE
from fslgan import bench, config, dataio, gan, gradcheck
from fslgan import fedorch as fo
from fslgan import nncore as nn
from fslgan import splitplan as sp
from fslgan import timesim as ts


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")
    assert ok, detail


def test_1_split_monolithic_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    disc = gan.build_discriminator(0)
    portions = sp.scale_portions(sp.partition(disc), fo.memory_unit(sp.partition(disc), "max_portion"))
    init = nn.serialize_params(disc.network, include_buffers=True)
    pairs, mismatches, cut_pairs = 0, 0, 0
    while pairs < 50:
        c = sp.ClientSpec(pairs, tuple(sp.DeviceProfile(j, float(rng.uniform(1, 8)), float(rng.integers(1, 5)))
                                       for j in range(4)))
        strategy = sp.STRATEGIES[pairs % 4]
        plan = sp.assign(strategy, portions, c, rng)
        if not plan:
            continue
        real = np.tanh(rng.normal(size=(8, 1, 32, 32)))
        fake = np.tanh(rng.normal(size=(8, 1, 32, 32)))
        nn.deserialize_params(disc.network, init, include_buffers=True)
        ref_loss = gan.discriminator_grads(disc, real, fake)
        ref = [g.copy() for _, _, g in disc.network.named_params()]
        ref_state = nn.serialize_params(disc.network, include_buffers=True)
        nn.deserialize_params(disc.network, init, include_buffers=True)
        loss, grads, _ = fo.split_forward_backward(plan, portions, disc, real, fake)
        same = loss == ref_loss and all(np.array_equal(a, b) for a, b in zip(grads, ref)) and \
            np.array_equal(nn.serialize_params(disc.network, include_buffers=True), ref_state)
        mismatches += not same
        cut_pairs += plan.cut_count > 0
        pairs += 1
    dt = time.time() - t0
    record("1 split/monolithic", mismatches == 0 and dt < 120,
           f"{pairs} (client, strategy) pairs, {cut_pairs} with cuts, {mismatches} not bit-identical, {dt:.1f}s")


def test_2_gradient_oracle():
    t0 = time.time()
    results = gradcheck.layer_suite(0) + gradcheck.end_to_end_suite(0)
    worst = max(results, key=lambda r: r.rel_error)
    kinds = {r.name.split(":")[0].replace("[eval]", "") for r in results if ":" in r.name}
    ok = all(r.passed(1e-6) for r in results) and kinds >= set(nn.LAYER_KINDS) and time.time() - t0 < 60
    record("2 gradient oracle", ok, f"{len(results)} checks over {len(kinds)} layer kinds + reduced G/D, "
           f"worst {worst.rel_error:.2e} ({worst.name}) < 1e-6")


def test_3_timing_oracle():
    rng = np.random.default_rng(33)
    cfg = ts.TimingConfig()
    bad = 0
    for _ in range(20):
        n = int(rng.integers(1, 5))
        tfs = [round(float(x), 2) for x in rng.uniform(1, 8, size=n)]
        works = [float(w) for w in rng.integers(1, 5 * 10 ** 7, size=int(rng.integers(1, 5)))]
        devs = tuple(sorted(int(d) for d in rng.integers(0, n, size=len(works))))
        client = sp.ClientSpec(0, tuple(sp.DeviceProfile(i, tf, 1e9) for i, tf in enumerate(tfs)))
        portions = [sp.PortionSpec(i, i, i + 1, w, 1.0) for i, w in enumerate(works)]
        plan = sp.AssignmentPlan(devs)
        # sum work*256*tf*unit*24 + 24*2*cuts*0.050, exact from the decimal constants
        closed = sum(Fraction(str(w)) * 256 * Fraction(str(tfs[d])) * Fraction("1e-9") * 24
                     for w, d in zip(works, devs)) + 24 * 2 * plan.cut_count * Fraction("0.050")
        bad += ts.epoch_time(plan, portions, client, cfg) != float(closed)
    one_cut = ts.client_epoch(sp.AssignmentPlan((0, 1)), [sp.PortionSpec(0, 0, 1, 1.0, 1.0),
                                                          sp.PortionSpec(1, 1, 2, 1.0, 1.0)],
                              sp.ClientSpec(0, (sp.DeviceProfile(0, 1.0, 1.0), sp.DeviceProfile(1, 1.0, 1.0))), cfg)
    record("3 timing oracle", bad == 0 and one_cut.lan_s == 2.4,
           f"20 random plans, {bad} differ from the closed form; 1-cut LAN per epoch = {one_cut.lan_s!r} s")


def test_4_strategy_ordering():
    t0 = time.time()
    cfg = config.from_text("[run]\nseeds = 100\n")
    result = bench.run_time_benchmark(cfg, write=False)
    means = {s: result.summary[s][1] for s in sp.STRATEGIES}
    counts = {s: result.summary[s][0] for s in sp.STRATEGIES}
    dt = time.time() - t0
    ok = min(means, key=means.get) == "sorted_multiple" and max(means, key=means.get) == "random_multiple" \
        and min(counts.values()) >= 100 and dt < 60
    shown = ", ".join(f"{s} {m:.1f}" for s, m in sorted(means.items(), key=lambda kv: kv[1]))
    record("4 strategy ordering", ok, f"mean bottleneck s over {min(counts.values())} pools: {shown}; {dt:.1f}s")


def test_5_fedavg_properties():
    rng = np.random.default_rng(5)
    v = rng.normal(size=1000)
    idem = np.array_equal(fo.fedavg([v.copy() for _ in range(5)], [3, 1, 4, 1, 5]), v)
    affine = np.array_equal(fo.fedavg([np.array([0.0]), np.array([2.0])], [1, 1]), [1.0])
    one = np.array_equal(fo.fedavg([v], [6144]), v)
    vecs = [rng.normal(size=1000) for _ in range(6)]
    w = [float(x) for x in rng.integers(1, 7000, size=6)]
    ids = list(range(6))
    ref = fo.fedavg(vecs, w, ids)
    order_free = all(
        np.array_equal(fo.fedavg([vecs[i] for i in p], [w[i] for i in p], [ids[i] for i in p]), ref)
        for p in (rng.permutation(6) for _ in range(20)))
    close = np.allclose(ref, np.average(vecs, axis=0, weights=w), rtol=1e-12, atol=1e-15)
    record("5 fedavg", idem and affine and one and order_free and close,
           f"idempotent={idem} affine={affine} one-client identity={one} order-independent={order_free}")


def test_6_eligibility_rule():
    disc = gan.build_discriminator(0)
    raw = sp.partition(disc)
    portions = sp.scale_portions(raw, fo.memory_unit(raw, "max_portion"))
    total = sum(p.mem for p in portions)
    rng = np.random.default_rng(6)
    # a client whose capacities sum below the model's memory, the other two comfortably above
    poor = sp.ClientSpec(1, tuple(sp.DeviceProfile(j, 1.0, total / 5) for j in range(4)))
    rich = [sp.ClientSpec(c, tuple(sp.DeviceProfile(j, float(rng.uniform(1, 8)), 4.0) for j in range(4)))
            for c in (0, 2)]
    clients = [rich[0], poor, rich[1]]
    pix = rng.integers(0, 256, size=(40, 28, 28), dtype=np.uint8)
    ds = dataio.Dataset(dataio.normalize(pix), np.arange(40, dtype=np.uint8) % 10, pix)
    cfg = fo.FederationConfig(num_clients=3, epochs=1, g_steps_per_round=1, base_channels=64,
                              timing=ts.TimingConfig(batch_size=2, batches_per_epoch=1))
    fed = fo.Federation(cfg, ds, clients=clients)
    m = fed.run_round(1)
    ledger_ids = {t.client_id for _, t in fed.ledger.rows}
    ok = fed.eligible_ids == [0, 2] and set(m.d_loss) == {0, 2} and ledger_ids == {0, 2} \
        and 1 not in m.epoch_time and all(not sp.assign(s, portions, poor, rng) for s in sp.STRATEGIES)
    record("6 eligibility", ok, f"capacity {sum(d.capacity for d in poor.devices):.2f} < memory {total:.2f}: "
           f"client 1 excluded; aggregated {sorted(m.d_loss)}, timed {sorted(ledger_ids)}")


@pytest.fixture(scope="module")
def desk_runs(mnist_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    cfg = config.from_text(f"[run]\npreset = desk\nbenchmark = accuracy\nm_list = 1, 5\noutput_dir = {out}\n"
                           f"[data]\nroot = {mnist_dir}\n")
    t0 = time.time()
    try:
        runs = bench.run_accuracy_benchmark(cfg)
        err = None
    except (nn.NumericError, FloatingPointError) as exc:
        runs, err = [], exc
    return cfg, runs, err, time.time() - t0


@pytest.mark.slow
def test_7a_desk_training_finite(desk_runs):
    cfg, runs, err, dt = desk_runs
    finite = err is None and all(np.all(np.isfinite(r.g_loss)) for r in runs) and \
        all(np.isfinite(list(r.nn_distance.values())).all() for r in runs)
    record("7 desk training: (a) finite", finite and len(runs) == 2,
           f"{cfg['federation']['epochs']} epochs, M=1 and M=5, {dt / 60:.1f} min" + (f", {err}" if err else ""))


@pytest.mark.slow
def test_7b_desk_generator_loss_falls(desk_runs):
    _, runs, err, _ = desk_runs
    assert err is None
    detail = "; ".join(f"M={r.num_clients} first5 {r.first5:.4f} last5 {r.last5:.4f}" for r in runs)
    record("7 desk training: (b) g_loss falls", all(r.last5 < r.first5 for r in runs), detail)


@pytest.mark.slow
def test_7c_desk_samples_approach_data(desk_runs):
    cfg, runs, err, _ = desk_runs
    assert err is None
    last = cfg["federation"]["epochs"]
    ratios = {r.num_clients: r.nn_distance[last] / r.nn_distance[0] for r in runs}
    detail = "; ".join(f"M={m} nn distance epoch {last}/epoch 0 = {q:.3f}" for m, q in ratios.items())
    record("7 desk training: (c) nn distance <= 0.7x", all(q <= 0.7 for q in ratios.values()), detail)


def test_8_determinism(tmp_path, mnist_dir):
    same = []
    for bench_kind, extra, files in (
        ("time", "", ["time_bench.csv", "time_summary.csv", "portions.csv", "ledgers/ledger_sorted_multiple_seed0.csv"]),
        ("accuracy", f"[federation]\nepochs = 2\n[data]\nroot = {mnist_dir}\nsubset = 300\n"
                     "[timing]\nbatch_size = 16\nbatches_per_epoch = 2\n",
         ["metrics_m1.csv", "metrics_m5.csv", "ledger_m5.csv", "samples_m5.csv", "acc_summary.csv"]),
    ):
        text = f"[run]\npreset = desk\nbenchmark = {bench_kind}\nm_list = 1, 5\nseeds = 20\n" + extra
        outs = []
        for name in ("a", "b"):
            cfg = config.from_text(text, {"run": {"output_dir": str(tmp_path / bench_kind / name)}})
            (bench.run_time_benchmark if bench_kind == "time" else bench.run_accuracy_benchmark)(cfg)
            outs.append(tmp_path / bench_kind / name)
        same += [(outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files]
    record("8 determinism", all(same), f"{sum(same)}/{len(same)} CSVs byte-identical across reruns of both benchmarks")


def test_9_dataset_ingestion(mnist_dir, tmp_path):
    train, test = dataio.load_mnist(mnist_dir, "train"), dataio.load_mnist(mnist_dir, "test")
    rng = np.random.default_rng(9)
    pix = rng.integers(0, 256, size=(10, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=10).astype(np.uint8)
    (tmp_path / "img").write_bytes(dataio.encode_idx(pix))
    (tmp_path / "lab").write_bytes(dataio.encode_idx(labels))
    ds = dataio.load_idx(tmp_path / "img", tmp_path / "lab")
    round_trip = dataio.encode_idx(ds.raw) == (tmp_path / "img").read_bytes() and \
        dataio.encode_idx(ds.labels) == (tmp_path / "lab").read_bytes() and \
        np.array_equal(dataio.denormalize(ds.images)[:, 0, 2:30, 2:30], pix)
    record("9 dataset ingestion", len(train) == 60000 and len(test) == 10000 and round_trip,
           f"official files {len(train)}/{len(test)} items; 10-image fixture round-trip byte-exact={round_trip}")
