"""Federated split GAN training.

The server owns the generator. Every eligible client owns a discriminator
replica whose portions live on the client's devices; each round the clients
train on local real data plus server-generated fakes, the server averages the
discriminator state (FedAvg), then trains the generator against the averaged
discriminator.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import gan
from . import nncore as nn
from . import splitplan as sp
from .dataio import Dataset, Shard, sample_batches, shard
from .timesim import TimingConfig, TimingLedger, client_epoch

log = logging.getLogger(__name__)


class FederationAbort(RuntimeError):
    """No client can host the discriminator."""


# ---------------------------------------------------------------------------
# aggregation


def fedavg(vectors: Sequence[np.ndarray], weights: Sequence[float],
           client_ids: Sequence[int] | None = None) -> np.ndarray:
    """Weighted mean of parameter vectors with a fixed reduction order.

    Inputs are reduced in ascending ``client_ids`` order (list order when no ids
    are given) as ``v0 + sum_i w_i/W * (v_i - v0)``, so the result does not
    depend on argument order and identical inputs come back bit-exactly.
    """
    if len(vectors) == 0:
        raise ValueError("fedavg needs at least one vector")
    if len(weights) != len(vectors):
        raise ValueError(f"{len(vectors)} vectors but {len(weights)} weights")
    ids = list(range(len(vectors))) if client_ids is None else list(client_ids)
    if len(ids) != len(vectors) or len(set(ids)) != len(ids):
        raise ValueError("client_ids must be unique and match the vectors")
    w = [float(x) for x in weights]
    if any(x < 0 or not np.isfinite(x) for x in w) or sum(w) <= 0:
        raise ValueError("weights must be finite, nonnegative and sum to a positive value")
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    vecs = [np.asarray(vectors[i], dtype=nn.DTYPE) for i in order]
    shape = vecs[0].shape
    if any(v.shape != shape for v in vecs):
        raise ValueError("parameter vectors differ in length")
    total = sum(w[i] for i in order)
    anchor = vecs[0]
    out = anchor.copy()
    for i, v in zip(order[1:], vecs[1:]):
        out += (w[i] / total) * (v - anchor)
    return out


# ---------------------------------------------------------------------------
# split execution


@dataclass
class Transfer:
    direction: str  # "fwd" activations or "bwd" gradients
    boundary: int  # index of the receiving portion (fwd) / sending portion (bwd)
    src: int
    dst: int
    shape: tuple[int, ...]


class SplitExecutor:
    """Runs a network portion by portion following an assignment plan.

    Each portion executes with the layers of the device the plan puts it on; at a
    cut the activation (forward) or gradient (backward) is handed to the next
    device as a copy, which is the only data that crosses devices.
    """

    def __init__(self, net: nn.Network, portions: Sequence[sp.PortionSpec], plan: sp.AssignmentPlan) -> None:
        if len(plan.devices) != len(portions):
            raise ValueError("plan and portions disagree in length")
        if portions[0].start != 0 or portions[-1].stop != len(net.layers) or any(
                a.stop != b.start for a, b in zip(portions, portions[1:])):
            raise ValueError("portions do not tile the network")
        self.net = net
        self.portions = list(portions)
        self.plan = plan
        self.transfers: list[Transfer] = []

    def forward(self, x: np.ndarray, update_stats: bool = True) -> np.ndarray:
        devs = self.plan.devices
        for i, p in enumerate(self.portions):
            if i and devs[i] != devs[i - 1]:
                x = x.copy()
                self.transfers.append(Transfer("fwd", i, devs[i - 1], devs[i], x.shape))
            x = self.net.forward(x, update_stats=update_stats, start=p.start, stop=p.stop)
        return x

    def backward(self, grad: np.ndarray, param_grads: bool = True) -> np.ndarray:
        devs = self.plan.devices
        for i in reversed(range(len(self.portions))):
            p = self.portions[i]
            if i + 1 < len(self.portions) and devs[i] != devs[i + 1]:
                grad = grad.copy()
                self.transfers.append(Transfer("bwd", i + 1, devs[i + 1], devs[i], grad.shape))
            grad = self.net.backward(grad, param_grads=param_grads, start=p.start, stop=p.stop)
        return grad


def split_forward_backward(plan: sp.AssignmentPlan, portions: Sequence[sp.PortionSpec],
                           disc: gan.Discriminator, real: np.ndarray, fake: np.ndarray,
                           ) -> tuple[float, list[np.ndarray], SplitExecutor]:
    """Discriminator loss and gradients computed through the split executor."""
    ex = SplitExecutor(disc.network, portions, plan)
    loss = gan.discriminator_grads(disc, real, fake, runner=ex)
    return loss, [g.copy() for _, _, g in disc.network.named_params()], ex


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DevicePoolSpec:
    """Random device pools: time factors uniform in a range, capacities from a set."""

    time_factor_range: tuple[float, float] = (1.0, 8.0)
    capacity_choices: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0)
    seed: int = 0
    # explicit pools override the random draw: one list of (time_factor, capacity) per client
    explicit: tuple[tuple[tuple[float, float], ...], ...] | None = None


def make_clients(num_clients: int, devices_per_client: int, pool: DevicePoolSpec) -> list[sp.ClientSpec]:
    if pool.explicit is not None:
        if len(pool.explicit) != num_clients:
            raise ValueError(f"explicit pool lists {len(pool.explicit)} clients, expected {num_clients}")
        return [sp.ClientSpec(c, tuple(sp.DeviceProfile(j, float(tf), float(cap))
                                       for j, (tf, cap) in enumerate(devs)))
                for c, devs in enumerate(pool.explicit)]
    rng = np.random.default_rng(pool.seed)
    lo, hi = pool.time_factor_range
    caps = np.asarray(pool.capacity_choices, dtype=float)
    clients = []
    for c in range(num_clients):
        tfs = rng.uniform(lo, hi, size=devices_per_client)
        cs = caps[rng.integers(0, len(caps), size=devices_per_client)]
        clients.append(sp.ClientSpec(c, tuple(sp.DeviceProfile(j, float(t), float(k))
                                              for j, (t, k) in enumerate(zip(tfs, cs)))))
    return clients


def memory_unit(portions: Sequence[sp.PortionSpec], unit: str | float) -> float:
    """Elements per memory unit: 'max_portion', 'total', or a number of elements."""
    if unit == "max_portion":
        return max(p.mem for p in portions)
    if unit == "total":
        return sum(p.mem for p in portions)
    return float(unit)


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 5
    devices_per_client: int = 4
    epochs: int = 500
    g_steps_per_round: int = 24
    seed: int = 0
    strategy: str = "sorted_multiple"
    granularity: str = "per_block"
    timing: TimingConfig = field(default_factory=TimingConfig)
    pool: DevicePoolSpec = field(default_factory=DevicePoolSpec)
    mem_unit: str | float = "max_portion"
    latent_dim: int = 100
    base_channels: int = 64
    image_size: int = 32
    n_blocks: int = 3
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    shard_mode: str = "iid"
    classes_per_client: int = 2

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.strategy not in sp.STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class RoundMetrics:
    epoch: int
    g_loss: float
    d_loss: dict[int, float]
    epoch_time: dict[int, float]
    bottleneck_client: int
    bottleneck_time: float
    eligible_client_ids: list[int]

    @property
    def d_loss_mean(self) -> float:
        # fixed order so the CSV is reproducible
        return float(sum(self.d_loss[c] for c in sorted(self.d_loss)) / len(self.d_loss))


METRICS_HEADER = ["epoch", "g_loss", "d_loss_mean", "bottleneck_s", "eligible_count"]


def metrics_csv(rounds: Sequence[RoundMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rounds:
        w.writerow([r.epoch, repr(r.g_loss), repr(r.d_loss_mean), repr(r.bottleneck_time),
                    len(r.eligible_client_ids)])
    return buf.getvalue()


# ---------------------------------------------------------------------------


@dataclass
class ClientState:
    spec: sp.ClientSpec
    shard: Shard
    plan: sp.AssignmentPlan
    disc: gan.Discriminator
    opt: nn.Adam


class Federation:
    """Setup (devices, plans, shards, models) plus the per-epoch protocol."""

    def __init__(self, cfg: FederationConfig, dataset: Dataset,
                 clients: Sequence[sp.ClientSpec] | None = None,
                 shards: Sequence[Shard] | None = None) -> None:
        self.cfg = cfg
        self.dataset = dataset
        arch = dict(image_size=cfg.image_size, n_blocks=cfg.n_blocks, base_channels=cfg.base_channels)
        self.gen = gan.build_generator(cfg.latent_dim, seed=self._seed("gen-init"), **arch)
        self.gen_opt = gan.make_optimizer(self.gen.network, cfg.lr, cfg.beta1, cfg.beta2)
        self.server_disc = gan.build_discriminator(self._seed("disc-init"), **arch)
        raw = sp.partition(self.server_disc, cfg.granularity)
        self.portions = sp.scale_portions(raw, memory_unit(raw, cfg.mem_unit))

        self.client_specs = list(clients) if clients is not None else make_clients(
            cfg.num_clients, cfg.devices_per_client, cfg.pool)
        if len(self.client_specs) != cfg.num_clients:
            raise ValueError(f"{len(self.client_specs)} client specs for num_clients={cfg.num_clients}")
        if shards is None:
            shards = shard(dataset, cfg.num_clients, cfg.shard_mode, self._seed("shard"),
                           cfg.classes_per_client)
        self.shards = list(shards)

        rng = np.random.default_rng(self._seed("plan"))
        self.clients: list[ClientState] = []
        self.ineligible: list[sp.Ineligible] = []
        init_state = nn.serialize_params(self.server_disc.network, include_buffers=True)
        for spec, sh in zip(self.client_specs, self.shards):
            plan = sp.assign(cfg.strategy, self.portions, spec, rng)
            if not plan:
                log.info("client %d ineligible: %r", spec.client_id, plan)
                self.ineligible.append(plan)
                continue
            disc = gan.build_discriminator(0, **arch)
            nn.deserialize_params(disc.network, init_state, include_buffers=True)
            self.clients.append(ClientState(spec, sh, plan, disc,
                                            gan.make_optimizer(disc.network, cfg.lr, cfg.beta1, cfg.beta2)))
        if not self.clients:
            raise FederationAbort(f"all {cfg.num_clients} clients are ineligible under {cfg.strategy}")
        self.ledger = TimingLedger()
        self.history: list[RoundMetrics] = []

    def _seed(self, *key) -> list[int]:
        words = [self.cfg.seed]
        for k in key:
            words.append(k if isinstance(k, int) else int.from_bytes(str(k).encode(), "little") % (2 ** 32))
        return words

    def stream_key(self, epoch: int, client_id: int, batch: int, what: str) -> list[int]:
        return self._seed(what, epoch, client_id, batch)

    @property
    def eligible_ids(self) -> list[int]:
        return [c.spec.client_id for c in self.clients]

    def fake_batch(self, epoch: int, client_id: int, batch: int) -> np.ndarray:
        rng = np.random.default_rng(self.stream_key(epoch, client_id, batch, "fake"))
        z = rng.standard_normal((self.cfg.timing.batch_size, self.cfg.latent_dim))
        # plain data for the client: no generator graph travels with it
        return np.array(self.gen.forward(z, update_stats=False), copy=True)

    def train_client(self, client: ClientState, epoch: int, global_state: np.ndarray) -> float:
        cfg = self.cfg
        nn.deserialize_params(client.disc.network, global_state, include_buffers=True)
        runner = SplitExecutor(client.disc.network, self.portions, client.plan)
        batches = sample_batches(client.shard, cfg.timing.batch_size, cfg.timing.batches_per_epoch,
                                 self.stream_key(epoch, client.spec.client_id, 0, "real"))
        losses = []
        for b, idx in enumerate(batches):
            real = self.dataset.images[idx]
            fake = self.fake_batch(epoch, client.spec.client_id, b)
            losses.append(gan.discriminator_step(client.disc, real, fake, client.opt, runner=runner))
        return float(np.mean(losses))

    def run_round(self, epoch: int) -> RoundMetrics:
        cfg = self.cfg
        global_state = nn.serialize_params(self.server_disc.network, include_buffers=True)
        d_losses = {}
        for client in self.clients:
            d_losses[client.spec.client_id] = self.train_client(client, epoch, global_state)

        samples = cfg.timing.batches_per_epoch * cfg.timing.batch_size
        new_state = fedavg([nn.serialize_params(c.disc.network, include_buffers=True) for c in self.clients],
                           [samples] * len(self.clients), self.eligible_ids)
        nn.deserialize_params(self.server_disc.network, new_state, include_buffers=True)

        g_losses = []
        for s in range(cfg.g_steps_per_round):
            rng = np.random.default_rng(self.stream_key(epoch, 0, s, "latent"))
            z = rng.standard_normal((cfg.timing.batch_size, cfg.latent_dim))
            g_losses.append(gan.generator_step(self.gen, self.server_disc, z, self.gen_opt))
        g_loss = float(np.mean(g_losses)) if g_losses else float("nan")

        timings = [client_epoch(c.plan, self.portions, c.spec, cfg.timing) for c in self.clients]
        slow_id, slow_t = self.ledger.add_epoch(epoch, timings)
        metrics = RoundMetrics(epoch, g_loss, d_losses, {t.client_id: t.total_s for t in timings},
                               slow_id, slow_t, self.eligible_ids)
        self.history.append(metrics)
        return metrics

    def run(self, epochs: int | None = None, callback=None) -> list[RoundMetrics]:
        for epoch in range(1, (self.cfg.epochs if epochs is None else epochs) + 1):
            m = self.run_round(epoch)
            log.info("epoch %d g_loss %.4f d_loss %.4f bottleneck %.3fs",
                     epoch, m.g_loss, m.d_loss_mean, m.bottleneck_time)
            if callback is not None:
                callback(self, m)
        return self.history


def nearest_neighbor_distance(samples: np.ndarray, reference: np.ndarray) -> float:
    """Mean over samples of the L2 distance to the closest reference image."""
    a = samples.reshape(len(samples), -1)
    b = reference.reshape(len(reference), -1)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return float(np.mean(np.sqrt(np.maximum(d2.min(axis=1), 0.0))))
