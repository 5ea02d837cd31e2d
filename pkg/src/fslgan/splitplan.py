"""Discriminator partitioning and device assignment heuristics.

A discriminator is cut into contiguous *portions* (groups of layers). Each
client places its portions, in pipeline order, onto its own devices using one
of four strategies: random or efficiency-sorted device visiting, combined with
either one portion per device (``single``) or as many consecutive portions as
fit (``multiple``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nncore as nn
from .gan import Discriminator

STRATEGIES = ("random_single", "random_multiple", "sorted_single", "sorted_multiple")


@dataclass(frozen=True)
class DeviceProfile:
    device_id: int
    time_factor: float
    capacity: float

    def __post_init__(self):
        if not self.time_factor > 0:
            raise ValueError(f"device {self.device_id}: time_factor must be > 0")
        if not self.capacity >= 0:
            raise ValueError(f"device {self.device_id}: capacity must be >= 0")

    def efficiency(self, cap_weight: float = 1.0, time_weight: float = 1.0) -> float:
        return self.capacity ** cap_weight / self.time_factor ** time_weight


@dataclass(frozen=True)
class ClientSpec:
    client_id: int
    devices: tuple[DeviceProfile, ...]

    def __post_init__(self):
        if not self.devices:
            raise ValueError(f"client {self.client_id} has no devices")
        object.__setattr__(self, "devices", tuple(self.devices))

    def device(self, device_id: int) -> DeviceProfile:
        for d in self.devices:
            if d.device_id == device_id:
                return d
        raise KeyError(device_id)


@dataclass(frozen=True)
class PortionSpec:
    portion_id: int
    start: int  # first layer index
    stop: int  # one past the last layer index
    work: float
    mem: float

    @property
    def layer_range(self) -> range:
        return range(self.start, self.stop)


@dataclass(frozen=True)
class AssignmentPlan:
    devices: tuple[int, ...]  # devices[i] hosts portion i

    @property
    def cut_count(self) -> int:
        return sum(a != b for a, b in zip(self.devices, self.devices[1:]))

    def to_text(self) -> str:
        return "".join(f"{i} {d}\n" for i, d in enumerate(self.devices))

    @classmethod
    def from_text(cls, text: str) -> "AssignmentPlan":
        rows = [line.split() for line in text.splitlines() if line.strip()]
        pairs = sorted((int(p), int(d)) for p, d in rows)
        if [p for p, _ in pairs] != list(range(len(pairs))):
            raise ValueError("plan text must list portions 0..n-1 exactly once")
        return cls(tuple(d for _, d in pairs))


class Ineligible:
    """Returned by :func:`assign` when a client's devices cannot host the whole model."""

    def __init__(self, client_id: int, placed: int, total: int) -> None:
        self.client_id = client_id
        self.placed = placed
        self.total = total

    def __bool__(self) -> bool:
        return False

    def __repr__(self) -> str:
        return f"Ineligible(client={self.client_id}, placed {self.placed}/{self.total} portions)"


# ---------------------------------------------------------------------------
# partition


def layer_costs(net: nn.Network) -> list[tuple[float, int, int]]:
    """Per layer: (work per sample incl. backward, parameter count, output elements per sample)."""
    costs = []
    for layer, s_in, s_out in zip(net.layers, net.shapes, net.shapes[1:]):
        out_n = int(np.prod(s_out))
        if isinstance(layer, (nn.Conv2d, nn.ConvTranspose2d)):
            k = layer.kernel_size
            # transposed conv does the same multiply-adds as the conv it inverts
            spatial = out_n // layer.out_channels if isinstance(layer, nn.Conv2d) else int(np.prod(s_in[1:]))
            fwd = 2 * k * k * layer.in_channels * layer.out_channels * spatial
        elif isinstance(layer, nn.Dense):
            fwd = 2 * layer.in_features * layer.out_features
        else:
            fwd = out_n
        costs.append((3.0 * fwd, layer.num_params(), out_n))
    return costs


def _portion(net: nn.Network, pid: int, start: int, stop: int, costs) -> PortionSpec:
    work = sum(c[0] for c in costs[start:stop])
    params = sum(c[1] for c in costs[start:stop])
    peak = max([int(np.prod(net.shapes[start]))] + [c[2] for c in costs[start:stop]])
    return PortionSpec(pid, start, stop, float(work), float(params + peak))


def partition(disc: Discriminator, granularity: str = "per_block") -> list[PortionSpec]:
    net = disc.network
    costs = layer_costs(net)
    if granularity == "per_layer":
        bounds = [(i, i + 1) for i in range(len(net.layers))]
    elif granularity == "per_block":
        if not disc.blocks:
            raise ValueError("discriminator carries no block structure")
        bounds = list(disc.blocks)
        bounds[-1] = (bounds[-1][0], len(net.layers))  # head rides with the last block
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    return [_portion(net, i, a, b, costs) for i, (a, b) in enumerate(bounds)]


def scale_portions(portions: Sequence[PortionSpec], mem_unit: float) -> list[PortionSpec]:
    """Express memory in units of ``mem_unit`` elements."""
    return [PortionSpec(p.portion_id, p.start, p.stop, p.work, p.mem / mem_unit) for p in portions]


# ---------------------------------------------------------------------------
# assignment


def visit_order(strategy: str, client: ClientSpec, rng: np.random.Generator | None = None,
                cap_weight: float = 1.0, time_weight: float = 1.0) -> list[DeviceProfile]:
    if strategy.startswith("random"):
        if rng is None:
            raise ValueError(f"{strategy} needs an rng")
        # a permutation is exactly a sequence of uniform draws without replacement
        return [client.devices[i] for i in rng.permutation(len(client.devices))]
    if strategy.startswith("sorted"):
        return sorted(client.devices,
                      key=lambda d: (-d.efficiency(cap_weight, time_weight), d.device_id))
    raise ValueError(f"unknown strategy {strategy!r}")


def place(portions: Sequence[PortionSpec], order: Sequence[DeviceProfile], multiple: bool,
          client_id: int = -1) -> AssignmentPlan | Ineligible:
    """Greedy pipeline-order placement over a fixed device visiting order.

    A visited device takes the next pending portion if it fits (and, with
    ``multiple``, keeps taking consecutive portions while they fit); it is then
    removed from the pool whether or not it took anything.
    """
    placed: list[int] = []
    i = 0
    for dev in order:
        if i == len(portions):
            break
        used = 0.0
        while i < len(portions) and used + portions[i].mem <= dev.capacity:
            used += portions[i].mem
            placed.append(dev.device_id)
            i += 1
            if not multiple:
                break
    if i < len(portions):
        return Ineligible(client_id, i, len(portions))
    return AssignmentPlan(tuple(placed))


def assign(strategy: str, portions: Sequence[PortionSpec], client: ClientSpec,
           rng: np.random.Generator | None = None, cap_weight: float = 1.0,
           time_weight: float = 1.0) -> AssignmentPlan | Ineligible:
    if not portions:
        raise ValueError("no portions to assign")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    order = visit_order(strategy, client, rng, cap_weight, time_weight)
    return place(portions, order, strategy.endswith("multiple"), client.client_id)


def is_eligible(client: ClientSpec, portions: Sequence[PortionSpec]) -> bool:
    return bool(assign("sorted_multiple", portions, client))


def validate_plan(plan: AssignmentPlan, portions: Sequence[PortionSpec], client: ClientSpec) -> None:
    if len(plan.devices) != len(portions):
        raise ValueError(f"plan covers {len(plan.devices)} portions, model has {len(portions)}")
    used: dict[int, float] = {}
    for p, d in zip(portions, plan.devices):
        used[d] = used.get(d, 0.0) + p.mem
    for d, mem in used.items():
        cap = client.device(d).capacity
        if mem > cap:
            raise ValueError(f"device {d} holds {mem} memory units, capacity {cap}")
