"""Logical-clock cost model for split discriminator training.

One batch is a sequential forward+backward pass over the portions. Compute on
a device costs ``work * batch_size * time_factor * unit_time``; every cut
between devices costs one LAN latency forward (activations) and one backward
(gradients). Client-to-server traffic is free by construction.

All sums are evaluated in exact rational arithmetic over the decimal values of
the inputs and rounded to float once, so results do not depend on evaluation
order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .splitplan import AssignmentPlan, ClientSpec, PortionSpec, validate_plan


@dataclass(frozen=True)
class TimingConfig:
    lan_latency: float = 0.050
    batches_per_epoch: int = 24
    batch_size: int = 256
    unit_time: float = 1e-9

    def __post_init__(self):
        for name in ("lan_latency", "batches_per_epoch", "batch_size", "unit_time"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TimingConfig.{name} must be positive")


@dataclass(frozen=True)
class ClientTiming:
    client_id: int
    compute_s: float
    lan_s: float
    total_s: float  # rounded once from the exact sum, so it may differ from compute_s + lan_s by an ulp


def exact(x: float | int) -> Fraction:
    """Rational value of a constant as written in decimal (0.05 means 1/20)."""
    return Fraction(repr(float(x))) if isinstance(x, float) else Fraction(int(x))


def _components(plan, portions, client, cfg: TimingConfig, batches: int) -> tuple[Fraction, Fraction]:
    validate_plan(plan, portions, client)
    compute = Fraction(0)
    for p, dev_id in zip(portions, plan.devices):
        compute += (exact(p.work) * cfg.batch_size * exact(client.device(dev_id).time_factor)
                    * exact(cfg.unit_time) * batches)
    lan = batches * 2 * plan.cut_count * exact(cfg.lan_latency)
    return compute, lan


def batch_components(plan: AssignmentPlan, portions: Sequence[PortionSpec], client: ClientSpec,
                     cfg: TimingConfig) -> tuple[float, float]:
    """(compute, lan) seconds for one batch."""
    compute, lan = _components(plan, portions, client, cfg, 1)
    return float(compute), float(lan)


def batch_time(plan, portions, client, cfg: TimingConfig) -> float:
    compute, lan = _components(plan, portions, client, cfg, 1)
    return float(compute + lan)


def client_epoch(plan, portions, client, cfg: TimingConfig) -> ClientTiming:
    compute, lan = _components(plan, portions, client, cfg, cfg.batches_per_epoch)
    return ClientTiming(client.client_id, float(compute), float(lan), float(compute + lan))


def epoch_time(plan, portions, client, cfg: TimingConfig) -> float:
    return client_epoch(plan, portions, client, cfg).total_s


def bottleneck(totals: Mapping[int, float] | Iterable[ClientTiming]) -> tuple[int, float]:
    """Slowest client as (client_id, seconds); ties go to the lower id."""
    if isinstance(totals, Mapping):
        items = sorted(totals.items())
    else:
        items = sorted((t.client_id, t.total_s) for t in totals)
    if not items:
        raise ValueError("no eligible clients")
    best_id, best = items[0]
    for cid, t in items[1:]:
        if t > best:
            best_id, best = cid, t
    return best_id, best


@dataclass
class TimingLedger:
    rows: list[tuple[int, ClientTiming]] = field(default_factory=list)

    def add_epoch(self, epoch: int, timings: Sequence[ClientTiming]) -> tuple[int, float]:
        for t in sorted(timings, key=lambda t: t.client_id):
            self.rows.append((epoch, t))
        return bottleneck(timings)

    def epochs(self) -> list[int]:
        return sorted({e for e, _ in self.rows})

    def bottleneck_of(self, epoch: int) -> tuple[int, float]:
        return bottleneck([t for e, t in self.rows if e == epoch])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "client_id", "compute_s", "lan_s", "total_s", "is_bottleneck"])
        slowest = {e: self.bottleneck_of(e)[0] for e in self.epochs()}
        for e, t in self.rows:
            w.writerow([e, t.client_id, repr(t.compute_s), repr(t.lan_s), repr(t.total_s),
                        int(slowest[e] == t.client_id)])
        return buf.getvalue()
