"""Benchmark runners: splitting-strategy time model and the multi-discriminator training sweep."""

from __future__ import annotations

import csv
import io
import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataio, gan, plotting
from . import nncore as nn
from . import splitplan as sp
from .config import ExperimentConfig
from .fedorch import Federation, make_clients, memory_unit, metrics_csv, nearest_neighbor_distance
from .timesim import TimingLedger, client_epoch

log = logging.getLogger(__name__)

BASELINE = "baseline"


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x: float | None) -> str:
    return "" if x is None else repr(float(x))


# ---------------------------------------------------------------------------
# time benchmark


@dataclass
class TimeCell:
    strategy: str
    seed: int
    eligible: list[int]
    bottleneck_client: int | None
    mean_s: float | None
    std_s: float | None
    ledger: TimingLedger


@dataclass
class TimeResult:
    cells: list[TimeCell]
    summary: dict[str, tuple[int, float | None, float | None]] = field(default_factory=dict)


def reference_portions(cfg: ExperimentConfig) -> list[sp.PortionSpec]:
    m, f = cfg["model"], cfg["federation"]
    disc = gan.build_discriminator(f["seed"], image_size=m["image_size"], n_blocks=m["n_blocks"],
                                   base_channels=m["base_channels"])
    raw = sp.partition(disc, f["granularity"])
    unit = f["mem_unit"]
    return sp.scale_portions(raw, memory_unit(raw, unit if unit in ("max_portion", "total") else float(unit)))


def time_cell(strategy: str, seed: int, clients, portions, cfg: ExperimentConfig) -> TimeCell:
    f = cfg["federation"]
    timing = cfg.timing()
    plan_strategy = "sorted_multiple" if strategy == BASELINE else strategy
    if strategy == BASELINE:
        clients = clients[:1]
    index = sp.STRATEGIES.index(plan_strategy) if strategy != BASELINE else len(sp.STRATEGIES)
    rng = np.random.default_rng([f["seed"], seed, index])
    plans = {}
    for c in clients:
        plan = sp.assign(plan_strategy, portions, c, rng, f["cap_weight"], f["time_weight"])
        if plan:
            plans[c.client_id] = (c, plan)
    ledger = TimingLedger()
    if not plans:
        return TimeCell(strategy, seed, [], None, None, None, ledger)
    # plans and device profiles are static, so every epoch costs the same
    timings = [client_epoch(plan, portions, c, timing) for c, plan in plans.values()]
    per_epoch = [ledger.add_epoch(epoch, timings) for epoch in range(1, f["epochs"] + 1)]
    if not per_epoch:
        return TimeCell(strategy, seed, sorted(plans), None, None, None, ledger)
    times = [t for _, t in per_epoch]
    slow = max(range(len(per_epoch)), key=lambda i: (times[i], -per_epoch[i][0]))
    return TimeCell(strategy, seed, sorted(plans), per_epoch[slow][0], statistics.fmean(times),
                    statistics.pstdev(times), ledger)


def run_time_benchmark(cfg: ExperimentConfig, write: bool = True) -> TimeResult:
    run, f = cfg["run"], cfg["federation"]
    portions = reference_portions(cfg)
    strategies = list(sp.STRATEGIES) + ([BASELINE] if run["baseline"] else [])
    seeds = range(run["first_seed"], run["first_seed"] + run["seeds"])
    cells = []
    for seed in seeds:
        pool = cfg.pool(seed=cfg["devices"]["seed"] + seed)
        clients = make_clients(f["num_clients"], f["devices_per_client"], pool)
        for strategy in strategies:
            cell = time_cell(strategy, seed, clients, portions, cfg)
            if not cell.eligible:
                log.warning("%s seed %d: every client is ineligible", strategy, seed)
            cells.append(cell)
    result = TimeResult(cells)
    for strategy in strategies:
        vals = [c.mean_s for c in cells if c.strategy == strategy and c.mean_s is not None]
        result.summary[strategy] = (len(vals), statistics.fmean(vals) if vals else None,
                                    statistics.pstdev(vals) if vals else None)
    if write:
        write_time_outputs(cfg, result, portions)
    return result


def write_time_outputs(cfg: ExperimentConfig, result: TimeResult, portions) -> None:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    rows = [[c.strategy, c.seed, len(c.eligible), "" if c.bottleneck_client is None else c.bottleneck_client,
             _num(c.mean_s), _num(c.std_s)] for c in result.cells]
    (out / "time_bench.csv").write_text(_csv(rows, ["strategy", "seed", "eligible_count", "bottleneck_client",
                                                    "bottleneck_mean_s", "bottleneck_std_s"]))
    summary = [[s, n, _num(m), _num(sd)] for s, (n, m, sd) in result.summary.items()]
    (out / "time_summary.csv").write_text(_csv(summary, ["strategy", "cells", "mean_s", "std_s"]))
    (out / "portions.csv").write_text(_csv([[p.portion_id, p.start, p.stop, repr(p.work), repr(p.mem)]
                                            for p in portions], ["portion_id", "start", "stop", "work", "mem"]))
    mode = cfg["run"]["ledgers"]
    if mode != "none":
        first = cfg["run"]["first_seed"]
        ldir = out / "ledgers"
        ldir.mkdir(exist_ok=True)
        for c in result.cells:
            if mode == "all" or c.seed == first:
                (ldir / f"ledger_{c.strategy}_seed{c.seed}.csv").write_text(c.ledger.to_csv())
    shown = [(s, m, sd) for s, (n, m, sd) in result.summary.items() if m is not None]
    if shown:
        plotting.strategy_bars(out / "time_bench.svg", [s for s, _, _ in shown], [m for _, m, _ in shown],
                               [sd for _, _, sd in shown])


# ---------------------------------------------------------------------------
# accuracy benchmark


@dataclass
class AccuracyRun:
    num_clients: int
    g_loss: list[float]
    nn_distance: dict[int, float]
    eligible: list[int]

    @property
    def first5(self) -> float | None:
        return float(np.mean(self.g_loss[:5])) if self.g_loss else None

    @property
    def last5(self) -> float | None:
        return float(np.mean(self.g_loss[-5:])) if self.g_loss else None


def load_training_data(cfg: ExperimentConfig) -> tuple[dataio.Dataset, dataio.Dataset]:
    d = cfg["data"]
    root = d["root"] or None
    train = dataio.load_mnist(root, "train")
    if d["subset"]:
        train = train.subset(range(min(d["subset"], len(train))))
    held = dataio.load_mnist(root, "test")
    held = held.subset(range(min(d["heldout"], len(held))))
    return train, held


def _dump_images(directory: Path, images: np.ndarray, epoch: int, m: int) -> np.ndarray:
    directory.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        (directory / gan.pgm_name(epoch, m, i)).write_bytes(gan.to_pgm_bytes(img))
    grid = gan.image_grid(images)
    (directory / f"grid_epoch{epoch}_m{m}.pgm").write_bytes(gan.to_pgm_bytes(grid))
    return grid


def run_accuracy_benchmark(cfg: ExperimentConfig, data=None, write: bool = True) -> list[AccuracyRun]:
    run, f = cfg["run"], cfg["federation"]
    train, held = data if data is not None else load_training_data(cfg)
    out = cfg.output_dir
    if write:
        out.mkdir(parents=True, exist_ok=True)
        cfg.write_resolved(out)
    epochs = f["epochs"]
    runs, grids, curves = [], {}, {}
    for m in run["m_list"]:
        pool = cfg.pool()
        if pool.explicit is not None and len(pool.explicit) != m:
            # explicit pools describe one client count; other sweep points draw random pools
            pool = replace(pool, explicit=None)
        fed = Federation(cfg.federation(num_clients=m, pool=pool), train)
        probe_rng = np.random.default_rng([f["seed"], 7919])
        z = probe_rng.standard_normal((run["image_samples"], cfg["model"]["latent_dim"]))
        dist: dict[int, float] = {}

        def snapshot(epoch: int) -> None:
            samples = fed.gen.sample(z)
            if not np.all(np.isfinite(samples)):
                raise nn.NumericError(f"non-finite generator samples at epoch {epoch}")
            dist[epoch] = nearest_neighbor_distance(samples, held.images)
            if write:
                grids[f"M={m}", epoch] = _dump_images(out / "images", samples, epoch, m)

        snapshot(0)
        for epoch in range(1, epochs + 1):
            metrics = fed.run_round(epoch)
            if not np.isfinite(metrics.g_loss):
                raise nn.NumericError(f"non-finite generator loss at epoch {epoch}")
            log.info("M=%d epoch %d g_loss %.4f d_loss %.4f", m, epoch, metrics.g_loss, metrics.d_loss_mean)
            if epoch % run["image_interval"] == 0 or epoch == epochs:
                snapshot(epoch)
        result = AccuracyRun(m, [r.g_loss for r in fed.history], dist, fed.eligible_ids)
        runs.append(result)
        curves[f"M={m}"] = (list(range(1, len(result.g_loss) + 1)), result.g_loss)
        if write:
            (out / f"metrics_m{m}.csv").write_text(metrics_csv(fed.history))
            (out / f"ledger_m{m}.csv").write_text(fed.ledger.to_csv())
            (out / f"samples_m{m}.csv").write_text(
                _csv([[e, repr(d)] for e, d in sorted(dist.items())], ["epoch", "nn_distance"]))
    if write:
        rows = [[r.num_clients, len(r.eligible), len(r.g_loss), _num(r.first5), _num(r.last5),
                 _num(r.nn_distance[0]), _num(r.nn_distance[max(r.nn_distance)])] for r in runs]
        (out / "acc_summary.csv").write_text(_csv(rows, ["m", "eligible_count", "epochs", "g_loss_first5",
                                                         "g_loss_last5", "nn_distance_epoch0",
                                                         "nn_distance_final"]))
        plotting.loss_curves(out / "acc_bench.svg", curves)
        plotting.image_panel(out / "images.png", grids)
    return runs
