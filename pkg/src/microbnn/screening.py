"""Architecture search under a device memory budget.

enumerate_candidates() walks a family's hyperparameter grid, keeps
what fits the budget, and orders by descending parameter bytes P
(capacity proxy: within a family, accuracy tracks parameter count).
screen() then trains the top candidates and ranks by accuracy.

Energy accounting: this module defines energy = power x time in
milliwatt-milliseconds and reports the ratio EG = transmit / inference
from those units. Published absolute energy figures for comparable
hardware mix units, so only the formulas here are load-bearing, not
any external numerals. Host-measured per-sample time stands in for
device time; pass a scale factor for a target MCU estimate.
"""

from __future__ import annotations

import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import memory
from . import model as m
from . import presets
from .dataio import LabeledDataset
from .trainer import TrainConfig, predict_batch, train


@dataclass
class DeviceProfile:
    """Power and link figures for a BLE-class sensor node."""

    idle_power_mw: float = 0.150
    compute_power_mw: float = 0.250
    transmit_power_mw: float = 0.200
    link_bytes_per_ms: float = 32.0
    sram_bytes: int = 15360

    def __post_init__(self):
        if min(self.idle_power_mw, self.compute_power_mw,
               self.transmit_power_mw) < 0:
            raise ValueError("power figures must be non-negative")
        if self.link_bytes_per_ms <= 0 or self.sram_bytes <= 0:
            raise ValueError("link throughput and sram must be positive")


@dataclass
class CostMetrics:
    cr: float
    inference_energy: float  # mW * ms
    transmit_energy: float
    eg: float


def cost_metrics(device: DeviceProfile, sample_bytes: int, label_bytes: int,
                 measured_ms: float) -> CostMetrics:
    """Communication reduction and the transmit/inference energy ratio."""
    if label_bytes <= 0 or sample_bytes <= 0:
        raise ValueError("sample_bytes and label_bytes must be positive")
    cr = sample_bytes / label_bytes
    inference = device.compute_power_mw * measured_ms
    transmit_ms = sample_bytes / device.link_bytes_per_ms
    transmit = device.transmit_power_mw * transmit_ms
    eg = transmit / inference if inference > 0 else float("inf")
    return CostMetrics(cr, inference, transmit, eg)


# family -> (ordered hyperparameter names, builder)
_FAMILIES = {
    "mlp-1": (("hidden",), presets.mlp_1),
    "mlp-2": (("h1", "h2"), presets.mlp_2),
    "conv-1": (("filters",), presets.conv_1),
    "conv-2": (("f1", "f2"), presets.conv_2),
    "convpool-1": (("filters",), presets.convpool_1),
    "convpool-2": (("f1", "f2"), presets.convpool_2),
}

FAMILIES = tuple(_FAMILIES)


@dataclass
class SearchSpace:
    family: str
    budget_bytes: int
    ranges: dict[str, list[int]]
    input_spec: m.InputSpec = field(default_factory=lambda: presets.MNIST_INPUT)
    classes: int = 10

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one "
                             f"of {sorted(_FAMILIES)}")
        names, _ = _FAMILIES[self.family]
        if set(self.ranges) != set(names):
            raise ValueError(f"{self.family} needs ranges for {names}, "
                             f"got {sorted(self.ranges)}")
        if any(len(v) == 0 for v in self.ranges.values()):
            raise ValueError("empty hyperparameter range")
        if self.budget_bytes < 0:
            raise ValueError("budget_bytes must be >= 0")


def mnist_space(family: str, budget_bytes: int = 15360) -> SearchSpace:
    """Default 28x28 search grids. The two-layer conv-pool family caps
    its first layer at 32 filters: the first layer sets peak temporaries
    while deeper capacity is far cheaper per parameter byte."""
    grids = {
        "mlp-1": {"hidden": list(range(8, 257))},
        "mlp-2": {"h1": list(range(8, 257, 8)), "h2": list(range(8, 129, 8))},
        "conv-1": {"filters": list(range(1, 257))},
        "conv-2": {"f1": list(range(8, 65, 8)), "f2": list(range(1, 257))},
        "convpool-1": {"filters": list(range(1, 257))},
        "convpool-2": {"f1": [8, 16, 24, 32], "f2": list(range(8, 257))},
    }
    return SearchSpace(family, budget_bytes, grids[family])


@dataclass
class Candidate:
    index: int  # position in enumeration (grid) order
    family: str
    params: dict[str, int]
    net: m.Network
    report: memory.MemoryReport


def enumerate_candidates(space: SearchSpace) -> list[Candidate]:
    """Everything in the grid that validates and fits, ordered by
    descending P; grid-order index breaks ties deterministically."""
    names, builder = _FAMILIES[space.family]
    out = []
    for index, combo in enumerate(itertools.product(
            *(space.ranges[n] for n in names))):
        params = dict(zip(names, combo))
        try:
            net = builder(**params, input_spec=space.input_spec,
                          classes=space.classes)
        except (ValueError, m.ValidationError):
            continue  # geometry impossible at these parameters
        report = memory.memory_report(net)
        if report.M <= space.budget_bytes:
            out.append(Candidate(index, space.family, params, net, report))
    out.sort(key=lambda c: (-c.report.P, c.index))
    return out


@dataclass
class ScreenRow:
    candidate: Candidate
    accuracy: float | None = None
    train_seconds: float | None = None
    eval_ms_per_sample: float | None = None
    cost: CostMetrics | None = None
    error: str | None = None


@dataclass
class ScreenReport:
    rows: list[ScreenRow]  # ranked: trained by accuracy, then the rest
    best: ScreenRow | None


def _train_row(cand: Candidate, data: LabeledDataset, cfg: TrainConfig,
               device: DeviceProfile, label_bytes: int) -> ScreenRow:
    row = ScreenRow(cand)
    try:
        t0 = time.perf_counter()
        result = train(cand.net, data, cfg)
        row.train_seconds = time.perf_counter() - t0
        row.accuracy = result.history[-1].accuracy
        row.candidate = Candidate(cand.index, cand.family, cand.params,
                                  result.net, cand.report)
        x = data.stacked()[: min(64, len(data))]
        t0 = time.perf_counter()
        predict_batch(result.net, x)
        row.eval_ms_per_sample = (time.perf_counter() - t0) * 1000.0 / len(x)
        row.cost = cost_metrics(device, cand.report.input_bytes, label_bytes,
                                row.eval_ms_per_sample)
    except Exception as exc:  # keep screening alive, report per candidate
        row.error = f"{type(exc).__name__}: {exc}"
    return row


def screen(space: SearchSpace, data: LabeledDataset, cfg: TrainConfig,
           top_k: int, jobs: int = 1,
           device: DeviceProfile | None = None,
           label_bytes: int = 1,
           best_path=None) -> ScreenReport:
    """Train the top_k largest candidates and rank by accuracy.

    Jobs only sets the worker count; each candidate trains with the
    same seeded config, so results do not depend on scheduling.
    """
    device = device or DeviceProfile()
    cands = enumerate_candidates(space)
    to_train = cands[:max(0, top_k)]
    rows: list[ScreenRow]
    if not to_train:
        rows = [ScreenRow(c) for c in cands]
        return ScreenReport(rows, None)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trained = list(pool.map(
                lambda c: _train_row(c, data, cfg, device, label_bytes),
                to_train))
    else:
        trained = [_train_row(c, data, cfg, device, label_bytes)
                   for c in to_train]
    ok = [r for r in trained if r.error is None]
    failed = [r for r in trained if r.error is not None]
    ok.sort(key=lambda r: (-r.accuracy, r.candidate.index))
    rows = ok + failed + [ScreenRow(c) for c in cands[len(to_train):]]
    best = ok[0] if ok else None
    if best is not None and best_path is not None:
        with open(best_path, "wb") as f:
            f.write(m.serialize(best.candidate.net))
    return ScreenReport(rows, best)


def _param_str(params: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in params.items())


def results_records(report: ScreenReport) -> list[str]:
    """One machine-readable key=value line per candidate."""
    lines = []
    for r in report.rows:
        c = r.candidate
        parts = [f"family={c.family}", f"params={_param_str(c.params)}",
                 f"P={c.report.P}", f"T={c.report.T}", f"M={c.report.M}"]
        if r.accuracy is not None:
            parts.append(f"accuracy={r.accuracy:.4f}")
            parts.append(f"eval_ms={r.eval_ms_per_sample:.4f}")
            parts.append(f"cr={r.cost.cr:.1f}")
            parts.append(f"inference_mwms={r.cost.inference_energy:.5f}")
            parts.append(f"transmit_mwms={r.cost.transmit_energy:.5f}")
            parts.append(f"eg={r.cost.eg:.3f}")
        if r.error is not None:
            parts.append(f"error={r.error!r}")
        lines.append(" ".join(parts))
    return lines


def results_table(report: ScreenReport, limit: int | None = 20) -> str:
    """Aligned human-readable ranking.

    Only seed-determined columns appear here, so two runs with the same
    seed print byte-identical tables; host-measured time and energy live
    in the structured records instead.
    """
    head = (f"{'rank':>4}  {'family':<11} {'params':<18} {'M B':>6} "
            f"{'2T/M':>6}  {'acc':>6}")
    lines = [head]
    rows = report.rows[:limit] if limit else report.rows
    for rank, r in enumerate(rows):
        c = r.candidate
        ratio = 2 * c.report.T / c.report.M if c.report.M else 0.0
        acc = f"{r.accuracy:.4f}" if r.accuracy is not None else "-"
        mark = " !" + r.error if r.error else ""
        lines.append(f"{rank:>4}  {c.family:<11} {_param_str(c.params):<18} "
                     f"{c.report.M:>6} {ratio:>6.4f}  {acc:>6}{mark}")
    return "\n".join(lines)
