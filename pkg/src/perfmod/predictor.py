"""Prediction of blocked-algorithm run time from per-kernel models."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping

from .core import MachineProfile, efficiency
from .errors import InputError, MissingModelError
from .repository import ModelRecord, lookup
from .traces import AlgorithmTrace, KernelCall


@dataclass(frozen=True)
class Evaluation:
    low: float
    median: float
    high: float
    extrapolated: bool = False
    range_repaired: bool = False
    clamped: bool = False


def evaluate_model(record: ModelRecord, sizes: Mapping[str, int],
                   profile: MachineProfile | None = None) -> Evaluation:
    """Evaluate the three statistic polynomials of the cell owning ``sizes``.

    Inverted quantiles are swapped and the median is kept inside the range
    (``range_repaired``); values below the timer floor are lifted to it.
    """
    model = record.model
    try:
        point = [sizes[name] for name in model.size_names]
    except KeyError as exc:
        raise InputError(f"{record.kernel}: size {exc.args[0]!r} missing") from None
    cell, extrapolated = model.locate(point)
    low = cell.model.evaluate(point, "q05")
    med = cell.model.evaluate(point, "median")
    high = cell.model.evaluate(point, "q95")
    repaired = False
    if low > high:
        low, high = high, low
        repaired = True
    if med < low:
        low, repaired = med, True
    if med > high:
        high, repaired = med, True
    clamped = False
    if profile is not None:
        floor = profile.timer_floor
        if min(low, med, high) < floor:
            clamped = True
            low, med, high = max(low, floor), max(med, floor), max(high, floor)
    return Evaluation(low, med, high, extrapolated, repaired, clamped)


@dataclass(frozen=True)
class CallEstimate:
    call: KernelCall
    low: float
    median: float
    high: float
    extrapolated: bool = False
    range_repaired: bool = False
    clamped: bool = False
    missing: bool = False


@dataclass(frozen=True)
class Prediction:
    algorithm: str
    variant: str
    parameters: tuple[tuple[str, int], ...]
    machine: str
    total_median: float
    total_low: float
    total_high: float
    breakdown: tuple[CallEstimate, ...] = field(repr=False)
    flops: Fraction
    efficiency: float
    threads: int = 1
    extrapolated: bool = False
    missing_models: tuple[str, ...] = ()
    range_repaired: bool = False
    clamped: bool = False

    @property
    def above_peak(self) -> bool:
        return self.efficiency > 1.0

    @property
    def flags(self) -> list[str]:
        out = []
        for name in ("extrapolated", "range_repaired", "clamped", "above_peak"):
            if getattr(self, name):
                out.append(name)
        if self.missing_models:
            out.append("missing_models")
        return out

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "variant": self.variant,
            "parameters": dict(self.parameters),
            "machine": self.machine,
            "threads": self.threads,
            "total_median": self.total_median,
            "total_low": self.total_low,
            "total_high": self.total_high,
            "flops": str(self.flops),
            "efficiency": self.efficiency,
            "flags": self.flags,
            "missing_models": list(self.missing_models),
            "breakdown": [
                {
                    "seq": i,
                    "kernel": e.call.kernel,
                    "flags": str(e.call.flags),
                    "sizes": e.call.size_map,
                    "median": e.median,
                    "low": e.low,
                    "high": e.high,
                    "extrapolated": e.extrapolated,
                    "missing": e.missing,
                }
                for i, e in enumerate(self.breakdown)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


class ModelSource:
    """Memoizing lookup of repository records, keyed like the repository."""

    def __init__(self, repo_root, records: Mapping | None = None):
        self.repo_root = Path(repo_root) if repo_root is not None else None
        self._records = dict(records or {})

    def get(self, kernel, flags, machine, threads) -> ModelRecord:
        key = (kernel, str(flags), machine, int(threads))
        if key not in self._records:
            if self.repo_root is None:
                raise MissingModelError(f"no model for {kernel} [{flags}] machine={machine} threads={threads}",
                                        missing=[f"{kernel} [{flags}] machine={machine} threads={threads}"])
            try:
                self._records[key] = lookup(kernel, flags, machine, threads, self.repo_root)
            except MissingModelError as exc:
                self._records[key] = exc
        found = self._records[key]
        if isinstance(found, MissingModelError):
            raise found
        return found

    @classmethod
    def from_records(cls, records) -> "ModelSource":
        return cls(None, {r.key: r for r in records})


def _source(repo) -> ModelSource:
    return repo if isinstance(repo, ModelSource) else ModelSource(repo)


def predict(trace: AlgorithmTrace, repo, profile: MachineProfile, threads: int | None = None,
            allow_missing: bool = False) -> Prediction:
    """Accumulate per-call estimates over ``trace``.

    ``repo`` is a repository root or a :class:`ModelSource`. Sums use
    :func:`math.fsum`, so totals do not depend on call order.
    """
    source = _source(repo)
    cache: dict = {}
    estimates = []
    missing: dict[str, None] = {}
    for call in trace.calls:
        t = call.threads if threads is None else threads
        ckey = (call.kernel, call.flags, call.sizes, t)
        if ckey not in cache:
            try:
                record = source.get(call.kernel, call.flags, profile.id, t)
            except MissingModelError as exc:
                cache[ckey] = exc
            else:
                cache[ckey] = evaluate_model(record, call.size_map, profile)
        ev = cache[ckey]
        if isinstance(ev, MissingModelError):
            missing.update(dict.fromkeys(ev.missing))
            estimates.append(CallEstimate(call, 0.0, 0.0, 0.0, missing=True))
            continue
        estimates.append(CallEstimate(call, ev.low, ev.median, ev.high, ev.extrapolated,
                                      ev.range_repaired, ev.clamped))
    if missing and not allow_missing:
        raise MissingModelError(
            "missing models: " + "; ".join(missing), missing=list(missing)
        )
    kept = [e for e in estimates if not e.missing]
    total_median = math.fsum(e.median for e in kept)
    total_low = math.fsum(e.low for e in kept)
    total_high = math.fsum(e.high for e in kept)
    flop_total = sum((e.call.flop_count() for e in kept), Fraction(0))
    t_eff = threads if threads is not None else max((c.threads for c in trace.calls), default=1)
    eff = efficiency(total_median, flop_total, profile, t_eff) if total_median > 0 else 0.0
    return Prediction(
        algorithm=trace.algorithm,
        variant=trace.variant,
        parameters=trace.parameters,
        machine=profile.id,
        total_median=total_median,
        total_low=total_low,
        total_high=total_high,
        breakdown=tuple(estimates),
        flops=flop_total,
        efficiency=eff,
        threads=t_eff,
        extrapolated=any(e.extrapolated for e in kept),
        missing_models=tuple(missing),
        range_repaired=any(e.range_repaired for e in kept),
        clamped=any(e.clamped for e in kept),
    )
