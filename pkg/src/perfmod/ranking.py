"""Variant ranking, block-size tuning and parameter sweeps over predictions."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

from .core import MachineProfile
from .errors import InputError, PerfModError
from .predictor import ModelSource, Prediction, predict
from .traces import make_trace, variants_of


@dataclass(frozen=True)
class RankingEntry:
    variant: str
    prediction: Prediction
    rank: int
    overlap: bool


def _sort_key(variant: str):
    return (0, int(variant), "") if variant.isdigit() else (1, 0, variant)


def _source(repo):
    return repo if isinstance(repo, ModelSource) else ModelSource(repo)


def rank(algorithm: str, variants: Sequence | None, n: int, b: int, repo, profile: MachineProfile,
         threads: int = 1, m: int | None = None, allow_missing: bool = False) -> list[RankingEntry]:
    """Predict every variant and order them by predicted median time.

    Ties go to the smaller variant id. ``overlap`` marks entries whose
    [low, high] range intersects that of the next entry.
    """
    source = _source(repo)
    variants = [str(v) for v in (variants or variants_of(algorithm))]
    if len(set(variants)) != len(variants):
        raise InputError("variant listed twice")
    preds = []
    for v in variants:
        trace = make_trace(algorithm, v, n, b, m=m, threads=threads)
        preds.append((v, predict(trace, source, profile, threads, allow_missing)))
    preds.sort(key=lambda vp: (vp[1].total_median, _sort_key(vp[0])))
    entries = []
    for i, (v, p) in enumerate(preds):
        overlap = False
        if i + 1 < len(preds):
            q = preds[i + 1][1]
            overlap = p.total_low <= q.total_high and q.total_low <= p.total_high
        entries.append(RankingEntry(v, p, i + 1, overlap))
    return entries


def ranking_text(entries: Sequence[RankingEntry]) -> str:
    lines = [f"{'rank':>4}  {'variant':<13} {'median_s':>12} {'low_s':>12} {'high_s':>12} {'eff':>7}  flags"]
    for e in entries:
        p = e.prediction
        flags = list(p.flags) + (["overlap"] if e.overlap else [])
        lines.append(
            f"{e.rank:>4}  {e.variant:<13} {p.total_median:>12.6g} {p.total_low:>12.6g} "
            f"{p.total_high:>12.6g} {p.efficiency:>7.4f}  {';'.join(flags)}"
        )
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SweepRow:
    value: int
    variant: str
    prediction: Prediction | None
    error: str = ""

    @property
    def flags(self) -> list[str]:
        if self.prediction is None:
            return ["error"]
        return self.prediction.flags


@dataclass(frozen=True)
class SweepTable:
    param: str
    fixed: tuple[tuple[str, int], ...]
    rows: tuple[SweepRow, ...]

    def values(self) -> list[int]:
        return sorted({r.value for r in self.rows})

    def variants(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen

    def get(self, value, variant) -> SweepRow:
        return next(r for r in self.rows if r.value == value and r.variant == str(variant))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["param", "variant", "median_s", "low_s", "high_s", "efficiency", "flags"])
        for r in self.rows:
            p = r.prediction
            if p is None:
                w.writerow([r.value, r.variant, "", "", "", "", "error"])
                continue
            w.writerow([r.value, r.variant, format(p.total_median, ".17g"), format(p.total_low, ".17g"),
                        format(p.total_high, ".17g"), format(p.efficiency, ".17g"), ";".join(r.flags)])
        return buf.getvalue()

    def to_wide(self, quantity: str = "efficiency") -> str:
        """Whitespace-separated table, one column per variant (gnuplot-ready)."""
        if quantity not in ("efficiency", "median", "low", "high"):
            raise InputError(f"unknown sweep quantity {quantity!r}")
        attr = {"median": "total_median", "low": "total_low", "high": "total_high"}.get(quantity, quantity)
        variants = self.variants()
        fixed = " ".join(f"{k}={v}" for k, v in self.fixed)
        lines = [f"# {quantity}; {fixed}", "# " + " ".join([self.param, *variants])]
        for value in self.values():
            cells = []
            for v in variants:
                p = self.get(value, v).prediction
                cells.append("nan" if p is None else format(getattr(p, attr), ".10g"))
            lines.append(" ".join([str(value), *cells]))
        return "\n".join(lines) + "\n"


def tune_blocksize(algorithm: str, variant, n: int, b_grid: Sequence[int], repo, profile: MachineProfile,
                   threads: int = 1, m: int | None = None,
                   allow_missing: bool = False) -> tuple[int, SweepTable]:
    """Predict at every block size; b* minimizes the median (ties: smallest b)."""
    grid = sorted(set(int(b) for b in b_grid))
    limit = n if m is None else min(m, n)
    if not grid:
        raise InputError("block-size grid is empty")
    if grid[0] < 1 or grid[-1] > limit:
        raise InputError(f"block sizes must lie in [1, {limit}]")
    source = _source(repo)
    rows = []
    for b in grid:
        trace = make_trace(algorithm, variant, n, b, m=m, threads=threads)
        rows.append(SweepRow(b, str(variant), predict(trace, source, profile, threads, allow_missing)))
    best = min(rows, key=lambda r: (r.prediction.total_median, r.value))
    fixed = (("n", n),) if m is None else (("m", m), ("n", n))
    return best.value, SweepTable("b", fixed, tuple(rows))


def sweep_n(algorithm: str, variants: Sequence | None, n_grid: Sequence[int], b: int, repo,
            profile: MachineProfile, threads: int = 1, allow_missing: bool = False) -> SweepTable:
    grid = sorted(set(int(n) for n in n_grid))
    if not grid:
        raise InputError("matrix-size grid is empty")
    if grid[0] < b:
        raise InputError(f"every n must be >= b={b}")
    variants = [str(v) for v in (variants or variants_of(algorithm))]
    source = _source(repo)
    rows = []
    for n in grid:
        for v in variants:
            trace = make_trace(algorithm, v, n, b, threads=threads)
            rows.append(SweepRow(n, v, predict(trace, source, profile, threads, allow_missing)))
    return SweepTable("n", (("b", b),), tuple(rows))


@dataclass(frozen=True)
class ContextResult:
    machine: str
    threads: int
    entries: tuple[RankingEntry, ...] = ()
    error: str = ""

    @property
    def order(self) -> tuple[str, ...]:
        return tuple(e.variant for e in self.entries)


@dataclass(frozen=True)
class CrossContextReport:
    contexts: tuple[ContextResult, ...]

    def rank_changes(self) -> dict[str, tuple[int | None, ...]]:
        """Per variant, its rank in each context; only variants whose rank differs."""
        ok = [c for c in self.contexts if not c.error]
        variants = sorted({e.variant for c in ok for e in c.entries}, key=_sort_key)
        out = {}
        for v in variants:
            ranks = tuple(next((e.rank for e in c.entries if e.variant == v), None) for c in ok)
            if len(set(ranks)) > 1:
                out[v] = ranks
        return out

    def to_text(self) -> str:
        lines = []
        for c in self.contexts:
            head = f"machine={c.machine} threads={c.threads}"
            if c.error:
                lines.append(f"{head}: ERROR {c.error}")
            else:
                lines.append(f"{head}: " + " < ".join(c.order))
        changes = self.rank_changes()
        if changes:
            lines.append("rank changes: " + "; ".join(
                f"variant {v}: " + "/".join(str(r) for r in ranks) for v, ranks in changes.items()))
        else:
            lines.append("rank changes: none")
        return "\n".join(lines) + "\n"


def cross_context(algorithm: str, variants, n: int, b: int, repo,
                  contexts: Sequence[tuple[MachineProfile, int]], m: int | None = None,
                  allow_missing: bool = False) -> CrossContextReport:
    """Rank independently per (machine, threads) context; failures stay local."""
    source = _source(repo)
    results = []
    for profile, threads in contexts:
        try:
            entries = rank(algorithm, variants, n, b, source, profile, threads, m, allow_missing)
        except PerfModError as exc:
            results.append(ContextResult(profile.id, threads, error=str(exc)))
        else:
            results.append(ContextResult(profile.id, threads, tuple(entries)))
    return CrossContextReport(tuple(results))
