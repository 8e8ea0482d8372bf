"""Timing measurements over size grids.

Executors produce raw durations for one kernel call configuration; the
sampler turns them into :class:`Sample` statistics. Two executors ship with
the toolkit: :class:`SyntheticExecutor`, driven by known truth functions, and
:class:`CommandExecutor`, which delegates measurement to an external program.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import shlex
import subprocess
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import FlagBinding, KernelRegistry, MachineProfile, creation_time, default_registry
from .errors import InputError, SamplingError

log = logging.getLogger(__name__)

Point = tuple  # tuple of ints ordered like the kernel's size params


# ---------------------------------------------------------------- grids

@dataclass(frozen=True)
class AxisSpec:
    name: str
    scheme: str  # "lin" | "log" | "list"
    lower: int = 1
    upper: int = 1
    count: int = 1
    values: tuple[int, ...] = ()

    def __post_init__(self):
        if self.scheme == "list":
            vals = self.values
            if not vals:
                raise InputError(f"axis {self.name}: empty explicit list")
            if any(v < 1 for v in vals):
                raise InputError(f"axis {self.name}: explicit values must be >= 1")
            if len(set(vals)) != len(vals):
                raise InputError(f"axis {self.name}: duplicate point in explicit list {list(vals)}")
            if list(vals) != sorted(vals):
                raise InputError(f"axis {self.name}: explicit list must be ascending")
        elif self.scheme in ("lin", "log"):
            if not 1 <= self.lower <= self.upper:
                raise InputError(f"axis {self.name}: need 1 <= lower <= upper")
            if self.count < 1:
                raise InputError(f"axis {self.name}: point count must be >= 1")
        else:
            raise InputError(f"axis {self.name}: unknown scheme {self.scheme!r}")

    @classmethod
    def parse(cls, text: str) -> "AxisSpec":
        """``n=log:64:2048:8``, ``m=lin:100:300:3`` or ``k=list:5,7,9`` (``k=5,7,9`` also works)."""
        name, sep, rest = text.partition("=")
        if not sep or not name.strip():
            raise InputError(f"grid axis {text!r}: expected name=spec")
        name = name.strip()
        scheme, _, body = rest.partition(":")
        try:
            if scheme in ("lin", "log"):
                lo, hi, count = body.split(":")
                args = dict(scheme=scheme, lower=int(lo), upper=int(hi), count=int(count))
            else:
                listed = body if scheme == "list" else rest
                args = dict(scheme="list", values=tuple(int(v) for v in listed.split(",")))
        except ValueError:
            raise InputError(f"grid axis {text!r}: malformed numbers") from None
        return cls(name, **args)

    def points(self) -> list[int]:
        if self.scheme == "list":
            return list(self.values)
        if self.count == 1 or self.lower == self.upper:
            return [self.lower]
        if self.scheme == "lin":
            raw = np.linspace(self.lower, self.upper, self.count)
        else:
            raw = np.geomspace(self.lower, self.upper, self.count)
        out = []
        for v in raw:
            iv = max(self.lower, min(self.upper, int(round(float(v)))))
            if not out or iv != out[-1]:
                out.append(iv)
        return out


@dataclass(frozen=True)
class GridSpec:
    axes: tuple[AxisSpec, ...]
    mode: str = "cross"  # or "diagonal"

    @property
    def names(self):
        return tuple(a.name for a in self.axes)

    @classmethod
    def parse(cls, texts: Sequence[str] | str, mode="cross") -> "GridSpec":
        if isinstance(texts, str):
            texts = [t for t in texts.replace(";", " ").split() if t]
        return cls(tuple(AxisSpec.parse(t) for t in texts), mode)


def generate_grid(spec: GridSpec) -> list[dict[str, int]]:
    """Expand a grid spec into size-binding dictionaries, in deterministic order."""
    if not spec.axes:
        raise InputError("grid has no axes")
    if len(set(spec.names)) != len(spec.names):
        raise InputError("grid names an axis twice")
    per_axis = [a.points() for a in spec.axes]
    if spec.mode == "cross":
        combos = [()]
        for values in per_axis:
            combos = [c + (v,) for c in combos for v in values]
    elif spec.mode == "diagonal":
        lengths = {len(v) for v in per_axis}
        if len(lengths) != 1:
            raise InputError("diagonal traversal needs the same point count on every axis")
        combos = list(zip(*per_axis))
    else:
        raise InputError(f"unknown traversal mode {spec.mode!r}")
    if not combos:
        raise InputError("grid is empty")
    return [dict(zip(spec.names, c)) for c in combos]


def log_grid(lo: int, hi: int, count: int) -> list[int]:
    """Geometrically spaced distinct integers in [lo, hi]; may return fewer than ``count``."""
    count = max(1, min(count, hi - lo + 1))
    pts = AxisSpec("x", "log", lo, hi, count).points()
    if len(pts) < count:
        # rounding collapsed neighbours near the low end; fill from unused integers
        used = set(pts)
        for v in range(lo, hi + 1):
            if len(used) >= count:
                break
            used.add(v)
        pts = sorted(used)
    return pts


# ---------------------------------------------------------------- samples

@dataclass(frozen=True)
class Sample:
    point: tuple[int, ...]
    raw_times: tuple[float, ...]
    min: float
    median: float
    mean: float
    std: float
    q05: float
    q95: float
    clamped: bool = False

    @classmethod
    def from_times(cls, point, times, clamped=False) -> "Sample":
        arr = np.asarray(times, dtype=float)
        if arr.size == 0:
            raise InputError(f"no durations for point {point}")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise InputError(f"durations at {point} must be finite and non-negative")
        q05, med, q95 = np.quantile(arr, [0.05, 0.5, 0.95])
        return cls(
            point=tuple(int(p) for p in point),
            raw_times=tuple(float(t) for t in arr),
            min=float(arr.min()),
            median=float(med),
            mean=float(arr.mean()),
            std=float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
            q05=float(q05),
            q95=float(q95),
            clamped=clamped,
        )

    @property
    def max(self) -> float:
        return max(self.raw_times)

    def stat(self, name: str) -> float:
        return getattr(self, name)


@dataclass(frozen=True)
class SampleSet:
    kernel: str
    flags: FlagBinding
    machine: str
    threads: int
    size_names: tuple[str, ...]
    samples: tuple[Sample, ...]
    executor: str = ""
    timestamp: str = field(default="", compare=False)

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if len(s.point) != len(self.size_names):
                raise InputError(f"sample point {s.point} does not match sizes {self.size_names}")
            if s.point in seen:
                raise InputError(f"duplicate sample point {s.point}")
            seen.add(s.point)

    def points(self):
        return [dict(zip(self.size_names, s.point)) for s in self.samples]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# kernel={self.kernel}\n# flags={self.flags}\n")
        buf.write(f"# machine={self.machine}\n# threads={self.threads}\n")
        if self.executor:
            buf.write(f"# executor={self.executor}\n")
        if self.timestamp:
            buf.write(f"# timestamp={self.timestamp}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([*self.size_names, "rep", "seconds"])
        for s in self.samples:
            for rep, t in enumerate(s.raw_times):
                writer.writerow([*s.point, rep, format(t, ".17g")])
        return buf.getvalue()

    def write_csv(self, path):
        _atomic_write(Path(path), self.to_csv())


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile("w", dir=path.parent, delete=False, encoding="utf-8",
                                     prefix=f".{path.name}.", suffix=".tmp") as fh:
        fh.write(text)
        tmp = Path(fh.name)
    tmp.replace(path)


_STAT_COLUMNS = ("min", "median", "mean", "std", "q05", "q95")


def ingest_csv(path, registry: KernelRegistry | None = None) -> SampleSet:
    """Parse a sample CSV file; statistics are always recomputed from raw times."""
    registry = registry or default_registry()
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    header = {}
    body_lines = []
    body_start = None
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.startswith("#"):
            if body_start is not None:
                raise InputError(f"{path}:{lineno}: header line after data")
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                header[key.strip()] = value.strip()
            continue
        if not line.strip():
            continue
        if body_start is None:
            body_start = lineno
        body_lines.append((lineno, line))
    for key in ("kernel", "flags", "machine", "threads"):
        if key not in header:
            raise InputError(f"{path}: missing context header '# {key}=...'" if header else
                             f"{path}: missing context header")
    kernel = registry[header["kernel"]]
    flags = kernel.validate_binding(FlagBinding.parse(header["flags"]))
    try:
        threads = int(header["threads"])
    except ValueError:
        raise InputError(f"{path}: threads header must be an integer") from None
    if not body_lines:
        raise InputError(f"{path}: no column header")
    columns = [c.strip() for c in next(csv.reader([body_lines[0][1]]))]
    sizes = tuple(kernel.size_params)
    if tuple(columns[:len(sizes)]) != sizes or columns[len(sizes):len(sizes) + 2] != ["rep", "seconds"]:
        raise InputError(
            f"{path}:{body_lines[0][0]}: columns {columns} do not match kernel "
            f"{kernel.name} sizes {list(sizes)} + rep,seconds"
        )
    extra = columns[len(sizes) + 2:]
    unknown = [c for c in extra if c not in _STAT_COLUMNS]
    if unknown:
        raise InputError(f"{path}:{body_lines[0][0]}: unknown columns {unknown}")
    times: dict[tuple, list[tuple[int, float]]] = {}
    claimed: dict[tuple, dict[str, float]] = {}
    for lineno, line in body_lines[1:]:
        row = [c.strip() for c in next(csv.reader([line]))]
        if len(row) != len(columns):
            raise InputError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(row)}")
        try:
            point = tuple(int(v) for v in row[:len(sizes)])
            rep = int(row[len(sizes)])
            seconds = float(row[len(sizes) + 1])
            stats = {c: float(v) for c, v in zip(extra, row[len(sizes) + 2:]) if v}
        except ValueError:
            raise InputError(f"{path}:{lineno}: malformed row {line!r}") from None
        if any(p < 1 for p in point) or seconds < 0 or not math.isfinite(seconds):
            raise InputError(f"{path}:{lineno}: invalid sizes or duration")
        times.setdefault(point, []).append((rep, seconds))
        if stats:
            claimed.setdefault(point, {}).update(stats)
    samples = []
    for point, reps in times.items():
        reps.sort()
        sample = Sample.from_times(point, [t for _, t in reps])
        for stat, value in claimed.get(point, {}).items():
            if not math.isclose(value, getattr(sample, stat), rel_tol=1e-9, abs_tol=1e-15):
                warnings.warn(
                    f"{path}: {stat} column at {point} disagrees with raw times; recomputed",
                    stacklevel=2,
                )
                break
        samples.append(sample)
    return SampleSet(
        kernel=kernel.name,
        flags=flags,
        machine=header["machine"],
        threads=threads,
        size_names=sizes,
        samples=tuple(samples),
        executor=header.get("executor", ""),
        timestamp=header.get("timestamp", ""),
    )


# ---------------------------------------------------------------- executors

@dataclass(frozen=True)
class NoiseModel:
    kind: str = "none"  # none | gaussian | uniform
    sigma: float = 0.0  # relative std for gaussian multiplicative noise
    low: float = 0.0  # additive bounds for uniform noise, seconds
    high: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "NoiseModel":
        """``none``, ``gaussian:0.02`` or ``uniform:-1e-6:1e-6``."""
        kind, _, rest = text.partition(":")
        try:
            if kind == "none":
                return cls()
            if kind == "gaussian":
                return cls("gaussian", sigma=float(rest))
            if kind == "uniform":
                lo, hi = rest.split(":")
                return cls("uniform", low=float(lo), high=float(hi))
        except ValueError:
            pass
        raise InputError(f"bad noise spec {text!r}")


def synthetic_execute(truth: Callable[[Mapping[str, int]], float], point: Mapping[str, int],
                      noise: NoiseModel, rng: np.random.Generator) -> tuple[float, bool]:
    """One synthetic duration and whether it had to be clamped at zero."""
    t = float(truth(point))
    if noise.kind == "gaussian":
        t *= 1.0 + noise.sigma * rng.standard_normal()
    elif noise.kind == "uniform":
        t += noise.low if noise.low == noise.high else rng.uniform(noise.low, noise.high)
    elif noise.kind != "none":
        raise InputError(f"unknown noise kind {noise.kind!r}")
    if t < 0:
        return 0.0, True
    return t, False


class Executor:
    """Produces ``count`` consecutive durations for one call configuration."""

    id = "executor"

    def measure(self, kernel: str, flags: FlagBinding, threads: int,
                point: Mapping[str, int], count: int) -> list[float]:
        raise NotImplementedError


class SyntheticExecutor(Executor):
    """Executor backed by truth functions ``truth(kernel, flags, threads, point) -> seconds``."""

    def __init__(self, truth, noise: NoiseModel | None = None, seed: int = 0, id: str = "synthetic"):
        self.truth = truth
        self.noise = noise or NoiseModel()
        self.rng = np.random.default_rng(seed)
        self.id = id
        self.clamped_points: list = []

    def measure(self, kernel, flags, threads, point, count):
        def at(p):
            return self.truth(kernel, flags, threads, p)

        out = []
        for _ in range(count):
            t, clamped = synthetic_execute(at, point, self.noise, self.rng)
            if clamped:
                self.clamped_points.append(dict(point))
            out.append(t)
        return out


class CommandExecutor(Executor):
    """Runs an external command once per point.

    The command receives a job file path (``key=value`` lines: kernel, flags,
    threads, point, reps) and must print ``reps`` whitespace-separated
    durations in seconds. A nonzero exit status marks the point as failed.
    """

    def __init__(self, command: str | Sequence[str], timeout: float | None = None):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise InputError("empty executor command")
        self.timeout = timeout
        self.id = "cmd:" + " ".join(self.argv)

    def measure(self, kernel, flags, threads, point, count):
        job = (
            f"kernel={kernel}\nflags={flags}\nthreads={threads}\n"
            f"point={','.join(f'{k}={v}' for k, v in point.items())}\nreps={count}\n"
        )
        with tempfile.TemporaryDirectory(prefix="perfmod-job-") as tmp:
            job_path = Path(tmp) / "job.txt"
            job_path.write_text(job, encoding="utf-8")
            try:
                proc = subprocess.run([*self.argv, str(job_path)], capture_output=True, text=True,
                                      timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise SamplingError(f"executor could not run: {exc}", point=dict(point)) from None
        if proc.returncode != 0:
            raise SamplingError(
                f"executor exited with status {proc.returncode}: {proc.stderr.strip()}", point=dict(point)
            )
        try:
            values = [float(v) for v in proc.stdout.split()]
        except ValueError:
            raise SamplingError("executor printed non-numeric output", point=dict(point)) from None
        if len(values) != count:
            raise SamplingError(f"executor returned {len(values)} durations, expected {count}",
                                point=dict(point))
        return values


# ---------------------------------------------------------------- jobs

@dataclass(frozen=True)
class SamplingJob:
    kernel: str
    flags: FlagBinding
    grid: GridSpec
    threads: int = 1
    reps: int = 10
    machine: str = "unknown"
    warmup: int = 1

    def __post_init__(self):
        if self.reps < 3:
            raise InputError("repetitions must be >= 3")
        if self.threads < 1:
            raise InputError("threads must be >= 1")
        if self.warmup < 0:
            raise InputError("warm-up count must be >= 0")


def measure_point(executor: Executor, kernel: str, flags: FlagBinding, threads: int,
                  point: Mapping[str, int], reps: int, warmup: int = 1,
                  timer_floor: float | None = None) -> Sample:
    """Measure one point: discard ``warmup`` calls, keep ``reps`` durations."""
    names = tuple(point)
    try:
        durations = executor.measure(kernel, flags, threads, dict(point), warmup + reps)
    except SamplingError:
        raise
    except Exception as exc:  # executor bugs surface as point failures
        raise SamplingError(f"executor failed at {dict(point)}: {exc}", point=dict(point)) from exc
    if len(durations) != warmup + reps:
        raise SamplingError(f"executor returned {len(durations)} durations", point=dict(point))
    kept = [float(d) for d in durations[warmup:]]
    clamped = False
    if timer_floor is not None:
        clamped = any(d < timer_floor for d in kept)
        kept = [max(d, timer_floor) for d in kept]
    return Sample.from_times(tuple(point[n] for n in names), kept, clamped=clamped)


def run_job(job: SamplingJob, executor: Executor, profile: MachineProfile | None = None,
            registry: KernelRegistry | None = None) -> SampleSet:
    """Measure every grid point of ``job`` sequentially in declared order."""
    registry = registry or default_registry()
    kernel = registry[job.kernel]
    flags = kernel.validate_binding(job.flags)
    if set(job.grid.names) != set(kernel.size_params):
        raise InputError(f"grid axes {job.grid.names} do not match {kernel.name} sizes {kernel.size_params}")
    points = [kernel.validate_sizes(p) for p in generate_grid(job.grid)]
    floor = profile.timer_floor if profile is not None else None
    machine = profile.id if profile is not None else job.machine
    stamp = creation_time()
    samples = []

    def build():
        return SampleSet(job.kernel, flags, machine, job.threads, tuple(kernel.size_params),
                         tuple(samples), executor.id, stamp)

    for point in points:
        try:
            sample = measure_point(executor, job.kernel, flags, job.threads, point, job.reps,
                                   job.warmup, floor)
        except SamplingError as exc:
            raise SamplingError(f"sampling aborted at point {point}: {exc}", point=point,
                                partial=build()) from exc
        if sample.clamped:
            log.warning("durations at %s clamped to timer floor %g", point, floor)
        samples.append(sample)
    return build()


class JobOracle:
    """On-demand measurement source for the modeler.

    Memoizes points so a point requested twice is measured once;
    ``samples_drawn`` counts distinct measured points.
    """

    def __init__(self, executor: Executor, kernel: str, flags, threads: int = 1, reps: int = 10,
                 warmup: int = 1, profile: MachineProfile | None = None,
                 registry: KernelRegistry | None = None):
        registry = registry or default_registry()
        self.signature = registry[kernel]
        self.kernel = kernel
        self.flags = self.signature.validate_binding(flags)
        self.threads = threads
        self.reps = reps
        self.warmup = warmup
        self.executor = executor
        self.profile = profile
        self._cache: dict[tuple, Sample] = {}
        self.elapsed = 0.0

    @property
    def size_names(self):
        return tuple(self.signature.size_params)

    @property
    def samples_drawn(self) -> int:
        return len(self._cache)

    def measure(self, points: Sequence[tuple[int, ...]]) -> list[Sample]:
        out = []
        floor = self.profile.timer_floor if self.profile is not None else None
        t0 = time.perf_counter()
        for p in points:
            p = tuple(int(v) for v in p)
            if p not in self._cache:
                self._cache[p] = measure_point(self.executor, self.kernel, self.flags, self.threads,
                                               dict(zip(self.size_names, p)), self.reps,
                                               self.warmup, floor)
            out.append(self._cache[p])
        self.elapsed += time.perf_counter() - t0
        return out

    def sample_set(self, machine: str = "unknown") -> SampleSet:
        samples = tuple(self._cache[p] for p in sorted(self._cache))
        machine = self.profile.id if self.profile is not None else machine
        return SampleSet(self.kernel, self.flags, machine, self.threads, self.size_names, samples,
                         self.executor.id)
