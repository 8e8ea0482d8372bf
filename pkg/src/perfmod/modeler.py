"""Piecewise polynomial performance models fitted by least squares.

Two generation strategies are provided:

* :func:`model_expansion` grows a single polynomial term by term (greedy
  forward selection) and is frugal with samples;
* :func:`adaptive_refinement` keeps a fixed basis and recursively splits the
  size domain into cells until every cell meets the accuracy target.

Both draw measurements from an *oracle*: any object with ``size_names`` and
``measure(points) -> list[Sample]`` (see :class:`perfmod.sampler.JobOracle`).
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg

from .errors import InputError, RankDeficientError
from .sampler import log_grid

STATS = ("median", "q05", "q95")


# ---------------------------------------------------------------- basis

@dataclass(frozen=True, order=True)
class BasisTerm:
    """Monomial ``prod(x_i ** e_i)`` over the kernel's size parameters."""

    exponents: tuple[int, ...]

    @property
    def degree(self) -> int:
        return sum(self.exponents)

    def value(self, point: Sequence[float]) -> float:
        v = 1.0
        for x, e in zip(point, self.exponents):
            if e:
                v *= float(x) ** e
        return v

    def label(self, names: Sequence[str]) -> str:
        parts = []
        for name, e in zip(names, self.exponents):
            if e == 1:
                parts.append(name)
            elif e > 1:
                parts.append(f"{name}^{e}")
        return "*".join(parts) or "1"


def term_pool(nvars: int, per_var: int = 3, total: int = 3) -> list[BasisTerm]:
    """All monomials with per-variable exponent <= ``per_var`` and degree <= ``total``."""
    terms = [
        BasisTerm(e)
        for e in itertools.product(range(per_var + 1), repeat=nvars)
        if sum(e) <= total
    ]
    return sorted(terms, key=lambda t: (t.degree, tuple(-x for x in t.exponents)))


def constant_term(nvars: int) -> BasisTerm:
    return BasisTerm((0,) * nvars)


def parse_term(text: str, names: Sequence[str]) -> BasisTerm:
    """Parse ``1``, ``n``, ``m*n^2`` into a :class:`BasisTerm`."""
    exps = [0] * len(names)
    text = text.strip()
    if text == "1":
        return BasisTerm(tuple(exps))
    for factor in text.split("*"):
        name, _, power = factor.strip().partition("^")
        if name not in names:
            raise InputError(f"term {text!r}: unknown variable {name!r}")
        try:
            exps[names.index(name)] += int(power) if power else 1
        except ValueError:
            raise InputError(f"term {text!r}: bad exponent") from None
    return BasisTerm(tuple(exps))


def design_matrix(points, basis: Sequence[BasisTerm]) -> np.ndarray:
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    cols = [np.prod(X ** np.asarray(t.exponents, dtype=float), axis=1) for t in basis]
    return np.column_stack(cols) if cols else np.zeros((len(X), 0))


# ---------------------------------------------------------------- fitting

def ls_fit(points, values, basis: Sequence[BasisTerm], weighting: str = "relative",
           names: Sequence[str] | None = None) -> np.ndarray:
    """Weighted least-squares coefficients for ``basis``.

    ``weighting="relative"`` minimizes the sum of squared relative errors
    (weights ``1/y**2``). The system is column-equilibrated and solved with a
    column-pivoted QR factorization plus one step of iterative refinement.
    """
    A = design_matrix(points, basis)
    y = np.asarray(values, dtype=float)
    n, p = A.shape
    if p == 0:
        raise InputError("empty basis")
    if n < p:
        raise InputError(f"{n} samples cannot determine {p} coefficients")
    if len(set(basis)) != len(basis):
        raise InputError("basis terms must be unique")
    if weighting == "relative":
        if np.any(y <= 0):
            raise InputError("relative weighting needs strictly positive values")
        A = A / y[:, None]
        b = np.ones(n)
    elif weighting == "none":
        b = y.copy()
    else:
        raise InputError(f"unknown weighting {weighting!r}")
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0] = 1.0
    As = A / scale
    Q, R, piv = scipy.linalg.qr(As, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(n, p) * np.finfo(float).eps * diag[0]
    rank = int(np.sum(diag > tol))
    if rank < p:
        dependent = [basis[j] for j in piv[rank:]]
        labels = [t.label(names) if names else str(t.exponents) for t in dependent]
        raise RankDeficientError(f"design matrix is rank deficient; dependent terms: {', '.join(labels)}",
                                 dependent)
    z = scipy.linalg.solve_triangular(R, Q.T @ b)
    # one refinement step against the unfactored system
    r = b - As[:, piv] @ z
    z = z + scipy.linalg.solve_triangular(R, Q.T @ r)
    coef = np.empty(p)
    coef[piv] = z
    return coef / scale


def weighted_rss(points, values, basis, coef, weighting="relative") -> float:
    pred = design_matrix(points, basis) @ coef
    y = np.asarray(values, dtype=float)
    res = (pred - y) / y if weighting == "relative" else pred - y
    return float(res @ res)


@dataclass(frozen=True)
class PolynomialModel:
    basis: tuple[BasisTerm, ...]
    coefficients: Mapping[str, tuple[float, ...]]

    def __post_init__(self):
        if len(set(self.basis)) != len(self.basis):
            raise InputError("duplicate basis term")
        for stat, coef in self.coefficients.items():
            if len(coef) != len(self.basis):
                raise InputError(f"{stat}: {len(coef)} coefficients for {len(self.basis)} terms")

    def evaluate(self, point: Sequence[float], stat: str = "median") -> float:
        coef = self.coefficients[stat]
        return math.fsum(c * t.value(point) for c, t in zip(coef, self.basis))

    def scaled(self, factor: float) -> "PolynomialModel":
        return replace(self, coefficients={s: tuple(factor * c for c in v) for s, v in self.coefficients.items()})


def fit_quality(model: PolynomialModel, validation) -> tuple[float, float]:
    """(max, mean) relative error of the median statistic over ``(point, value)`` pairs."""
    validation = list(validation)
    if not validation:
        raise InputError("validation set is empty")
    errs = []
    for point, value in validation:
        if value <= 0:
            raise InputError("validation values must be positive")
        errs.append(abs(model.evaluate(point) - value) / value)
    return max(errs), sum(errs) / len(errs)


def _fit_stats(points, samples, basis, weighting) -> PolynomialModel:
    coefs = {}
    for stat in STATS:
        coefs[stat] = tuple(float(c) for c in ls_fit(points, [s.stat(stat) for s in samples], basis, weighting))
    return PolynomialModel(tuple(basis), coefs)


# ---------------------------------------------------------------- piecewise

@dataclass(frozen=True)
class Cell:
    bounds: tuple[tuple[int, int], ...]
    model: PolynomialModel
    diagnostics: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for lo, hi in self.bounds:
            if lo > hi:
                raise InputError(f"cell interval [{lo}, {hi}] is empty")


@dataclass(frozen=True)
class PiecewiseModel:
    size_names: tuple[str, ...]
    domain: tuple[tuple[int, int], ...]
    cells: tuple[Cell, ...]
    strategy: str
    diagnostics: Mapping[str, object] = field(default_factory=dict)

    @property
    def below_target_accuracy(self) -> bool:
        return bool(self.diagnostics.get("below_target_accuracy", False))

    @staticmethod
    def owns(cell: Cell, point: Sequence[float]) -> bool:
        """Cells are disjoint integer intervals; a probe falling between two
        cells (hi < x < next lo) belongs to the one with the smaller lo."""
        return all(lo <= x < hi + 1 for x, (lo, hi) in zip(point, cell.bounds))

    def in_domain(self, point: Sequence[int]) -> bool:
        return all(lo <= x <= hi for x, (lo, hi) in zip(point, self.domain))

    def locate(self, point: Sequence[int]) -> tuple[Cell, bool]:
        """Cell owning ``point`` (or the nearest cell) and whether it is an extrapolation."""
        extrapolated = not self.in_domain(point)
        probe = [min(max(x, lo), hi) for x, (lo, hi) in zip(point, self.domain)]
        for cell in self.cells:
            if self.owns(cell, probe):
                return cell, extrapolated
        raise InputError(f"cells do not cover point {tuple(probe)}")

    def evaluate(self, point: Sequence[int], stat: str = "median") -> float:
        cell, _ = self.locate(point)
        return cell.model.evaluate(point, stat)

    def scaled(self, factor: float) -> "PiecewiseModel":
        cells = tuple(replace(c, model=c.model.scaled(factor)) for c in self.cells)
        return replace(self, cells=cells)

    @property
    def term_count(self) -> int:
        return sum(len(c.model.basis) for c in self.cells)


def _normalize_domain(domain, names) -> tuple[tuple[int, int], ...]:
    if isinstance(domain, Mapping):
        try:
            domain = [domain[n] for n in names]
        except KeyError as exc:
            raise InputError(f"domain does not bound size {exc.args[0]!r}") from None
    domain = tuple((int(lo), int(hi)) for lo, hi in domain)
    if len(domain) != len(names):
        raise InputError(f"domain has {len(domain)} axes, kernel has {len(names)} sizes")
    for lo, hi in domain:
        if not 1 <= lo <= hi:
            raise InputError(f"domain interval [{lo}, {hi}] invalid")
    if all(lo == hi for lo, hi in domain):
        raise InputError("domain is degenerate")
    return domain


def _cross_grid(ranges, per_axis: Sequence[int]) -> list[tuple[int, ...]]:
    axes = [log_grid(lo, hi, q) for (lo, hi), q in zip(ranges, per_axis)]
    return list(itertools.product(*axes))


def _random_points(ranges, count, rng, exclude) -> list[tuple[int, ...]]:
    """Distinct log-uniform integer points in ``ranges`` avoiding ``exclude``."""
    exclude = set(exclude)
    total = math.prod(hi - lo + 1 for lo, hi in ranges)
    if total - len(exclude) <= max(count, 0) * 4 and total <= 200_000:
        remaining = [p for p in itertools.product(*(range(lo, hi + 1) for lo, hi in ranges))
                     if p not in exclude]
        if len(remaining) <= count:
            return remaining
        idx = rng.choice(len(remaining), size=count, replace=False)
        return [remaining[i] for i in sorted(idx)]
    out: list[tuple[int, ...]] = []
    seen = set(exclude)
    logs = [(math.log(lo - 0.5 if lo > 1 else lo), math.log(hi + 0.5)) for lo, hi in ranges]
    attempts = 0
    while len(out) < count and attempts < 200 * count:
        attempts += 1
        p = tuple(
            min(max(int(round(math.exp(rng.uniform(a, b)))), lo), hi)
            for (a, b), (lo, hi) in zip(logs, ranges)
        )
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


def _axis_counts(target: int, ranges, basis) -> list[int]:
    d = len(ranges)
    q = max(2, math.floor(target ** (1.0 / d) + 1e-9))
    counts = []
    for a, (lo, hi) in enumerate(ranges):
        need = max((t.exponents[a] for t in basis), default=0) + 1
        counts.append(min(hi - lo + 1, max(q, need) if hi > lo else 1))
    # grow the axes round-robin until the grid reaches the target size
    while math.prod(counts) < target:
        grown = False
        for a, (lo, hi) in enumerate(ranges):
            if counts[a] < hi - lo + 1 and math.prod(counts) < target:
                counts[a] += 1
                grown = True
        if not grown:
            break
    return counts


# ---------------------------------------------------------------- expansion

@dataclass(frozen=True)
class ExpansionConfig:
    eps: float = 0.05
    max_terms: int = 12
    initial_points: int | None = None  # default: size of the term pool
    term_pool: tuple[BasisTerm, ...] | None = None
    per_var_degree: int = 3
    total_degree: int = 3
    min_reduction: float = 0.01
    max_doublings: int = 2
    weighting: str = "relative"
    seed: int = 0


def model_expansion(oracle, domain, config: ExpansionConfig = ExpansionConfig()) -> PiecewiseModel:
    names = tuple(oracle.size_names)
    domain = _normalize_domain(domain, names)
    d = len(names)
    pool = list(config.term_pool or term_pool(d, config.per_var_degree, config.total_degree))
    rng = np.random.default_rng(config.seed)
    ranges = list(domain)
    const = constant_term(d)
    basis = [const]
    pool = [t for t in pool if t != const]

    def draw(target):
        train = _cross_grid(ranges, _axis_counts(target, ranges, ()))
        val = _random_points(ranges, len(train), rng, train)
        return train, val

    target = config.initial_points or len(pool) + 1
    train, val = draw(target)

    def measure(pts):
        samples = oracle.measure(pts)
        return samples, [s.median for s in samples]

    train_s, train_y = measure(train)
    val_s, val_y = measure(val)

    def fit(b):
        coef = ls_fit(train, train_y, b, config.weighting, names)
        return coef, weighted_rss(train, train_y, b, coef, config.weighting)

    def score(b, coef):
        model = PolynomialModel(tuple(b), {"median": tuple(coef)})
        return fit_quality(model, list(zip(val, val_y)) or list(zip(train, train_y)))

    coef, rss = fit(basis)
    max_err, mean_err = score(basis, coef)
    rss_history = [rss]
    stalls = doublings = 0
    below = False
    while max_err > config.eps:
        if len(basis) >= config.max_terms:
            below = True
            break
        if len(train) < 2 * (len(basis) + 1):
            if doublings >= config.max_doublings:
                below = True
                break
            doublings += 1
            target = 2 * len(train)
            train, val = draw(target)
            train_s, train_y = measure(train)
            val_s, val_y = measure(val)
            coef, rss = fit(basis)
            max_err, mean_err = score(basis, coef)
            rss_history = [rss]
            continue
        best = None
        for term in pool:
            if term in basis:
                continue
            try:
                c, r = fit(basis + [term])
            except RankDeficientError:
                continue
            if best is None or r < best[2] - 1e-300:
                best = (term, c, r)
        if best is None:
            below = True
            break
        reduction = (rss - best[2]) / rss if rss > 0 else 0.0
        if reduction < config.min_reduction:
            stalls += 1
            if stalls >= 2:
                if doublings >= config.max_doublings:
                    below = True
                    break
                doublings += 1
                stalls = 0
                target = 2 * len(train)
                train, val = draw(target)
                train_s, train_y = measure(train)
                val_s, val_y = measure(val)
                coef, rss = fit(basis)
                max_err, mean_err = score(basis, coef)
                rss_history = [rss]
                continue
        else:
            stalls = 0
        basis.append(best[0])
        coef, rss = best[1], best[2]
        rss_history.append(rss)
        max_err, mean_err = score(basis, coef)

    model = _fit_stats(train, train_s, basis, config.weighting)
    cell = Cell(domain, model, {
        "max_rel_err": max_err,
        "mean_rel_err": mean_err,
        "n_train": len(train),
        "n_validation": len(val),
    })
    diagnostics = {
        "max_rel_err": max_err,
        "mean_rel_err": mean_err,
        "below_target_accuracy": below,
        "eps": config.eps,
        "doublings": doublings,
        "rss_history": tuple(rss_history),
        "samples_drawn": getattr(oracle, "samples_drawn", len(set(train) | set(val))),
    }
    return PiecewiseModel(names, domain, (cell,), "expansion", diagnostics)


# ---------------------------------------------------------------- refinement

@dataclass(frozen=True)
class RefinementConfig:
    eps: float = 0.05
    fixed_basis: tuple[BasisTerm, ...] | None = None
    min_cell_width: int = 16
    max_cells: int = 64
    per_var_degree: int = 3
    total_degree: int = 3
    weighting: str = "relative"
    seed: int = 0


@dataclass
class _Work:
    bounds: tuple[tuple[int, int], ...]
    cell: Cell
    val_points: list
    val_errors: list


def adaptive_refinement(oracle, domain, config: RefinementConfig = RefinementConfig()) -> PiecewiseModel:
    names = tuple(oracle.size_names)
    domain = _normalize_domain(domain, names)
    d = len(names)
    basis = list(config.fixed_basis or term_pool(d, config.per_var_degree, config.total_degree))
    if len(set(basis)) != len(basis):
        raise InputError("fixed basis repeats a term")
    rng = np.random.default_rng(config.seed)

    def cell_basis(ranges):
        # drop terms the cell cannot resolve along a narrow axis
        widths = [hi - lo + 1 for lo, hi in ranges]
        return [t for t in basis if all(e < w for e, w in zip(t.exponents, widths))]

    def capacity(bounds):
        ranges = list(bounds)
        if any(lo > hi for lo, hi in ranges):
            return False
        b = cell_basis(ranges)
        return bool(b) and math.prod(hi - lo + 1 for lo, hi in ranges) >= 3 * len(b)

    def fit_cell(bounds) -> _Work:
        ranges = list(bounds)
        b = cell_basis(ranges)
        train = _cross_grid(ranges, _axis_counts(2 * len(b), ranges, b))
        val = _random_points(ranges, len(b), rng, train)
        train_s = oracle.measure(train)
        val_y = [s.median for s in oracle.measure(val)]
        try:
            model = _fit_stats(train, train_s, b, config.weighting)
        except RankDeficientError as exc:
            b = [t for t in b if t not in exc.dependent_terms]
            model = _fit_stats(train, train_s, b, config.weighting)
        pairs = list(zip(val, val_y)) or [(p, s.median) for p, s in zip(train, train_s)]
        errs = [abs(model.evaluate(p) - y) / y for p, y in pairs]
        cell = Cell(bounds, model, {
            "max_rel_err": max(errs),
            "mean_rel_err": sum(errs) / len(errs),
            "n_train": len(train),
            "n_validation": len(val),
        })
        return _Work(bounds, cell, [p for p, _ in pairs], errs)

    def split_options(work: _Work):
        """Candidate (axis, mid) splits ordered by preference."""
        options = []
        for a, (lo, hi) in enumerate(work.bounds):
            if hi - lo <= config.min_cell_width:
                continue
            # the rounded geometric midpoint opens the upper child
            mid = min(max(int(round(math.sqrt(lo * hi))), lo + 1), hi)
            left = tuple((lo, mid - 1) if i == a else bd for i, bd in enumerate(work.bounds))
            right = tuple((mid, hi) if i == a else bd for i, bd in enumerate(work.bounds))
            if not (capacity(left) and capacity(right)):
                continue
            low = [e for p, e in zip(work.val_points, work.val_errors) if p[a] < mid]
            high = [e for p, e in zip(work.val_points, work.val_errors) if p[a] >= mid]
            spread = abs(np.mean(low) - np.mean(high)) if low and high else 0.0
            options.append((-spread, -(hi - lo), a, left, right))
        options.sort(key=lambda o: o[:3])
        return options

    cells = [fit_cell(domain)]
    splits = 0
    while len(cells) < config.max_cells:
        candidates = sorted(
            (w for w in cells if w.cell.diagnostics["max_rel_err"] > config.eps),
            key=lambda w: -w.cell.diagnostics["max_rel_err"],
        )
        chosen = None
        for w in candidates:
            opts = split_options(w)
            if opts:
                chosen = (w, opts[0])
                break
        if chosen is None:
            break
        w, (_, _, _, left, right) = chosen
        i = cells.index(w)
        cells[i:i + 1] = [fit_cell(left), fit_cell(right)]
        splits += 1

    errs = [e for w in cells for e in w.val_errors]
    max_err = max(errs)
    diagnostics = {
        "max_rel_err": max_err,
        "mean_rel_err": sum(errs) / len(errs),
        "below_target_accuracy": max_err > config.eps,
        "eps": config.eps,
        "splits": splits,
        "samples_drawn": getattr(oracle, "samples_drawn", 0),
    }
    ordered = sorted(cells, key=lambda w: w.bounds)
    return PiecewiseModel(names, domain, tuple(w.cell for w in ordered), "refinement", diagnostics)


# ---------------------------------------------------------------- comparison

@dataclass(frozen=True)
class StrategyResult:
    strategy: str
    samples: int = 0
    build_seconds: float = 0.0
    max_rel_err: float = float("nan")
    mean_rel_err: float = float("nan")
    cells: int = 0
    terms: int = 0
    below_target_accuracy: bool = False
    error: str = ""
    model: PiecewiseModel | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class ComparisonReport:
    kernel: str
    flags: str
    domain: tuple[tuple[int, int], ...]
    eval_points: int
    results: tuple[StrategyResult, ...]

    def result(self, strategy) -> StrategyResult:
        return next(r for r in self.results if r.strategy == strategy)

    def to_csv(self, timing: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["strategy", "samples", "max_rel_err", "mean_rel_err", "cells", "terms",
                "below_target_accuracy", "error"]
        if timing:
            cols.insert(2, "build_seconds")
        w.writerow(cols)
        for r in self.results:
            row = [r.strategy, r.samples, format(r.max_rel_err, ".17g"), format(r.mean_rel_err, ".17g"),
                   r.cells, r.terms, int(r.below_target_accuracy), r.error]
            if timing:
                row.insert(2, format(r.build_seconds, ".6f"))
            w.writerow(row)
        return buf.getvalue()

    def to_text(self, timing: bool = False) -> str:
        dom = " x ".join(f"[{lo},{hi}]" for lo, hi in self.domain)
        lines = [f"strategy comparison for {self.kernel} ({self.flags}) over {dom}",
                 f"held-out evaluation points: {self.eval_points}"]
        for r in self.results:
            if r.error:
                lines.append(f"  {r.strategy:<11} FAILED: {r.error}")
                continue
            t = f"  time={r.build_seconds:.3f}s" if timing else ""
            flag = "  below target" if r.below_target_accuracy else ""
            lines.append(
                f"  {r.strategy:<11} samples={r.samples:<6d} max_err={r.max_rel_err:.4f} "
                f"mean_err={r.mean_rel_err:.4f} cells={r.cells} terms={r.terms}{t}{flag}"
            )
        return "\n".join(lines) + "\n"


def compare_strategies(oracle_factory: Callable[[], object], domain,
                       expansion: ExpansionConfig = ExpansionConfig(),
                       refinement: RefinementConfig = RefinementConfig(),
                       eval_points: int = 64, seed: int = 0) -> ComparisonReport:
    """Build a model with each strategy and score both on a common held-out set.

    ``oracle_factory`` must return a fresh oracle per call so that sample
    counts are per strategy; the held-out set is measured on its own oracle.
    """
    probe = oracle_factory()
    names = tuple(probe.size_names)
    domain = _normalize_domain(domain, names)
    eval_rng = np.random.default_rng([seed, 0xE7A1])
    held = _random_points(domain, eval_points, eval_rng, ())
    held_y = [s.median for s in probe.measure(held)]
    results = []
    for strategy, builder, cfg in (("expansion", model_expansion, expansion),
                                   ("refinement", adaptive_refinement, refinement)):
        oracle = oracle_factory()
        t0 = time.perf_counter()
        try:
            model = builder(oracle, domain, cfg)
        except Exception as exc:  # recorded, not raised
            results.append(StrategyResult(strategy, error=f"{type(exc).__name__}: {exc}"))
            continue
        elapsed = time.perf_counter() - t0
        errs = [abs(model.evaluate(p) - y) / y for p, y in zip(held, held_y)]
        results.append(StrategyResult(
            strategy=strategy,
            samples=oracle.samples_drawn,
            build_seconds=elapsed,
            max_rel_err=max(errs),
            mean_rel_err=sum(errs) / len(errs),
            cells=len(model.cells),
            terms=model.term_count,
            below_target_accuracy=model.below_target_accuracy,
            model=model,
        ))
    kernel = getattr(probe, "kernel", "?")
    flags = str(getattr(probe, "flags", ""))
    return ComparisonReport(kernel, flags, domain, len(held), tuple(results))
