"""Kernel-call traces of blocked dense linear algebra algorithms.

Each :class:`KernelCall` names a kernel, its flags and sizes. Calls also carry
the operand regions they touch (``operands``) and the scalar ``alpha``, so a
trace can be replayed on real matrices; prediction ignores both.

Operand conventions (all regions are half-open row/column ranges):

* ``GEMM``       C += alpha * A @ B                      operands (A, B, C)
* ``TRMM``       B := alpha * A @ B   or alpha * B @ A   operands (A, B)
* ``TRSM``       B := alpha * A^-1 @ B or alpha * B @ A^-1
* ``TRTRI``      A := A^-1                               operands (A,)
* ``TRSYL-UNB``  solve A @ X + X @ B = alpha * C, C := X operands (A, B, C)
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

from .core import FlagBinding, KernelRegistry, default_registry, flops
from .errors import InputError

TRINV_VARIANTS = (1, 2, 3, 4)
SYLVESTER_VARIANTS = ("row-sweep", "column-sweep")


@lru_cache(maxsize=65536)
def _default_flops(kernel, binding, sizes) -> Fraction:
    return flops(default_registry()[kernel], binding, dict(sizes))


@dataclass(frozen=True)
class Region:
    matrix: str
    r0: int
    r1: int
    c0: int
    c1: int

    @property
    def shape(self):
        return (self.r1 - self.r0, self.c1 - self.c0)


@dataclass(frozen=True)
class KernelCall:
    kernel: str
    flags: FlagBinding
    sizes: tuple[tuple[str, int], ...]
    threads: int = 1
    operands: tuple[Region, ...] = field(default=(), compare=False)
    alpha: float = field(default=1.0, compare=False)

    @property
    def size_map(self) -> dict[str, int]:
        return dict(self.sizes)

    def flop_count(self, registry: KernelRegistry | None = None) -> Fraction:
        if registry is None:
            return _default_flops(self.kernel, self.flags, self.sizes)
        return flops(registry[self.kernel], self.flags, self.size_map)

    def describe(self) -> str:
        dims = "x".join(str(v) for _, v in self.sizes)
        return f"{self.kernel}[{self.flags}]({dims})"


@dataclass(frozen=True)
class AlgorithmTrace:
    algorithm: str
    variant: str
    parameters: tuple[tuple[str, int], ...]
    calls: tuple[KernelCall, ...]

    def __len__(self):
        return len(self.calls)

    def __iter__(self):
        return iter(self.calls)

    def total_flops(self, registry=None) -> Fraction:
        return sum((c.flop_count(registry) for c in self.calls), Fraction(0))

    def kernels(self) -> list[str]:
        return [c.kernel for c in self.calls]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seq", "kernel", "flags", "sizes", "threads"])
        for i, c in enumerate(self.calls):
            w.writerow([i, c.kernel, str(c.flags), ",".join(f"{k}={v}" for k, v in c.sizes), c.threads])
        return buf.getvalue()


def _tri(side, threads, m, n, A, B, alpha, kernel):
    return KernelCall(kernel, FlagBinding.of(side=side, uplo="L", transa="N", diag="N"),
                      (("m", m), ("n", n)), threads, (A, B), alpha)


def _emit(calls, call):
    if all(v > 0 for _, v in call.sizes):
        calls.append(call)


def _blocks(n, b):
    i = 0
    while i < n:
        bi = min(b, n - i)
        yield i, bi, n - i - bi
        i += bi


def trace_trinv(variant: int, n: int, b: int, threads: int = 1) -> AlgorithmTrace:
    """Blocked in-place inversion of a lower-triangular ``L`` (n x n).

    Iterates over diagonal blocks of width ``bi = min(b, n - i)``; with ``i``
    rows already processed and ``r`` rows remaining below the block:

    1. ``L10 := L10 L00``, ``L10 := -L11^-1 L10``, ``L11 := L11^-1``
    2. same updates as 1 with the TRSM applied before the TRMM
    3. ``L11 := L11^-1``, ``L10 := -L11 L10``, ``L20 += L21 L10``, ``L21 := L21 L11``
    4. ``L11 := L11^-1``, ``L21 := L21 L11``, ``L21 := -L22^-1 L21``
    """
    variant = int(variant)
    if variant not in TRINV_VARIANTS:
        raise InputError(f"trinv variant must be one of {TRINV_VARIANTS}")
    if not 1 <= b <= n:
        raise InputError(f"block size b={b} must satisfy 1 <= b <= n={n}")
    calls: list[KernelCall] = []
    trtri = FlagBinding.of(uplo="L", diag="N")
    gemm = FlagBinding.of(transa="N", transb="N")
    for i, bi, r in _blocks(n, b):
        j = i + bi
        L00 = Region("L", 0, i, 0, i)
        L10 = Region("L", i, j, 0, i)
        L11 = Region("L", i, j, i, j)
        L20 = Region("L", j, n, 0, i)
        L21 = Region("L", j, n, i, j)
        L22 = Region("L", j, n, j, n)
        inv = KernelCall("TRTRI", trtri, (("n", bi),), threads, (L11,))
        if variant == 1:
            _emit(calls, _tri("R", threads, bi, i, L00, L10, 1.0, "TRMM"))
            _emit(calls, _tri("L", threads, bi, i, L11, L10, -1.0, "TRSM"))
            _emit(calls, inv)
        elif variant == 2:
            _emit(calls, _tri("L", threads, bi, i, L11, L10, -1.0, "TRSM"))
            _emit(calls, _tri("R", threads, bi, i, L00, L10, 1.0, "TRMM"))
            _emit(calls, inv)
        elif variant == 3:
            _emit(calls, inv)
            _emit(calls, _tri("L", threads, bi, i, L11, L10, -1.0, "TRMM"))
            _emit(calls, KernelCall("GEMM", gemm, (("m", r), ("n", i), ("k", bi)), threads,
                                    (L21, L10, L20), 1.0))
            _emit(calls, _tri("R", threads, r, bi, L11, L21, 1.0, "TRMM"))
        else:
            _emit(calls, inv)
            _emit(calls, _tri("R", threads, r, bi, L11, L21, 1.0, "TRMM"))
            _emit(calls, _tri("L", threads, r, bi, L22, L21, -1.0, "TRSM"))
    return AlgorithmTrace("trinv", str(variant), (("n", n), ("b", b)), tuple(calls))


def trace_sylvester(variant: str, m: int, n: int, b: int, threads: int = 1) -> AlgorithmTrace:
    """Blocked solve of ``L X + X U = C`` (L lower m x m, U upper n x n); X overwrites C.

    ``column-sweep`` walks column blocks of U: small solve for ``X1`` against
    the full L, then ``C2 -= X1 U12``. ``row-sweep`` walks row blocks of L:
    small solve against the full U, then ``C2 -= L21 X1``.
    """
    if variant not in SYLVESTER_VARIANTS:
        raise InputError(f"sylvester variant must be one of {SYLVESTER_VARIANTS}")
    if not 1 <= b <= min(m, n):
        raise InputError(f"block size b={b} must satisfy 1 <= b <= min(m, n)={min(m, n)}")
    calls: list[KernelCall] = []
    syl = FlagBinding.of(trana="N", tranb="N")
    gemm = FlagBinding.of(transa="N", transb="N")
    if variant == "column-sweep":
        for j, bj, r in _blocks(n, b):
            k = j + bj
            X1 = Region("C", 0, m, j, k)
            _emit(calls, KernelCall("TRSYL-UNB", syl, (("m", m), ("n", bj)), threads,
                                    (Region("L", 0, m, 0, m), Region("U", j, k, j, k), X1)))
            _emit(calls, KernelCall("GEMM", gemm, (("m", m), ("n", r), ("k", bj)), threads,
                                    (X1, Region("U", j, k, k, n), Region("C", 0, m, k, n)), -1.0))
    else:
        for i, bi, r in _blocks(m, b):
            k = i + bi
            X1 = Region("C", i, k, 0, n)
            _emit(calls, KernelCall("TRSYL-UNB", syl, (("m", bi), ("n", n)), threads,
                                    (Region("L", i, k, i, k), Region("U", 0, n, 0, n), X1)))
            _emit(calls, KernelCall("GEMM", gemm, (("m", r), ("n", n), ("k", bi)), threads,
                                    (Region("L", k, m, i, k), X1, Region("C", k, m, 0, n)), -1.0))
    return AlgorithmTrace("sylvester", variant, (("m", m), ("n", n), ("b", b)), tuple(calls))


def make_trace(algorithm: str, variant, n: int, b: int, m: int | None = None, threads: int = 1) -> AlgorithmTrace:
    if algorithm == "trinv":
        return trace_trinv(int(variant), n, b, threads)
    if algorithm == "sylvester":
        return trace_sylvester(str(variant), n if m is None else m, n, b, threads)
    raise InputError(f"unknown algorithm {algorithm!r}; expected trinv or sylvester")


def variants_of(algorithm: str) -> tuple:
    if algorithm == "trinv":
        return tuple(str(v) for v in TRINV_VARIANTS)
    if algorithm == "sylvester":
        return SYLVESTER_VARIANTS
    raise InputError(f"unknown algorithm {algorithm!r}")
