"""Synthetic truth functions for offline runs.

A truth table maps (kernel, flag pattern) to a timing expression over the
kernel's size names and ``threads``. File format, one rule per line::

    GEMM   *        2e-6 + 2.5e-10*m*n*k
    TRSM   side=L   2e-6 + 3e-10*n*m^2

The first matching rule wins; ``*`` matches any flag binding.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Callable, Mapping

from .core import Expr, FlagBinding
from .errors import InputError


class TruthTable:
    def __init__(self, rules=()):
        # (kernel, required flags dict, evaluator)
        self.rules: list[tuple[str, dict, Callable[[Mapping[str, int], int], float]]] = []
        for kernel, pattern, fn in rules:
            self.add(kernel, pattern, fn)

    def add(self, kernel: str, pattern, fn):
        """Register ``fn(sizes, threads) -> seconds``; ``fn`` may also be an expression string."""
        if isinstance(fn, str):
            expr = Expr(fn)
            fn = lambda sizes, threads, _e=expr: float(_e.evaluate({**sizes, "threads": threads}))
        if pattern in (None, "*", ""):
            required = {}
        else:
            required = FlagBinding.of(pattern).as_dict()
        self.rules.append((kernel, required, fn))
        return self

    def lookup(self, kernel: str, flags) -> Callable:
        bound = FlagBinding.of(flags).as_dict()
        for name, required, fn in self.rules:
            if name == kernel and all(bound.get(k) == v for k, v in required.items()):
                return fn
        raise InputError(f"no synthetic truth for {kernel} with flags {FlagBinding.of(flags)}")

    def __call__(self, kernel, flags, threads, sizes) -> float:
        return self.lookup(kernel, flags)(dict(sizes), threads)

    def scaled(self, factor: float) -> "TruthTable":
        return TruthTable(
            (k, req, lambda s, t, _f=fn: factor * _f(s, t)) for k, req, fn in self.rules
        )

    @classmethod
    def parse(cls, text: str) -> "TruthTable":
        table = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split(None, 2)
            if len(parts) != 3:
                raise InputError(f"truth line {lineno}: expected 'KERNEL FLAGS EXPRESSION'")
            try:
                table.add(parts[0], parts[1], parts[2])
            except InputError as exc:
                raise InputError(f"truth line {lineno}: {exc}") from None
        return table

    @classmethod
    def load(cls, path) -> "TruthTable":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


def demo_truths() -> TruthTable:
    return TruthTable.parse(resources.files("perfmod.data").joinpath("demo.truths").read_text())
