"""Kernel signatures, flag bindings, machine profiles, flop counts, efficiency.

The kernel registry is read from a small declarative text format::

    kernel TRSM
      flag side {L,R}
      flag uplo {L,U}
      size m, n
      flops side=L: n*m^2
      flops side=R: m*n^2

A ``flops`` line without a ``flag=value:`` qualifier is the default formula.
Formulas are arithmetic expressions over the size names using ``+ - * / ^``
and integer or decimal literals; they are evaluated in exact rational
arithmetic.
"""

from __future__ import annotations

import ast
import math
import os
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import InputError

_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
}


class Expr:
    """Arithmetic expression evaluated exactly with :class:`fractions.Fraction`."""

    def __init__(self, text: str):
        self.text = text.strip()
        if not self.text:
            raise InputError("empty expression")
        try:
            tree = ast.parse(self.text.replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise InputError(f"cannot parse expression {text!r}: {exc.msg}") from None
        self._names: set[str] = set()
        self._check(tree.body)
        self._tree = tree.body

    def _check(self, node):
        if isinstance(node, ast.BinOp):
            if not isinstance(node.op, (*_BINOPS, ast.Pow)):
                raise InputError(f"operator not allowed in {self.text!r}")
            if isinstance(node.op, ast.Pow):
                exp = node.right
                if not (isinstance(exp, ast.Constant) and type(exp.value) is int and exp.value >= 0):
                    raise InputError(f"exponents must be non-negative integer literals in {self.text!r}")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            self._check(node.operand)
        elif isinstance(node, ast.Constant) and type(node.value) in (int, float):
            pass
        elif isinstance(node, ast.Name):
            self._names.add(node.id)
        else:
            raise InputError(f"unsupported syntax in expression {self.text!r}")

    @property
    def names(self) -> frozenset[str]:
        return frozenset(self._names)

    def evaluate(self, env: Mapping[str, int | float | Fraction]) -> Fraction:
        return self._eval(self._tree, env)

    def _eval(self, node, env):
        if isinstance(node, ast.BinOp):
            left = self._eval(node.left, env)
            if isinstance(node.op, ast.Pow):
                return left ** node.right.value
            right = self._eval(node.right, env)
            if isinstance(node.op, ast.Div) and right == 0:
                raise InputError(f"division by zero in {self.text!r}")
            return _BINOPS[type(node.op)](left, right)
        if isinstance(node, ast.UnaryOp):
            value = self._eval(node.operand, env)
            return -value if isinstance(node.op, ast.USub) else value
        if isinstance(node, ast.Constant):
            # repr keeps decimal literals like 1e-7 exact as written
            return Fraction(repr(node.value)) if isinstance(node.value, float) else Fraction(node.value)
        try:
            return Fraction(env[node.id])
        except KeyError:
            raise InputError(f"unbound variable {node.id!r} in {self.text!r}") from None

    def __repr__(self):
        return f"Expr({self.text!r})"


@dataclass(frozen=True)
class FlagBinding:
    """Immutable flag-name to value map, canonically sorted by name."""

    items: tuple[tuple[str, str], ...] = ()

    @classmethod
    def of(cls, mapping: Mapping[str, str] | "FlagBinding" | str | None = None, **kw) -> "FlagBinding":
        if isinstance(mapping, FlagBinding):
            return mapping
        if isinstance(mapping, str):
            return cls.parse(mapping)
        merged = dict(mapping or {}, **kw)
        return cls(tuple(sorted((str(k), str(v)) for k, v in merged.items())))

    @classmethod
    def parse(cls, text: str) -> "FlagBinding":
        """Parse ``side=L,uplo=L`` (empty string means no flags)."""
        pairs = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            name, sep, value = part.partition("=")
            if not sep or not name.strip() or not value.strip():
                raise InputError(f"malformed flag assignment {part!r}")
            if name.strip() in pairs:
                raise InputError(f"flag {name.strip()!r} bound twice")
            pairs[name.strip()] = value.strip()
        return cls.of(pairs)

    def as_dict(self) -> dict[str, str]:
        return dict(self.items)

    def __getitem__(self, name):
        return self.as_dict()[name]

    def get(self, name, default=None):
        return self.as_dict().get(name, default)

    def __str__(self):
        return ",".join(f"{k}={v}" for k, v in self.items)

    def canonical(self, sep: str = "_") -> str:
        return sep.join(f"{k}={v}" for k, v in self.items) or "none"


@dataclass(frozen=True)
class KernelSignature:
    name: str
    flag_params: tuple[tuple[str, tuple[str, ...]], ...]
    size_params: tuple[str, ...]
    # (qualifier, formula); qualifier is None or a (flag, value) pair
    flop_formulas: tuple[tuple[tuple[str, str] | None, Expr], ...] = field(compare=False)

    def __post_init__(self):
        if not self.size_params:
            raise InputError(f"kernel {self.name} declares no size parameters")
        if len(set(self.size_params)) != len(self.size_params):
            raise InputError(f"kernel {self.name} repeats a size parameter")
        for flag, values in self.flag_params:
            if not values:
                raise InputError(f"flag {flag} of {self.name} has no allowed values")
        if not self.flop_formulas:
            raise InputError(f"kernel {self.name} has no flop formula")
        for qualifier, formula in self.flop_formulas:
            extra = formula.names - set(self.size_params)
            if extra:
                raise InputError(f"flop formula of {self.name} uses unknown names {sorted(extra)}")
            if qualifier is not None:
                flag, value = qualifier
                allowed = dict(self.flag_params).get(flag)
                if allowed is None or value not in allowed:
                    raise InputError(f"flop qualifier {flag}={value} invalid for {self.name}")

    @property
    def flag_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.flag_params)

    def validate_binding(self, binding) -> FlagBinding:
        binding = FlagBinding.of(binding)
        bound = binding.as_dict()
        allowed = dict(self.flag_params)
        missing = [f for f in allowed if f not in bound]
        if missing:
            raise InputError(f"{self.name}: flags {missing} are not bound")
        for name, value in bound.items():
            if name not in allowed:
                raise InputError(f"{self.name} has no flag {name!r}")
            if value not in allowed[name]:
                raise InputError(f"{self.name}: {name}={value} not in {{{','.join(allowed[name])}}}")
        return binding

    def validate_sizes(self, sizes: Mapping[str, int]) -> dict[str, int]:
        out = {}
        for name in self.size_params:
            if name not in sizes:
                raise InputError(f"{self.name}: size {name!r} is not bound")
            value = sizes[name]
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise InputError(f"{self.name}: size {name}={value!r} must be an integer >= 1")
            out[name] = int(value)
        extra = set(sizes) - set(self.size_params)
        if extra:
            raise InputError(f"{self.name}: unknown sizes {sorted(extra)}")
        return out

    def formula_for(self, binding: FlagBinding) -> Expr:
        default = None
        bound = binding.as_dict()
        for qualifier, formula in self.flop_formulas:
            if qualifier is None:
                default = formula
            elif bound.get(qualifier[0]) == qualifier[1]:
                return formula
        if default is None:
            raise InputError(f"{self.name}: no flop formula applies to {binding}")
        return default


@dataclass(frozen=True)
class MachineProfile:
    id: str
    peak_flops_per_core: float
    core_count: int = 1
    timer_floor: float = 1e-9

    def __post_init__(self):
        if not self.id or re.search(r"[\s/\\]", self.id):
            raise InputError(f"machine id {self.id!r} must be a non-empty path-safe token")
        if not self.peak_flops_per_core > 0:
            raise InputError("peak_flops_per_core must be positive")
        if int(self.core_count) != self.core_count or self.core_count < 1:
            raise InputError("core_count must be an integer >= 1")
        if not self.timer_floor > 0:
            raise InputError("timer_floor must be positive")

    @classmethod
    def from_text(cls, text: str) -> "MachineProfile":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise InputError(f"profile line {lineno}: expected key=value")
            values[key.strip()] = value.strip()
        try:
            return cls(
                id=values["id"],
                peak_flops_per_core=float(values["peak_flops_per_core"]),
                core_count=int(values.get("core_count", 1)),
                timer_floor=float(values.get("timer_floor", 1e-9)),
            )
        except KeyError as exc:
            raise InputError(f"machine profile is missing {exc.args[0]!r}") from None
        except ValueError as exc:
            raise InputError(f"machine profile: {exc}") from None

    @classmethod
    def load(cls, path) -> "MachineProfile":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        return (
            f"id={self.id}\npeak_flops_per_core={self.peak_flops_per_core!r}\n"
            f"core_count={self.core_count}\ntimer_floor={self.timer_floor!r}\n"
        )


def creation_time() -> str:
    """UTC timestamp; honours ``SOURCE_DATE_EPOCH`` for reproducible output."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return moment.isoformat(timespec="seconds")


def demo_profile() -> MachineProfile:
    return MachineProfile.from_text(resources.files("perfmod.data").joinpath("demo.profile").read_text())


class KernelRegistry:
    """Name-keyed collection of kernel signatures; immutable once built."""

    def __init__(self, kernels=()):
        self._kernels: dict[str, KernelSignature] = {}
        for kernel in kernels:
            if kernel.name in self._kernels:
                raise InputError(f"kernel {kernel.name!r} registered twice")
            self._kernels[kernel.name] = kernel

    def __getitem__(self, name: str) -> KernelSignature:
        try:
            return self._kernels[name]
        except KeyError:
            raise InputError(f"unknown kernel {name!r}; known: {', '.join(sorted(self._kernels))}") from None

    def __contains__(self, name):
        return name in self._kernels

    def __iter__(self):
        return iter(self._kernels.values())

    def __len__(self):
        return len(self._kernels)

    def names(self):
        return list(self._kernels)

    def merged(self, other: "KernelRegistry") -> "KernelRegistry":
        return KernelRegistry([*self, *other])

    @classmethod
    def parse(cls, text: str) -> "KernelRegistry":
        kernels = []
        current = None

        def finish():
            if current is not None:
                kernels.append(
                    KernelSignature(
                        current["name"],
                        tuple(current["flags"]),
                        tuple(current["sizes"]),
                        tuple(current["flops"]),
                    )
                )

        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            word, _, rest = line.partition(" ")
            rest = rest.strip()
            if word == "kernel":
                finish()
                if not re.fullmatch(r"[A-Za-z][A-Za-z0-9_-]*", rest):
                    raise InputError(f"registry line {lineno}: bad kernel name {rest!r}")
                current = {"name": rest, "flags": [], "sizes": [], "flops": []}
                continue
            if current is None:
                raise InputError(f"registry line {lineno}: declaration outside a kernel record")
            if word == "flag":
                m = re.fullmatch(r"(\w+)\s*\{([^}]*)\}", rest)
                if not m:
                    raise InputError(f"registry line {lineno}: expected 'flag name {{A,B}}'")
                values = tuple(v.strip() for v in m.group(2).split(",") if v.strip())
                if len(set(values)) != len(values):
                    raise InputError(f"registry line {lineno}: duplicate flag value")
                current["flags"].append((m.group(1), values))
            elif word == "size":
                names = [s.strip() for s in rest.split(",") if s.strip()]
                if not names or not all(n.isidentifier() for n in names):
                    raise InputError(f"registry line {lineno}: bad size declaration")
                current["sizes"].extend(names)
            elif word == "flops":
                qualifier = None
                m = re.match(r"(\w+)=(\w+)\s*:(.*)$", rest)
                if m:
                    qualifier, rest = (m.group(1), m.group(2)), m.group(3)
                try:
                    current["flops"].append((qualifier, Expr(rest)))
                except InputError as exc:
                    raise InputError(f"registry line {lineno}: {exc}") from None
            else:
                raise InputError(f"registry line {lineno}: unknown declaration {word!r}")
        finish()
        return cls(kernels)

    @classmethod
    def load(cls, path) -> "KernelRegistry":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


_DEFAULT_REGISTRY = None


def default_registry() -> KernelRegistry:
    """The shipped registry: GEMM, TRMM, TRSM, TRTRI, TRSYL-UNB."""
    global _DEFAULT_REGISTRY
    if _DEFAULT_REGISTRY is None:
        text = resources.files("perfmod.data").joinpath("kernels.reg").read_text()
        _DEFAULT_REGISTRY = KernelRegistry.parse(text)
    return _DEFAULT_REGISTRY


def flops(kernel: KernelSignature, binding, sizes: Mapping[str, int]) -> Fraction:
    binding = kernel.validate_binding(binding)
    sizes = kernel.validate_sizes(sizes)
    return kernel.formula_for(binding).evaluate(sizes)


def efficiency(time: float, flop_count, profile: MachineProfile, threads: int = 1) -> float:
    """Fraction of peak attained; values above 1 are returned unchanged."""
    if not time > 0:
        raise InputError(f"time must be positive, got {time!r}")
    if not 1 <= threads <= profile.core_count:
        raise InputError(f"threads={threads} outside 1..{profile.core_count} for machine {profile.id}")
    value = float(flop_count) / (time * profile.peak_flops_per_core * threads)
    if not math.isfinite(value):
        raise InputError("efficiency is not finite")
    return value
