"""On-disk model repository.

Layout: ``<root>/<machine>/<kernel>/<flags>.t<threads>.model`` where
``<flags>`` is the sorted ``name=value`` list joined with ``_``. Each file is
UTF-8 JSON with top-level ``key``, ``metadata``, ``domain``, ``cells`` and a
``checksum`` (SHA-256 of the canonical JSON of the other four fields).
Coefficients are decimal strings with 17 significant digits, so a
store/lookup round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from . import __version__
from .core import FlagBinding, creation_time
from .errors import InputError, IntegrityError, MissingModelError, RepositoryConflictError
from .modeler import STATS, BasisTerm, Cell, PiecewiseModel, PolynomialModel

SUFFIX = ".model"


@dataclass(frozen=True)
class ModelRecord:
    kernel: str
    flags: FlagBinding
    machine: str
    threads: int
    model: PiecewiseModel
    metadata: Mapping[str, object] = field(default_factory=dict)

    @property
    def key(self) -> tuple[str, str, str, int]:
        return (self.kernel, str(self.flags), self.machine, self.threads)

    def scaled(self, factor: float) -> "ModelRecord":
        return ModelRecord(self.kernel, self.flags, self.machine, self.threads,
                           self.model.scaled(factor), self.metadata)


def make_record(kernel, flags, machine, threads, model: PiecewiseModel, **extra) -> ModelRecord:
    meta = {
        "created": creation_time(),
        "strategy": model.strategy,
        "sample_count": int(model.diagnostics.get("samples_drawn", 0)),
        "max_rel_err": float(model.diagnostics.get("max_rel_err", float("nan"))),
        "version": __version__,
    }
    meta.update(extra)
    return ModelRecord(kernel, FlagBinding.of(flags), machine, int(threads), model, meta)


def record_path(repo_root, kernel, flags, machine, threads) -> Path:
    flags = FlagBinding.of(flags)
    for part in (machine, kernel):
        if not part or "/" in part or part.startswith("."):
            raise InputError(f"unsafe key component {part!r}")
    return Path(repo_root) / machine / kernel / f"{flags.canonical()}.t{int(threads)}{SUFFIX}"


# ---------------------------------------------------------------- codec

def _num(x: float) -> str:
    return format(float(x), ".17g")


def _enc(value):
    if isinstance(value, bool) or isinstance(value, int) or value is None:
        return value
    if isinstance(value, float):
        return _num(value)
    if isinstance(value, str):
        return value
    if isinstance(value, (tuple, list)):
        return [_enc(v) for v in value]
    raise InputError(f"cannot serialize diagnostic value {value!r}")


def _dec(value):
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    if isinstance(value, list):
        return tuple(_dec(v) for v in value)
    return value


def record_to_body(record: ModelRecord) -> dict:
    model = record.model
    meta = {k: _enc(v) for k, v in record.metadata.items()}
    meta["diagnostics"] = {k: _enc(v) for k, v in model.diagnostics.items()}
    meta["strategy"] = model.strategy
    return {
        "key": {
            "kernel": record.kernel,
            "flags": str(record.flags),
            "machine": record.machine,
            "threads": record.threads,
        },
        "metadata": meta,
        "domain": {"sizes": list(model.size_names), "bounds": [list(b) for b in model.domain]},
        "cells": [
            {
                "bounds": [list(b) for b in cell.bounds],
                "basis": [list(t.exponents) for t in cell.model.basis],
                "coefficients": {s: [_num(c) for c in cell.model.coefficients[s]] for s in STATS},
                "diagnostics": {k: _enc(v) for k, v in cell.diagnostics.items()},
            }
            for cell in model.cells
        ],
    }


def body_to_record(body: Mapping) -> ModelRecord:
    key = body["key"]
    meta = dict(body["metadata"])
    diagnostics = {k: _dec(v) for k, v in meta.pop("diagnostics", {}).items()}
    strategy = meta.get("strategy", "")
    metadata = {k: v if k in ("created", "strategy", "version") else _dec(v) for k, v in meta.items()}
    names = tuple(body["domain"]["sizes"])
    domain = tuple((int(lo), int(hi)) for lo, hi in body["domain"]["bounds"])
    cells = []
    for c in body["cells"]:
        basis = tuple(BasisTerm(tuple(int(e) for e in exps)) for exps in c["basis"])
        coefs = {s: tuple(float(v) for v in c["coefficients"][s]) for s in STATS}
        cells.append(Cell(
            tuple((int(lo), int(hi)) for lo, hi in c["bounds"]),
            PolynomialModel(basis, coefs),
            {k: _dec(v) for k, v in c.get("diagnostics", {}).items()},
        ))
    if not cells:
        raise InputError("model has no cells")
    model = PiecewiseModel(names, domain, tuple(cells), strategy, diagnostics)
    return ModelRecord(key["kernel"], FlagBinding.parse(key["flags"]), key["machine"],
                       int(key["threads"]), model, metadata)


def _canonical(body: Mapping) -> bytes:
    return json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def checksum(body: Mapping) -> str:
    return hashlib.sha256(_canonical(body)).hexdigest()


def dumps(record: ModelRecord) -> str:
    body = record_to_body(record)
    doc = {**body, "checksum": checksum(body)}
    return json.dumps(doc, indent=1, sort_keys=False, ensure_ascii=False) + "\n"


def loads(text: str, path=None) -> ModelRecord:
    try:
        doc = json.loads(text)
        stored = doc.pop("checksum")
        body = {k: doc[k] for k in ("key", "metadata", "domain", "cells")}
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise IntegrityError(f"{path}: not a valid model file ({exc})", path) from None
    if set(doc) != {"key", "metadata", "domain", "cells"}:
        raise IntegrityError(f"{path}: unexpected top-level fields {sorted(set(doc) - set(body))}", path)
    if checksum(body) != stored:
        raise IntegrityError(f"{path}: checksum mismatch, file was modified or corrupted", path)
    try:
        return body_to_record(body)
    except (KeyError, ValueError, TypeError) as exc:
        raise IntegrityError(f"{path}: malformed model body ({exc})", path) from None


# ---------------------------------------------------------------- operations

def store(record: ModelRecord, repo_root, force: bool = False) -> Path:
    path = record_path(repo_root, record.kernel, record.flags, record.machine, record.threads)
    if path.exists() and not force:
        raise RepositoryConflictError(f"model {record.key} already stored at {path}; use force to overwrite")
    text = dumps(record)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile("w", dir=path.parent, delete=False, encoding="utf-8",
                                     prefix=f".{path.name}.", suffix=".tmp") as fh:
        fh.write(text)
        tmp = Path(fh.name)
    os.replace(tmp, path)
    return path


def load(path) -> ModelRecord:
    path = Path(path)
    return loads(path.read_text(encoding="utf-8"), path)


def _scan(repo_root):
    root = Path(repo_root)
    if not root.exists():
        return []
    if not root.is_dir():
        raise OSError(f"repository root {root} is not a directory")
    return sorted(p for p in root.glob(f"*/*/*{SUFFIX}") if not p.name.startswith("."))


def _key_from_path(path: Path):
    stem = path.name[: -len(SUFFIX)]
    flags, _, threads = stem.rpartition(".t")
    return path.parent.parent.name, path.parent.name, flags, threads


def lookup(kernel, flags, machine, threads, repo_root) -> ModelRecord:
    """Exact-key lookup; no fallback across machines, flags or thread counts."""
    path = record_path(repo_root, kernel, flags, machine, threads)
    if path.exists():
        record = load(path)
        if record.key != (kernel, str(FlagBinding.of(flags)), machine, int(threads)):
            raise IntegrityError(f"{path}: stored key {record.key} does not match its location", path)
        return record
    nearby = []
    for p in _scan(repo_root):
        m, k, f, t = _key_from_path(p)
        if k == kernel:
            nearby.append((m != machine, f"{k} [{f.replace('_', ',')}] machine={m} threads={t}"))
    nearby.sort()
    available = [s for _, s in nearby]
    wanted = f"{kernel} [{FlagBinding.of(flags)}] machine={machine} threads={threads}"
    hint = f"; available: {'; '.join(available[:8])}" if available else ""
    raise MissingModelError(f"no model for {wanted}{hint}", missing=[wanted], available=available)


@dataclass(frozen=True)
class ModelSummary:
    kernel: str
    flags: str
    machine: str
    threads: int
    strategy: str
    cells: int
    max_rel_err: float
    version: str
    path: Path


def list_models(repo_root, kernel: str | None = None, machine: str | None = None) -> list[ModelSummary]:
    """Summaries of stored models, filtered by kernel/machine substrings."""
    out = []
    for path in _scan(repo_root):
        m, k, _, _ = _key_from_path(path)
        if (kernel and kernel not in k) or (machine and machine not in m):
            continue
        rec = load(path)
        out.append(ModelSummary(
            rec.kernel, str(rec.flags), rec.machine, rec.threads, rec.model.strategy,
            len(rec.model.cells), float(rec.model.diagnostics.get("max_rel_err", float("nan"))),
            str(rec.metadata.get("version", "")), path,
        ))
    return out
