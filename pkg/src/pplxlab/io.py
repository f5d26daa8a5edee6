"""Persistence: binary checkpoints, CSV tables, run manifests, and ingestion of
externally produced per-token log-probabilities.

Checkpoint layout (all integers little-endian)::

    b"PPLX"                     magic
    u32 version                 FORMAT_VERSION
    u32 n, n bytes              config, UTF-8 JSON
    32 bytes                    SHA-256 of the config bytes
    u64 step
    u32 count                   number of tensors, in param_shapes() order
    per tensor:
        u16 n, n bytes          name, UTF-8
        u32 ndim, ndim * u32    shape
        prod(shape) * f64       values, row-major
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .metrics import PplxReport, report_from_logprobs
from .model import ModelConfig, TransformerParams, param_shapes

MAGIC = b"PPLX"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class UnsupportedVersionError(CheckpointFormatError):
    pass


class IntegrityError(CheckpointFormatError):
    pass


@dataclass
class Checkpoint:
    params: TransformerParams
    config: ModelConfig
    step: int
    meta: dict = field(default_factory=dict)


def _config_blob(config: ModelConfig, meta: Mapping) -> bytes:
    return json.dumps({"model": config.to_dict(), "meta": dict(meta)}, sort_keys=True).encode()


def checkpoint_bytes(params: TransformerParams, config: ModelConfig, step: int,
                     meta: Mapping | None = None) -> bytes:
    blob = _config_blob(config, meta or {})
    shapes = param_shapes(config)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(blob)), blob,
             hashlib.sha256(blob).digest(), struct.pack("<Q", step), struct.pack("<I", len(shapes))]
    for name, shape in shapes.items():
        arr = np.asarray(params[name], dtype="<f8")
        if arr.shape != shape:
            raise ValueError(f"{name}: shape {arr.shape} does not match config {shape}")
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), np.ascontiguousarray(arr).tobytes()]
    return b"".join(parts)


def save_checkpoint(params: TransformerParams, config: ModelConfig, step: int, path,
                    meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(params, config, step, meta))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if len(r.buf) < 4 or r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version} is not supported")
    (n,) = r.unpack("<I")
    blob = r.take(n)
    if r.take(32) != hashlib.sha256(blob).digest():
        raise IntegrityError("config hash mismatch")
    try:
        doc = json.loads(blob.decode())
        config = ModelConfig.from_dict(doc["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"unreadable config: {exc}") from exc
    (step,) = r.unpack("<Q")
    (count,) = r.unpack("<I")
    shapes = param_shapes(config)
    if count != len(shapes):
        raise IntegrityError(f"{count} tensors stored, config needs {len(shapes)}")
    params = {}
    for name, shape in shapes.items():
        (nl,) = r.unpack("<H")
        got = r.take(nl).decode()
        (ndim,) = r.unpack("<I")
        dims = r.unpack(f"<{ndim}I")
        if got != name or tuple(dims) != shape:
            raise IntegrityError(f"tensor {got}{tuple(dims)} does not match config {name}{shape}")
        size = math.prod(shape)
        params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(r.buf):
        raise IntegrityError("trailing bytes after payload")
    return Checkpoint(params, config, step, doc.get("meta", {}))


# -- tables --------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """One header row, '.' decimals, LF endings; floats in shortest round-trip form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[dict[str, str]]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        rows = list(rd)
        return list(rd.fieldnames or []), rows


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    seeds: dict
    tool_version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: dict = field(default_factory=dict)  # relative path -> sha256

    def to_dict(self) -> dict:
        return {
            "command": self.command, "config": self.config, "seeds": self.seeds,
            "tool_version": self.tool_version, "started": self.started,
            "finished": self.finished, "outputs": self.outputs,
        }


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def write_manifest(run_dir, manifest: RunManifest, outputs: Iterable) -> Path:
    run_dir = Path(run_dir)
    manifest.outputs = {str(Path(p).resolve().relative_to(run_dir.resolve())): sha256_file(p)
                        for p in sorted(outputs, key=str)}
    manifest.finished = _now()
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def verify_manifest(path) -> list[str]:
    """Relative paths whose digest no longer matches; empty when all verify."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    bad = []
    for rel, digest in doc["outputs"].items():
        f = path.parent / rel
        if not f.exists() or sha256_file(f) != digest:
            bad.append(rel)
    return bad


# -- external log-probabilities ------------------------------------------------

class LogprobParseError(ValueError):
    pass


class LogprobValidationError(ValueError):
    pass


@dataclass
class SequenceLogprobs:
    sequence_id: str
    targets: list[str]
    emitted: list[str]
    logprobs: np.ndarray

    def to_report(self, floor: float = 1e-12) -> PplxReport:
        return report_from_logprobs(self.logprobs, self.emitted, self.targets, floor)


def ingest_logprobs(path) -> list[SequenceLogprobs]:
    """Read ``sequence_id target emitted logprob`` lines (whitespace separated).

    Blank lines and ``#`` comments are skipped.  Sequences keep first-seen
    order; steps keep file order.
    """
    seqs: dict[str, SequenceLogprobs] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 4:
                raise LogprobParseError(f"line {lineno}: expected 4 fields, got {len(fields)}")
            sid, tgt, emit, lp_s = fields
            try:
                lp = float(lp_s)
            except ValueError:
                raise LogprobParseError(f"line {lineno}: log-prob {lp_s!r} is not a number") from None
            if math.isnan(lp) or lp > 0:
                raise LogprobValidationError(f"line {lineno}: log-prob {lp_s} must be <= 0")
            s = seqs.setdefault(sid, SequenceLogprobs(sid, [], [], np.zeros(0)))
            s.targets.append(tgt)
            s.emitted.append(emit)
            s.logprobs = np.append(s.logprobs, lp)
    return list(seqs.values())
