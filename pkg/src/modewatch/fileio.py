"""Reading and writing the tool's file formats.

Every writer goes through :func:`atomic_write_text`, which writes a sibling
temporary file and renames it over the target, so an interrupted run leaves
either the old file or the complete new one. Floats are written with
``repr`` (shortest round-trip form), which keeps outputs byte-stable and
lossless.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .mixture import FitReport, MixtureModel


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def fmt(value) -> str:
    """Format a CSV cell: repr for floats, blank for None."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    return atomic_write_text(path, csv_text(header, rows))


def dumps_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=False, allow_nan=False) + "\n"


def write_json(path, doc) -> Path:
    return atomic_write_text(path, dumps_json(doc))


def load_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read: {exc.strerror}", path=str(path)) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=str(path)) from None


# -- delimited inputs --------------------------------------------------------


def _rows(path):
    """Yield ``(line_number, header, row)`` from a CSV file with a header."""
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise ParseError(f"cannot read: {exc.strerror}", path=str(path)) from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, expected a header row", line=1, path=str(path)) from None
        header = [h.strip() for h in header]
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, got {len(row)}",
                    line=reader.line_num,
                    path=str(path),
                )
            yield reader.line_num, header, row


def _float(text: str, what: str, line: int, path) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"{what}: not a number: {text!r}", line=line, path=str(path)) from None
    if not math.isfinite(v):
        raise ParseError(f"{what}: must be finite, got {text!r}", line=line, path=str(path))
    return v


def _int(text: str, what: str, line: int, path) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{what}: not an integer: {text!r}", line=line, path=str(path)) from None


@dataclass
class ErrorStream:
    t: np.ndarray
    epsilon: np.ndarray
    true_mode: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.epsilon)


def read_error_stream(path, column: str = "epsilon") -> ErrorStream:
    """Read ``t,epsilon[,true_mode]`` (or any file with ``t`` and ``column``).

    Raises:
        ParseError: naming the offending line.
    """
    ts, eps, modes = [], [], []
    header = None
    for line, header, row in _rows(path):
        if "t" not in header or column not in header:
            raise ParseError(f"header must contain 't' and {column!r}", line=1, path=str(path))
        rec = dict(zip(header, row))
        t = _int(rec["t"], "t", line, path)
        if ts and t <= ts[-1]:
            raise ParseError(f"t must be strictly increasing, got {t} after {ts[-1]}", line=line, path=str(path))
        ts.append(t)
        eps.append(_float(rec[column], column, line, path))
        if "true_mode" in rec and rec["true_mode"].strip() != "":
            modes.append(_int(rec["true_mode"], "true_mode", line, path))
    if header is None or not eps:
        raise ParseError("no data rows", line=1, path=str(path))
    mode_arr = np.array(modes, dtype=np.int64) if len(modes) == len(eps) else None
    return ErrorStream(np.array(ts, dtype=np.int64), np.array(eps), mode_arr)


def write_error_stream(path, epsilon, true_mode=None) -> Path:
    eps = np.asarray(epsilon, dtype=float)
    if true_mode is None:
        rows = ((t, e) for t, e in enumerate(eps.tolist(), start=1))
        return write_csv(path, ("t", "epsilon"), rows)
    modes = np.asarray(true_mode).tolist()
    rows = ((t, e, m) for t, (e, m) in enumerate(zip(eps.tolist(), modes), start=1))
    return write_csv(path, ("t", "epsilon", "true_mode"), rows)


TRAJECTORY_COLUMNS = ("scene_id", "agent_id", "t", "pred_x", "pred_y", "true_x", "true_y")


def read_trajectories(path) -> list[list[tuple[np.ndarray, np.ndarray]]]:
    """Group a trajectory CSV into scenes of ``(pred, truth)`` pairs.

    Scenes and agents keep their order of first appearance; points within an
    agent's trajectory are ordered by ``t``.
    """
    scenes: dict[str, dict[str, list]] = {}
    seen = set()
    for line, header, row in _rows(path):
        missing = [c for c in TRAJECTORY_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"missing columns: {', '.join(missing)}", line=1, path=str(path))
        rec = dict(zip(header, row))
        scene, agent = rec["scene_id"].strip(), rec["agent_id"].strip()
        t = _int(rec["t"], "t", line, path)
        if (scene, agent, t) in seen:
            raise ParseError(f"duplicate t={t} for scene {scene!r} agent {agent!r}", line=line, path=str(path))
        seen.add((scene, agent, t))
        vals = [_float(rec[c], c, line, path) for c in TRAJECTORY_COLUMNS[3:]]
        scenes.setdefault(scene, {}).setdefault(agent, []).append((t, vals))
    if not scenes:
        raise ParseError("no data rows", line=1, path=str(path))
    out = []
    for agents in scenes.values():
        pairs = []
        for pts in agents.values():
            arr = np.array([v for _, v in sorted(pts, key=lambda p: p[0])])
            pairs.append((arr[:, 0:2], arr[:, 2:4]))
        out.append(pairs)
    return out


def write_metrics(path, records) -> Path:
    rows = ((r.t, r.ade, r.fde, r.rmse) for r in records)
    return write_csv(path, ("t", "ade", "fde", "rmse"), rows)


# -- models ------------------------------------------------------------------


def write_model(path, model: MixtureModel, report: FitReport | None = None) -> Path:
    doc = {"model": model.to_dict()}
    if report is not None:
        doc["fit"] = report.to_dict()
    return write_json(path, doc)


def read_model(path) -> MixtureModel:
    doc = load_json(path)
    if isinstance(doc, dict) and "model" in doc:
        doc = doc["model"]
    return MixtureModel.from_dict(doc)


# -- traces ------------------------------------------------------------------


def trace_header(k: int) -> tuple[str, ...]:
    return (
        ("t", "epsilon", "mode_est", "llr")
        + tuple(f"W{m}" for m in range(k))
        + tuple(f"theta{m}" for m in range(k))
        + ("alarmed",)
    )


def write_trace(path, rows: Iterable[Sequence], k: int = 2) -> Path:
    return write_csv(path, trace_header(k), rows)


# -- manifests ---------------------------------------------------------------


@dataclass
class RunManifest:
    """Provenance for one command run.

    Timestamps are kept here and nowhere else, so every other output of a
    rerun is byte-identical.
    """

    config_digest: str
    tool_version: str
    schema_version: int
    master_seed: int
    started_at: str
    finished_at: str
    outputs: list[str] = field(default_factory=list)
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "tool_version": self.tool_version,
            "schema_version": self.schema_version,
            "master_seed": self.master_seed,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "outputs": list(self.outputs),
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError("manifest", str(exc)) from None

    def verify(self, config_doc: dict) -> bool:
        from .harness import config_digest

        return config_digest(config_doc) == self.config_digest
