"""Trajectory datasets and run manifests on disk.

Dataset files are newline-delimited JSON: one header line describing the
potential and simulation settings, then one trajectory per line.  Python's
float ``repr`` is the shortest round-trip decimal, so values survive a
write/read cycle bit-exactly.  Manifests are flat ``key = <json>`` files.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import tempfile
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .dynamics import K_B, SimConfig, Trajectory, classify_channel
from .errors import DatasetError, MergeConflict, UnsupportedVersion
from .potentials import PotentialSpec

DATASET_FORMAT = "rarebias-trajectories"
SCHEMA_VERSION = 1
MANIFEST_VERSION = 1


@dataclass
class TrajectoryRecord:
    seed: int
    success: bool
    channel: str
    positions: np.ndarray
    noises: np.ndarray | None = None
    index: int = 0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if len(self.positions) < 1:
            raise DatasetError("a trajectory needs at least one position")
        if self.noises is not None:
            self.noises = np.asarray(self.noises, dtype=float).reshape(-1, 2)
            if len(self.noises) != len(self.positions) - 1:
                raise DatasetError("noises must be exactly one shorter than positions")

    def content_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.positions, dtype="<f8").tobytes()).hexdigest()

    def to_trajectory(self) -> Trajectory:
        L = len(self.positions) - 1
        return Trajectory(self.positions.copy(), None if self.noises is None else self.noises.copy(),
                          L if self.success else None, self.success, self.seed, self.index)

    @classmethod
    def from_trajectory(cls, t: Trajectory, keep_noises: bool = True) -> "TrajectoryRecord":
        return cls(t.seed, bool(t.success), classify_channel(t), t.positions,
                   t.noises if keep_noises else None, t.index)

    def to_json(self) -> str:
        d = {
            "schema_version": self.schema_version,
            "seed": int(self.seed),
            "index": int(self.index),
            "success": bool(self.success),
            "channel": self.channel,
            "positions": self.positions.tolist(),
            "noises": None if self.noises is None else self.noises.tolist(),
        }
        return json.dumps(d, separators=(",", ":"))


def dataset_header(potential: PotentialSpec, cfg: SimConfig, **extra) -> dict:
    return {
        "format": DATASET_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "potential": potential.to_dict(),
        "potential_hash": potential.content_hash(),
        "sim": cfg.to_dict(),
        **extra,
    }


def _atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(records, path, header: dict) -> None:
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(r.to_json() for r in records)
    _atomic_write(path, "\n".join(lines) + "\n")


def read_dataset(path) -> tuple[dict, list[TrajectoryRecord]]:
    """Parse a dataset file; errors name the offending line."""
    records = []
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:1: malformed header ({exc.msg})") from exc
        if header.get("format") != DATASET_FORMAT:
            raise DatasetError(f"{path}:1: not a trajectory dataset")
        if header.get("schema_version") != SCHEMA_VERSION:
            raise UnsupportedVersion(f"{path}: schema version {header.get('schema_version')} is not supported (expected {SCHEMA_VERSION})")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
                    raise UnsupportedVersion(f"{path}:{lineno}: unsupported record version {d['schema_version']}")
                records.append(TrajectoryRecord(
                    int(d["seed"]), bool(d["success"]), d.get("channel", "none"),
                    np.array(d["positions"], dtype=float),
                    None if d.get("noises") is None else np.array(d["noises"], dtype=float),
                    int(d.get("index", 0)),
                ))
            except UnsupportedVersion:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed trajectory record ({exc})") from exc
    return header, records


MERGE_KEYS = (("sim", "dt"), ("sim", "n_steps"), ("potential_hash",))


def _get(header, key):
    v = header
    for k in key:
        v = v.get(k) if isinstance(v, dict) else None
    return v


def merge_datasets(paths) -> tuple[dict, list[TrajectoryRecord], dict]:
    """Concatenate datasets, dropping duplicates by ``(seed, content hash)``.

    Returns ``(header, records, channel_counts)``; the header is the first
    file's.  Raises MergeConflict when step size, horizon or potential differ.
    """
    paths = list(paths)
    if not paths:
        raise DatasetError("no datasets to merge")
    merged, seen = [], set()
    base = None
    for p in paths:
        header, recs = read_dataset(p)
        if base is None:
            base = header
        else:
            bad = {".".join(k): (_get(base, k), _get(header, k)) for k in MERGE_KEYS if _get(base, k) != _get(header, k)}
            if bad:
                raise MergeConflict(bad)
        for r in recs:
            key = (r.seed, r.content_hash())
            if key in seen:
                continue
            seen.add(key)
            merged.append(r)
    counts = dict(Counter(r.channel for r in merged))
    return base, merged, counts


# ------------------------------------------------------------------ manifests

def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _unflatten(flat: dict) -> dict:
    out: dict = {}
    for key, v in flat.items():
        cur = out
        parts = key.split(".")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = v
    return out


def write_manifest(path, content: dict) -> None:
    body = {"schema_version": MANIFEST_VERSION,
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            **content}
    flat = _flatten(body)
    text = "".join(f"{k} = {json.dumps(v)}\n" for k, v in flat.items())
    _atomic_write(path, text)


def read_manifest(path) -> dict:
    flat = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition(" = ")
            if not sep:
                raise DatasetError(f"{path}:{lineno}: expected 'key = value'")
            try:
                flat[key] = json.loads(val)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: bad value ({exc.msg})") from exc
    m = _unflatten(flat)
    if m.get("schema_version") != MANIFEST_VERSION:
        raise UnsupportedVersion(f"{path}: manifest version {m.get('schema_version')} is not supported")
    sim = m.get("sim")
    if sim and "eps" in sim:
        expect = 2.0 * K_B * sim["temperature"] / (sim["mass"] * sim["gamma"])
        if abs(sim["eps"] - expect) > 1e-15 * abs(expect):
            raise DatasetError(f"{path}: eps {sim['eps']} inconsistent with T, m, gamma ({expect})")
    return m
