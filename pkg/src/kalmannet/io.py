"""Dataset container files.

Layout (all header lines are UTF-8, ``\\n`` terminated)::

    KNETDS 1
    m: <int>
    n: <int>
    T: <int>
    N: <int>
    labeled: <0|1>
    seed: <int>
    model: <single-line JSON model descriptor>
    payload: f8-le
    END
    <binary payload>

The payload is a sequence of little-endian float64 values, trajectory by
trajectory: ``x0`` (m values), then ``states`` row-major (T*m values, only when
labeled), then ``observations`` row-major (T*n values).
"""
from __future__ import annotations

import json

import numpy as np

from kalmannet.errors import DimensionError, MalformedFileError
from kalmannet.ssm import Dataset, Trajectory

MAGIC = "KNETDS"
VERSION = 1
_HEADER_KEYS = ("m", "n", "T", "N", "labeled", "seed", "model", "payload")
_LE_F8 = np.dtype("<f8")


def save_dataset(ds: Dataset, path) -> None:
    T = ds.T
    header = [
        f"{MAGIC} {VERSION}",
        f"m: {ds.m}",
        f"n: {ds.n}",
        f"T: {T}",
        f"N: {len(ds)}",
        f"labeled: {int(ds.labeled)}",
        f"seed: {ds.seed}",
        f"model: {json.dumps(ds.model_descriptor, sort_keys=True)}",
        "payload: f8-le",
        "END",
    ]
    chunks = []
    for tr in ds:
        chunks.append(tr.x0)
        if ds.labeled:
            chunks.append(tr.states.ravel())
        chunks.append(tr.observations.ravel())
    payload = np.concatenate(chunks).astype(_LE_F8)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        fh.write(payload.tobytes())


def _parse_header(fh):
    first = fh.readline().decode("utf-8", errors="replace").split()
    if len(first) != 2 or first[0] != MAGIC:
        raise MalformedFileError("not a dataset file (bad magic)")
    if first[1] != str(VERSION):
        raise MalformedFileError(f"unsupported dataset format version {first[1]}")
    fields = {}
    while True:
        line = fh.readline()
        if not line:
            raise MalformedFileError("header ended before END marker")
        text = line.decode("utf-8", errors="replace").rstrip("\n")
        if text == "END":
            break
        key, sep, value = text.partition(": ")
        if not sep:
            raise MalformedFileError(f"bad header line {text!r}")
        fields[key] = value
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise MalformedFileError(f"header is missing {missing}")
    if fields["payload"] != "f8-le":
        raise MalformedFileError(f"unsupported payload encoding {fields['payload']!r}")
    try:
        dims = {k: int(fields[k]) for k in ("m", "n", "T", "N", "labeled", "seed")}
        model = json.loads(fields["model"])
    except ValueError as exc:
        raise MalformedFileError(f"unparseable header value: {exc}") from exc
    return dims, model


def load_dataset(path) -> Dataset:
    """Read a dataset file; raises ``OSError``, ``MalformedFileError`` or ``DimensionError``."""
    with open(path, "rb") as fh:
        dims, model = _parse_header(fh)
        raw = fh.read()
    m, n, T, N, labeled = dims["m"], dims["n"], dims["T"], dims["N"], bool(dims["labeled"])
    if min(m, n, T, N) < 1 or dims["labeled"] not in (0, 1):
        raise DimensionError(f"invalid dimensions in header: {dims}")
    per_traj = m + (T * m if labeled else 0) + T * n
    expected = per_traj * N * _LE_F8.itemsize
    if len(raw) != expected:
        raise MalformedFileError(f"payload has {len(raw)} bytes, header implies {expected}")
    model_m = len(model.get("F", model.get("H", [])))
    if model.get("kind") == "linear" and (model_m != m or len(model["H"]) != n):
        raise DimensionError("model descriptor dimensions disagree with header")
    values = np.frombuffer(raw, dtype=_LE_F8).astype(np.float64).reshape(N, per_traj)
    trajs = []
    for row in values:
        x0 = row[:m].copy()
        pos = m
        states = None
        if labeled:
            states = row[pos:pos + T * m].reshape(T, m).copy()
            pos += T * m
        obs = row[pos:].reshape(T, n).copy()
        trajs.append(Trajectory(x0, obs, states))
    return Dataset(trajs, labeled, dims["seed"], model)

