"""Text checkpoints for gain-network parameters and optimizer state.

Format::

    KNETCKPT 1
    dims m n d_in d_h d_g
    block <name> <rows> <cols>      # cols is 0 for vectors
    <row values, space separated, %.17g>
    ...
    optimizer adam <lr> <beta1> <beta2> <eps> <step>     # optional
    moment1 <name> <rows> <cols>
    ...
    moment2 <name> <rows> <cols>
    ...
    END

Values are printed with 17 significant digits, which round-trips float64 exactly.
"""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from kalmannet.errors import DimensionError, InvalidArgumentError, MalformedFileError
from kalmannet.nn.layers import PARAM_NAMES, GainNetworkParams
from kalmannet.nn.optim import OptimizerState

__all__ = ["save_checkpoint", "load_checkpoint"]

MAGIC = "KNETCKPT"
VERSION = 1


def _fmt(x: float) -> str:
    return "%.17g" % x


def _write_block(lines, tag, name, arr):
    arr = np.asarray(arr)
    rows, cols = (arr.shape[0], 0) if arr.ndim == 1 else arr.shape
    lines.append(f"{tag} {name} {rows} {cols}")
    if arr.ndim == 1:
        lines.append(" ".join(map(_fmt, arr)))
    else:
        lines.extend(" ".join(map(_fmt, row)) for row in arr)


def save_checkpoint(path, params: GainNetworkParams, opt: Optional[OptimizerState] = None) -> None:
    lines = [f"{MAGIC} {VERSION}", f"dims {params.m} {params.n} {params.d_in} {params.d_h} {params.d_g}"]
    for name in PARAM_NAMES:
        _write_block(lines, "block", name, params.tensors[name])
    if opt is not None:
        lines.append(f"optimizer adam {_fmt(opt.learning_rate)} {_fmt(opt.beta1)} {_fmt(opt.beta2)} "
                     f"{_fmt(opt.eps)} {opt.step}")
        for tag, moments in (("moment1", opt.moment1), ("moment2", opt.moment2)):
            for name in PARAM_NAMES:
                if name in moments:
                    _write_block(lines, tag, name, moments[name])
    lines.append("END")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_block(lines, pos, header):
    parts = header.split()
    if len(parts) != 4:
        raise MalformedFileError(f"bad block header {header!r}")
    _, name, rows, cols = parts
    rows, cols = int(rows), int(cols)
    n_lines = 1 if cols == 0 else rows
    if pos + n_lines > len(lines):
        raise MalformedFileError(f"checkpoint truncated inside block {name}")
    try:
        data = [np.array([float(v) for v in lines[pos + i].split()]) for i in range(n_lines)]
    except ValueError as exc:
        raise MalformedFileError(f"bad value in block {name}: {exc}") from exc
    arr = data[0] if cols == 0 else np.vstack(data) if rows else np.zeros((0, cols))
    expected = (rows,) if cols == 0 else (rows, cols)
    if arr.shape != expected:
        raise MalformedFileError(f"block {name} has shape {arr.shape}, header says {expected}")
    return name, arr, pos + n_lines


def load_checkpoint(path) -> Tuple[GainNetworkParams, Optional[OptimizerState]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0].split() != [MAGIC, str(VERSION)]:
        raise MalformedFileError("not a checkpoint file (bad magic or version)")
    if "END" not in lines:
        raise MalformedFileError("checkpoint truncated (no END marker)")
    parts = lines[1].split() if len(lines) > 1 else []
    if len(parts) != 6 or parts[0] != "dims":
        raise MalformedFileError("bad dims line")
    try:
        m, n, d_in, d_h, d_g = map(int, parts[1:])
    except ValueError as exc:
        raise MalformedFileError("bad dims line") from exc
    tensors = {}
    opt = None
    pos = 2
    while lines[pos] != "END":
        header = lines[pos]
        tag = header.split()[0] if header else ""
        if tag == "block":
            name, arr, pos = _read_block(lines, pos + 1, header)
            tensors[name] = arr
        elif tag == "optimizer":
            parts = header.split()
            if len(parts) != 7 or parts[1] != "adam":
                raise MalformedFileError(f"bad optimizer line {header!r}")
            opt = OptimizerState(float(parts[2]), float(parts[3]), float(parts[4]), float(parts[5]), int(parts[6]))
            pos += 1
        elif tag in ("moment1", "moment2"):
            if opt is None:
                raise MalformedFileError("moment block before optimizer line")
            name, arr, pos = _read_block(lines, pos + 1, header)
            getattr(opt, tag)[name] = arr
        else:
            raise MalformedFileError(f"unexpected line {header!r}")
    try:
        params = GainNetworkParams(m, n, d_in, d_h, d_g, tensors)
    except InvalidArgumentError as exc:
        raise DimensionError(f"checkpoint blocks do not match its dims line: {exc}") from exc
    return params, opt
