"""Metric reports and CSV emission."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

__all__ = ["MetricRow", "MetricReport", "Check", "ExperimentResult", "write_csv"]

COLUMNS = ("inv_r2_db", "nu_db", "estimator", "mse_db", "runtime", "T", "N", "status")


@dataclass
class MetricRow:
    inv_r2_db: float
    nu_db: float
    estimator: str
    mse_db: float
    runtime: float      # seconds of inference per trajectory
    T: int
    N: int
    status: str = "ok"

    def cells(self) -> list:
        return [_num(self.inv_r2_db), _num(self.nu_db), self.estimator, _num(self.mse_db),
                _num(self.runtime), self.T, self.N, self.status]


def _num(x) -> str:
    if isinstance(x, float) and math.isinf(x):
        return "-inf" if x < 0 else "inf"
    return "%.17g" % x


@dataclass
class MetricReport:
    rows: List[MetricRow] = field(default_factory=list)

    def add(self, *args, **kwargs) -> MetricRow:
        row = MetricRow(*args, **kwargs)
        self.rows.append(row)
        return row

    def find(self, estimator: str, inv_r2_db: Optional[float] = None, T: Optional[int] = None) -> MetricRow:
        for r in self.rows:
            if r.estimator == estimator and (inv_r2_db is None or r.inv_r2_db == inv_r2_db) \
                    and (T is None or r.T == T):
                return r
        raise KeyError((estimator, inv_r2_db, T))

    def estimators(self) -> List[str]:
        return sorted({r.estimator for r in self.rows})

    def to_csv(self, path, meta: Optional[Dict] = None) -> None:
        write_csv(path, COLUMNS, [r.cells() for r in self.rows], meta)

    def __len__(self):
        return len(self.rows)


def write_csv(path, header, rows, meta: Optional[Dict] = None) -> None:
    """CSV with ``# key: value`` metadata lines (config hash, seed) above the header."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


@dataclass
class Check:
    """One acceptance gate evaluated by an experiment."""
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class ExperimentResult:
    report: MetricReport
    checks: List[Check] = field(default_factory=list)
    files: Dict[str, str] = field(default_factory=dict)
    extras: Dict[str, object] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str, passed: bool, detail: str) -> Check:
        c = Check(name, bool(passed), detail)
        self.checks.append(c)
        return c
