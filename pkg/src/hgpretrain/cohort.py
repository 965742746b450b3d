"""Cohort tables and their CSV layout.

A cohort lives in one directory as three files sharing the ``patient_id``
key: ``baseline.csv`` (numeric, empty cell = missing), ``diagnostic.csv``
(0/1) and ``labels.csv`` (``patient_id,label``).  A pre-training cohort may
omit ``baseline.csv`` and, for self-supervised use, ``labels.csv``.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BASELINE_FILE = "baseline.csv"
DIAGNOSTIC_FILE = "diagnostic.csv"
LABEL_FILE = "labels.csv"


class SchemaError(ValueError):
    """CSV header does not match what the reader expects."""


@dataclass
class Cohort:
    patient_ids: list[str]
    diagnostic: np.ndarray
    diagnostic_names: list[str]
    baseline: np.ndarray | None = None
    baseline_names: list[str] | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.patient_ids)
        self.diagnostic = np.asarray(self.diagnostic, dtype=np.int8)
        if self.diagnostic.shape != (n, len(self.diagnostic_names)):
            raise ValueError(f"diagnostic matrix {self.diagnostic.shape} vs {n} x {len(self.diagnostic_names)}")
        if not np.isin(self.diagnostic, (0, 1)).all():
            raise ValueError("diagnostic entries must be 0/1")
        if self.baseline is not None:
            self.baseline = np.asarray(self.baseline, dtype=np.float64)
            if self.baseline_names is None:
                self.baseline_names = [f"b_{j}" for j in range(self.baseline.shape[1])]
            if self.baseline.shape != (n, len(self.baseline_names)):
                raise ValueError(f"baseline matrix {self.baseline.shape} vs {n} x {len(self.baseline_names)}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,) or not np.isin(self.labels, (0, 1)).all():
                raise ValueError("labels must be one 0/1 value per patient")

    @property
    def n(self) -> int:
        return len(self.patient_ids)

    def subset(self, idx) -> "Cohort":
        idx = np.asarray(idx)
        return Cohort([self.patient_ids[i] for i in idx], self.diagnostic[idx], list(self.diagnostic_names),
                      None if self.baseline is None else self.baseline[idx], self.baseline_names,
                      None if self.labels is None else self.labels[idx])


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def write_table(path, header: list[str], ids: list[str], matrix, fmt=str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for pid, row in zip(ids, matrix):
            w.writerow([pid] + [fmt(v) for v in row])


def read_table(path, expected: list[str] | None = None) -> tuple[list[str], list[str], list[list[str]]]:
    """Return (column names after patient_id, ids, raw string cells)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if not header or header[0] != "patient_id":
            raise SchemaError(f"{path}: first column must be patient_id, got {header[:1]}")
        names = header[1:]
        if expected is not None and names != expected:
            missing = [c for c in expected if c not in names]
            extra = [c for c in names if c not in expected]
            raise SchemaError(f"{path}: header mismatch; missing={missing} unexpected={extra}")
        ids, cells = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            ids.append(row[0])
            cells.append(row[1:])
    return names, ids, cells


def _parse_float(cell: str) -> float:
    return float("nan") if cell.strip() == "" else float(cell)


def write_cohort(directory, cohort: Cohort) -> dict[str, str]:
    """Write the cohort's CSVs; return file name -> sha256."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_table(d / DIAGNOSTIC_FILE, ["patient_id"] + cohort.diagnostic_names, cohort.patient_ids,
                cohort.diagnostic)
    if cohort.baseline is not None:
        write_table(d / BASELINE_FILE, ["patient_id"] + cohort.baseline_names, cohort.patient_ids,
                    cohort.baseline, _fmt)
    if cohort.labels is not None:
        write_table(d / LABEL_FILE, ["patient_id", "label"], cohort.patient_ids, cohort.labels[:, None])
    return {p.name: file_sha256(p) for p in sorted(d.iterdir()) if p.suffix == ".csv"}


def read_cohort(directory, require_labels: bool = True, require_baseline: bool = False) -> Cohort:
    d = Path(directory)
    if not (d / DIAGNOSTIC_FILE).exists():
        raise FileNotFoundError(f"{d / DIAGNOSTIC_FILE} not found")
    names, ids, cells = read_table(d / DIAGNOSTIC_FILE)
    try:
        diag = np.array([[int(c) for c in row] for row in cells], dtype=np.int8).reshape(len(ids), len(names))
    except ValueError as exc:
        raise SchemaError(f"{d / DIAGNOSTIC_FILE}: non-integer cell ({exc})") from None
    baseline = base_names = labels = None
    if (d / BASELINE_FILE).exists():
        base_names, bids, bcells = read_table(d / BASELINE_FILE)
        _check_ids(d / BASELINE_FILE, ids, bids)
        baseline = np.array([[_parse_float(c) for c in row] for row in bcells]).reshape(len(ids), len(base_names))
    elif require_baseline:
        raise FileNotFoundError(f"{d / BASELINE_FILE} not found")
    if (d / LABEL_FILE).exists():
        _, lids, lcells = read_table(d / LABEL_FILE, ["label"])
        _check_ids(d / LABEL_FILE, ids, lids)
        labels = np.array([int(r[0]) for r in lcells], dtype=np.int64)
    elif require_labels:
        raise FileNotFoundError(f"{d / LABEL_FILE} not found")
    return Cohort(ids, diag, names, baseline, base_names, labels)


def _check_ids(path, expected, got) -> None:
    if list(expected) != list(got):
        raise SchemaError(f"{path}: patient_id column differs from {DIAGNOSTIC_FILE}")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_sha256(directory) -> dict[str, str]:
    """Hash every regular file under ``directory`` (relative path -> sha256)."""
    out = {}
    for root, _, files in os.walk(directory):
        for f in sorted(files):
            p = Path(root) / f
            out[str(p.relative_to(directory))] = file_sha256(p)
    return dict(sorted(out.items()))
