# formats/reports.py
"""CSV schemas for experiment reports.

detail.csv   one row per (patient_id, strategy, session, n_train, seed)
summary.csv  one row per (strategy, session, n_train), cohort means over patients
table1.csv   one row per (dataset group, strategy) plus "Averaged", T1 and T2 side by side
tests.csv    PS-vs-MP paired tests per (n_train, session, metric)

Floats are written with 9 significant digits; missing cells carry status "missing".
"""
import csv
import os
from typing import Dict, List, Sequence

from tumor_shared import FormatError, InputNotFoundError

DETAIL_COLUMNS = ["patient_id", "group", "strategy", "session", "n_train", "seed", "n_samples",
                  "ade_mean", "ade_sd", "fde_mean", "fde_sd", "status", "train_patients", "message"]
SUMMARY_COLUMNS = ["strategy", "session", "n_train", "n_patients",
                   "ade_mean", "ade_sd_patients", "ade_sd_samples",
                   "fde_mean", "fde_sd_patients", "fde_sd_samples"]
TEST_COLUMNS = ["n_train", "session", "metric", "n", "t", "p", "df", "significant", "degenerate"]
TABLE1_COLUMNS = ["dataset", "strategy", "n_train", "n_patients",
                  "t1_ade", "t1_ade_sd", "t1_fde", "t1_fde_sd",
                  "t2_ade", "t2_ade_sd", "t2_fde", "t2_fde_sd"]

_INTS = {"n_train", "seed", "n_samples", "n_patients", "n", "df"}
_FLOATS = {"ade_mean", "ade_sd", "fde_mean", "fde_sd", "ade_sd_patients", "ade_sd_samples",
           "fde_sd_patients", "fde_sd_samples", "t", "p",
           "t1_ade", "t1_ade_sd", "t1_fde", "t1_fde_sd", "t2_ade", "t2_ade_sd", "t2_fde", "t2_fde_sd"}
_BOOLS = {"significant", "degenerate"}


def fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.9g}"
    return "" if value is None else str(value)


def write_rows(path: str, columns: Sequence[str], rows: Sequence[Dict]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in columns])
    return path


def _parse(key: str, raw: str):
    if raw == "":
        return None
    if key in _INTS:
        return int(raw)
    if key in _FLOATS:
        return float(raw)
    if key in _BOOLS:
        return raw == "1"
    return raw


def read_rows(path: str, columns: Sequence[str]) -> List[Dict]:
    if not os.path.exists(path):
        raise InputNotFoundError(f"report not found: {path}")
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != list(columns):
            raise FormatError(f"{path}: unexpected columns {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(columns):
                raise FormatError(f"{path}: line {lineno} has {len(rec)} fields, expected {len(columns)}")
            try:
                rows.append({c: _parse(c, v) for c, v in zip(columns, rec)})
            except ValueError as e:
                raise FormatError(f"{path}: line {lineno}: {e}")
    return rows
