"""Panel dataset container, CSV ingestion, and preprocessing.

Row and column ordering is semantically meaningful (it fixes which series
occupy the identified leading blocks), so ingestion never infers it: the
layout descriptor must declare `row_order` and `col_order` explicitly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Raised for malformed input data or inapplicable preprocessing."""


@dataclass
class PanelDataset:
    """T x n x k panel with NaN marking missing cells.

    `transforms` records, per series key "row:col", the preprocessing steps
    applied so far (descriptive, not invertible).
    """

    values: np.ndarray
    row_labels: list[str]
    col_labels: list[str]
    time_index: list
    transforms: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.validate()

    def validate(self):
        T, n, k = self.values.shape
        if len(self.row_labels) != n:
            raise DataError(f"{len(self.row_labels)} row labels for {n} rows")
        if len(self.col_labels) != k:
            raise DataError(f"{len(self.col_labels)} column labels for {k} columns")
        if len(self.time_index) != T:
            raise DataError(f"{len(self.time_index)} time points for T = {T}")
        for a, b in zip(self.time_index, self.time_index[1:]):
            if not a < b:
                raise DataError(f"time index not strictly increasing at {b!r}")

    @property
    def shape(self):
        return self.values.shape

    def series_key(self, i: int, j: int) -> str:
        return f"{self.row_labels[i]}:{self.col_labels[j]}"

    def log_transform(self, i: int, j: int, entry: str):
        self.transforms.setdefault(self.series_key(i, j), []).append(entry)

    def copy(self) -> "PanelDataset":
        return PanelDataset(values=self.values.copy(),
                            row_labels=list(self.row_labels),
                            col_labels=list(self.col_labels),
                            time_index=list(self.time_index),
                            transforms={k: list(v)
                                        for k, v in self.transforms.items()})

    def equals(self, other: "PanelDataset") -> bool:
        return (self.row_labels == other.row_labels
                and self.col_labels == other.col_labels
                and list(self.time_index) == list(other.time_index)
                and self.values.shape == other.values.shape
                and np.array_equal(np.isnan(self.values), np.isnan(other.values))
                and np.allclose(np.nan_to_num(self.values),
                                np.nan_to_num(other.values),
                                rtol=0.0, atol=1e-15))


def _parse_time(raw):
    """Numeric time values compare numerically, anything else as strings."""
    vals = []
    for r in raw:
        try:
            vals.append(float(r))
        except (TypeError, ValueError):
            return [str(r) for r in raw]
    return vals


def ingest_csv(path, layout: dict) -> PanelDataset:
    """Read a CSV into a PanelDataset under an explicit layout descriptor.

    layout keys:
      format: "long" (columns time,row,col,value) or "wide" (one row per
              time point, data columns named "<row><sep><col>")
      row_order, col_order: required label lists fixing tensor ordering
      time_column / row_column / col_column / value_column: long-format
              column names (defaults "time","row","col","value")
      sep: wide-format header separator (default ":")
    """
    fmt = layout.get("format")
    if fmt not in ("long", "wide"):
        raise DataError(f"layout format must be 'long' or 'wide', got {fmt!r}")
    if "row_order" not in layout or "col_order" not in layout:
        raise DataError("layout must declare row_order and col_order; "
                        "ordering is never inferred from the file")
    rows = [str(r) for r in layout["row_order"]]
    cols = [str(c) for c in layout["col_order"]]
    ri = {r: i for i, r in enumerate(rows)}
    ci = {c: j for j, c in enumerate(cols)}
    if len(ri) != len(rows) or len(ci) != len(cols):
        raise DataError("duplicate labels in row_order or col_order")

    df = pd.read_csv(path, dtype=str, keep_default_na=False)

    if fmt == "long":
        tc = layout.get("time_column", "time")
        rc = layout.get("row_column", "row")
        cc = layout.get("col_column", "col")
        vc = layout.get("value_column", "value")
        for c in (tc, rc, cc, vc):
            if c not in df.columns:
                raise DataError(f"missing column {c!r} in {path}")
        times_raw = list(dict.fromkeys(df[tc]))
        time_index = _parse_time(times_raw)
        order = np.argsort(np.asarray(time_index, dtype=object), kind="stable")
        time_index = [time_index[i] for i in order]
        times_sorted = [times_raw[i] for i in order]
        ti = {t: i for i, t in enumerate(times_sorted)}
        T = len(ti)
        values = np.full((T, len(rows), len(cols)), np.nan)
        seen = np.zeros((T, len(rows), len(cols)), dtype=bool)
        for t_raw, r, c, v in zip(df[tc], df[rc], df[cc], df[vc]):
            if r not in ri:
                raise DataError(f"unknown row label {r!r}")
            if c not in ci:
                raise DataError(f"unknown column label {c!r}")
            t, i, j = ti[t_raw], ri[r], ci[c]
            if seen[t, i, j]:
                raise DataError(f"duplicate cell (time={t_raw}, row={r}, col={c})")
            seen[t, i, j] = True
            values[t, i, j] = float(v) if v not in ("", "NaN", "nan", "NA") \
                else np.nan
        missing_cells = ~seen
        if missing_cells.any():
            t, i, j = map(int, np.argwhere(missing_cells)[0])
            raise DataError(
                f"ragged panel: no cell for (time={times_sorted[t]}, "
                f"row={rows[i]}, col={cols[j]})")
        return PanelDataset(values=values, row_labels=rows, col_labels=cols,
                            time_index=time_index)

    tc = layout.get("time_column", "time")
    sep = layout.get("sep", ":")
    if tc not in df.columns:
        raise DataError(f"missing column {tc!r} in {path}")
    expected = {f"{r}{sep}{c}": (ri[r], ci[c]) for r in rows for c in cols}
    for name in df.columns:
        if name != tc and name not in expected:
            raise DataError(f"unknown series column {name!r}")
    absent = [name for name in expected if name not in df.columns]
    if absent:
        raise DataError(f"ragged panel: missing series column {absent[0]!r}")
    times_raw = list(df[tc])
    if len(set(times_raw)) != len(times_raw):
        dup = next(t for t in times_raw if times_raw.count(t) > 1)
        raise DataError(f"duplicate cell (time={dup}: repeated time row)")
    time_index = _parse_time(times_raw)
    order = np.argsort(np.asarray(time_index, dtype=object), kind="stable")
    time_index = [time_index[i] for i in order]
    values = np.full((len(time_index), len(rows), len(cols)), np.nan)
    for name, (i, j) in expected.items():
        col = [df[name].iloc[t] for t in order]
        values[:, i, j] = [float(v) if v not in ("", "NaN", "nan", "NA")
                           else np.nan for v in col]
    return PanelDataset(values=values, row_labels=rows, col_labels=cols,
                        time_index=time_index)


def serialize_dataset(ds: PanelDataset, csv_path) -> dict:
    """Write the panel as a long-format CSV (atomically) plus a JSON sidecar
    with the layout and transform log. Returns the layout descriptor, which
    re-ingests to an identical dataset."""
    csv_path = Path(csv_path)
    lines = ["time,row,col,value"]
    T, n, k = ds.values.shape
    for t in range(T):
        tv = ds.time_index[t]
        tstr = format(tv, ".17g") if isinstance(tv, float) else str(tv)
        for i in range(n):
            for j in range(k):
                v = ds.values[t, i, j]
                vstr = "" if np.isnan(v) else format(v, ".17g")
                lines.append(f"{tstr},{ds.row_labels[i]},{ds.col_labels[j]},{vstr}")
    tmp = csv_path.with_suffix(csv_path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.rename(csv_path)
    layout = {"format": "long", "row_order": list(ds.row_labels),
              "col_order": list(ds.col_labels)}
    meta = dict(layout, transforms=ds.transforms)
    meta_path = csv_path.with_suffix(csv_path.suffix + ".meta.json")
    tmp = meta_path.with_suffix(".tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True))
    tmp.rename(meta_path)
    return layout


_WMA_WEIGHTS = (0.5, 0.3, 0.2)   # lags 1, 2, 3


def preprocess(ds: PanelDataset, ops) -> PanelDataset:
    """Apply a sequence of per-series operations, returning a new dataset.

    ops entries: "difference", "log-difference", "standardize", "impute-wma".
    Differencing drops the first time point. Imputation replaces each missing
    y_t with 0.5 y_{t-1} + 0.3 y_{t-2} + 0.2 y_{t-3} scanning forward;
    a missing value within the first three points is an error.
    """
    out = ds.copy()
    for op in ops:
        if op == "standardize":
            T, n, k = out.values.shape
            for i in range(n):
                for j in range(k):
                    x = out.values[:, i, j]
                    m = np.nanmean(x)
                    s = np.nanstd(x)
                    if s == 0.0 or not np.isfinite(s):
                        raise DataError(
                            f"cannot standardize constant series "
                            f"{out.series_key(i, j)}")
                    out.values[:, i, j] = (x - m) / s
                    out.log_transform(i, j,
                                      f"standardize(mean={m:.6g}, sd={s:.6g})")
        elif op in ("difference", "log-difference"):
            v = out.values
            if op == "log-difference":
                if np.nanmin(v) <= 0.0:
                    raise DataError("log-difference requires positive values")
                v = np.log(v)
            out.values = v[1:] - v[:-1]
            out.time_index = list(out.time_index[1:])
            for i in range(out.values.shape[1]):
                for j in range(out.values.shape[2]):
                    out.log_transform(i, j, op)
        elif op == "impute-wma":
            T, n, k = out.values.shape
            for i in range(n):
                for j in range(k):
                    x = out.values[:, i, j]
                    miss = np.where(np.isnan(x))[0]
                    if miss.size == 0:
                        continue
                    if miss[0] < 3:
                        raise DataError(
                            f"cannot impute series {out.series_key(i, j)}: "
                            f"missing value at position {miss[0]} "
                            f"(within the first 3 points)")
                    for t in miss:
                        x[t] = sum(w * x[t - 1 - lag] for lag, w
                                   in enumerate(_WMA_WEIGHTS))
                    out.log_transform(
                        i, j, "impute-wma[" + ",".join(map(str, miss)) + "]")
        else:
            raise DataError(f"unknown preprocessing op {op!r}")
        out.validate()
    return out
