"""Chunked dataset views used by every whole-data pass.

A dataset yields ``(indices, X, y, mask)`` chunks in increasing record
order. ``mask`` is ``None`` when every row of the chunk belongs to the
dataset, otherwise a boolean array marking the rows that do; filtered views
pass masks instead of copying rows. Passes never hold more than a bounded
number of chunks in memory, so CSV files larger than memory can be
processed.
"""
from __future__ import annotations

import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor

import numpy as np

DEFAULT_CHUNK = 16384


class DataError(ValueError):
    """Malformed or missing input data."""


class ArrayDataset:
    """In-memory dataset backed by a covariate matrix and response vector."""

    def __init__(self, X, y, chunk_size=DEFAULT_CHUNK):
        X = np.ascontiguousarray(X, dtype=float)
        y = np.ascontiguousarray(y, dtype=float).reshape(-1)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != y.shape[0]:
            raise DataError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        self.X = X
        self.y = y
        self.chunk_size = int(chunk_size)

    @property
    def n_rows(self):
        return self.y.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def iter_chunks(self):
        for start in range(0, self.n_rows, self.chunk_size):
            stop = min(start + self.chunk_size, self.n_rows)
            yield np.arange(start, stop, dtype=np.int64), self.X[start:stop], self.y[start:stop], None


class CsvDataset:
    """Streaming reader for numeric, comma-separated files with a header row.

    The response column is named explicitly; all other columns are
    covariates in file order. Rows are counted once on construction.
    ``validate(X, y)`` may raise ``ValueError`` for rows a model cannot use;
    it runs on every parsed chunk and the error is reported with its line
    range.
    """

    def __init__(self, path, response, chunk_size=DEFAULT_CHUNK, validate=None):
        self.path = os.fspath(path)
        self.validate = validate
        self.chunk_size = int(chunk_size)
        try:
            with open(self.path, "r", encoding="utf-8") as fh:
                header = fh.readline()
                n = 0
                for line in fh:
                    if line.strip():
                        n += 1
        except OSError as exc:
            raise DataError(f"cannot read {self.path}: {exc}") from exc
        columns = [c.strip() for c in header.strip().split(",")]
        if not header.strip() or any(c == "" for c in columns):
            raise DataError(f"{self.path}: missing or malformed header")
        if response not in columns:
            raise DataError(f"{self.path}: response column {response!r} not found in header {columns}")
        if len(set(columns)) != len(columns):
            raise DataError(f"{self.path}: duplicate column names in header")
        self.columns = columns
        self.response = response
        self._y_col = columns.index(response)
        self.covariates = [c for c in columns if c != response]
        self._n = n
        if n == 0:
            raise DataError(f"{self.path}: no data rows")

    @property
    def n_rows(self):
        return self._n

    @property
    def p(self):
        return len(self.covariates)

    def _parse(self, lines, first_lineno):
        ncol = len(self.columns)
        out = np.empty((len(lines), ncol))
        for k, line in enumerate(lines):
            fields = line.split(",")
            if len(fields) != ncol:
                raise DataError(f"{self.path}:{first_lineno + k}: expected {ncol} fields, got {len(fields)}")
            try:
                out[k] = [float(f) for f in fields]
            except ValueError:
                raise DataError(f"{self.path}:{first_lineno + k}: non-numeric field") from None
        if not np.all(np.isfinite(out)):
            bad = int(np.argmax(~np.all(np.isfinite(out), axis=1)))
            raise DataError(f"{self.path}:{first_lineno + bad}: non-finite value")
        y = out[:, self._y_col].copy()
        X = np.delete(out, self._y_col, axis=1)
        if self.validate is not None:
            try:
                self.validate(X, y)
            except ValueError as exc:
                last = first_lineno + len(lines) - 1
                raise DataError(f"{self.path}:{first_lineno}-{last}: {exc}") from None
        return X, y

    def iter_chunks(self):
        start = 0
        lines = []
        lineno = 2
        first = lineno
        with open(self.path, "r", encoding="utf-8") as fh:
            fh.readline()
            for raw in fh:
                line = raw.strip()
                if line:
                    if not lines:
                        first = lineno
                    lines.append(line)
                lineno += 1
                if len(lines) == self.chunk_size:
                    X, y = self._parse(lines, first)
                    yield np.arange(start, start + len(lines), dtype=np.int64), X, y, None
                    start += len(lines)
                    lines = []
        if lines:
            X, y = self._parse(lines, first)
            yield np.arange(start, start + len(lines), dtype=np.int64), X, y, None


class ExcludingDataset:
    """Read-only view of ``base`` without the records listed in ``excluded``."""

    def __init__(self, base, excluded):
        excluded = np.asarray(excluded, dtype=np.int64)
        if isinstance(base, ExcludingDataset):
            base, excluded = base.base, np.concatenate([base.excluded, excluded])
        self.base = base
        self.excluded = np.unique(excluded)
        self._n = base.n_rows - self.excluded.shape[0]

    @property
    def n_rows(self):
        return self._n

    @property
    def p(self):
        return self.base.p

    def iter_chunks(self):
        ex = self.excluded
        for idx, X, y, mask in self.base.iter_chunks():
            lo, hi = np.searchsorted(ex, [idx[0], idx[-1] + 1]) if idx.size else (0, 0)
            if lo == hi:
                yield idx, X, y, mask
                continue
            if idx[-1] - idx[0] + 1 == idx.size:
                keep = np.ones(idx.size, dtype=bool)
                keep[ex[lo:hi] - idx[0]] = False
            else:
                keep = ~np.isin(idx, ex[lo:hi], assume_unique=True)
            yield idx, X, y, keep if mask is None else (mask & keep)


def kept_rows(idx, X, y, mask):
    """Materialise the rows of a chunk selected by its mask."""
    if mask is None:
        return idx, X, y
    return idx[mask], X[mask], y[mask]


def fused(*fns):
    """Combine chunk functions so that one pass evaluates all of them."""
    def fn(idx, X, y, mask):
        return tuple(f(idx, X, y, mask) for f in fns)
    return fn


def unzip(parts, k):
    """Split the results of a fused pass into ``k`` per-function lists."""
    return [[part[j] for part in parts] for j in range(k)]


def map_chunks(dataset, fn, threads=1):
    """Apply ``fn(indices, X, y, mask)`` to every chunk; results come back in chunk order.

    With ``threads > 1`` chunks are processed on a thread pool with a bounded
    window of in-flight chunks. The output order, and therefore any reduction
    over it, does not depend on the thread count.
    """
    threads = max(1, int(threads or 1))
    if threads == 1:
        return [fn(*chunk) for chunk in dataset.iter_chunks()]
    results = []
    window = deque()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for chunk in dataset.iter_chunks():
            window.append(pool.submit(fn, *chunk))
            if len(window) >= 2 * threads:
                results.append(window.popleft().result())
        while window:
            results.append(window.popleft().result())
    return results
