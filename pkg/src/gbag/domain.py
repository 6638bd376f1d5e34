"""Space-time domain: locations, axis-parallel partitions, reference/non-reference splits.

Locations are dense float arrays of shape (n, d+1): d spatial coordinates
followed by one temporal coordinate.  All functions treat the last column as
time.  Partition cells are axis-parallel boxes built from per-axis break
vectors; intervals are half-open [lo, hi) except the last one on each axis,
which is closed so the bounding box is fully covered.

Partition indices are row-major with time as the slowest axis: for a scheme
with spatial interval counts (n1, ..., nd) and nt temporal intervals, cell
(it, i1, ..., id) has index ravel_multi_index((it, i1, ..., id)).  The cell
covering the same spatial region at the previous time step is therefore at a
fixed index offset of -(n1 * ... * nd).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ValidationError",
    "NumericalError",
    "PartitionScheme",
    "PartitionedData",
    "build_partition",
    "assign_partition",
    "split_reference",
    "load_csv",
    "write_csv",
]


class ValidationError(ValueError):
    """Bad inputs or configuration; maps to CLI exit code 2."""


class NumericalError(RuntimeError):
    """Numerical failure (e.g. Cholesky breakdown); maps to CLI exit code 3."""


@dataclass(frozen=True)
class PartitionScheme:
    """Axis-parallel tessellation of the space-time bounding box.

    breaks holds one sorted break vector per axis (spatial axes first, time
    last); axis k has grid_dims[k] intervals and len(breaks[k]) ==
    grid_dims[k] + 1.
    """

    breaks: tuple[np.ndarray, ...]
    grid_dims: tuple[int, ...]
    clamp: bool = True

    def __post_init__(self):
        if len(self.breaks) != len(self.grid_dims):
            raise ValidationError("breaks and grid_dims length mismatch")
        for b, g in zip(self.breaks, self.grid_dims):
            if g < 1:
                raise ValidationError("grid_dims must all be >= 1")
            if len(b) != g + 1:
                raise ValidationError("break vector length must be n_intervals + 1")
            steps = np.diff(b)
            # zero-extent axes (all coordinates equal) degenerate to equal breaks
            if np.any(steps < 0) or (np.any(steps == 0) and not np.all(steps == 0)):
                raise ValidationError("break vectors must be strictly increasing")

    @property
    def n_axes(self) -> int:
        return len(self.grid_dims)

    @property
    def spatial_dims(self) -> tuple[int, ...]:
        return self.grid_dims[:-1]

    @property
    def n_time(self) -> int:
        return self.grid_dims[-1]

    @property
    def M(self) -> int:
        return int(np.prod(self.grid_dims))

    @property
    def cells_per_slice(self) -> int:
        return int(np.prod(self.spatial_dims))

    def axis_interval(self, axis: int, x: np.ndarray) -> np.ndarray:
        """Vectorized interval index on one axis, honoring the clamp policy."""
        b = self.breaks[axis]
        n = self.grid_dims[axis]
        idx = np.searchsorted(b, x, side="right") - 1
        # right edge of the final interval is inclusive
        idx = np.where((idx == n) & (x <= b[-1]), n - 1, idx)
        if self.clamp:
            return np.clip(idx, 0, n - 1)
        if np.any((idx < 0) | (idx > n - 1)):
            raise ValidationError("location outside the partition bounding box")
        return idx

    def assign(self, locations: np.ndarray) -> np.ndarray:
        """Partition index in [0, M) for each row of `locations`."""
        locations = np.atleast_2d(np.asarray(locations, dtype=float))
        if locations.shape[1] != self.n_axes:
            raise ValidationError(
                f"expected {self.n_axes} coordinates per location, got {locations.shape[1]}"
            )
        if not np.all(np.isfinite(locations)):
            raise ValidationError("non-finite coordinates")
        per_axis = [self.axis_interval(k, locations[:, k]) for k in range(self.n_axes)]
        # time slowest, then spatial axes in order
        multi = [per_axis[-1]] + per_axis[:-1]
        dims = (self.grid_dims[-1],) + self.grid_dims[:-1]
        return np.ravel_multi_index(tuple(multi), dims)

    def cell_of(self, index: int) -> tuple[int, ...]:
        """(time_idx, spatial indices...) of a partition index."""
        dims = (self.grid_dims[-1],) + self.grid_dims[:-1]
        return tuple(int(v) for v in np.unravel_index(index, dims))

    def index_of(self, cell: tuple[int, ...]) -> int:
        """Inverse of cell_of: cell is (time_idx, spatial indices...)."""
        dims = (self.grid_dims[-1],) + self.grid_dims[:-1]
        return int(np.ravel_multi_index(cell, dims))


def build_partition(locations, grid_dims, clamp: bool = True) -> PartitionScheme:
    """Equal-width axis-parallel partition spanning the data bounding box.

    grid_dims gives the interval count per axis (spatial axes first, then
    time).  Every input location is assignable to exactly one of the
    prod(grid_dims) cells.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    if locations.size == 0:
        raise ValidationError("at least one location is required")
    if not np.all(np.isfinite(locations)):
        raise ValidationError("non-finite coordinates")
    grid_dims = tuple(int(g) for g in grid_dims)
    if locations.shape[1] != len(grid_dims):
        raise ValidationError("grid_dims must have one entry per coordinate axis")
    if any(g < 1 for g in grid_dims):
        raise ValidationError("grid_dims must all be >= 1")
    breaks = []
    for k, g in enumerate(grid_dims):
        lo = float(locations[:, k].min())
        hi = float(locations[:, k].max())
        breaks.append(np.linspace(lo, hi, g + 1))
    return PartitionScheme(breaks=tuple(breaks), grid_dims=grid_dims, clamp=clamp)


def assign_partition(scheme: PartitionScheme, loc) -> int:
    """Partition index of a single location."""
    return int(scheme.assign(np.asarray(loc, dtype=float).reshape(1, -1))[0])


@dataclass
class PartitionedData:
    """Locations split into per-partition reference and non-reference sets.

    The global latent vector over the reference set stacks partitions in
    index order; `ref_rows[i]` holds the original row indices of partition
    i's reference locations and `ref_offsets[i]` the position of its first
    entry in that stacked vector.  Non-reference locations are stacked the
    same way via `u_rows` / `u_offsets`.  `y` is NaN at unobserved
    (prediction-only) rows.
    """

    scheme: PartitionScheme
    locations: np.ndarray
    y: np.ndarray
    X: np.ndarray
    ref_rows: list[np.ndarray]
    u_rows: list[np.ndarray]
    part_of_row: np.ndarray = field(init=False)
    ref_offsets: np.ndarray = field(init=False)
    u_offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        M = self.scheme.M
        if len(self.ref_rows) != M or len(self.u_rows) != M:
            raise ValidationError("per-partition lists must have length M")
        self.part_of_row = self.scheme.assign(self.locations)
        k_i = np.array([len(r) for r in self.ref_rows], dtype=int)
        n_ui = np.array([len(r) for r in self.u_rows], dtype=int)
        self.ref_offsets = np.concatenate([[0], np.cumsum(k_i)])
        self.u_offsets = np.concatenate([[0], np.cumsum(n_ui)])
        all_rows = np.concatenate(
            [np.concatenate(self.ref_rows) if self.k else np.empty(0, int),
             np.concatenate(self.u_rows) if self.n_u else np.empty(0, int)]
        )
        if len(np.unique(all_rows)) != len(all_rows):
            raise ValidationError("a location appears in more than one set")
        if len(all_rows) != len(self.locations):
            raise ValidationError("every location must be reference or non-reference")

    @property
    def M(self) -> int:
        return self.scheme.M

    @property
    def k_i(self) -> np.ndarray:
        return np.diff(self.ref_offsets)

    @property
    def k(self) -> int:
        return int(self.ref_offsets[-1])

    @property
    def n_u(self) -> int:
        return int(self.u_offsets[-1])

    @property
    def n_obs(self) -> int:
        return int(np.isfinite(self.y).sum())

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def ref_slice(self, i: int) -> slice:
        return slice(int(self.ref_offsets[i]), int(self.ref_offsets[i + 1]))

    def u_slice(self, i: int) -> slice:
        return slice(int(self.u_offsets[i]), int(self.u_offsets[i + 1]))

    def ref_coords(self, i: int) -> np.ndarray:
        return self.locations[self.ref_rows[i]]

    def u_coords(self, i: int) -> np.ndarray:
        return self.locations[self.u_rows[i]]

    @property
    def ref_rows_flat(self) -> np.ndarray:
        return (np.concatenate(self.ref_rows) if self.k else np.empty(0, int))

    @property
    def u_rows_flat(self) -> np.ndarray:
        return (np.concatenate(self.u_rows) if self.n_u else np.empty(0, int))


def split_reference(locations, y, X, scheme: PartitionScheme, reference="observed") -> PartitionedData:
    """Split locations into reference and non-reference sets per partition.

    reference="observed" takes every row with a finite response as a
    reference location; everything else (held-out or prediction-only rows)
    becomes non-reference.  An explicit integer index array may be passed
    instead; duplicates in it are rejected.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    n = len(locations)
    y = np.asarray(y, dtype=float).reshape(n)
    X = np.asarray(X, dtype=float).reshape(n, -1)
    if isinstance(reference, str):
        if reference != "observed":
            raise ValidationError(f"unknown reference policy {reference!r}")
        ref_mask = np.isfinite(y)
    else:
        ref_idx = np.asarray(reference, dtype=int)
        if len(np.unique(ref_idx)) != len(ref_idx):
            raise ValidationError("explicit reference list contains duplicates")
        ref_mask = np.zeros(n, dtype=bool)
        ref_mask[ref_idx] = True
    part = scheme.assign(locations)
    ref_rows, u_rows = [], []
    for i in range(scheme.M):
        in_part = part == i
        ref_rows.append(np.flatnonzero(in_part & ref_mask))
        u_rows.append(np.flatnonzero(in_part & ~ref_mask))
    return PartitionedData(scheme=scheme, locations=locations, y=y, X=X,
                           ref_rows=ref_rows, u_rows=u_rows)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def write_csv(path, locations, y=None, X=None, extra: dict | None = None) -> None:
    """Write the standard dataset layout: x1,..,xd,time,y,cov1,..,covp.

    Missing responses are written as empty fields.  Floats use shortest
    round-trip formatting so identical arrays produce identical bytes.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    n, ncol = locations.shape
    d = ncol - 1
    header = [f"x{k + 1}" for k in range(d)] + ["time"]
    cols = [locations[:, k] for k in range(ncol)]
    if y is not None:
        header.append("y")
        cols.append(np.asarray(y, dtype=float))
    if X is not None:
        X = np.asarray(X, dtype=float).reshape(n, -1)
        for j in range(X.shape[1]):
            header.append(f"cov{j + 1}")
            cols.append(X[:, j])
    for name, vals in (extra or {}).items():
        header.append(name)
        cols.append(np.asarray(vals, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in range(n):
            w.writerow([_fmt(c[r]) for c in cols])


def load_csv(path):
    """Read the standard dataset layout; empty y fields become NaN.

    Returns (locations, y, X) with locations of shape (n, d+1).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    xcols = [i for i, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()]
    if "time" not in header:
        raise ValidationError(f"{path}: missing 'time' column")
    tcol = header.index("time")
    ycol = header.index("y") if "y" in header else None
    ccols = [i for i, h in enumerate(header) if h.startswith("cov") and h[3:].isdigit()]
    n = len(rows)
    locations = np.empty((n, len(xcols) + 1))
    y = np.full(n, np.nan)
    X = np.empty((n, len(ccols)))
    for r, row in enumerate(rows):
        try:
            for j, ci in enumerate(xcols):
                locations[r, j] = float(row[ci])
            locations[r, -1] = float(row[tcol])
            if ycol is not None and row[ycol] != "":
                y[r] = float(row[ycol])
            for j, ci in enumerate(ccols):
                X[r, j] = float(row[ci])
        except (ValueError, IndexError) as exc:
            raise ValidationError(f"{path}: line {r + 2}: {exc}") from exc
    return locations, y, X
