"""
Attention heatmaps from viewport telemetry.

A sample contributes its dwell time spread over the grid cells its viewport
covers, in proportion to the covered area. Maps can be restricted to the
first part of the reading (temporal stack) or to one magnification band
(magnification stack).
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    ConfigError,
    DegenerateMap,
    EmptyAfterFilter,
    GridMismatch,
    NonFiniteValue,
    OutOfBounds,
    ZeroMap,
)

NORM_MODES = ("raw", "unit_sum", "minmax", "zscore")
DEFAULT_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


# =========================================================
# 1. Types
# =========================================================

@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    mag_level: str = "custom"

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"grid dims must be positive, got {self.rows}x{self.cols}")

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def n_cells(self):
        return self.rows * self.cols

    @classmethod
    def parse(cls, text, mag_level="custom"):
        """Parse '50x50' style grid strings."""
        try:
            rows, cols = (int(v) for v in text.lower().split("x"))
        except ValueError:
            raise ConfigError(f"grid must look like ROWSxCOLS, got {text!r}")
        return cls(rows, cols, mag_level)


@dataclass(frozen=True)
class MagBin:
    label: str
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"magnification bin {self.label}: lo must be < hi, got ({self.lo}, {self.hi})")

    def contains(self, mag):
        return (mag > self.lo) & (mag <= self.hi)


DEFAULT_GRIDS = {
    "2x": GridSpec(10, 10, "2x"),
    "4x": GridSpec(20, 20, "4x"),
    "10x": GridSpec(50, 50, "10x"),
    "20x": GridSpec(60, 60, "20x"),
}

DEFAULT_MAG_BINS = (
    MagBin("2x", 1.0, 3.0),
    MagBin("4x", 3.0, 7.0),
    MagBin("10x", 7.0, 15.0),
    MagBin("20x", 15.0, 30.0),
)


@dataclass(frozen=True, eq=False)
class Heatmap:
    grid: GridSpec
    values: np.ndarray
    norm: str = "raw"
    flag: Optional[str] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise GridMismatch(f"values {values.shape} do not match grid {self.grid.shape}")
        if self.norm not in NORM_MODES:
            raise ConfigError(f"Unsupported normalization: {self.norm}")
        if not np.all(np.isfinite(values)):
            raise NonFiniteValue("heatmap values must be finite")
        if self.norm != "zscore" and np.any(values < 0):
            raise OutOfBounds("heatmap values must be non-negative")
        if values is self.values:
            values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def total(self):
        return float(self.values.sum())

    def with_values(self, values, norm=None, flag=None):
        return Heatmap(self.grid, values, norm or self.norm, flag)


@dataclass(frozen=True)
class SampleFilter:
    time_fraction: Optional[float] = None
    mag_bin: Optional[tuple] = None

    def __post_init__(self):
        if self.time_fraction is not None and not 0.0 < self.time_fraction <= 1.0:
            raise ConfigError(f"time_fraction must be in (0,1], got {self.time_fraction}")
        if self.mag_bin is not None and not self.mag_bin[0] < self.mag_bin[1]:
            raise ConfigError(f"mag_bin must satisfy lo < hi, got {self.mag_bin}")


@dataclass(frozen=True)
class MagnificationStack:
    """Per-bin maps plus the samples no bin claimed. Indexes like a list of maps."""

    maps: tuple
    labels: tuple
    dropped_samples: int
    dropped_mass: float

    def __iter__(self):
        return iter(self.maps)

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, i):
        return self.maps[i]

    @property
    def empty(self):
        return tuple(m.flag == "empty" for m in self.maps)


# =========================================================
# 2. Footprints and accumulation
# =========================================================

def _axis_overlap(lo, hi, n):
    """Overlap length of intervals [lo,hi] with the n unit-grid cells along one axis."""
    edges = np.arange(n + 1, dtype=np.float64) / n
    lo = np.asarray(lo, dtype=np.float64)[..., None]
    hi = np.asarray(hi, dtype=np.float64)[..., None]
    return np.clip(np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1]), 0.0, None)


def _footprint_factors(bbox, grid):
    """Row and column weight vectors; their outer product is the footprint."""
    bbox = np.atleast_2d(bbox)
    wy = _axis_overlap(bbox[:, 1], bbox[:, 3], grid.rows)
    wx = _axis_overlap(bbox[:, 0], bbox[:, 2], grid.cols)
    wy /= wy.sum(axis=1, keepdims=True)
    wx /= wx.sum(axis=1, keepdims=True)
    return wy, wx


def footprint_weights(sample, grid):
    """
    Cells covered by a viewport sample with their fractional-area weights.

    Returns
    -------
    list of ((row, col), weight)
        Weights sum to 1; uncovered cells are absent.
    """
    wy, wx = _footprint_factors(np.array(sample.bbox), grid)
    rows = np.flatnonzero(wy[0])
    cols = np.flatnonzero(wx[0])
    return [((int(r), int(c)), float(wy[0, r] * wx[0, c])) for r in rows for c in cols]


def dwell_times(session):
    """Inter-sample intervals; the last sample gets the session's median interval."""
    t = session.arrays[0]
    gaps = np.diff(t)
    return np.append(gaps, np.median(gaps))


def _retained(session, filt):
    t, _, mag = session.arrays
    keep = np.ones(len(t), dtype=bool)
    if filt.time_fraction is not None:
        keep &= t <= t[0] + filt.time_fraction * (t[-1] - t[0])
    if filt.mag_bin is not None:
        lo, hi = filt.mag_bin
        keep &= (mag > lo) & (mag <= hi)
    return keep


def _accumulate_mask(session, grid, keep):
    _, bbox, _ = session.arrays
    dwell = dwell_times(session)[keep]
    wy, wx = _footprint_factors(bbox[keep], grid)
    return (wy * dwell[:, None]).T @ wx


def accumulate(session, grid, filt=SampleFilter(), blur_sigma=None):
    """
    Dwell-weighted attention heatmap of the samples passing ``filt``.

    Parameters
    ----------
    session : Session
    grid : GridSpec
    filt : SampleFilter
    blur_sigma : float, optional
        Gaussian blur in grid cells applied after accumulation.

    Returns
    -------
    Heatmap
        norm = "raw"; total mass equals the summed dwell of retained samples.
    """
    keep = _retained(session, filt)
    if not keep.any():
        raise EmptyAfterFilter(f"no samples of session {session.session_id} pass {filt}")
    values = _accumulate_mask(session, grid, keep)
    if blur_sigma:
        values = smooth_values(values, blur_sigma)
    return Heatmap(grid, values, "raw")


def temporal_stack(session, grid, fractions=DEFAULT_FRACTIONS, blur_sigma=None):
    """Cumulative heatmaps over the first fraction of viewing time, one per fraction."""
    return [
        accumulate(session, grid, SampleFilter(time_fraction=f), blur_sigma)
        for f in fractions
    ]


def check_bins(bins):
    """Bins must be disjoint (lo, hi] intervals; returns them sorted by lo."""
    ordered = sorted(bins, key=lambda b: b.lo)
    for a, b in zip(ordered, ordered[1:]):
        if b.lo < a.hi:
            raise ConfigError(f"magnification bins {a.label} and {b.label} overlap")
    return tuple(ordered)


def magnification_stack(session, grid_per_bin=None, bins=DEFAULT_MAG_BINS, blur_sigma=None):
    """
    One heatmap per magnification bin, each on its own grid.

    Samples falling in no bin are dropped and reported. Empty bins give zero
    maps flagged "empty". Bins must not overlap; maps keep the order of ``bins``.
    """
    grid_per_bin = grid_per_bin or DEFAULT_GRIDS
    check_bins(bins)
    missing = [b.label for b in bins if b.label not in grid_per_bin]
    if missing:
        raise ConfigError(f"no grid configured for magnification bins {missing}")
    _, _, mag = session.arrays
    dwell = dwell_times(session)

    claimed = np.zeros(len(mag), dtype=bool)
    maps = []
    for b in bins:
        grid = grid_per_bin[b.label]
        keep = b.contains(mag)
        claimed |= keep
        if keep.any():
            values = _accumulate_mask(session, grid, keep)
            if blur_sigma:
                values = smooth_values(values, blur_sigma)
            maps.append(Heatmap(grid, values, "raw"))
        else:
            maps.append(Heatmap(grid, np.zeros(grid.shape), "raw", flag="empty"))

    dropped = ~claimed
    if dropped.any():
        logging.info(
            f"session {session.session_id}: {int(dropped.sum())} samples outside all magnification bins"
        )
    return MagnificationStack(
        maps=tuple(maps),
        labels=tuple(b.label for b in bins),
        dropped_samples=int(dropped.sum()),
        dropped_mass=float(dwell[dropped].sum()),
    )


# =========================================================
# 3. Normalization, resampling, smoothing
# =========================================================

def normalize(hmap, mode):
    """
    Normalize a heatmap.

    unit_sum -> values sum to 1; minmax -> range [0,1];
    zscore -> mean 0, population std 1; raw -> unchanged.
    """
    v = hmap.values
    if mode == "raw":
        return hmap.with_values(v, "raw")
    if mode == "unit_sum":
        s = v.sum()
        if not s > 0:
            raise DegenerateMap("cannot unit_sum-normalize a zero map")
        return hmap.with_values(v / s, "unit_sum")
    if mode == "minmax":
        lo, hi = v.min(), v.max()
        if not hi > lo:
            raise DegenerateMap("cannot minmax-normalize a constant map")
        return hmap.with_values((v - lo) / (hi - lo), "minmax")
    if mode == "zscore":
        sd = v.std()
        if not sd > 0:
            raise DegenerateMap("cannot zscore-normalize a constant map")
        return hmap.with_values((v - v.mean()) / sd, "zscore")
    raise ConfigError(f"Unsupported normalization: {mode}")


def _resample_matrix(n_old, n_new):
    """R[i, j] = share of old cell j that falls in new cell i (columns sum to 1)."""
    old_edges = np.arange(n_old + 1, dtype=np.float64) / n_old
    overlap = _axis_overlap(old_edges[:-1], old_edges[1:], n_new)  # (n_old, n_new)
    return (overlap * n_old).T


def resample(hmap, new_grid):
    """Area-weighted conservative resampling; total mass is preserved."""
    if hmap.norm not in ("raw", "unit_sum"):
        raise ConfigError(f"resample expects a raw or unit_sum map, got {hmap.norm}")
    if hmap.grid.shape == new_grid.shape:
        return Heatmap(new_grid, hmap.values, hmap.norm, hmap.flag)
    ry = _resample_matrix(hmap.grid.rows, new_grid.rows)
    rx = _resample_matrix(hmap.grid.cols, new_grid.cols)
    values = ry @ hmap.values @ rx.T
    return Heatmap(new_grid, np.clip(values, 0.0, None), hmap.norm, hmap.flag)


def resample_fraction(hmap, new_grid):
    """Resample a per-cell fraction (e.g. a [0,1] mask) so each new cell holds the mean covered value."""
    moved = resample(Heatmap(hmap.grid, hmap.values, "raw"), new_grid)
    scale = new_grid.n_cells / hmap.grid.n_cells
    return Heatmap(new_grid, np.clip(moved.values * scale, 0.0, 1.0), "raw", hmap.flag)


def smooth_values(values, sigma):
    return gaussian_filter(np.asarray(values, dtype=np.float64), sigma=sigma, mode="reflect")


def smooth(hmap, sigma):
    """Gaussian blur (sigma in grid cells); keeps the normalization tag only for raw maps."""
    if hmap.norm == "zscore":
        raise ConfigError("blur a raw or unit_sum map, not a zscored one")
    return hmap.with_values(smooth_values(hmap.values, sigma), "raw")


def mean_unit_map(maps):
    """Mean of unit_sum-normalized maps (zero maps are skipped)."""
    kept = []
    for m in maps:
        if m.total > 0:
            kept.append(normalize(m, "unit_sum").values)
    if not kept:
        raise ZeroMap("all maps are zero")
    grid = maps[0].grid
    for m in maps:
        if m.grid.shape != grid.shape:
            raise GridMismatch(f"maps on different grids: {grid.shape} vs {m.grid.shape}")
    return Heatmap(grid, np.mean(kept, axis=0), "unit_sum")
