"""
Synchronized device profiles.

Profiles are wide CSV files: an ISO-8601 timestamp column followed by one
numeric column per device. A bare device id is the active series (MW for
loads and generators, MW schedule for interties); ``<id>.q`` is the
reactive series in MVAr.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from aqsts.network import NetworkModel


class ProfileError(Exception):
    pass


class GapDetected(ProfileError):
    def __init__(self, path: str, t: str):
        super().__init__(f"{path}: missing time step at {t}")
        self.t = t


class UnknownDevice(ProfileError):
    def __init__(self, path: str, device: str):
        super().__init__(f"{path}: column '{device}' does not match any load, generator or intertie")
        self.device = device


class NonUniformSpacing(ProfileError):
    pass


class MissingProfile(ProfileError):
    def __init__(self, device: str, t: int):
        super().__init__(f"no profile value for '{device}' at step {t}")
        self.device = device
        self.t = t


@dataclasses.dataclass
class TimeSeriesDataset:
    resolution: int
    start: pd.Timestamp
    series: dict[str, np.ndarray]
    provenance: dict[str, str] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.series.values()}
        if len(lengths) > 1:
            raise ProfileError(f"series lengths differ: {sorted(lengths)}")
        if 60 % self.resolution and self.resolution % 60:
            raise ProfileError(f"resolution {self.resolution} min does not divide an hour")

    @property
    def n_steps(self) -> int:
        return len(next(iter(self.series.values()))) if self.series else 0

    @property
    def columns(self) -> list[str]:
        return list(self.series)

    def timestamps(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, periods=self.n_steps, freq=f"{self.resolution}min")

    def column(self, name: str) -> np.ndarray:
        return self.series[name]

    def resample(self, resolution: int) -> "TimeSeriesDataset":
        """Block means onto a coarser step; the target must be a multiple."""
        if resolution == self.resolution:
            return self
        if resolution % self.resolution:
            raise ProfileError(f"cannot resample {self.resolution}-min profiles to {resolution} min")
        k = resolution // self.resolution
        n = self.n_steps // k
        out = {c: v[: n * k].reshape(n, k).mean(axis=1) for c, v in self.series.items()}
        return TimeSeriesDataset(resolution, self.start, out, dict(self.provenance))

    def window(self, start: int, stop: int) -> "TimeSeriesDataset":
        out = {c: v[start:stop].copy() for c, v in self.series.items()}
        return TimeSeriesDataset(self.resolution, self.start + pd.Timedelta(minutes=start * self.resolution),
                                 out, dict(self.provenance))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.series, index=self.timestamps())
        frame.index.name = "timestamp"
        return frame

    def equals(self, other: "TimeSeriesDataset") -> bool:
        return (self.resolution == other.resolution and self.start == other.start
                and self.columns == other.columns
                and all(np.array_equal(self.series[c], other.series[c]) for c in self.columns))


def known_devices(model: NetworkModel) -> set[str]:
    ids = [ld.id for ld in model.loads] + [g.id for g in model.generators]
    return set(ids) | {f"{i}.q" for i in ids} | {t.id for t in model.interties}


def read_profile_file(path: str | Path, model: NetworkModel | None = None) -> TimeSeriesDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"profile file not found: {path}")
    frame = pd.read_csv(path, index_col=0, parse_dates=[0], float_precision="round_trip")
    if frame.empty:
        raise ProfileError(f"{path}: no rows")
    idx = pd.DatetimeIndex(frame.index)
    if len(idx) >= 2:
        steps = np.diff(idx.asi8)
        base = steps.min()
        if base <= 0:
            raise NonUniformSpacing(f"{path}: timestamps not strictly increasing")
        bad = np.flatnonzero(steps != base)
        if bad.size:
            if np.all(steps[bad] % base == 0):
                raise GapDetected(str(path), str(idx[bad[0]] + pd.Timedelta(base, "ns")))
            raise NonUniformSpacing(f"{path}: spacing changes at {idx[bad[0]]}")
        resolution = int(base // 60_000_000_000)
    else:
        resolution = 60
    if model is not None:
        valid = known_devices(model)
        for col in frame.columns:
            if col not in valid:
                raise UnknownDevice(str(path), col)
    values = frame.to_numpy(dtype=float)
    if np.isnan(values).any():
        r, c = np.argwhere(np.isnan(values))[0]
        raise GapDetected(str(path), f"{idx[r]} (column {frame.columns[c]})")
    series = {c: values[:, j].copy() for j, c in enumerate(frame.columns)}
    return TimeSeriesDataset(resolution, idx[0], series, {c: str(path) for c in frame.columns})


def load_profiles(files: str | Path | Sequence[str | Path], model: NetworkModel | None = None) -> TimeSeriesDataset:
    """Read and merge profile files; every file must share start and resolution."""
    if isinstance(files, (str, Path)):
        files = [files]
    merged: TimeSeriesDataset | None = None
    for f in files:
        ds = read_profile_file(f, model)
        if merged is None:
            merged = ds
            continue
        if (ds.resolution, ds.start, ds.n_steps) != (merged.resolution, merged.start, merged.n_steps):
            raise ProfileError(f"{f}: not aligned with earlier profile files")
        dup = set(ds.series) & set(merged.series)
        if dup:
            raise ProfileError(f"{f}: device(s) {sorted(dup)} already profiled")
        merged.series.update(ds.series)
        merged.provenance.update(ds.provenance)
    if merged is None:
        raise ProfileError("no profile files given")
    return merged


def write_profiles(dataset: TimeSeriesDataset, path: str | Path) -> Path:
    path = Path(path)
    frame = dataset.to_frame()
    frame.index = frame.index.strftime("%Y-%m-%dT%H:%M:%S")
    frame.to_csv(path, float_format="%.17g")
    return path


def from_arrays(series: Mapping[str, Iterable[float]], resolution: int, start: str = "2035-01-01") -> TimeSeriesDataset:
    return TimeSeriesDataset(resolution, pd.Timestamp(start), {k: np.asarray(v, dtype=float) for k, v in series.items()})
