import numpy as np
import pandas as pd
import pytest

from aqsts.example import build_profiles
from aqsts.profiles import (GapDetected, NonUniformSpacing, ProfileError, UnknownDevice, from_arrays,
                            load_profiles, read_profile_file, write_profiles)


def _csv(path, index, columns):
    frame = pd.DataFrame(columns, index=pd.DatetimeIndex(index, name="timestamp"))
    frame.to_csv(path)
    return path


def test_round_trip_is_exact(network, tmp_path):
    ds = build_profiles(2, 15, model=network)
    again = read_profile_file(write_profiles(ds, tmp_path / "p.csv"), network)
    assert again.equals(ds)
    assert again.resolution == 15 and again.n_steps == 192


def test_missing_row_is_a_gap(tmp_path):
    idx = pd.date_range("2035-01-01", periods=6, freq="5min").delete(3)
    path = _csv(tmp_path / "p.csv", idx, {"LD_E_L1": np.ones(5)})
    with pytest.raises(GapDetected) as info:
        read_profile_file(path)
    assert "00:15" in str(info.value)


def test_empty_cell_is_a_gap(tmp_path):
    idx = pd.date_range("2035-01-01", periods=4, freq="5min")
    path = _csv(tmp_path / "p.csv", idx, {"LD_E_L1": [1.0, np.nan, 1.0, 1.0]})
    with pytest.raises(GapDetected):
        read_profile_file(path)


def test_irregular_spacing(tmp_path):
    idx = pd.DatetimeIndex(["2035-01-01 00:00", "2035-01-01 00:05", "2035-01-01 00:12"])
    path = _csv(tmp_path / "p.csv", idx, {"LD_E_L1": np.ones(3)})
    with pytest.raises(NonUniformSpacing):
        read_profile_file(path)


def test_unknown_device(network, tmp_path):
    idx = pd.date_range("2035-01-01", periods=3, freq="5min")
    path = _csv(tmp_path / "p.csv", idx, {"NOT_A_LOAD": np.ones(3)})
    with pytest.raises(UnknownDevice):
        read_profile_file(path, network)


def test_merge_files(tmp_path):
    idx = pd.date_range("2035-01-01", periods=3, freq="5min")
    a = _csv(tmp_path / "a.csv", idx, {"LD_E_L1": np.ones(3)})
    b = _csv(tmp_path / "b.csv", idx, {"LD_E_L2": np.zeros(3)})
    merged = load_profiles([a, b])
    assert merged.columns == ["LD_E_L1", "LD_E_L2"]
    with pytest.raises(ProfileError):
        load_profiles([a, a])


def test_resample_block_means():
    ds = from_arrays({"x": np.arange(12.0)}, 5)
    out = ds.resample(15)
    assert out.resolution == 15
    assert np.array_equal(out.series["x"], [1.0, 4.0, 7.0, 10.0])
    with pytest.raises(ProfileError):
        ds.resample(7)
