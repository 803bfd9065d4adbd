import hashlib

import pytest

from aqsts.rundir import RunDirectoryError, read_manifest, read_run_directory, write_run_directory
from aqsts.runner import manifest_for, simulate


def _digest(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def short_run(two_week_inputs):
    return simulate(two_week_inputs, steps=48)


def test_round_trip(short_run, tmp_path):
    store, plan = short_run
    write_run_directory(store, tmp_path / "run", {"plan": plan.mode})
    again = read_run_directory(tmp_path / "run")
    assert again.same_as(store)
    assert again.segments == store.segments and again.start == store.start


def test_identical_runs_give_identical_bytes(two_week_inputs, short_run, tmp_path):
    store, plan = short_run
    other, _ = simulate(two_week_inputs, steps=48)
    m = manifest_for(two_week_inputs, plan)
    write_run_directory(store, tmp_path / "a", m)
    write_run_directory(other, tmp_path / "b", m)
    a, b = _digest(tmp_path / "a"), _digest(tmp_path / "b")
    assert a == b and "states/states.npy.gz" in a
    ma, mb = read_manifest(tmp_path / "a"), read_manifest(tmp_path / "b")
    assert ma == mb and ma["config_hash"] == two_week_inputs.config.hash


def test_manifest_contents(two_week_inputs, short_run, tmp_path):
    store, plan = short_run
    write_run_directory(store, tmp_path, manifest_for(two_week_inputs, plan))
    m = read_manifest(tmp_path)
    assert m["schema_version"] == 1 and m["resolution"] == 60 and m["n_recorded"] == 48
    assert {"numpy", "scipy", "pandas", "aqsts"} <= set(m["versions"])
    assert len(m["ess_limits"]) == 2


def test_not_a_run_directory(tmp_path):
    with pytest.raises(RunDirectoryError):
        read_run_directory(tmp_path)
