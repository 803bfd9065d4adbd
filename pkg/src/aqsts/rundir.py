"""
Run-directory layout.

::

    manifest.json            plan, config hash, versions, failures
    network.yaml             the model the run used
    states/states.npy.gz     float64 matrix, one row per recorded step
    states/steps.npy.gz      recorded step indices
    states/columns.csv       kind, device, quantity of every state column
    states/entries.npy.gz    segment entry states (first step index in column 0)
    actions/actions.csv
    ess/ess.csv
    diagnostics/diagnostics.csv, diagnostics/failures.json
    segments/NNN/segment.json, segments/NNN/actions.csv
    metrics/                 written by ``analyze``

Binary tables are gzip streams with a zero mtime so identical runs give
byte-identical files.
"""

from __future__ import annotations

import gzip
import io
import json
import platform
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd

import aqsts
from aqsts.network import load_network, save_network
from aqsts.scheduler import ACTION_COLUMNS, AnnualResultStore
from aqsts.state import state_columns

SCHEMA_VERSION = 1
JSON_KEYS_VERSION = 1


class RunDirectoryError(Exception):
    pass


def _write_array(path: Path, array: np.ndarray) -> None:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(array), allow_pickle=False)
    with path.open("wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0, compresslevel=4) as gz:
        gz.write(buf.getvalue())


def _read_array(path: Path) -> np.ndarray:
    with gzip.open(path, "rb") as gz:
        return np.load(io.BytesIO(gz.read()), allow_pickle=False)


def _write_frame(path: Path, frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def versions() -> dict[str, str]:
    import scipy
    return {"aqsts": aqsts.__version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__}


def write_run_directory(store: AnnualResultStore, directory: str | Path, manifest: Mapping[str, Any]) -> dict[str, Path]:
    """Write ``store`` under ``directory`` and return the main paths."""
    root = Path(directory)
    try:
        for sub in ("states", "actions", "ess", "diagnostics", "segments", "metrics"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RunDirectoryError(f"cannot create run directory {root}: {exc}") from exc
    paths = {"root": root, "manifest": root / "manifest.json", "network": root / "network.yaml",
             "states": root / "states" / "states.npy.gz", "actions": root / "actions" / "actions.csv",
             "ess": root / "ess" / "ess.csv", "diagnostics": root / "diagnostics" / "diagnostics.csv",
             "failures": root / "diagnostics" / "failures.json"}
    try:
        save_network(store.model, paths["network"])
        _write_array(paths["states"], store.states)
        _write_array(root / "states" / "steps.npy.gz", store.steps.astype(np.int64))
        entries = np.array([[float(k), *v] for k, v in sorted(store.entries.items())]) if store.entries \
            else np.zeros((0, store.states.shape[1] + 1))
        _write_array(root / "states" / "entries.npy.gz", entries)
        pd.DataFrame(state_columns(store.model), columns=["kind", "device", "quantity"]) \
            .to_csv(root / "states" / "columns.csv", index=False, lineterminator="\n")
        _write_frame(paths["actions"], store.actions if len(store.actions) else pd.DataFrame(columns=ACTION_COLUMNS))
        _write_frame(paths["ess"], store.ess)
        _write_frame(paths["diagnostics"], store.diagnostics)
        paths["failures"].write_text(json.dumps(store.failures, indent=2, default=str) + "\n", encoding="utf-8")
        for seg in store.segments:
            d = root / "segments" / f"{seg['index']:03d}"
            d.mkdir(exist_ok=True)
            fail = next((f for f in store.failures if f.get("segment") == seg["index"]), None)
            (d / "segment.json").write_text(json.dumps({**seg, "failure": fail}, indent=2, default=str) + "\n",
                                            encoding="utf-8")
            acts = store.actions[store.actions["segment"] == seg["index"]] if len(store.actions) else store.actions
            _write_frame(d / "actions.csv", acts if len(acts) else pd.DataFrame(columns=ACTION_COLUMNS))
        doc = {"schema_version": SCHEMA_VERSION, "json_keys_version": JSON_KEYS_VERSION,
               "model": store.model.name, "resolution": store.resolution,
               "start": None if store.start is None else store.start.isoformat(),
               "n_recorded": int(store.n_steps), "segments": store.segments,
               "failures": len(store.failures), "versions": versions(), **manifest}
        paths["manifest"].write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    except OSError as exc:
        raise RunDirectoryError(f"writing {root}: {exc}") from exc
    return paths


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise RunDirectoryError(f"{directory}: no manifest.json (not a run directory)")
    return json.loads(path.read_text(encoding="utf-8"))


def _read_frame(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision="round_trip", keep_default_na=False, na_values=[""])
    except pd.errors.EmptyDataError:
        return pd.DataFrame()


def read_run_directory(directory: str | Path) -> AnnualResultStore:
    root = Path(directory)
    manifest = read_manifest(root)
    try:
        model = load_network(root / "network.yaml")
        states = _read_array(root / "states" / "states.npy.gz")
        steps = _read_array(root / "states" / "steps.npy.gz")
        raw_entries = _read_array(root / "states" / "entries.npy.gz")
    except OSError as exc:
        raise RunDirectoryError(f"{root}: {exc}") from exc
    entries = {int(row[0]): row[1:].copy() for row in raw_entries}
    actions = _read_frame(root / "actions" / "actions.csv")
    if len(actions):
        actions["trigger"] = actions["trigger"].astype(str)
    failures = json.loads((root / "diagnostics" / "failures.json").read_text(encoding="utf-8"))
    start = pd.Timestamp(manifest["start"]) if manifest.get("start") else None
    return AnnualResultStore(model, int(manifest["resolution"]), steps, states, actions,
                             _read_frame(root / "diagnostics" / "diagnostics.csv"),
                             _read_frame(root / "ess" / "ess.csv"), manifest["segments"], entries, failures, start)
