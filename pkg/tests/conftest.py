from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from aqsts.config import config_from_dict, prepare  # noqa: E402
from aqsts.example import build_network, build_profiles, peak_windows, scenario_config, without_storage  # noqa: E402


def example_inputs(directory: Path, days: int = 365, resolution: int = 15, storage: bool = True,
                   mode: str = "parallel", workers: int = 1, profiles=None, soc_balance: float = 50.0):
    """In-memory run inputs for the bundled two-zone system."""
    directory.mkdir(parents=True, exist_ok=True)
    cal = directory / "peak_calendar.csv"
    if not cal.exists():
        w = peak_windows(days)
        w.assign(start=w.start.dt.strftime("%Y-%m-%dT%H:%M:%S"),
                 end=w.end.dt.strftime("%Y-%m-%dT%H:%M:%S")).to_csv(cal, index=False)
    doc = scenario_config("S2" if storage else "S1", storage, resolution, workers, mode)
    doc["ess"]["soc_balance"] = soc_balance
    cfg = config_from_dict(doc, directory, check_files=False, env={})
    model = build_network() if storage else without_storage(build_network())
    return prepare(cfg, model, profiles if profiles is not None else build_profiles(days, 5, model=model))


@pytest.fixture(scope="session")
def network():
    return build_network()


@pytest.fixture(scope="session")
def annual_profiles(network):
    return build_profiles(365, 5, model=network)


@pytest.fixture(scope="session")
def two_week_inputs(tmp_path_factory):
    return example_inputs(tmp_path_factory.mktemp("two_weeks"), days=14, resolution=60)


# -- acceptance summary ------------------------------------------------------------

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = dict(report.user_properties).get("detail", "")
        if not report.passed and not detail:
            detail = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else "error"
        _CRITERIA[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        status, detail = _CRITERIA[name]
        num = name.split("_")[2]
        label = " ".join(name.split("_")[3:])
        tr.write_line(f"AC{num} {label:<40} {status}  {detail}")
