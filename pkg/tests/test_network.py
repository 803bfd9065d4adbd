import dataclasses

import numpy as np
import pytest

from aqsts.network import (IslandError, build_admittance, from_per_unit, load_network, network_to_dict, save_network,
                           to_per_unit, validate)


def _swap(model, group, idx, **changes):
    items = list(getattr(model, group))
    items[idx] = dataclasses.replace(items[idx], **changes)
    return model.replace(**{group: items})


def test_bundled_network_is_valid(network):
    report = validate(network)
    assert report.ok, str(report)
    assert len(network.buses) == 30


def test_yaml_round_trip(network, tmp_path):
    path = tmp_path / "net.yaml"
    save_network(network, path)
    again = load_network(path)
    assert network_to_dict(again) == network_to_dict(network)
    assert np.array_equal(build_admittance(again), build_admittance(network))


def test_unresolved_reference_reported(network):
    bad = _swap(network, "loads", 0, bus="NOWHERE")
    kinds = {v.kind for v in validate(bad)}
    assert "unresolved reference" in kinds


def test_limit_inversion_reported(network):
    bad = _swap(network, "buses", 3, v_min=1.2)
    assert any(v.kind == "limit inversion" and v.element == network.buses[3].id for v in validate(bad))


def test_duplicate_id_reported(network):
    bad = _swap(network, "loads", 1, id=network.loads[0].id)
    assert any(v.kind == "duplicate id" for v in validate(bad))


def test_island_without_slack(network):
    cut = {"L_EB_WB", "L_EC_WC"}
    split = network.replace(branches=[dataclasses.replace(b, in_service=False) if b.id in cut else b
                                      for b in network.branches])
    assert any(v.kind == "load island without slack" for v in validate(split))
    with pytest.raises(IslandError) as info:
        build_admittance(split)
    assert "E_HYD" in str(info.value)


def test_per_unit_round_trip(network):
    assert to_per_unit(network, 250.0, "MW") == pytest.approx(250.0 / network.system_base_mva)
    kv = network.buses[0].base_kv
    assert from_per_unit(network, to_per_unit(network, 750.0, "kV", network.buses[0].id), "kV",
                         network.buses[0].id) == pytest.approx(750.0)
    assert to_per_unit(network, kv, "kV", network.buses[0].id) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        to_per_unit(network, 1.0, "amps")
