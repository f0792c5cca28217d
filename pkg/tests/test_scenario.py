import copy
import json
import os
from pathlib import Path

import pytest

from qkdnet.cli import EXIT_OK, EXIT_RUNTIME, EXIT_SCHEMA, main
from qkdnet.scenario import (
    RunError, ScenarioError, block_rng, load_preset, load_scenario, parse_scenario, preset_names, preset_path,
    render_report, render_text, run, validate_report,
)

GOLDEN = Path(__file__).parent / "golden"
UPDATE = os.environ.get("QKDNET_UPDATE_GOLDEN") == "1"


def _doc(name="fwf_bb84"):
    return copy.deepcopy(json.loads(preset_path(name).read_text()))


def _error(doc) -> ScenarioError:
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(doc)
    return exc.value


def test_presets_cover_every_protocol():
    kinds = {ln.protocol for name in preset_names() for ln in load_preset(name).links}
    assert kinds == {"bb84_1decoy", "bbm92", "hd_timebin", "cv_gaussian", "cv_fading"}
    assert "fwf_bb84" in preset_names() and "trusted_node" in preset_names()


def test_load_preset_file(tmp_path):
    sc = load_scenario(preset_path("fwf_bb84"))
    assert sc.name == "fwf_bb84"
    assert sc.link("stw-acp").protocol == "bb84_1decoy"
    with pytest.raises(KeyError):
        sc.link("nope")


def test_schema_error_has_pointer():
    doc = _doc()
    doc["links"][0]["segments"][1]["loss"] = "lots"
    assert _error(doc).pointer == "/links/0/segments/1/loss"


def test_unknown_field_rejected():
    doc = _doc()
    doc["links"][0]["colour"] = "blue"
    assert _error(doc).pointer == "/links/0"


def test_missing_link_id_is_pointed():
    doc = _doc()
    del doc["links"][0]["id"]
    err = _error(doc)
    assert err.pointer == "/links/0" and "id" in err.message


def test_duplicate_node_id():
    doc = _doc()
    doc["nodes"].append({"id": "STW"})
    err = _error(doc)
    assert err.pointer == "/nodes/2/id" and "duplicate" in err.message


def test_unknown_node_and_relay_references():
    doc = _doc()
    doc["links"][0]["endpoints"][1] = "MARS"
    assert _error(doc).pointer == "/links/0/endpoints/1"
    doc = _doc("trusted_node")
    doc["relays"][0]["hops"][1] = "missing-link"
    assert _error(doc).pointer == "/relays/0/hops/1"
    doc = _doc("trusted_node")
    doc["combine"][0]["inputs"][0] = "ghost"
    assert _error(doc).pointer == "/combine/0/inputs/0"


def test_protocol_link_compatibility():
    doc = _doc("cv_fading_810")
    for seg in doc["links"][0]["segments"]:
        seg.pop("scintillation_index", None)
        seg.pop("cn2", None)
    assert _error(doc).pointer == "/links/0/protocol/type"
    doc = _doc()
    doc["links"][0]["protocol"]["mu2"] = 0.6
    assert _error(doc).pointer == "/links/0/protocol/mu2"


def test_strict_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(preset_path("fwf_bb84").read_text().replace('"duration": 600', '"duration": NaN'))
    with pytest.raises(ScenarioError):
        load_scenario(p)


def test_block_rng_streams_independent():
    a = block_rng(1, "link-a", 0).random(4)
    assert (a == block_rng(1, "link-a", 0).random(4)).all()
    assert not (a == block_rng(1, "link-b", 0).random(4)).any()
    assert not (a == block_rng(1, "link-a", 1).random(4)).any()
    assert not (a == block_rng(2, "link-a", 0).random(4)).any()


@pytest.mark.parametrize("name", ["trusted_node", "cv_fading_810", "hd_timebin", "bonn_combine"])
def test_zero_duration_report_is_empty_and_valid(name):
    rep = run(parse_scenario(dict(_doc(name), duration=0)))
    validate_report(rep)
    assert all(ln["blocks"] == 0 and ln["key_volume_bits"] == 0 for ln in rep["links"])
    assert rep["kms"]["ledger"]["chunks_delivered"] == 0


def test_report_invariants():
    rep = run(load_preset("bbm92_fiber"))
    validate_report(rep)
    ln = rep["links"][0]
    assert ln["aborted_blocks"] <= ln["blocks"]
    bad = copy.deepcopy(rep)
    bad["links"][0]["blocks"] = -1
    with pytest.raises(ScenarioError):
        validate_report(bad)


def test_json_render_fixpoint_and_text_rows():
    rep = run(load_preset("bonn_combine"))
    out = render_report(rep)
    assert render_report(json.loads(out)) == out
    text = render_text(rep)
    for ln in rep["links"]:
        assert sum(line.startswith(ln["id"] + " ") for line in text.splitlines()) == 1
    with pytest.raises(ValueError):
        render_report(rep, "xml")


def test_seed_changes_report():
    sc = load_preset("fwf_bb84")
    a = render_report(run(sc))
    assert render_report(run(sc)) == a
    assert render_report(run(sc.with_seed(sc.seed + 1))) != a


def test_worker_count_does_not_change_report():
    sc = load_preset("bonn_combine")
    assert render_report(run(sc, workers=1)) == render_report(run(sc, workers=4))


def test_real_sockets_gateway_matches():
    rep = run(parse_scenario(dict(_doc("bonn_combine"), duration=600)), real_sockets=True)
    assert rep["transport"] == "tcp"
    gw = rep["gateways"][0]
    assert gw["file_roundtrip"] is True and gw["keys_matched"] == gw["epochs"] > 0


def test_unroutable_gateway_is_run_error():
    doc = _doc("fwf_bb84")
    doc["nodes"].append({"id": "ISLAND"})
    doc["gateways"] = [{"id": "g", "client": "STW", "server": "ISLAND", "rekey_interval": 120}]
    with pytest.raises(RunError, match="gateway g"):
        run(parse_scenario(doc))


@pytest.mark.parametrize("name", preset_names())
def test_preset_golden(name):
    out = render_report(run(load_preset(name)))
    path = GOLDEN / f"{name}.json"
    if UPDATE:
        GOLDEN.mkdir(exist_ok=True)
        path.write_bytes(out)
    assert out == path.read_bytes()


# -- CLI -------------------------------------------------------------------

def test_cli_validate_and_list(capsys):
    assert main(["validate", "fwf_bb84"]) == EXIT_OK
    assert main(["validate", str(preset_path("trusted_node"))]) == EXIT_OK
    assert main(["list-presets"]) == EXIT_OK
    out = capsys.readouterr().out
    assert all(name in out for name in preset_names())


def test_cli_run_formats(tmp_path, capsys):
    out = tmp_path / "r.json"
    assert main(["run", "bbm92_fiber", "--seed", "5", "-o", str(out)]) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["seed"] == 5
    validate_report(rep)
    assert main(["run", "bbm92_fiber", "--format", "text"]) == EXIT_OK
    assert "acp-iof" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, capsys):
    doc = _doc()
    doc["nodes"].append({"id": "STW"})
    bad = tmp_path / "dup.json"
    bad.write_text(json.dumps(doc))
    assert main(["validate", str(bad)]) == EXIT_SCHEMA
    assert main(["run", str(bad)]) == EXIT_SCHEMA
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_SCHEMA
    assert "/nodes/2/id" in capsys.readouterr().err

    doc = _doc()
    doc["nodes"].append({"id": "ISLAND"})
    doc["gateways"] = [{"id": "g", "client": "STW", "server": "ISLAND", "rekey_interval": 120}]
    unroutable = tmp_path / "island.json"
    unroutable.write_text(json.dumps(doc))
    assert main(["run", str(unroutable)]) == EXIT_RUNTIME
