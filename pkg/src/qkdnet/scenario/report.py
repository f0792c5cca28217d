"""Report rendering (JSON and a plain-text table)."""
from __future__ import annotations

import json

import jsonschema

from qkdnet.scenario.loader import ScenarioError, load_schema, pointer

FORMATS = ("json", "text")


def validate_report(report: dict) -> None:
    """Check a report against the published report schema; raises :class:`ScenarioError`."""
    validator = jsonschema.Draft202012Validator(load_schema("report_schema.json"))
    err = jsonschema.exceptions.best_match(validator.iter_errors(report))
    if err is not None:
        raise ScenarioError(pointer(*err.absolute_path), err.message)


def render_report(report: dict, fmt: str = "json") -> bytes:
    if fmt == "json":
        return (json.dumps(report, indent=2, ensure_ascii=False, allow_nan=False) + "\n").encode("utf-8")
    if fmt == "text":
        return render_text(report).encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")


def _fmt(v, spec):
    return "-" if v is None else format(v, spec)


def _error_column(row: dict) -> str:
    if row["protocol"].startswith("cv_"):
        return f"xi={_fmt(row.get('xi'), '.4f')}"
    if "qber" in row:
        return f"Q={_fmt(row['qber'] and 100 * row['qber'], '.2f')}%"
    qz, qx = row.get("qber_z"), row.get("qber_x")
    return f"Z/X={_fmt(qz and 100 * qz, '.2f')}/{_fmt(qx and 100 * qx, '.2f')}%"


def render_text(report: dict) -> str:
    lines = [
        f"scenario {report['scenario']}  seed {report['seed']}  duration {report['duration']:g} s",
        "",
        f"{'link':<16}{'protocol':<13}{'loss dB':>8}{'blocks':>8}{'aborted':>9}{'SKR bit/s':>14}  {'errors':<22}{'key bits':>12}",
    ]
    for row in report["links"]:
        lines.append(
            f"{row['id']:<16}{row['protocol']:<13}{row['transmission_db']:>8.2f}{row['blocks']:>8}"
            f"{row['aborted_blocks']:>9}{row['skr_bit_per_s']:>14.1f}  {_error_column(row):<22}{row['key_volume_bits']:>12}"
        )
    kms = report["kms"]
    ledger = kms["ledger"]
    lines += [
        "",
        f"kms: {ledger['blocks_consumed']} blocks consumed, {ledger['chunks_delivered']} chunks delivered, "
        f"{ledger['double_deliveries']} double deliveries, {len(kms['bus']['alarms'])} bus alarms",
    ]
    for r in kms["relays"]:
        mono = r["transcript_monobit"]
        lines.append(
            f"relay {r['id']}: {' -> '.join(r['hops'])}, {r['messages']} messages, "
            f"monobit {mono['ones']}/{mono['bits']} ({'pass' if mono['pass'] else 'n/a' if mono['pass'] is None else 'FAIL'})"
        )
    for g in report["gateways"]:
        rt = {True: "ok", False: "MISMATCH", None: "not run"}[g["file_roundtrip"]]
        lines.append(
            f"gateway {g['id']} ({g['client']} -> {g['server']}): {g['epochs']} epochs, {g['bytes_sealed']} bytes sealed, "
            f"file round-trip {rt}, state {g['state']}"
        )
    return "\n".join(lines) + "\n"
