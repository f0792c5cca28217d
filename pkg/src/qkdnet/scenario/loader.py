"""Strict loading and cross-reference validation of scenario files."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Union

import jsonschema

from qkdnet.channel import (
    ChannelSegment, CompositeLink, EnvironmentRecord, ScintillationParams, db_to_transmission,
    scintillation_index,
)
from qkdnet.errors import DomainError

PROTOCOL_KINDS = ("bb84_1decoy", "bbm92", "hd_timebin", "cv_gaussian", "cv_fading")
DEFAULT_WAVELENGTH = 1550e-9


class ScenarioError(ValueError):
    """Schema or reference violation, located by a JSON pointer."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"
        self.message = message


def pointer(*parts) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in parts)


def load_schema(name: str = "schema.json") -> dict:
    return json.loads(resources.files("qkdnet.scenario").joinpath(name).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class LinkSpec:
    id: str
    endpoints: tuple[str, str]
    channel: CompositeLink
    protocol: str
    params: dict


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    duration: float
    nodes: tuple[str, ...]
    links: tuple[LinkSpec, ...]
    relays: tuple[dict, ...] = ()
    external_sources: tuple[dict, ...] = ()
    combine: tuple[dict, ...] = ()
    gateways: tuple[dict, ...] = ()
    environment: tuple[dict, ...] = ()
    key_block_bits: int = 256
    kms: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def link(self, link_id: str) -> LinkSpec:
        for ln in self.links:
            if ln.id == link_id:
                return ln
        raise KeyError(link_id)

    def with_seed(self, seed: int) -> "Scenario":
        raw = dict(self.raw, seed=int(seed))
        return parse_scenario(raw)


def build_segment(seg: dict, where: str) -> ChannelSegment:
    try:
        if seg["kind"] != "fso":
            if "scintillation_index" in seg or "cn2" in seg:
                raise ScenarioError(where, "only fso segments may fade")
            return ChannelSegment(seg["kind"], seg["length"], seg["loss"])
        if "scintillation_index" in seg:
            s2 = seg["scintillation_index"]  # explicit value overrides any Cn2 mapping
        elif "cn2" in seg:
            wl = seg.get("wavelength", DEFAULT_WAVELENGTH)
            s2 = scintillation_index(ScintillationParams(seg["cn2"], wl, seg["length"])) if seg["cn2"] > 0 else 0.0
        else:
            s2 = 0.0
        if s2 > 0 and db_to_transmission(seg["loss"]) >= 1.0:
            raise ScenarioError(where, "a fading segment needs non-zero loss")
        return ChannelSegment.fso(seg["length"], seg["loss"], s2)
    except DomainError as exc:
        raise ScenarioError(where, str(exc)) from None


def _unique(items, key, where):
    seen = {}
    for i, item in enumerate(items):
        v = item[key]
        if v in seen:
            raise ScenarioError(pointer(where, i, key), f"duplicate id {v!r} (first at index {seen[v]})")
        seen[v] = i
    return list(seen)


def parse_scenario(doc: dict) -> Scenario:
    """Validate ``doc`` against the schema and every cross reference."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        raise ScenarioError(pointer(*err.absolute_path), err.message)

    nodes = _unique(doc["nodes"], "id", "nodes")
    node_set = set(nodes)
    link_ids = _unique(doc["links"], "id", "links")
    ext_ids = _unique(doc.get("external_sources", []), "id", "external_sources")
    relay_ids = _unique(doc.get("relays", []), "id", "relays")
    combine_ids = _unique(doc.get("combine", []), "id", "combine")
    _unique(doc.get("gateways", []), "id", "gateways")
    all_ids = link_ids + ext_ids + relay_ids + combine_ids
    if len(set(all_ids)) != len(all_ids):
        dup = sorted({x for x in all_ids if all_ids.count(x) > 1})[0]
        raise ScenarioError("/", f"key source id {dup!r} is used by more than one link, relay, source or recipe")

    links = []
    ends = {}
    for i, ln in enumerate(doc["links"]):
        a, b = ln["endpoints"]
        for j, n in enumerate((a, b)):
            if n not in node_set:
                raise ScenarioError(pointer("links", i, "endpoints", j), f"unknown node {n!r}")
        if a == b:
            raise ScenarioError(pointer("links", i, "endpoints"), "a link needs two distinct endpoints")
        segs = tuple(build_segment(s, pointer("links", i, "segments", k)) for k, s in enumerate(ln["segments"]))
        proto = dict(ln["protocol"])
        kind = proto.pop("type")
        channel = CompositeLink(ln["id"], segs)
        if kind == "cv_fading" and not channel.is_fading:
            raise ScenarioError(pointer("links", i, "protocol", "type"), "cv_fading needs a fading fso segment")
        if kind == "bbm92" and "source_segments" in proto:
            proto["source_segments"] = tuple(
                build_segment(s, pointer("links", i, "protocol", "source_segments", k))
                for k, s in enumerate(proto["source_segments"])
            )
        if kind == "bb84_1decoy":
            mu1, mu2 = proto.get("mu1", 0.47), proto.get("mu2", 0.17)
            if not mu1 > mu2:
                raise ScenarioError(pointer("links", i, "protocol", "mu2"), "decoy intensity must be below the signal")
        links.append(LinkSpec(ln["id"], (a, b), channel, kind, proto))
        ends[ln["id"]] = (a, b)

    relays = []
    for i, r in enumerate(doc.get("relays", [])):
        if r["source"] not in node_set:
            raise ScenarioError(pointer("relays", i, "source"), f"unknown node {r['source']!r}")
        at = r["source"]
        for k, h in enumerate(r["hops"]):
            if h not in ends:
                raise ScenarioError(pointer("relays", i, "hops", k), f"unknown link {h!r}")
            a, b = ends[h]
            if at not in (a, b):
                raise ScenarioError(pointer("relays", i, "hops", k), f"link {h!r} does not touch node {at!r}")
            at = b if at == a else a
        if at == r["source"]:
            raise ScenarioError(pointer("relays", i, "hops"), "relay path returns to its source")
        relays.append(dict(r))

    known = set(link_ids) | set(ext_ids) | set(relay_ids)
    for i, c in enumerate(doc.get("combine", [])):
        for k, src in enumerate(c["inputs"]):
            if src not in known:
                raise ScenarioError(pointer("combine", i, "inputs", k), f"unknown key source {src!r}")
        known.add(c["id"])

    for i, g in enumerate(doc.get("gateways", [])):
        for role in ("client", "server"):
            if g[role] not in node_set:
                raise ScenarioError(pointer("gateways", i, role), f"unknown node {g[role]!r}")
        if g["client"] == g["server"]:
            raise ScenarioError(pointer("gateways", i), "gateway client and server must differ")

    env = []
    for i, e in enumerate(doc.get("environment", [])):
        try:
            EnvironmentRecord(e["timestamp"], e.get("cn2", 0.0), e.get("solar_irradiance", 0.0))
        except DomainError as exc:
            raise ScenarioError(pointer("environment", i), str(exc)) from None
        env.append(dict(e))

    return Scenario(
        name=doc["name"],
        seed=int(doc["seed"]),
        duration=float(doc["duration"]),
        nodes=tuple(nodes),
        links=tuple(links),
        relays=tuple(relays),
        external_sources=tuple(dict(e) for e in doc.get("external_sources", [])),
        combine=tuple(dict(c) for c in doc.get("combine", [])),
        gateways=tuple(dict(g) for g in doc.get("gateways", [])),
        environment=tuple(env),
        key_block_bits=int(doc.get("key_block_bits", 256)),
        kms=dict(doc.get("kms", {})),
        raw=doc,
    )


def load_scenario(path: Union[str, Path]) -> Scenario:
    """Read and validate a scenario file (strict JSON, unknown fields rejected)."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ScenarioError("/", f"invalid JSON: {exc}") from None
    return parse_scenario(doc)


def _reject_constant(name):
    raise ScenarioError("/", f"non-standard JSON constant {name}")


def preset_names() -> list[str]:
    folder = resources.files("qkdnet.scenario").joinpath("presets")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def preset_path(name: str) -> Path:
    p = resources.files("qkdnet.scenario").joinpath("presets", f"{name}.json")
    if not p.is_file():
        raise KeyError(f"no preset named {name!r}")
    return Path(str(p))


def load_preset(name: str) -> Scenario:
    return load_scenario(preset_path(name))
