"""Global key management: key routes, delivery sessions, relay and combining.

A *route* yields key material shared by two endpoints in two phases:
``reserve`` takes blocks out of circulation (atomically across every store
involved) and ``commit`` consumes them and returns each endpoint's copy.
Routes compose: a relay route chains link routes through trusted nodes and a
combine route mixes several routes (and external sources) through a KDF.

Delivery sessions follow the open / get-key / close shape of the ETSI
GS QKD 004 application interface.
"""
from __future__ import annotations

import hashlib
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from qkdnet.kms.bus import AuthenticatedBus
from qkdnet.kms.errors import (
    AuthenticationFailure, DoubleDelivery, InsufficientKeyMaterial, InvalidIndex, KeyMismatch,
    KeyStarvation, KmsError, NoRoute, RelayError, SessionClosed, UnknownSession,
)
from qkdnet.kms.store import DEFAULT_QUOTA, KeyStore


def xor_bytes(a: bytes, b: bytes) -> bytes:
    if len(a) != len(b):
        raise KmsError("xor operands differ in length")
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big")


@dataclass(frozen=True)
class QoS:
    key_chunk_size: int = 32  # bytes
    max_bps: float = 0.0
    min_bps: float = 0.0
    ttl: float = 0.0
    reserve_ahead: bool = False

    def to_dict(self) -> dict:
        return {
            "key_chunk_size": self.key_chunk_size, "max_bps": self.max_bps, "min_bps": self.min_bps,
            "ttl": self.ttl, "reserve_ahead": self.reserve_ahead,
        }


@dataclass(frozen=True)
class RelayPath:
    id: str
    hops: tuple[str, ...]
    endpoints: tuple[str, str]
    relay_nodes: tuple[str, ...]

    @property
    def nodes(self) -> tuple[str, ...]:
        return (self.endpoints[0], *self.relay_nodes, self.endpoints[1])


@dataclass(frozen=True)
class CombineRecipe:
    id: str
    inputs: tuple[str, ...]
    label: str
    out_len: int = 256  # bits

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if not self.inputs:
            raise KmsError("a combine recipe needs at least one input")
        if self.out_len <= 0 or self.out_len % 8:
            raise KmsError("out_len must be a positive multiple of 8 bits")


def combine_keys(recipe: CombineRecipe, chunks: list[bytes]) -> bytes:
    """HKDF-SHA256 (extract then expand, label as info) over the XOR of all chunks."""
    if not chunks:
        raise KmsError("nothing to combine")
    n = len(chunks[0])
    if any(len(c) != n for c in chunks):
        raise KmsError("combine inputs differ in length")
    if n * 8 < recipe.out_len:
        raise KmsError("combine inputs shorter than the requested output")
    mixed = chunks[0]
    for c in chunks[1:]:
        mixed = xor_bytes(mixed, c)
    hkdf = HKDF(algorithm=hashes.SHA256(), length=recipe.out_len // 8, salt=None, info=recipe.label.encode())
    return hkdf.derive(mixed)


class KeyLedger:
    """Single-use audit: which consumer received each block and chunk."""

    def __init__(self):
        self._lock = threading.Lock()
        self.blocks: dict[tuple[str, bytes], str] = {}
        self.chunks: dict[bytes, tuple[str, int]] = {}
        self.violations: list[str] = []

    def record_blocks(self, link_id: str, ids, usage: str) -> None:
        with self._lock:
            for k in ids:
                prev = self.blocks.get((link_id, k))
                if prev is not None:
                    self.violations.append(f"block {k.hex()} on {link_id}: {prev} then {usage}")
                    raise DoubleDelivery(self.violations[-1])
                self.blocks[(link_id, k)] = usage

    def record_chunk(self, ksid: str, index: int, chunk: bytes) -> None:
        digest = hashlib.sha256(chunk).digest()
        with self._lock:
            prev = self.chunks.get(digest)
            if prev is not None and prev != (ksid, index):
                self.violations.append(f"chunk of {prev} redelivered as {(ksid, index)}")
                raise DoubleDelivery(self.violations[-1])
            self.chunks[digest] = (ksid, index)

    def double_deliveries(self) -> int:
        return len(self.violations)


class ExternalKeySource:
    """Seeded stand-in for a non-QKD key source such as a PQC key exchange."""

    def __init__(self, source_id: str, seed: int = 0):
        self.id = source_id
        self.seed = seed
        self.counter = 0
        self._lock = threading.Lock()

    def draw(self, n_bytes: int) -> bytes:
        with self._lock:
            ctr = self.counter
            self.counter += 1
        out = hashlib.shake_256(f"{self.id}|{self.seed}|{ctr}".encode()).digest(n_bytes)
        return out


# -- routes ---------------------------------------------------------------

class _Reservation:
    def commit(self, usage: str) -> tuple[bytes, bytes]:
        raise NotImplementedError

    def abort(self) -> None:
        raise NotImplementedError


class _LinkReservation(_Reservation):
    def __init__(self, route: "LinkRoute", ids: list[bytes], n_bytes: int):
        self.route, self.ids, self.n_bytes = route, ids, n_bytes

    def commit(self, usage):
        r = self.route
        left = r.left.consume(self.ids, usage)[: self.n_bytes]
        right = r.right.consume(self.ids, usage)[: self.n_bytes]
        r.ledger.record_blocks(r.link_id, self.ids, usage)
        if left != right:
            raise KeyMismatch(f"mirrored stores of link {r.link_id} disagree")
        return left, right

    def abort(self):
        self.route.left.release(self.ids)
        self.route.right.release(self.ids)


class LinkRoute:
    """Direct QKD link; ``left``/``right`` are the stores at the two endpoints."""

    def __init__(self, link_id: str, nodes: tuple[str, str], left: KeyStore, right: KeyStore, ledger: KeyLedger):
        self.link_id, self.nodes, self.left, self.right, self.ledger = link_id, nodes, left, right, ledger

    @property
    def endpoints(self):
        return self.nodes

    def available_bytes(self) -> int:
        return min(self.left.available_bytes(), self.right.available_bytes())

    def reserve(self, n_bytes: int) -> _LinkReservation:
        for _ in range(8):
            ids = self.left.oldest_available(n_bytes)
            have = sum(len(self.left.get(k).data) for k in ids)
            if have < n_bytes:
                raise KeyStarvation(f"link {self.link_id} holds {have} of {n_bytes} bytes")
            if not self.left.reserve(ids):
                continue  # raced with another consumer
            if not self.right.reserve(ids):
                self.left.release(ids)
                raise KeyStarvation(f"link {self.link_id}: peer store lacks reserved blocks")
            return _LinkReservation(self, ids, n_bytes)
        raise KeyStarvation(f"link {self.link_id}: contention while reserving")


class _RelayReservation(_Reservation):
    def __init__(self, route: "RelayRoute", parts: list[_LinkReservation]):
        self.route, self.parts = route, parts

    def commit(self, usage):
        route = self.route
        hop_keys = [part.commit(usage) for part in self.parts]  # (at left node, at right node)
        path = route.path
        nodes = path.nodes
        far = nodes[-1]
        k_final = hop_keys[-1][1]
        try:
            for i, relay in enumerate(path.relay_nodes):
                c = xor_bytes(hop_keys[i][1], hop_keys[i + 1][0])
                delivered = route.bus.send(relay, far, f"relay:{path.id}:{usage}", c)
                route.transcript.append(delivered)
                k_final = xor_bytes(k_final, delivered)
        except AuthenticationFailure as exc:
            raise RelayError(f"relay over {path.id} aborted: {exc}") from exc
        return hop_keys[0][0], k_final

    def abort(self):
        for part in self.parts:
            part.abort()


class RelayRoute:
    def __init__(self, path: RelayPath, hops: list[LinkRoute], bus: AuthenticatedBus):
        self.path, self.hops, self.bus = path, hops, bus
        self.transcript: list[bytes] = []

    @property
    def endpoints(self):
        return self.path.endpoints

    def available_bytes(self) -> int:
        return min(h.available_bytes() for h in self.hops)

    def reserve(self, n_bytes: int) -> _RelayReservation:
        parts: list[_LinkReservation] = []
        try:
            for hop in self.hops:
                parts.append(hop.reserve(n_bytes))
        except KeyStarvation:
            for part in parts:
                part.abort()
            raise
        return _RelayReservation(self, parts)


class _ExternalReservation(_Reservation):
    def __init__(self, source: ExternalKeySource, n_bytes: int):
        self.source, self.n_bytes = source, n_bytes

    def commit(self, usage):
        out = self.source.draw(self.n_bytes)
        return out, out

    def abort(self):
        pass


class ExternalRoute:
    def __init__(self, source: ExternalKeySource):
        self.source = source
        self.endpoints = None

    def available_bytes(self) -> int:
        return 1 << 62

    def reserve(self, n_bytes):
        return _ExternalReservation(self.source, n_bytes)


class _CombineReservation(_Reservation):
    def __init__(self, route: "CombineRoute", parts, flips, n_bytes):
        self.route, self.parts, self.flips, self.n_bytes = route, parts, flips, n_bytes

    def commit(self, usage):
        left, right = [], []
        for part, flip in zip(self.parts, self.flips):
            a, b = part.commit(usage)
            if flip:
                a, b = b, a
            left.append(a)
            right.append(b)
        recipe = self.route.recipe
        return combine_keys(recipe, left)[: self.n_bytes], combine_keys(recipe, right)[: self.n_bytes]

    def abort(self):
        for part in self.parts:
            part.abort()


class CombineRoute:
    def __init__(self, recipe: CombineRecipe, inputs: list, endpoints: tuple[str, str]):
        self.recipe, self.inputs, self.endpoints = recipe, inputs, endpoints
        # inputs oriented against the recipe's endpoints get swapped on commit
        self.flips = [r.endpoints is not None and tuple(r.endpoints) != endpoints for r in inputs]

    def available_bytes(self) -> int:
        return min(r.available_bytes() for r in self.inputs)

    def reserve(self, n_bytes: int) -> _CombineReservation:
        width = self.recipe.out_len // 8
        if n_bytes > width:
            raise KmsError(f"recipe {self.recipe.id} yields {width} bytes, {n_bytes} requested")
        parts = []
        try:
            for r in self.inputs:
                parts.append(r.reserve(width))
        except KeyStarvation:
            for p in parts:
                p.abort()
            raise
        return _CombineReservation(self, parts, self.flips, n_bytes)


# -- sessions ---------------------------------------------------------------

@dataclass
class KeyStreamSession:
    ksid: str
    source: str
    destination: str
    qos: QoS
    route: object
    flip: bool
    next_index: int = 0
    chunks: dict = field(default_factory=dict)  # index -> {endpoint: bytes}
    joined: set = field(default_factory=set)
    closed: bool = False
    pending: Optional[_Reservation] = None
    lock: threading.Lock = field(default_factory=threading.Lock)


@dataclass
class RelayOutcome:
    key_a: bytes
    key_c: bytes
    messages: list


class GlobalKMS:
    """Network-wide key manager holding every local store."""

    def __init__(self, seed: int = 0, quota: int = DEFAULT_QUOTA, journal_dir=None, bus: Optional[AuthenticatedBus] = None):
        self.seed = seed
        self.quota = quota
        self.journal_dir = Path(journal_dir) if journal_dir is not None else None
        self.bus = bus or AuthenticatedBus(hashlib.sha256(f"auth|{seed}".encode()).digest())
        self.ledger = KeyLedger()
        self.nodes: list[str] = []
        self.links: dict[str, LinkRoute] = {}
        self.relays: dict[str, RelayRoute] = {}
        self.externals: dict[str, ExternalKeySource] = {}
        self.combines: dict[str, CombineRoute] = {}
        self.sessions: dict[str, KeyStreamSession] = {}
        self._ksid_counter = 0
        self._relay_counter = 0
        self._lock = threading.RLock()

    # -- topology -------------------------------------------------------
    def add_node(self, node: str) -> None:
        if node in self.nodes:
            raise KmsError(f"duplicate node {node!r}")
        self.nodes.append(node)

    def add_link(self, link_id: str, node_a: str, node_b: str) -> LinkRoute:
        for n in (node_a, node_b):
            if n not in self.nodes:
                raise KmsError(f"unknown node {n!r}")
        if link_id in self.links:
            raise KmsError(f"duplicate link {link_id!r}")

        def journal(node):
            if self.journal_dir is None:
                return None
            self.journal_dir.mkdir(parents=True, exist_ok=True)
            return self.journal_dir / f"{link_id}@{node}.jsonl"

        left = KeyStore(link_id, node_a, self.quota, journal(node_a))
        right = KeyStore(link_id, node_b, self.quota, journal(node_b))
        route = LinkRoute(link_id, (node_a, node_b), left, right, self.ledger)
        for blk_store in (left,):
            for kid, usage in blk_store.consumed_usage().items():
                self.ledger.blocks[(link_id, kid)] = usage
        self.links[link_id] = route
        return route

    def store(self, link_id: str, node: str) -> KeyStore:
        route = self.links[link_id]
        if node == route.nodes[0]:
            return route.left
        if node == route.nodes[1]:
            return route.right
        raise KmsError(f"node {node!r} is not an endpoint of {link_id!r}")

    def relay_path(self, path_id: str, hops, source: str) -> RelayPath:
        """Resolve the node chain of a multi-hop path starting at ``source``."""
        hops = tuple(hops)
        if len(hops) < 2:
            raise KmsError("a relay path needs at least two hops; use the direct link instead")
        nodes = [source]
        for h in hops:
            if h not in self.links:
                raise KmsError(f"unknown link {h!r} in relay path")
            a, b = self.links[h].nodes
            if nodes[-1] == a:
                nodes.append(b)
            elif nodes[-1] == b:
                nodes.append(a)
            else:
                raise KmsError(f"hop {h!r} does not continue the path at {nodes[-1]!r}")
        return RelayPath(path_id, hops, (nodes[0], nodes[-1]), tuple(nodes[1:-1]))

    def _oriented_hops(self, path: RelayPath) -> list[LinkRoute]:
        out = []
        nodes = path.nodes
        for i, h in enumerate(path.hops):
            route = self.links[h]
            if route.nodes[0] != nodes[i]:
                route = LinkRoute(route.link_id, (route.nodes[1], route.nodes[0]), route.right, route.left, route.ledger)
            out.append(route)
        return out

    def add_relay(self, path: RelayPath) -> RelayRoute:
        if path.id in self.relays:
            raise KmsError(f"duplicate relay path {path.id!r}")
        route = RelayRoute(path, self._oriented_hops(path), self.bus)
        self.relays[path.id] = route
        return route

    def add_external_source(self, source_id: str, seed: int = 0) -> ExternalKeySource:
        src = ExternalKeySource(source_id, seed)
        self.externals[source_id] = src
        return src

    def _route_by_id(self, rid: str):
        if rid in self.links:
            return self.links[rid]
        if rid in self.relays:
            return self.relays[rid]
        if rid in self.externals:
            return ExternalRoute(self.externals[rid])
        if rid in self.combines:
            return self.combines[rid]
        raise KmsError(f"unknown key source {rid!r}")

    def add_combine(self, recipe: CombineRecipe) -> CombineRoute:
        inputs = [self._route_by_id(r) for r in recipe.inputs]
        ends = {frozenset(r.endpoints) for r in inputs if r.endpoints is not None}
        if len(ends) != 1:
            raise KmsError(f"recipe {recipe.id!r} inputs do not share one endpoint pair")
        first = next(r.endpoints for r in inputs if r.endpoints is not None)
        route = CombineRoute(recipe, inputs, tuple(first))
        self.combines[recipe.id] = route
        return route

    def resolve_route(self, source: str, destination: str):
        """Preferred route between two nodes: combined > direct link > relay."""
        pair = frozenset((source, destination))
        for group in (self.combines, self.links, self.relays):
            for route in group.values():
                if route.endpoints is not None and frozenset(route.endpoints) == pair:
                    return route, tuple(route.endpoints) != (source, destination)
        raise NoRoute(f"no key route between {source!r} and {destination!r}")

    # -- key supply -----------------------------------------------------
    def push_key(self, link_id: str, data: bytes, key_id: bytes, node: Optional[str] = None, created_at: float = 0.0) -> bool:
        """Deliver a block from the QKD layer to one endpoint store, or to both."""
        if link_id not in self.links:
            raise KmsError(f"unknown link {link_id!r}")
        route = self.links[link_id]
        targets = (route.left, route.right) if node is None else (self.store(link_id, node),)
        fresh = False
        for st in targets:
            fresh |= st.push(key_id, data, created_at)
        return fresh

    def xor_relay_establish(self, path: RelayPath, n_bits: int) -> RelayOutcome:
        """One-off end-to-end key over ``path`` (ceil(n_bits / 8) bytes)."""
        if len(path.hops) < 2:
            raise KmsError("relay requires at least two hops")
        route = self.relays.get(path.id) or RelayRoute(path, self._oriented_hops(path), self.bus)
        before = len(route.transcript)
        with self._lock:
            self._relay_counter += 1
            usage = f"relay:{path.id}:{self._relay_counter}"
        res = route.reserve((n_bits + 7) // 8)
        key_a, key_c = res.commit(usage)
        return RelayOutcome(key_a, key_c, route.transcript[before:])

    def relay_transcript(self) -> list[bytes]:
        out = []
        for r in self.relays.values():
            out.extend(r.transcript)
        return out

    # -- ETSI-004-style delivery ----------------------------------------
    def _new_ksid(self) -> str:
        self._ksid_counter += 1
        raw = hashlib.sha256(f"ksid|{self.seed}|{self._ksid_counter}".encode()).digest()[:16]
        return str(uuid.UUID(bytes=raw, version=4))

    def open_connect(self, source: str, destination: str, qos: QoS = QoS(), ksid: Optional[str] = None) -> str:
        with self._lock:
            if ksid is not None and ksid in self.sessions:
                s = self.sessions[ksid]
                if s.closed:
                    raise SessionClosed(f"session {ksid} is closed")
                if {source, destination} != {s.source, s.destination}:
                    raise KmsError(f"session {ksid} belongs to another endpoint pair")
                s.joined.add(source)
                return ksid
            route, flip = self.resolve_route(source, destination)
            if qos.min_bps > 0 and route.available_bytes() * 8 < qos.min_bps:
                raise InsufficientKeyMaterial(
                    f"route {source}->{destination} holds {route.available_bytes() * 8} bits, "
                    f"below min_bps={qos.min_bps}"
                )
            ksid = ksid or self._new_ksid()
            s = KeyStreamSession(ksid, source, destination, qos, route, flip, joined={source})
            self.sessions[ksid] = s
        if qos.reserve_ahead:
            self._prefetch(s)
        return ksid

    def _prefetch(self, s: KeyStreamSession) -> None:
        if s.pending is None:
            try:
                s.pending = s.route.reserve(s.qos.key_chunk_size)
            except KeyStarvation:
                s.pending = None

    def _session(self, ksid: str) -> KeyStreamSession:
        try:
            return self.sessions[ksid]
        except KeyError:
            raise UnknownSession(f"unknown key stream {ksid}") from None

    def get_key(self, ksid: str, index: int, endpoint: str) -> tuple[bytes, int, str]:
        s = self._session(ksid)
        if endpoint not in (s.source, s.destination):
            raise KmsError(f"{endpoint!r} is not an endpoint of session {ksid}")
        with s.lock:
            if s.closed:
                raise SessionClosed(f"session {ksid} is closed")
            if index in s.chunks:
                return s.chunks[index][endpoint], index, "ok"
            if index != s.next_index:
                raise InvalidIndex(f"index {index} requested, next is {s.next_index}")
            res = s.pending
            s.pending = None
            if res is None:
                try:
                    res = s.route.reserve(s.qos.key_chunk_size)
                except KeyStarvation as exc:
                    hint = s.qos.key_chunk_size * 8 / s.qos.min_bps if s.qos.min_bps > 0 else 1.0
                    raise KeyStarvation(str(exc), retry_after=hint) from None
            a, b = res.commit(f"ksid:{ksid}:{index}")
            if s.flip:
                a, b = b, a
            if a != b:
                raise KeyMismatch(f"endpoint copies of {ksid}[{index}] differ")
            self.ledger.record_chunk(ksid, index, a)
            s.chunks[index] = {s.source: a, s.destination: b}
            s.next_index += 1
            if s.qos.reserve_ahead:
                self._prefetch(s)
            return s.chunks[index][endpoint], index, "ok"

    def close(self, ksid: str) -> None:
        s = self._session(ksid)
        with s.lock:
            if s.closed:
                return
            s.closed = True
            if s.pending is not None:
                s.pending.abort()
                s.pending = None
            s.chunks.clear()

    # -- reporting --------------------------------------------------------
    def store_stats(self) -> dict:
        out = {}
        for lid, r in self.links.items():
            out[lid] = {r.nodes[0]: r.left.counts(), r.nodes[1]: r.right.counts()}
        return out

    def close_journals(self) -> None:
        for r in self.links.values():
            r.left.close()
            r.right.close()
