"""Deterministic scenario execution: links -> key engines -> KMS -> gateways.

Every block of every link draws from its own random stream derived from
``(seed, link_id, block_index)``, so links can be simulated concurrently
without affecting the result. The KMS and gateway phase then replays the
key production on a common timeline cut into windows of one rekey interval.
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from qkdnet.channel import CompositeLink, bin_transmissions, mean_transmission, transmission_to_db
from qkdnet.errors import DomainError, ValidationError
from qkdnet.gateway import (
    INITIATOR, RESPONDER, EstablishmentError, GatewayEndpoint, TunnelConfig, TunnelError, establish_tunnel,
)
from qkdnet.gateway.proxy import FileStore, get_request, parse_get_response, put_request, tunnel_exchange
from qkdnet.keyrate_cv import (
    MIN_ESTIMATION_SYMBOLS, SECURITY_NOTE, CvRateParams, EstimationError, estimate_per_bin, estimate_t_xi,
    fading_key_fraction, gaussian_key_fraction, optimal_modulation, weighted_excess_noise,
    weighted_excess_noise_se,
)
from qkdnet.keyrate_dv import (
    Bbm92Params, OneDecoyParams, bbm92_asymptotic_fraction, bbm92_key_length, hd_secret_fraction,
    onedecoy_key_length,
)
from qkdnet.kms import CombineRecipe, GlobalKMS, InProcessTransport, KmsClient, QoS
from qkdnet.kms.errors import KmsError, NoRoute
from qkdnet.quantumsim import (
    CvConfig, DecoyConfig, DetectorModel, PairSourceModel, decoy_cell_model, simulate_cv_batch,
    simulate_decoy_block, simulate_pair_block,
)
from qkdnet.scenario.loader import LinkSpec, Scenario, ScenarioError, pointer

FORECAST_ONLY = ("cv_gaussian", "cv_fading")
DEFAULT_WINDOW = 120.0
SPAD_DARK_CPS = 100.0
SNSPD_DARK_CPS = 10.0


class RunError(RuntimeError):
    """A module error raised while running a scenario, annotated with its origin."""


def block_rng(seed: int, stream: str, index: int) -> np.random.Generator:
    """Counter-based generator for block ``index`` of ``stream``."""
    tag = int.from_bytes(hashlib.sha256(stream.encode("utf-8")).digest()[:8], "big")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), tag, int(index)])))


def key_id(link_id: str, block: int, j: int) -> bytes:
    return hashlib.sha256(f"{link_id}|{block}|{j}".encode()).digest()[:16]


@dataclass
class BlockResult:
    index: int
    t_end: float
    secret_bits: int
    aborted: bool
    key: bytes = b""


@dataclass
class LinkOutcome:
    spec: LinkSpec
    blocks: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _key_material(rng: np.random.Generator, bits: int, block_bits: int) -> bytes:
    n = bits // block_bits
    return rng.bytes(n * block_bits // 8) if n else b""


def _detector(d: Optional[dict], rate: Optional[float], dark_cps: float) -> DetectorModel:
    d = d or {"efficiency": 0.85}
    if "dark_count_prob" in d:
        p_dark = d["dark_count_prob"]
    else:
        cps = d.get("dark_count_rate", dark_cps)
        p_dark = cps / rate if rate else 0.0
    return DetectorModel(d["efficiency"], p_dark, d.get("dead_time", 0.0), d.get("jitter_fwhm", 0.0))


def _n_blocks(duration: float, block_time: float) -> int:
    return int(math.floor(duration / block_time + 1e-9)) if duration > 0 else 0


def _qber(m, n):
    return m / n if n else None


# -- per-protocol simulation ----------------------------------------------

def simulate_bb84(spec: LinkSpec, sc: Scenario) -> LinkOutcome:
    p = spec.params
    cfg = DecoyConfig(
        p.get("mu1", 0.47), p.get("mu2", 0.17), p.get("p_mu1", 0.5), p.get("p_z_alice", 0.5),
        p.get("p_z_bob", 0.5), p["pulse_rate"], p.get("qber_z", 0.0), p.get("qber_x", 0.0),
    )
    det = _detector(p["detector"], cfg.pulse_rate, SPAD_DARK_CPS)
    detectors = tuple(p.get("detectors", (1, 2)))
    params = OneDecoyParams(
        p.get("eps_sec", 1e-9), p.get("eps_cor", 1e-15), p.get("f_ec", 1.16), cfg.mu1, cfg.mu2, cfg.p_mu1
    )
    p_cell, _ = decoy_cell_model(cfg, mean_transmission(spec.channel), det, detectors)
    p_z = float(p_cell[0].sum())
    if p_z <= 0:
        raise DomainError("no Z-basis detections expected on this link")
    n_pulses = int(math.ceil(p.get("block_size", 50_000) / p_z))
    block_time = n_pulses / cfg.pulse_rate + p.get("lock_in", 0.0)
    out = LinkOutcome(spec)
    tot = np.zeros(4, dtype=np.int64)
    for b in range(_n_blocks(sc.duration, block_time)):
        rng = block_rng(sc.seed, spec.id, b)
        st = simulate_decoy_block(cfg, spec.channel, det, n_pulses, rng, detectors, p.get("fading_subblocks", 100))
        res = onedecoy_key_length(st, params)
        tot += (sum(st.n_z), sum(st.m_z), sum(st.n_x), sum(st.m_x))
        out.blocks.append(BlockResult(b, (b + 1) * block_time, res.secret_bits, res.aborted,
                                      _key_material(rng, res.secret_bits, sc.key_block_bits)))
    out.summary = {
        "pulses_per_block": n_pulses,
        "block_time_s": block_time,
        "qber_z": _qber(int(tot[1]), int(tot[0])),
        "qber_x": _qber(int(tot[3]), int(tot[2])),
    }
    return out


def simulate_bbm92(spec: LinkSpec, sc: Scenario) -> LinkOutcome:
    p = spec.params
    src = PairSourceModel(p["pair_rate"], p["visibility"], p.get("accidental_fraction", 0.0))
    arm_a = CompositeLink(f"{spec.id}:source", p["source_segments"]) if p.get("source_segments") else 1.0
    det_a = _detector(p.get("detector_a"), None, SNSPD_DARK_CPS)
    det_b = _detector(p.get("detector_b"), None, SNSPD_DARK_CPS)
    params = Bbm92Params(p.get("eps_sec", 1e-10), p.get("eps_cor", 1e-15), p.get("q_tol", 0.10), p.get("f_ec", 1.16))
    duration = p.get("block_duration", 120.0)
    block_time = duration + p.get("lock_in", 0.0)
    faults = set(p.get("fault_blocks", ()))
    pe_frac = p.get("pe_fraction", 0.5)
    out = LinkOutcome(spec)
    n_tot = m_tot = 0
    asym_bits = 0.0
    for b in range(_n_blocks(sc.duration, block_time)):
        rng = block_rng(sc.seed, spec.id, b)
        st = simulate_pair_block(src, arm_a, spec.channel, det_a, det_b, duration, rng)
        n, m = st.n_sifted, st.m_errors
        if b in faults:
            m = int(rng.binomial(n, p.get("fault_qber", 0.15)))
        n_pe = int(round(n * pe_frac))
        n_key = n - n_pe
        if n_key <= 0 or n_pe <= 0:
            out.blocks.append(BlockResult(b, (b + 1) * block_time, 0, True))
            continue
        m_pe = int(rng.hypergeometric(m, n - m, n_pe)) if n_pe < n else m
        m_key = m - m_pe
        res = bbm92_key_length(n_key, n_pe, m_key / n_key, m_pe / n_pe, params)
        n_tot += n
        m_tot += m
        if not res.aborted:
            asym_bits += n_key * bbm92_asymptotic_fraction(min(m_key / n_key, 0.4999), params.f_ec)
        out.blocks.append(BlockResult(b, (b + 1) * block_time, res.secret_bits, res.aborted,
                                      _key_material(rng, res.secret_bits, sc.key_block_bits)))
    out.summary = {
        "coincidences_per_block": n_tot / len(out.blocks) if out.blocks else 0.0,
        "qber": _qber(m_tot, n_tot),
        "asymptotic_skr_bit_per_s": asym_bits / sc.duration if sc.duration > 0 else 0.0,
    }
    return out


def simulate_hd(spec: LinkSpec, sc: Scenario) -> LinkOutcome:
    p = spec.params
    d = p.get("dimension", 4)
    rate = p["sifted_rate"]
    duration = p.get("block_duration", 60.0)
    lock_in = p.get("lock_in", 0.0)
    block_time = duration + lock_in
    nominal = hd_secret_fraction(d, p["e_z"], p["e_x"])
    out = LinkOutcome(spec)
    n_tot = ez_tot = ex_tot = 0
    for b in range(_n_blocks(sc.duration, block_time)):
        rng = block_rng(sc.seed, spec.id, b)
        n = int(round(rate * duration))
        ez = int(rng.binomial(n, p["e_z"]))
        ex = int(rng.binomial(n, p["e_x"]))
        frac = hd_secret_fraction(d, min(ez / n, (d - 1) / d), min(ex / n, (d - 1) / d)) if n else 0.0
        bits = int(math.floor(n * frac))
        n_tot, ez_tot, ex_tot = n_tot + n, ez_tot + ez, ex_tot + ex
        out.blocks.append(BlockResult(b, (b + 1) * block_time, bits, bits == 0,
                                      _key_material(rng, bits, sc.key_block_bits)))
    out.summary = {
        "dimension": d,
        "secret_fraction": nominal,
        "sifted_rate": rate,
        "nominal_skr_bit_per_s": nominal * rate,
        "qber_z": _qber(ez_tot, n_tot),
        "qber_x": _qber(ex_tot, n_tot),
    }
    return out


def simulate_cv(spec: LinkSpec, sc: Scenario) -> LinkOutcome:
    p = spec.params
    t_mean = mean_transmission(spec.channel)
    rate = CvRateParams(p.get("v_a", 1.0), p["eta"], p.get("v_el", 0.05), p.get("beta", 0.95),
                        p.get("detection", "heterodyne"))
    if p.get("optimize_v_a", False):
        v_a, _ = optimal_modulation(t_mean, p["xi"], rate)
        rate = rate.with_v_a(v_a)
    cfg = CvConfig(p.get("modulation", "gaussian"), rate.v_a, p["xi"], rate.eta, rate.v_el, p["symbol_rate"])
    n_sym = p.get("batch_symbols", 1_000_000)
    batches = p.get("batches", 1) if sc.duration > 0 else 0
    fading = spec.protocol == "cv_fading"
    out = LinkOutcome(spec)
    ks, xis, pooled_ks, xi_ses = [], [], [], []
    for b in range(batches):
        rng = block_rng(sc.seed, spec.id, b)
        batch = simulate_cv_batch(cfg, spec.channel, n_sym, rng)
        pooled = estimate_t_xi(batch, cfg)
        k_pooled = gaussian_key_fraction(pooled.t_for_rate, pooled.xi_for_rate, rate)
        if fading:
            hist = bin_transmissions(batch.transmission_used, p.get("bin_width", 0.009))
            per_bin = estimate_per_bin(batch, hist, cfg, p.get("min_bin_symbols", MIN_ESTIMATION_SYMBOLS))
            top = p.get("top_bins", 10)
            xi = weighted_excess_noise(hist, per_bin, top)
            xi_ses.append(weighted_excess_noise_se(hist, per_bin, top))
            k = fading_key_fraction(hist, per_bin, rate)
            pooled_ks.append(k_pooled)
        else:
            xi, k = pooled.xi_hat, k_pooled
            xi_ses.append(pooled.xi_se)
        xis.append(xi)
        ks.append(k)
    mean_k = float(np.mean(ks)) if ks else 0.0
    skr = mean_k * p["symbol_rate"]
    out.summary = {
        "mean_transmission": t_mean,
        "v_a": rate.v_a,
        "xi": float(np.mean(xis)) if xis else None,
        "xi_se": float(np.mean(xi_ses)) if xi_ses else None,
        "key_fraction": mean_k,
        "forecast_skr_bit_per_s": skr,
        "security_note": SECURITY_NOTE,
    }
    if fading:
        out.summary["pooled_key_fraction"] = float(np.mean(pooled_ks)) if pooled_ks else None
    # forecast only: batches stand for the whole duration and no key enters the KMS
    out.blocks = [BlockResult(b, sc.duration, 0, k <= 0.0) for b, k in enumerate(ks)]
    out.summary["forecast_key_volume_bits"] = int(math.floor(skr * sc.duration))
    return out


SIMULATORS = {
    "bb84_1decoy": simulate_bb84,
    "bbm92": simulate_bbm92,
    "hd_timebin": simulate_hd,
    "cv_gaussian": simulate_cv,
    "cv_fading": simulate_cv,
}


def simulate_link(spec: LinkSpec, sc: Scenario) -> LinkOutcome:
    try:
        return SIMULATORS[spec.protocol](spec, sc)
    except (DomainError, ValidationError, EstimationError, ValueError) as exc:
        raise RunError(f"link {spec.id}: {exc}") from exc


# -- KMS and gateway phase ----------------------------------------------------

class _RecordingKeys:
    """Key client wrapper remembering a digest of every chunk it hands out."""

    def __init__(self, client: KmsClient):
        self.client = client
        self.digests: dict[int, bytes] = {}

    def get_key(self, ksid, index):
        chunk, idx, status = self.client.get_key(ksid, index)
        self.digests[idx] = hashlib.sha256(chunk).digest()
        return chunk, idx, status


class GatewayRun:
    def __init__(self, g: dict, sc: Scenario, kms: GlobalKMS):
        self.g = g
        self.sc = sc
        self.kms = kms
        self.interval = g.get("rekey_interval", DEFAULT_WINDOW)
        self.ksid: Optional[str] = None
        self.a: Optional[GatewayEndpoint] = None
        self.b: Optional[GatewayEndpoint] = None
        self.keys_a = self.keys_b = None
        self.store = FileStore()
        self.file = block_rng(sc.seed, f"gateway:{g['id']}", 0).bytes(g.get("file_size", 65536))
        self.file_put = False
        self.roundtrip: Optional[bool] = None
        self.traffic_failures = 0
        self.alarms: list[str] = []
        self.windows = 0

    def _open(self):
        client, server = self.g["client"], self.g["server"]
        try:
            self.ksid = self.kms.open_connect(client, server, QoS(key_chunk_size=32))
        except NoRoute as exc:
            raise RunError(f"gateway {self.g['id']}: {exc}") from exc
        self.kms.open_connect(server, client, QoS(key_chunk_size=32), ksid=self.ksid)
        self.keys_a = _RecordingKeys(KmsClient(InProcessTransport(self.kms), client))
        self.keys_b = _RecordingKeys(KmsClient(InProcessTransport(self.kms), server))
        cfg = TunnelConfig(self.ksid, self.interval, replay_window=self.g.get("replay_window", 1024))
        self.a = GatewayEndpoint(cfg, self.keys_a, INITIATOR)
        self.b = GatewayEndpoint(cfg, self.keys_b, RESPONDER)

    @property
    def established(self) -> bool:
        return self.a is not None and self.a.state.startswith(("up", "degraded: no-rekey"))

    def step(self, w: int) -> None:
        self.windows += 1
        if self.ksid is None:
            self._open()
        if not self.established:
            try:
                establish_tunnel(self.a, self.b)
            except EstablishmentError as exc:
                self.alarms.append(f"window {w}: establishment starved: {exc}")
                return
        else:
            for ep in (self.a, self.b):
                if not ep.rekey():
                    self.alarms.append(f"window {w}: rekey starved, keeping epoch {ep.epoch}")
        beat = self.g.get("heartbeat_bytes", 1024)
        if beat:
            data = block_rng(self.sc.seed, f"gateway:{self.g['id']}:beat", w).bytes(beat)
            try:
                if self.b.open(self.a.seal(data)) != data or self.a.open(self.b.seal(data)) != data:
                    self.traffic_failures += 1
            except TunnelError:
                self.traffic_failures += 1
        if not self.file_put:
            resp, _ = tunnel_exchange(self.a, self.b, self.store, put_request(self._name, self.file))
            self.file_put = resp.startswith(b"OK ")

    @property
    def _name(self) -> str:
        return self.g.get("file_name", "shared/report.bin")

    def finish(self, real_sockets: bool = False) -> None:
        if not self.file_put:
            return
        if real_sockets:
            got = _socket_fetch(self.a, self.b, self.store, self._name)
        else:
            resp, _ = tunnel_exchange(self.a, self.b, self.store, get_request(self._name))
            got = parse_get_response(resp)
        self.roundtrip = got == self.file

    def report(self) -> dict:
        eps = [ep for ep in (self.a, self.b) if ep is not None]
        epochs = (max(ep.epoch for ep in eps) + 1) if eps and self.a._ciphers else 0
        matched = 0
        if self.keys_a is not None:
            matched = sum(1 for i, d in self.keys_a.digests.items() if self.keys_b.digests.get(i) == d)
        return {
            "id": self.g["id"],
            "client": self.g["client"],
            "server": self.g["server"],
            "ksid": self.ksid,
            "rekey_interval": self.interval,
            "windows": self.windows,
            "epochs": epochs,
            "keys_matched": matched,
            "bytes_sealed": sum(ep.stats.bytes_sealed for ep in eps),
            "frames_sealed": sum(ep.stats.frames_sealed for ep in eps),
            "frames_rejected": sum(sum(ep.stats.rejected.values()) for ep in eps),
            "traffic_failures": self.traffic_failures,
            "nonce_reuse": sum(ep.stats.frames_sealed - len(ep.nonce_log) for ep in eps),
            "state": self.a.state if self.a else "new",
            "file_bytes": len(self.file),
            "file_sha256": hashlib.sha256(self.file).hexdigest(),
            "file_roundtrip": self.roundtrip,
            "alarms": self.alarms + [a for ep in eps for a in ep.alarms],
        }


def _socket_fetch(a: GatewayEndpoint, b: GatewayEndpoint, store: FileStore, name: str) -> bytes:
    from qkdnet.gateway.proxy import FileServer, GatewayEgress, GatewayIngress, file_exchange

    fs = FileServer(store=store)
    egress = GatewayEgress(("127.0.0.1", 0), fs.serve_in_background(), b)
    ingress = GatewayIngress(("127.0.0.1", 0), egress.serve_in_background(), a)
    try:
        return parse_get_response(file_exchange(ingress.serve_in_background(), get_request(name)))
    finally:
        for srv in (ingress, egress, fs):
            srv.stop()


def _monobit(chunks: list[bytes]) -> dict:
    n = 8 * sum(len(c) for c in chunks)
    ones = sum(int.from_bytes(c, "big").bit_count() for c in chunks)
    return {
        "bits": n,
        "ones": ones,
        "pass": (abs(ones - n / 2) <= 4 * math.sqrt(n / 4)) if n else None,
    }


def build_kms(sc: Scenario) -> GlobalKMS:
    kms = GlobalKMS(seed=sc.seed, quota=sc.kms.get("quota", 1_000_000))
    for n in sc.nodes:
        kms.add_node(n)
    forecast = {ln.id for ln in sc.links if ln.protocol in FORECAST_ONLY}
    for ln in sc.links:
        if ln.id not in forecast:
            kms.add_link(ln.id, *ln.endpoints)
    for i, r in enumerate(sc.relays):
        for k, h in enumerate(r["hops"]):
            if h in forecast:
                raise ScenarioError(pointer("relays", i, "hops", k), f"link {h!r} is forecast-only and holds no keys")
        kms.add_relay(kms.relay_path(r["id"], r["hops"], r["source"]))
    for e in sc.external_sources:
        kms.add_external_source(e["id"], e.get("seed", sc.seed))
    for i, c in enumerate(sc.combine):
        for k, src in enumerate(c["inputs"]):
            if src in forecast:
                raise ScenarioError(pointer("combine", i, "inputs", k), f"link {src!r} is forecast-only")
        try:
            kms.add_combine(CombineRecipe(c["id"], tuple(c["inputs"]), c["label"], c.get("out_len", 256)))
        except KmsError as exc:
            raise ScenarioError(pointer("combine", i), str(exc)) from None
    return kms


def run(sc: Scenario, real_sockets: bool = False, workers: Optional[int] = None) -> dict:
    """Run ``sc`` and return its report (a JSON-ready dict)."""
    kms = build_kms(sc)
    links = list(sc.links)
    with ThreadPoolExecutor(max_workers=workers or max(1, min(4, len(links)))) as pool:
        outcomes = list(pool.map(lambda ln: simulate_link(ln, sc), links))

    gateways = [GatewayRun(g, sc, kms) for g in sc.gateways]
    window = min([g.interval for g in gateways] or [sc.kms.get("window", DEFAULT_WINDOW)])
    n_windows = int(math.ceil(sc.duration / window - 1e-9)) if sc.duration > 0 else 0
    pending = [(o, 0) for o in outcomes if o.spec.protocol not in FORECAST_ONLY]
    cursor = {o.spec.id: 0 for o, _ in pending}
    kb = sc.key_block_bits // 8
    relay_uses = {r["id"]: 0 for r in sc.relays}
    relay_fail: dict[str, list] = {r["id"]: [] for r in sc.relays}
    try:
        for w in range(n_windows):
            t_hi = min((w + 1) * window, sc.duration)
            for o, _ in pending:
                i = cursor[o.spec.id]
                while i < len(o.blocks) and o.blocks[i].t_end <= t_hi + 1e-9:
                    blk = o.blocks[i]
                    for j in range(len(blk.key) // kb):
                        kms.push_key(o.spec.id, blk.key[j * kb:(j + 1) * kb], key_id(o.spec.id, blk.index, j),
                                     created_at=blk.t_end)
                    i += 1
                cursor[o.spec.id] = i
            for r in sc.relays:
                for _ in range(r.get("keys_per_window", 0)):
                    try:
                        kms.xor_relay_establish(kms.relays[r["id"]].path, sc.key_block_bits)
                        relay_uses[r["id"]] += 1
                    except KmsError as exc:
                        relay_fail[r["id"]].append(f"window {w}: {exc}")
            for gw in gateways:
                gw.step(w)
        for gw in gateways:
            gw.finish(real_sockets)
    except KmsError as exc:
        raise RunError(f"kms: {exc}") from exc

    return _report(sc, outcomes, kms, gateways, relay_uses, relay_fail, real_sockets)


def _link_report(o: LinkOutcome, sc: Scenario) -> dict:
    spec = o.spec
    bits = sum(b.secret_bits for b in o.blocks)
    t = mean_transmission(spec.channel)
    row = {
        "id": spec.id,
        "protocol": spec.protocol,
        "endpoints": list(spec.endpoints),
        "transmission_db": transmission_to_db(t),
        "fading": spec.channel.is_fading,
        "blocks": len(o.blocks),
        "aborted_blocks": sum(1 for b in o.blocks if b.aborted),
        "key_volume_bits": bits,
        "skr_bit_per_s": bits / sc.duration if sc.duration > 0 else 0.0,
    }
    if spec.protocol in FORECAST_ONLY:
        row["skr_bit_per_s"] = o.summary.get("forecast_skr_bit_per_s", 0.0)
    row.update(o.summary)
    return row


def _report(sc, outcomes, kms, gateways, relay_uses, relay_fail, real_sockets) -> dict:
    ledger = kms.ledger
    relays = []
    for r in sc.relays:
        route = kms.relays[r["id"]]
        relays.append({
            "id": r["id"],
            "hops": list(r["hops"]),
            "endpoints": list(route.path.endpoints),
            "relay_nodes": list(route.path.relay_nodes),
            "explicit_keys": relay_uses[r["id"]],
            "messages": len(route.transcript),
            "transcript_monobit": _monobit(route.transcript),
            "failures": relay_fail[r["id"]],
        })
    return {
        "scenario": sc.name,
        "seed": sc.seed,
        "duration": sc.duration,
        "key_block_bits": sc.key_block_bits,
        "transport": "tcp" if real_sockets else "in-process",
        "links": [_link_report(o, sc) for o in outcomes],
        "kms": {
            "stores": kms.store_stats(),
            "relays": relays,
            "combine": [
                {"id": c["id"], "inputs": list(c["inputs"]), "label": c["label"], "out_len": c.get("out_len", 256)}
                for c in sc.combine
            ],
            "ledger": {
                "blocks_consumed": len(ledger.blocks),
                "chunks_delivered": len(ledger.chunks),
                "double_deliveries": ledger.double_deliveries(),
            },
            "bus": {"messages": len(kms.bus.transcript), "alarms": list(kms.bus.alarms)},
        },
        "gateways": [g.report() for g in gateways],
        "environment": [dict(e) for e in sc.environment],
    }


def provision_kms(sc: Scenario, workers: Optional[int] = None) -> GlobalKMS:
    """Simulate every key-bearing link of ``sc`` and load all its key into a fresh KMS."""
    kms = build_kms(sc)
    links = [ln for ln in sc.links if ln.protocol not in FORECAST_ONLY]
    with ThreadPoolExecutor(max_workers=workers or max(1, min(4, len(links) or 1))) as pool:
        outcomes = list(pool.map(lambda ln: simulate_link(ln, sc), links))
    kb = sc.key_block_bits // 8
    for o in outcomes:
        for blk in o.blocks:
            for j in range(len(blk.key) // kb):
                kms.push_key(o.spec.id, blk.key[j * kb:(j + 1) * kb], key_id(o.spec.id, blk.index, j),
                             created_at=blk.t_end)
    return kms
