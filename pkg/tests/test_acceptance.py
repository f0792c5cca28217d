"""End-to-end acceptance checks, one test per criterion.

A PASS/FAIL summary line per criterion is printed at the end of the run
(see ``conftest.py``).
"""
import math
import time

import numpy as np
import pytest

import oracles
from qkdnet.channel import FadingModel, bin_transmissions, db_to_transmission
from qkdnet.keyrate_cv import (
    CvRateParams, estimate_per_bin, estimate_t_xi, fading_key_fraction, gaussian_key_fraction, max_tolerable_xi,
    optimal_modulation, weighted_excess_noise, weighted_excess_noise_se,
)
from qkdnet.keyrate_dv import (
    Bbm92Params, OneDecoyParams, bbm92_asymptotic_fraction, bbm92_key_length, hd_secret_fraction,
    onedecoy_asymptotic_fraction, onedecoy_key_length,
)
from qkdnet.quantumsim import (
    CvConfig, DecoyBlockStats, DecoyConfig, DetectorModel, PairSourceModel, decoy_cell_model,
    simulate_cv_batch, simulate_decoy_block, simulate_pair_block,
)
from qkdnet.scenario import load_preset, preset_names, provision_kms, render_report, run
from test_keyrate_dv import REF, _random_decoy_case


def _link(report, link_id=None):
    links = report["links"]
    return links[0] if link_id is None else next(ln for ln in links if ln["id"] == link_id)


@pytest.mark.criterion(1, "FWF BB84 average SKR within 10x of 433 bit/s, runtime < 60 s")
def test_fwf_bb84_rate():
    t0 = time.perf_counter()
    rep = run(load_preset("fwf_bb84"))
    elapsed = time.perf_counter() - t0
    ln = _link(rep)
    assert ln["aborted_blocks"] == 0 and ln["blocks"] > 0
    assert 433 / 10 <= ln["skr_bit_per_s"] <= 433 * 10
    assert ln["qber_z"] == pytest.approx(0.0178, abs=0.002)
    assert ln["qber_x"] == pytest.approx(0.0267, abs=0.003)
    assert elapsed < 60


@pytest.mark.criterion(2, "BBM92 finite/asymptotic ratio in [0.6, 0.85], rising with block size, Q > 10 % discarded")
def test_bbm92_finite_size():
    p = Bbm92Params(1e-10, 1e-15, 0.10, 1.16)
    res = bbm92_key_length(80_000, 80_000, 0.06, 0.06, p)
    ratio = res.secret_bits / (80_000 * bbm92_asymptotic_fraction(0.06, p.f_ec))
    assert 0.6 <= ratio <= 0.85

    # fixed coincidence rate: key rate is proportional to l / n
    rates = [bbm92_key_length(n // 2, n // 2, 0.06, 0.06, p).secret_bits / n for n in (20_000, 40_000, 80_000, 160_000)]
    assert all(a < b for a, b in zip(rates, rates[1:]))

    rep = run(load_preset("bbm92_fiber"))
    ln = _link(rep)
    assert ln["aborted_blocks"] == 1  # the block with injected 15 % QBER
    assert ln["blocks"] == 10
    sim = _link(run(load_preset("trusted_node")), "acp-iof")
    assert sim["aborted_blocks"] == 0
    assert 0.6 <= sim["skr_bit_per_s"] / sim["asymptotic_skr_bit_per_s"] <= 0.85


@pytest.mark.criterion(3, "HD d=4 secret fraction 1.294 +- 0.001 and preset rate = fraction x 350 kbit/s")
def test_hd_rate():
    f = hd_secret_fraction(4, 0.041, 0.055)
    assert abs(f - 1.294) <= 1e-3
    assert f == pytest.approx(oracles.hd_fraction(4, 0.041, 0.055), abs=1e-12)
    ln = _link(run(load_preset("hd_timebin")))
    assert ln["secret_fraction"] == pytest.approx(f, rel=1e-12)
    assert ln["nominal_skr_bit_per_s"] == pytest.approx(f * 350e3, rel=1e-9)


@pytest.mark.criterion(4, "CV fading: xi recovered within 3 SE from top-10 0.9 % bins; sub-binned >= pooled - 1e-3")
def test_cv_fading():
    cfg = CvConfig("qpsk", 2.0, 0.0034, 0.92, 0.05)
    p = CvRateParams(2.0, 0.92, 0.05, 0.95)
    batch = simulate_cv_batch(cfg, FadingModel(0.346, 0.1), 2_000_000, np.random.default_rng(20240504))
    assert batch.transmission_used.mean() == pytest.approx(0.346, abs=2e-3)
    hist = bin_transmissions(batch.transmission_used, 0.009)
    per_bin = estimate_per_bin(batch, hist, cfg)
    xi = weighted_excess_noise(hist, per_bin, top=10)
    se = weighted_excess_noise_se(hist, per_bin, top=10)
    assert abs(xi - 0.0034) <= 3 * se
    pooled = estimate_t_xi(batch, cfg)
    k_sub = fading_key_fraction(hist, per_bin, p)
    k_pool = gaussian_key_fraction(pooled.t_for_rate, pooled.xi_for_rate, p)
    assert k_sub >= k_pool - 1e-3


@pytest.mark.criterion(5, "CV fiber at T=0.98: optimal K > 0, K decreasing in xi, max tolerable xi > 6e-3")
def test_cv_fiber():
    p = CvRateParams(v_a=1.0, eta=0.76, v_el=0.05, beta=0.95)
    va, k = optimal_modulation(0.98, 6e-3, p)
    assert k > 0
    tuned = p.with_v_a(va)
    ks = [gaussian_key_fraction(0.98, xi, tuned) for xi in np.linspace(0, 0.05, 51)]
    positive = [x for x in ks if x > 0]
    assert all(a > b for a, b in zip(positive, positive[1:]))
    assert all(a >= b for a, b in zip(ks, ks[1:]))
    assert max_tolerable_xi(0.98, tuned) > 6e-3


@pytest.mark.criterion(6, "finite-key engines match the brute-force oracles on 1000 cases; invariants hold")
def test_finite_key_oracles_and_invariants():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        s, p = _random_decoy_case(rng)
        got = onedecoy_key_length(s, p)
        want = oracles.onedecoy(s.n_z, s.n_x, s.m_z, s.m_x, p.eps_sec, p.eps_cor, p.f_ec, p.mu1, p.mu2, p.p_mu1)
        assert (got.secret_bits, got.aborted) == want
        assert got.secret_bits <= sum(s.n_z)
        assert onedecoy_key_length(s.scaled(2.0), p).secret_bits >= got.secret_bits
        if s.m_z[0] < s.n_z[0]:
            worse = DecoyBlockStats(s.n_z, s.n_x, (s.m_z[0] + 1, s.m_z[1]), s.m_x, s.pulses_sent, s.wall_time)
            assert onedecoy_key_length(worse, p).secret_bits <= got.secret_bits

        n_key, n_pe = (int(v) for v in 10 ** rng.uniform(3, 7, size=2))
        q_key, q_pe = rng.uniform(0, 0.13, size=2)
        bp = Bbm92Params(10 ** rng.uniform(-12, -6), 10 ** rng.uniform(-16, -10), rng.uniform(0.05, 0.12),
                         rng.uniform(1.0, 1.3))
        got = bbm92_key_length(n_key, n_pe, q_key, q_pe, bp)
        assert (got.secret_bits, got.aborted) == oracles.bbm92(n_key, n_pe, q_key, q_pe, bp.eps_sec, bp.eps_cor,
                                                                bp.q_tol, bp.f_ec)
        assert bbm92_key_length(n_key, n_pe, min(0.5, q_key + 0.01), q_pe, bp).secret_bits <= got.secret_bits

    big = REF.scaled(1e9 / sum(REF.n_z))
    p = OneDecoyParams()
    frac = onedecoy_key_length(big, p).secret_bits / sum(big.n_z)
    assert frac == pytest.approx(onedecoy_asymptotic_fraction(big, p), rel=0.01)


def _within(x, mean, var):
    return abs(x - mean) <= 4 * math.sqrt(var) if var > 0 else x == mean


@pytest.mark.criterion(7, "every count cell within 4 sigma of its expectation in >= 99 % of 1000 seeded runs")
def test_monte_carlo_fidelity():
    cfg = DecoyConfig(0.47, 0.17, 0.5, 0.5, 0.5, 625e6, 0.0178, 0.0267)
    det = DetectorModel(0.25, 100 / 625e6, 20e-6)
    t = db_to_transmission(20.3)
    n = 1_500_000_000
    p_cell, e_cell = decoy_cell_model(cfg, t, det)
    pn = p_cell.reshape(4)
    pm = (p_cell * e_cell).reshape(4)

    src = PairSourceModel(1e5, 0.88)
    ta, tb = db_to_transmission(16.315), db_to_transmission(1.0237)
    da = db = DetectorModel(0.85)
    n_pairs = int(round(src.pair_rate * 120))
    p_pair = da.efficiency * db.efficiency * ta * tb
    p_err = p_pair * src.error_probability

    runs = 1000
    ok = 0
    for seed in range(runs):
        rng = np.random.default_rng([7, seed])
        blk = simulate_decoy_block(cfg, t, det, n, rng)
        counts = list(blk.n_z) + list(blk.n_x)
        errors = list(blk.m_z) + list(blk.m_x)
        good = all(_within(c, n * q, n * q * (1 - q)) for c, q in zip(counts, pn))
        good &= all(_within(m, n * q, n * q * (1 - q)) for m, q in zip(errors, pm))
        pair = simulate_pair_block(src, ta, tb, da, db, 120.0, rng)
        good &= _within(pair.n_sifted, n_pairs * p_pair, n_pairs * p_pair * (1 - p_pair))
        good &= _within(pair.m_errors, n_pairs * p_err, n_pairs * p_err * (1 - p_err))
        ok += good
    assert ok / runs >= 0.99


@pytest.mark.criterion(8, "trusted node: combined keys match, >= 105 epochs, file round-trip, no double delivery")
def test_trusted_node_end_to_end():
    sc = load_preset("trusted_node")
    assert sc.duration == 3.5 * 3600
    rep = run(sc)
    gw = rep["gateways"][0]
    assert gw["epochs"] >= 105
    assert gw["keys_matched"] == gw["epochs"]
    assert gw["file_roundtrip"] is True
    assert gw["file_bytes"] == sc.gateways[0]["file_size"]
    assert gw["frames_rejected"] == 0 and gw["traffic_failures"] == 0 and gw["nonce_reuse"] == 0
    assert rep["kms"]["ledger"]["double_deliveries"] == 0
    relay = rep["kms"]["relays"][0]
    assert relay["relay_nodes"] == ["ACP"]
    assert relay["transcript_monobit"]["pass"] is True

    # endpoint view of the combined route: both ends draw identical chunks
    kms = provision_kms(sc)
    route, _ = kms.resolve_route("IOF", "STW")
    assert route is kms.combines["stw-iof-hybrid"]
    ksid = kms.open_connect("IOF", "STW")
    for i in range(5):
        a, ia, _ = kms.get_key(ksid, i, "IOF")
        b, ib, _ = kms.get_key(ksid, i, "STW")
        assert ia == ib == i and a == b and len(a) == 32
    assert not kms.ledger.double_deliveries()


@pytest.mark.criterion(9, "every preset run twice gives byte-identical report JSON")
@pytest.mark.parametrize("name", preset_names())
def test_determinism(name):
    sc = load_preset(name)
    assert render_report(run(sc)) == render_report(run(sc))
