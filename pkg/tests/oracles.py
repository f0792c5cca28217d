"""Independent reference evaluations used by the tests.

These are written straight from the key-length formulas in high-precision
decimal arithmetic and share no code with the library, so agreement to the
bit is meaningful.
"""
from __future__ import annotations

from decimal import ROUND_FLOOR, Decimal, getcontext

getcontext().prec = 40

D = Decimal
HALF = D(1) / D(2)
LN2 = D(2).ln()


def _log2(x: Decimal) -> Decimal:
    return x.ln() / LN2


def h2(x) -> Decimal:
    x = D(x)
    if x <= 0 or x >= 1:
        return D(0)
    return -x * _log2(x) - (1 - x) * _log2(1 - x)


def hd(x, d: int) -> Decimal:
    x = D(x)
    out = D(0)
    if x > 0:
        out -= x * _log2(x / (d - 1))
    if x < 1:
        out -= (1 - x) * _log2(1 - x)
    return out


def _exp(x) -> Decimal:
    return D(x).exp()


def _floor(x: Decimal) -> int:
    return int(x.to_integral_value(rounding=ROUND_FLOOR))


def onedecoy(n_z, n_x, m_z, m_x, eps_sec, eps_cor, f_ec, mu1, mu2, p_mu1):
    """Returns (secret_bits, aborted) for one 1-decoy BB84 block."""
    mu = {1: D(mu1), 2: D(mu2)}
    pk = {1: D(p_mu1), 2: 1 - D(p_mu1)}
    e1 = D(eps_sec) / 19
    write_off = (1 / e1).ln()

    def dev(n):
        return (D(n) / 2 * write_off).sqrt()

    t0 = sum(pk[k] * _exp(-mu[k]) for k in (1, 2))
    t1 = sum(pk[k] * _exp(-mu[k]) * mu[k] for k in (1, 2))

    def basis(n_cells, m_cells):
        nb, mb = sum(n_cells), sum(m_cells)
        dn, dm = dev(nb), dev(mb)
        sc = {k: _exp(mu[k]) / pk[k] for k in (1, 2)}
        np_ = {k: sc[k] * (D(n_cells[k - 1]) + dn) for k in (1, 2)}
        nm = {k: sc[k] * (D(n_cells[k - 1]) - dn) for k in (1, 2)}
        mp = {k: sc[k] * (D(m_cells[k - 1]) + dm) for k in (1, 2)}
        mm = {k: sc[k] * (D(m_cells[k - 1]) - dm) for k in (1, 2)}
        a, b = mu[1], mu[2]
        s0l = max(D(0), t0 * (a * nm[2] - b * np_[1]) / (a - b))
        s0u = 2 * (t0 * mp[2] + dn)
        s1l = max(
            D(0),
            t1 * a / (b * (a - b)) * (nm[2] - b * b / (a * a) * np_[1] - (a * a - b * b) / (a * a) * s0u / t0),
        )
        v1u = max(D(0), t1 * (mp[1] - mm[2]) / (a - b))
        return s0l, s1l, v1u

    s0z, s1z, _ = basis(n_z, m_z)
    _, s1x, v1x = basis(n_x, m_x)
    nz = sum(n_z)
    if nz == 0 or s1z <= 0 or s1x <= 0:
        return 0, True
    r = v1x / s1x
    g = D(0)
    if 0 < r < 1:
        a, c, d = D(eps_sec), s1x, s1z
        inner = (c + d) / (c * d * (1 - r) * r) * (D(21) ** 2 / a**2)
        g = ((c + d) * (1 - r) * r / (c * d * LN2) * _log2(inner)).sqrt()
    phi = min(HALF, r + g)
    if phi >= HALF:
        return 0, True
    lam = D(f_ec) * nz * h2(D(sum(m_z)) / nz)
    raw = (
        s0z + s1z * (1 - h2(phi)) - lam
        - 6 * _log2(19 / D(eps_sec)) - _log2(2 / D(eps_cor))
    )
    return min(max(0, _floor(raw)), nz), False


def bbm92(n_key, n_pe, q_key, q_pe, eps_sec, eps_cor, q_tol, f_ec):
    """Returns (secret_bits, aborted) for one BBM92 block."""
    if D(q_pe) > D(q_tol):
        return 0, True
    nk, npe = D(n_key), D(n_pe)
    nu = ((nk + npe) * (npe + 1) / (nk * npe * npe) * (4 / D(eps_sec)).ln()).sqrt()
    ph = min(HALF, D(q_pe) + nu)
    raw = nk * (1 - h2(ph)) - D(f_ec) * nk * h2(q_key) - _log2(2 / D(eps_cor)) - 2 * _log2(19 / D(eps_sec))
    return max(0, _floor(raw)), False


def hd_fraction(d, e_z, e_x) -> float:
    return float(max(D(0), _log2(D(d)) - hd(e_z, d) - hd(e_x, d)))
