"""Secret-key length for discrete-variable protocols.

Finite-key bounds for the 1-decoy BB84 protocol and for BBM92, plus the
asymptotic high-dimensional time-bin fraction. Lower bounds clamp at zero
and phase-error bounds at one half; the floor to an integer key length is
taken once, at the very end.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from qkdnet.errors import DomainError, ValidationError
from qkdnet.quantumsim import DecoyBlockStats

LN2 = math.log(2.0)


def binary_entropy(x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"binary entropy argument must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


def d_dim_entropy(x: float, d: int) -> float:
    """Entropy of an error spread uniformly over the d - 1 wrong outcomes."""
    if d < 2:
        raise DomainError("dimension must be >= 2")
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"error rate must lie in [0, 1], got {x}")
    out = 0.0
    if x > 0:
        out -= x * math.log2(x / (d - 1))
    if x < 1:
        out -= (1 - x) * math.log2(1 - x)
    return out


def hoeffding_delta(n: float, eps: float) -> float:
    return math.sqrt(n / 2.0 * math.log(1.0 / eps))


def tau_n(mu1: float, mu2: float, p_mu1: float, n: int) -> float:
    """Probability that a pulse of the intensity mixture carries n photons."""
    return sum(
        p * math.exp(-mu) * mu**n / math.factorial(n)
        for mu, p in ((mu1, p_mu1), (mu2, 1.0 - p_mu1))
    )


@dataclass(frozen=True)
class OneDecoyParams:
    eps_sec: float = 1e-9
    eps_cor: float = 1e-15
    f_ec: float = 1.16
    mu1: float = 0.47
    mu2: float = 0.17
    p_mu1: float = 0.5

    def __post_init__(self):
        if not (0 < self.eps_sec < 1 and 0 < self.eps_cor < 1):
            raise DomainError("security parameters must lie in (0, 1)")
        if not self.mu1 > self.mu2 > 0:
            raise DomainError("decoy intensities must satisfy mu1 > mu2 > 0")
        if not 0 < self.p_mu1 < 1:
            raise DomainError("p_mu1 must lie in (0, 1)")
        if self.f_ec < 1:
            raise DomainError("error-correction efficiency must be >= 1")


@dataclass(frozen=True)
class Bbm92Params:
    eps_sec: float = 1e-10
    eps_cor: float = 1e-15
    q_tol: float = 0.10
    f_ec: float = 1.16

    def __post_init__(self):
        if not (0 < self.eps_sec < 1 and 0 < self.eps_cor < 1):
            raise DomainError("security parameters must lie in (0, 1)")
        if not 0 < self.q_tol < 0.5:
            raise DomainError("q_tol must lie in (0, 0.5)")
        if self.f_ec < 1:
            raise DomainError("error-correction efficiency must be >= 1")


@dataclass(frozen=True)
class KeyLengthResult:
    secret_bits: int
    aborted: bool
    diagnostics: dict = field(default_factory=dict)


def _gamma(a: float, b: float, c: float, d: float) -> float:
    """Finite-sampling correction of the phase-error rate (random sampling bound)."""
    if b <= 0.0 or b >= 1.0:
        return 0.0
    arg = (c + d) / (c * d * (1 - b) * b) * (21.0**2 / a**2)
    return math.sqrt((c + d) * (1 - b) * b / (c * d * LN2) * math.log2(arg))


def onedecoy_key_length(stats: DecoyBlockStats, p: OneDecoyParams, finite: bool = True) -> KeyLengthResult:
    """Key length of one 1-decoy BB84 block.

    With ``finite=False`` every statistical fluctuation term and the
    privacy-amplification overhead vanish, giving the asymptotic key length
    implied by the same counts.
    """
    stats.validate()
    mu1, mu2 = p.mu1, p.mu2
    pk = (p.p_mu1, 1.0 - p.p_mu1)
    eps1 = p.eps_sec / 19.0
    tau0 = tau_n(mu1, mu2, p.p_mu1, 0)
    tau1 = tau_n(mu1, mu2, p.p_mu1, 1)
    delta = (lambda n: hoeffding_delta(n, eps1)) if finite else (lambda n: 0.0)

    def bounds(n_cells, m_cells):
        n_tot, m_tot = sum(n_cells), sum(m_cells)
        dn, dm = delta(n_tot), delta(m_tot)
        w = [math.exp(mu) / q for mu, q in zip((mu1, mu2), pk)]
        n_plus = [w[k] * (n_cells[k] + dn) for k in range(2)]
        n_minus = [w[k] * (n_cells[k] - dn) for k in range(2)]
        m_plus = [w[k] * (m_cells[k] + dm) for k in range(2)]
        m_minus = [w[k] * (m_cells[k] - dm) for k in range(2)]
        s0_l = max(0.0, tau0 * (mu1 * n_minus[1] - mu2 * n_plus[0]) / (mu1 - mu2))
        s0_u = 2.0 * (tau0 * m_plus[1] + dn)
        s1_l = max(
            0.0,
            tau1 * mu1 / (mu2 * (mu1 - mu2))
            * (n_minus[1] - mu2**2 / mu1**2 * n_plus[0] - (mu1**2 - mu2**2) / mu1**2 * s0_u / tau0),
        )
        v1_u = max(0.0, tau1 * (m_plus[0] - m_minus[1]) / (mu1 - mu2))
        return s0_l, s0_u, s1_l, v1_u

    s0z_l, _, s1z_l, _ = bounds(stats.n_z, stats.m_z)
    _, _, s1x_l, v1x_u = bounds(stats.n_x, stats.m_x)
    n_z = sum(stats.n_z)
    diag = {"s0_lower": s0z_l, "s1_lower": s1z_l, "s1x_lower": s1x_l, "phase_error_upper": 0.5, "lambda_ec": 0.0}
    if n_z == 0 or s1z_l <= 0.0 or s1x_l <= 0.0:
        return KeyLengthResult(0, True, diag)

    ratio = v1x_u / s1x_l
    phi = ratio + (_gamma(p.eps_sec, ratio, s1x_l, s1z_l) if finite else 0.0)
    phi = min(0.5, phi)
    q_z = sum(stats.m_z) / n_z
    lambda_ec = p.f_ec * n_z * binary_entropy(min(q_z, 1.0))
    diag.update(phase_error_upper=phi, lambda_ec=lambda_ec)
    if phi >= 0.5:
        return KeyLengthResult(0, True, diag)

    overhead = 6.0 * math.log2(19.0 / p.eps_sec) + math.log2(2.0 / p.eps_cor) if finite else 0.0
    raw = s0z_l + s1z_l * (1.0 - binary_entropy(phi)) - lambda_ec - overhead
    bits = min(max(0, math.floor(raw)), n_z)
    return KeyLengthResult(bits, False, diag)


def onedecoy_asymptotic_fraction(stats: DecoyBlockStats, p: OneDecoyParams) -> float:
    """Asymptotic key bits per sifted Z detection for the given counts."""
    n_z = sum(stats.n_z)
    if n_z == 0:
        return 0.0
    return onedecoy_key_length(stats, p, finite=False).secret_bits / n_z


def bbm92_key_length(
    n_key: int, n_pe: int, q_key: float, q_pe: float, p: Bbm92Params, finite: bool = True
) -> KeyLengthResult:
    """Finite-key length of a BBM92 block split into key and estimation parts."""
    if n_key <= 0 or n_pe <= 0:
        raise ValidationError("BBM92 key and estimation subsets must be non-empty")
    if q_pe > p.q_tol:
        return KeyLengthResult(0, True, {"phase_error_upper": q_pe, "lambda_ec": 0.0})
    if finite:
        nu = math.sqrt(
            (n_key + n_pe) * (n_pe + 1) / (n_key * n_pe**2) * math.log(4.0 / p.eps_sec)
        )
        overhead = math.log2(2.0 / p.eps_cor) + 2.0 * math.log2(19.0 / p.eps_sec)
    else:
        nu, overhead = 0.0, 0.0
    phi = min(0.5, q_pe + nu)
    lambda_ec = p.f_ec * n_key * binary_entropy(q_key)
    raw = n_key * (1.0 - binary_entropy(phi)) - lambda_ec - overhead
    return KeyLengthResult(max(0, math.floor(raw)), False, {"phase_error_upper": phi, "lambda_ec": lambda_ec})


def bbm92_asymptotic_fraction(q: float, f_ec: float) -> float:
    if not 0.0 <= q < 0.5:
        raise DomainError("QBER must lie in [0, 0.5)")
    return max(0.0, 1.0 - binary_entropy(q) - f_ec * binary_entropy(q))


def hd_secret_fraction(d: int, e_z: float, e_x: float) -> float:
    """Asymptotic secret bits per sifted d-dimensional symbol."""
    if d < 2:
        raise DomainError("dimension must be >= 2")
    top = (d - 1) / d
    for e in (e_z, e_x):
        if not 0.0 <= e <= top:
            raise DomainError(f"error rate {e} outside [0, {top}]")
    return max(0.0, math.log2(d) - d_dim_entropy(e_z, d) - d_dim_entropy(e_x, d))
