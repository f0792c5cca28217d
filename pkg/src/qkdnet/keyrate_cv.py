"""CV-QKD parameter estimation and Gaussian asymptotic key rates.

The key fraction is the Gaussian-equivalent bound for an entangling-cloner
attack with reverse reconciliation and a trusted (noisy, lossy) detector.
Discrete-modulation batches are analysed under the same Gaussian bound.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from qkdnet.channel import TransmissionHistogram, bin_index
from qkdnet.errors import DomainError, ValidationError
from qkdnet.quantumsim import CvBatch, CvConfig

MIN_ESTIMATION_SYMBOLS = 10_000
SECURITY_NOTE = "Gaussian-equivalent asymptotic bound"


class EstimationError(ValueError):
    pass


class ModelViolationError(ValueError):
    """Symplectic eigenvalues fell below the vacuum limit."""


class NoPositiveRateError(ValueError):
    pass


@dataclass(frozen=True)
class CvChannelEstimate:
    t_hat: float
    xi_hat: float
    n_symbols: int
    t_se: float = 0.0
    xi_se: float = 0.0

    @property
    def xi_for_rate(self) -> float:
        """Excess noise clamped at zero, as fed to the key-rate formula."""
        return max(0.0, self.xi_hat)

    @property
    def t_for_rate(self) -> float:
        return min(1.0, max(self.t_hat, 1e-12))


@dataclass(frozen=True)
class CvRateParams:
    v_a: float
    eta: float
    v_el: float = 0.05
    beta: float = 0.95
    detection: str = "heterodyne"

    def __post_init__(self):
        if self.v_a <= 0:
            raise DomainError("modulation variance must be positive")
        if not 0 < self.eta <= 1:
            raise DomainError("eta must lie in (0, 1]")
        if self.v_el < 0:
            raise DomainError("electronic noise must be >= 0")
        if not 0 < self.beta <= 1:
            raise DomainError("beta must lie in (0, 1]")
        if self.detection not in ("heterodyne", "homodyne"):
            raise DomainError(f"unknown detection {self.detection!r}")

    def with_v_a(self, v_a: float) -> "CvRateParams":
        return CvRateParams(v_a, self.eta, self.v_el, self.beta, self.detection)


def estimate_t_xi(batch: CvBatch, cfg: CvConfig) -> CvChannelEstimate:
    """Estimate transmission and input-referred excess noise from a batch.

    Per quadrature the gain is the regression slope of Bob on Alice; the
    excess noise comes from the residual variance left after removing the
    signal, with shot noise (1) and electronic noise removed.
    """
    n = len(batch)
    if n < MIN_ESTIMATION_SYMBOLS:
        raise EstimationError(f"need at least {MIN_ESTIMATION_SYMBOLS} symbols, got {n}")
    x = np.stack([batch.alice_symbols.real, batch.alice_symbols.imag])
    y = np.stack([batch.bob_quadratures.real, batch.bob_quadratures.imag])
    xc = x - x.mean(axis=1, keepdims=True)
    yc = y - y.mean(axis=1, keepdims=True)
    var_x = (xc**2).mean(axis=1)
    if np.any(var_x <= 0):
        raise EstimationError("Alice's symbols carry no modulation")
    cov = (xc * yc).mean(axis=1)
    slope = cov / var_x
    resid = (yc**2).mean(axis=1) - slope * cov
    eta = cfg.eta
    gain = slope.mean()
    t_hat = 2.0 / eta * gain**2
    noise = resid.mean()
    xi_hat = 2.0 / (t_hat * eta) * (noise - 1.0 - cfg.v_el) if t_hat > 0 else math.inf

    # Gaussian sampling errors: Var(sample variance) = 2 s^4 / N per quadrature.
    noise_se = noise * math.sqrt(1.0 / n)
    gain_se = math.sqrt(noise / (var_x.mean() * 2 * n))
    t_se = 4.0 / eta * abs(gain) * gain_se
    xi_se = 2.0 / (t_hat * eta) * noise_se if t_hat > 0 else math.inf
    return CvChannelEstimate(float(t_hat), float(xi_hat), n, float(t_se), float(xi_se))


def holevo_g(x: float) -> float:
    if x < 0:
        raise DomainError("g is defined for x >= 0")
    if x == 0:
        return 0.0
    return (x + 1) * math.log2(x + 1) - x * math.log2(x)


def _nu_pair(a: float, b: float) -> tuple[float, float]:
    disc = max(a * a - 4 * b, 0.0)
    r = math.sqrt(disc)
    return math.sqrt(max((a + r) / 2, 0.0)), math.sqrt(max((a - r) / 2, 0.0))


def _noise_terms(t: float, xi: float, p: CvRateParams) -> tuple[float, float, float]:
    """(chi_line, chi_det, chi_tot): channel, detector and total input-referred noise."""
    chi_line = (1.0 - t) / t + xi
    if p.detection == "heterodyne":
        chi_det = (2.0 - p.eta + 2.0 * p.v_el) / p.eta
    else:
        chi_det = (1.0 - p.eta + p.v_el) / p.eta
    return chi_line, chi_det, chi_line + chi_det / t


def symplectic_eigenvalues(t: float, xi: float, p: CvRateParams) -> tuple[float, float, float, float]:
    """Eigenvalues (nu1, nu2) of Eve's purification and (nu3, nu4) conditioned on Bob."""
    v = p.v_a + 1.0
    chi_line, chi_det, chi_tot = _noise_terms(t, xi, p)
    a = v**2 * (1 - 2 * t) + 2 * t + t**2 * (v + chi_line) ** 2
    b = t**2 * (v * chi_line + 1) ** 2
    nu1, nu2 = _nu_pair(a, b)
    sb = math.sqrt(b)
    c = (a * chi_det + v * sb + t * (v + chi_line)) / (t * (v + chi_tot))
    d = sb * (v + sb * chi_det) / (t * (v + chi_tot))
    nu3, nu4 = _nu_pair(c, d)
    return nu1, nu2, nu3, nu4


def _raw_key_fraction(t: float, xi: float, p: CvRateParams) -> float:
    if not 0.0 < t <= 1.0:
        raise DomainError(f"transmission must lie in (0, 1], got {t}")
    if xi < 0:
        raise DomainError("excess noise must be >= 0")
    v = p.v_a + 1.0
    chi_line, chi_det, chi_tot = _noise_terms(t, xi, p)
    i_ab = math.log2((v + chi_tot) / (1 + chi_tot))
    if p.detection == "homodyne":
        i_ab /= 2.0
    chi_be = 0.0
    for k, nu in enumerate(symplectic_eigenvalues(t, xi, p)):
        if nu < 1.0 - 1e-6:
            raise ModelViolationError(f"symplectic eigenvalue {nu} < 1")
        term = holevo_g(max(nu - 1.0, 0.0) / 2.0)
        chi_be += term if k < 2 else -term
    return p.beta * i_ab - chi_be


def gaussian_key_fraction(t: float, xi: float, p: CvRateParams) -> float:
    """Asymptotic secret bits per symbol (never negative)."""
    return max(0.0, _raw_key_fraction(t, xi, p))


def optimal_modulation(t: float, xi: float, p: CvRateParams, bounds=(0.05, 5.0)) -> tuple[float, float]:
    """(v_a, K) maximising the key fraction over the modulation variance."""
    res = optimize.minimize_scalar(
        lambda va: -_raw_key_fraction(t, xi, p.with_v_a(va)), bounds=bounds, method="bounded",
        options={"xatol": 1e-6},
    )
    va = float(res.x)
    return va, gaussian_key_fraction(t, xi, p.with_v_a(va))


def max_tolerable_xi(t: float, p: CvRateParams, tol: float = 1e-6) -> float:
    """Excess noise at which the key fraction reaches zero."""
    if _raw_key_fraction(t, 0.0, p) <= 0:
        raise NoPositiveRateError("no positive key fraction even without excess noise")
    hi = 0.01
    while _raw_key_fraction(t, hi, p) > 0:
        hi *= 2.0
        if hi > 1e3:
            raise NoPositiveRateError("key fraction does not vanish with growing excess noise")
    return optimize.bisect(lambda xi: _raw_key_fraction(t, xi, p), 0.0, hi, xtol=tol * 1e-3)


def select_bins(hist: TransmissionHistogram, top: Optional[int] = 10) -> list[int]:
    """Indices of the ``top`` most populated bins (ties broken by index), ascending."""
    pop = hist.populated()
    if top is not None:
        pop = sorted(pop, key=lambda i: (-hist.count(i), i))[:top]
    return sorted(pop)


def estimate_per_bin(
    batch: CvBatch, hist: TransmissionHistogram, cfg: CvConfig, min_symbols: int = MIN_ESTIMATION_SYMBOLS
) -> list[Optional[CvChannelEstimate]]:
    """One estimate per populated bin of ``hist`` (None where too sparse)."""
    idx = bin_index(batch.transmission_used, hist.bin_width)
    out = []
    for b in hist.populated():
        mask = idx == b
        if mask.sum() < min_symbols:
            out.append(None)
        else:
            out.append(estimate_t_xi(batch.subset(mask), cfg))
    return out


def _selection(hist, per_bin, top, skip_sparse=False):
    populated = hist.populated()
    if len(per_bin) != len(populated):
        raise ValidationError("per-bin estimates are not aligned with the populated bins")
    by_index = dict(zip(populated, per_bin))
    chosen = select_bins(hist, top)
    if skip_sparse:
        chosen = [i for i in chosen if by_index[i] is not None]
    if not chosen:
        raise EstimationError("no populated sub-channels to aggregate")
    missing = [i for i in chosen if by_index[i] is None]
    if missing:
        raise EstimationError(f"selected sub-channels {missing} have no estimate")
    w = np.array([hist.count(i) for i in chosen], dtype=float)
    return chosen, w / w.sum(), [by_index[i] for i in chosen]


def weighted_excess_noise(
    hist: TransmissionHistogram, per_bin: Sequence[Optional[CvChannelEstimate]], top: Optional[int] = 10
) -> float:
    """Population-weighted mean excess noise over the selected sub-channels."""
    _, w, est = _selection(hist, per_bin, top)
    return float(sum(wi * e.xi_hat for wi, e in zip(w, est)))


def weighted_excess_noise_se(
    hist: TransmissionHistogram, per_bin: Sequence[Optional[CvChannelEstimate]], top: Optional[int] = 10
) -> float:
    _, w, est = _selection(hist, per_bin, top)
    return float(math.sqrt(sum((wi * e.xi_se) ** 2 for wi, e in zip(w, est))))


def fading_key_fraction(
    hist: TransmissionHistogram,
    per_bin: Sequence[Optional[CvChannelEstimate]],
    p: CvRateParams,
    top: Optional[int] = None,
) -> float:
    """Population-weighted key fraction, each sub-channel at its bin-centre transmission.

    By default every sub-channel with an estimate contributes, so the whole
    fading distribution is covered; bins too sparse to estimate are left out
    and the weights renormalised. Pass ``top`` to restrict to the most
    populated bins.
    """
    chosen, w, est = _selection(hist, per_bin, top, skip_sparse=top is None)
    return float(
        sum(wi * gaussian_key_fraction(hist.center(i), e.xi_for_rate, p) for i, wi, e in zip(chosen, w, est))
    )
